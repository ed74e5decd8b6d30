"""Symbolic language models over drum scores.

Three flavours score the musical naturalness of a binary drum score:
a two-parameter bi-gram that predicts each activation from the one
sixteen tatums (four beats) earlier, a unidirectional GRU over tatum
columns, and a bidirectional masked model that predicts each column
from everything around it.  All negative log-likelihoods are in bits so
that perplexity is 2 ** (bits / N).

Every model also accepts *relaxed* scores (entries in (0, 1)) so it can
act as a differentiable regularizer during transcription training: the
target column enters via soft binary cross-entropy and, for the
bi-gram, the history interpolates the two transition rows.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import ValidationError
from .posenc import positional_encoding, ENCODING_KINDS
from .score import DrumScore, NUM_INSTRUMENTS
from .transcriber import SelfAttentionStack

BIGRAM_LAG = 16
LOG2 = math.log(2.0)
_PROB_EPS = 1e-7


@dataclass(frozen=True)
class LMScore:
    """Negative log-likelihood in bits with a per-tatum breakdown."""

    total_bits: float
    per_tatum_bits: np.ndarray

    @property
    def num_tatums(self) -> int:
        return self.per_tatum_bits.size

    @property
    def perplexity(self) -> float:
        return 2.0 ** (self.total_bits / self.num_tatums)


def _column_bits(probs: np.ndarray, columns: np.ndarray) -> np.ndarray:
    """-log2 likelihood of each observed column under per-cell Bernoulli
    probabilities; both arrays are (M, N)."""
    p = np.clip(probs, _PROB_EPS, 1.0 - _PROB_EPS)
    cell = np.where(columns > 0.5, -np.log2(p), -np.log2(1.0 - p))
    return cell.sum(axis=0)


def _soft_bits(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Soft-target cross entropy in bits, summed over all cells."""
    p = probs.clamp(_PROB_EPS, 1.0 - _PROB_EPS)
    bits = -(targets * torch.log2(p) + (1.0 - targets) * torch.log2(1.0 - p))
    return bits.sum()


@dataclass(frozen=True)
class BigramParams:
    """Lag-16 transition probabilities to the active state, shared
    across instruments: pi01 = P(1 | 0), pi11 = P(1 | 1)."""

    pi01: float
    pi11: float

    def __post_init__(self):
        for name, v in (("pi01", self.pi01), ("pi11", self.pi11)):
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")


def bigram_fit(corpus: list[DrumScore]) -> BigramParams:
    """Maximum-likelihood lag-16 transition counts pooled over
    instruments and pieces, with add-1 smoothing.  Scores shorter than
    17 tatums contribute no transitions; if none are long enough the
    uninformative prior (0.5, 0.5) is returned with a warning."""
    if not corpus:
        raise ValidationError("bigram_fit needs a non-empty corpus")
    from0 = to1_from0 = from1 = to1_from1 = 0
    for score in corpus:
        y = score.activations
        if y.shape[1] <= BIGRAM_LAG:
            continue
        prev = y[:, :-BIGRAM_LAG]
        cur = y[:, BIGRAM_LAG:]
        from0 += int((prev == 0).sum())
        from1 += int((prev == 1).sum())
        to1_from0 += int(((prev == 0) & (cur == 1)).sum())
        to1_from1 += int(((prev == 1) & (cur == 1)).sum())
    if from0 + from1 == 0:
        warnings.warn(
            "no score exceeds the lag of 16 tatums; falling back to the (0.5, 0.5) prior"
        )
        return BigramParams(0.5, 0.5)
    return BigramParams(
        (to1_from0 + 1) / (from0 + 2),
        (to1_from1 + 1) / (from1 + 2),
    )


class BigramLM:
    """Repetition-aware bi-gram: each cell is predicted from the cell
    sixteen tatums earlier; the first sixteen tatums condition on an
    all-zero history."""

    kind = "bigram"

    def __init__(self, params: BigramParams):
        self.params = params

    def column_probs(self, activations: np.ndarray) -> np.ndarray:
        """P(cell = 1 | history) for every cell, shape (M, N)."""
        y = np.asarray(activations)
        probs = np.full(y.shape, self.params.pi01, dtype=np.float64)
        if y.shape[1] > BIGRAM_LAG:
            hist = y[:, :-BIGRAM_LAG]
            probs[:, BIGRAM_LAG:] = np.where(hist == 1, self.params.pi11, self.params.pi01)
        return probs

    def nll(self, score: DrumScore) -> LMScore:
        y = score.activations
        per_tatum = _column_bits(self.column_probs(y), y)
        return LMScore(float(per_tatum.sum()), per_tatum)

    def relaxed_nll_bits(self, y_hat: torch.Tensor) -> torch.Tensor:
        """Bits of a relaxed score: the lag-16 history interpolates the
        two transition rows, and the target enters as a soft label."""
        if y_hat.ndim != 2 or y_hat.shape[0] != NUM_INSTRUMENTS:
            raise ValidationError(
                f"relaxed score must be ({NUM_INSTRUMENTS}, N), got {tuple(y_hat.shape)}"
            )
        n = y_hat.shape[1]
        hist = torch.zeros_like(y_hat)
        if n > BIGRAM_LAG:
            hist[:, BIGRAM_LAG:] = y_hat[:, :-BIGRAM_LAG]
        p1 = hist * self.params.pi11 + (1.0 - hist) * self.params.pi01
        return _soft_bits(p1, y_hat)


class GRULanguageModel(nn.Module):
    """Unidirectional GRU over tatum columns predicting the next column
    as independent Bernoullis; the first prediction conditions on an
    all-zero start column."""

    kind = "gru"

    def __init__(self, hidden: int = 64, layers: int = 3):
        super().__init__()
        self.hidden = hidden
        self.layers = layers
        self.embed = nn.Linear(NUM_INSTRUMENTS, hidden)
        self.gru = nn.GRU(hidden, hidden, num_layers=layers, batch_first=True)
        self.head = nn.Linear(hidden, NUM_INSTRUMENTS)

    @property
    def config(self) -> dict:
        return {"kind": self.kind, "hidden": self.hidden, "layers": self.layers}

    def column_prob_tensor(self, columns: torch.Tensor) -> torch.Tensor:
        """(N, M) observed columns -> (N, M) next-column probabilities."""
        n = columns.shape[0]
        inputs = torch.zeros_like(columns)
        if n > 1:
            inputs[1:] = columns[:-1]
        h, _ = self.gru(self.embed(inputs)[None])
        return torch.sigmoid(self.head(h[0]))

    @torch.no_grad()
    def nll(self, score: DrumScore) -> LMScore:
        self.eval()
        y = score.activations.T.astype(np.float32)  # (N, M)
        probs = self.column_prob_tensor(torch.as_tensor(y)).double().numpy()
        per_tatum = _column_bits(probs.T, score.activations)
        return LMScore(float(per_tatum.sum()), per_tatum)

    def relaxed_nll_bits(self, y_hat: torch.Tensor) -> torch.Tensor:
        if y_hat.shape[0] != NUM_INSTRUMENTS:
            raise ValidationError(
                f"relaxed score must be ({NUM_INSTRUMENTS}, N), got {tuple(y_hat.shape)}"
            )
        self.eval()  # frozen regularizer: no dropout
        cols = y_hat.T.to(next(self.parameters()).dtype)
        probs = self.column_prob_tensor(cols)
        return _soft_bits(probs, cols)


@dataclass(frozen=True)
class MaskedLMConfig:
    heads: int = 4
    layers: int = 8
    d_f: int = 112
    d_ffn: int = 448
    encoding: str = "sync"
    mask_rate: float = 0.15
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_ffn != 4 * self.d_f:
            raise ValidationError(f"d_ffn must equal 4 * d_f, got {self.d_ffn}")
        if self.d_f % self.heads != 0:
            raise ValidationError(f"d_f={self.d_f} must be divisible by heads={self.heads}")
        if not (0.0 < self.mask_rate < 1.0):
            raise ValidationError("mask_rate must lie in (0, 1)")
        if self.encoding not in ENCODING_KINDS:
            raise ValidationError(f"unknown encoding kind {self.encoding!r}")


def mask_count(n: int, rate: float) -> int:
    """Columns to mask per piece per step: floor(rate * n), at least 1."""
    return max(1, int(math.floor(rate * n)))


class MaskedLanguageModel(nn.Module):
    """Bidirectional column model: masked columns are replaced by a
    learned embedding and predicted from the full surrounding context."""

    kind = "mlm"

    def __init__(self, cfg: MaskedLMConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(NUM_INSTRUMENTS, cfg.d_f)
        self.mask_embedding = nn.Parameter(torch.zeros(cfg.d_f))
        nn.init.normal_(self.mask_embedding, std=0.02)
        self.stack = SelfAttentionStack(cfg.d_f, cfg.heads, cfg.layers, cfg.d_ffn, cfg.dropout)
        self.head = nn.Linear(cfg.d_f, NUM_INSTRUMENTS)
        # near-uniform predictions at init; calibrate_bias sets the base rate
        nn.init.normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    @property
    def config(self) -> dict:
        return {"kind": self.kind, **asdict(self.cfg)}

    def calibrate_bias(self, onset_rate: float) -> None:
        rate = min(max(float(onset_rate), 1e-4), 1.0 - 1e-4)
        with torch.no_grad():
            self.head.bias.fill_(math.log(rate / (1.0 - rate)))

    def _encoding(self, n: int, like: torch.Tensor) -> torch.Tensor:
        enc = positional_encoding(self.cfg.encoding, self.cfg.d_f, n)
        return torch.tensor(enc.values.T, dtype=like.dtype, device=like.device)

    def forward(self, columns: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Predict every column given the masked input.

        columns: (B, N, M) values in [0, 1]; mask: (B, N) boolean.
        Returns (B, N, M) Bernoulli probabilities.
        """
        emb = self.embed(columns)
        emb = torch.where(mask[..., None], self.mask_embedding.to(emb.dtype), emb)
        z = emb + self._encoding(columns.shape[1], emb)
        z, _ = self.stack(z)
        return torch.sigmoid(self.head(z))

    def _each_position_masked(self, cols: torch.Tensor, chunk: int = 64) -> torch.Tensor:
        """(N, M) -> (N, M) where row n is the prediction for column n
        when exactly column n is masked (one forward pass per chunk)."""
        n = cols.shape[0]
        preds = []
        for start in range(0, n, chunk):
            idx = torch.arange(start, min(start + chunk, n))
            batch = cols[None].expand(idx.numel(), -1, -1)
            mask = torch.zeros(idx.numel(), n, dtype=torch.bool)
            mask[torch.arange(idx.numel()), idx] = True
            probs = self.forward(batch, mask)
            preds.append(probs[torch.arange(idx.numel()), idx])
        return torch.cat(preds, dim=0)

    @torch.no_grad()
    def pseudo_nll(self, score: DrumScore) -> LMScore:
        """Exact N-pass evaluation: mask each tatum in turn and score the
        observed column under the model's prediction."""
        self.eval()
        cols = torch.as_tensor(score.activations.T.astype(np.float32))
        preds = self._each_position_masked(cols).double().numpy()  # (N, M)
        per_tatum = _column_bits(preds.T, score.activations)
        return LMScore(float(per_tatum.sum()), per_tatum)

    def relaxed_nll_bits(self, y_hat: torch.Tensor) -> torch.Tensor:
        if y_hat.shape[0] != NUM_INSTRUMENTS:
            raise ValidationError(
                f"relaxed score must be ({NUM_INSTRUMENTS}, N), got {tuple(y_hat.shape)}"
            )
        self.eval()  # frozen regularizer: no dropout
        cols = y_hat.T.to(next(self.parameters()).dtype)
        preds = self._each_position_masked(cols)
        return _soft_bits(preds, cols)


def unidirectional_nll(model, score: DrumScore) -> LMScore:
    """Negative log-likelihood (bits) under an autoregressive model."""
    if not hasattr(model, "nll"):
        raise ValidationError(f"{type(model).__name__} is not a unidirectional model")
    return model.nll(score)


def mlm_pseudo_nll(model: MaskedLanguageModel, score: DrumScore) -> LMScore:
    return model.pseudo_nll(score)


def lm_score(model, score: DrumScore) -> LMScore:
    """Dispatch to the model's likelihood (pseudo-likelihood for the MLM)."""
    if isinstance(model, MaskedLanguageModel):
        return model.pseudo_nll(score)
    return model.nll(score)


def corpus_perplexity(model, corpus: list[DrumScore]) -> float:
    """Pooled perplexity: total bits over total tatums, 2 ** average.
    Histories never cross piece boundaries, so the result does not
    depend on the order of the pieces."""
    if not corpus:
        raise ValidationError("cannot score an empty corpus")
    bits = 0.0
    tatums = 0
    for score in corpus:
        s = lm_score(model, score)
        bits += s.total_bits
        tatums += s.num_tatums
    return 2.0 ** (bits / tatums)


def _corpus_onset_rate(corpus: list[DrumScore]) -> float:
    total = sum(s.activations.size for s in corpus)
    active = sum(int(s.activations.sum()) for s in corpus)
    return active / total if total else 0.5


def mlm_train(
    corpus: list[DrumScore],
    cfg: MaskedLMConfig = MaskedLMConfig(),
    *,
    epochs: int = 30,
    batch_size: int = 10,
    warmup_steps: int = 400,
    lr_scale: float = 1.0,
    weight_decay: float = 1e-4,
    seed: int = 0,
    log=None,
) -> MaskedLanguageModel:
    """Pretrain a masked model: each step masks floor(mask_rate * N)
    distinct columns per piece (at least one) and minimizes the
    reconstruction cross-entropy at the masked positions only.  Uses the
    same warmup/inverse-sqrt rate schedule as the self-attention
    transcriber (a flat rate stalls the deep stack)."""
    from .training import lr_schedule

    if not corpus:
        raise ValidationError("mlm_train needs a non-empty corpus")
    torch.manual_seed(seed)
    model = MaskedLanguageModel(cfg)
    model.calibrate_bias(_corpus_onset_rate(corpus))
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3, weight_decay=weight_decay)
    tensors = [torch.as_tensor(s.activations.T.astype(np.float32)) for s in corpus]
    step = 0
    for epoch in range(epochs):
        order = torch.randperm(len(tensors), generator=gen).tolist()
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            step += 1
            rate = lr_schedule(step, cfg.d_f, warmup_steps, lr_scale)
            for group in opt.param_groups:
                group["lr"] = rate
            opt.zero_grad()
            total = torch.zeros(())
            for idx in batch:
                cols = tensors[idx]
                n = cols.shape[0]
                k = mask_count(n, cfg.mask_rate)
                chosen = torch.randperm(n, generator=gen)[:k]
                mask = torch.zeros(1, n, dtype=torch.bool)
                mask[0, chosen] = True
                probs = model(cols[None], mask)
                p = probs[0, chosen].clamp(_PROB_EPS, 1.0 - _PROB_EPS)
                t = cols[chosen]
                loss = -(t * torch.log(p) + (1 - t) * torch.log(1 - p)).sum()
                total = total + loss / len(batch)
            total.backward()
            opt.step()
            if log is not None:
                log({"step": step, "epoch": epoch, "lr": rate,
                     "mlm_loss": float(total.item())})
    model.eval()
    return model


def train_gru_lm(
    corpus: list[DrumScore],
    *,
    hidden: int = 64,
    layers: int = 3,
    epochs: int = 30,
    batch_size: int = 10,
    lr: float = 1e-3,
    weight_decay: float = 1e-4,
    seed: int = 0,
    log=None,
) -> GRULanguageModel:
    """Fit the recurrent model by next-column cross-entropy."""
    if not corpus:
        raise ValidationError("train_gru_lm needs a non-empty corpus")
    torch.manual_seed(seed)
    model = GRULanguageModel(hidden=hidden, layers=layers)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    tensors = [torch.as_tensor(s.activations.T.astype(np.float32)) for s in corpus]
    step = 0
    for epoch in range(epochs):
        order = torch.randperm(len(tensors), generator=gen).tolist()
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            opt.zero_grad()
            total = torch.zeros(())
            for idx in batch:
                cols = tensors[idx]
                probs = model.column_prob_tensor(cols).clamp(_PROB_EPS, 1.0 - _PROB_EPS)
                loss = -(cols * torch.log(probs) + (1 - cols) * torch.log(1 - probs)).sum()
                total = total + loss / len(batch)
            total.backward()
            opt.step()
            step += 1
            if log is not None:
                log({"step": step, "epoch": epoch, "gru_lm_loss": float(total.item())})
    model.eval()
    return model


def masked_recovery_accuracy(
    model: MaskedLanguageModel, corpus: list[DrumScore], seed: int = 0
) -> float:
    """Fraction of cells recovered correctly (threshold 0.5) when
    masking floor(mask_rate * N) columns of each piece."""
    gen = torch.Generator().manual_seed(seed)
    correct = total = 0
    model.eval()
    with torch.no_grad():
        for score in corpus:
            cols = torch.as_tensor(score.activations.T.astype(np.float32))
            n = cols.shape[0]
            k = mask_count(n, model.cfg.mask_rate)
            chosen = torch.randperm(n, generator=gen)[:k]
            mask = torch.zeros(1, n, dtype=torch.bool)
            mask[0, chosen] = True
            probs = model(cols[None], mask)[0, chosen]
            pred = (probs >= 0.5).float()
            correct += int((pred == cols[chosen]).sum())
            total += pred.numel()
    return correct / total if total else 0.0


# ---------------------------------------------------------------------------
# Checkpoints: the bi-gram is a plain JSON file; neural models store a
# parameter file plus a JSON config sidecar.

def save_lm(model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(model, BigramLM):
        path = path.with_suffix(".json")
        path.write_text(json.dumps(
            {"kind": "bigram", "pi01": model.params.pi01, "pi11": model.params.pi11},
            indent=2,
        ) + "\n")
        return path
    path = path.with_suffix(".pt")
    torch.save(model.state_dict(), path)
    path.with_suffix(".json").write_text(json.dumps(model.config, indent=2) + "\n")
    return path


def load_lm(path):
    path = Path(path)
    sidecar = path if path.suffix == ".json" else path.with_suffix(".json")
    if not sidecar.exists():
        raise ValidationError(f"language model config not found: {sidecar}")
    config = json.loads(sidecar.read_text())
    kind = config.get("kind")
    if kind == "bigram":
        return BigramLM(BigramParams(config["pi01"], config["pi11"]))
    weights = sidecar.with_suffix(".pt")
    if not weights.exists():
        raise ValidationError(f"language model weights not found: {weights}")
    if kind == "gru":
        model = GRULanguageModel(hidden=config["hidden"], layers=config["layers"])
    elif kind == "mlm":
        model = MaskedLanguageModel(MaskedLMConfig(
            heads=config["heads"], layers=config["layers"], d_f=config["d_f"],
            d_ffn=config["d_ffn"], encoding=config["encoding"],
            mask_rate=config["mask_rate"], dropout=config["dropout"],
        ))
    else:
        raise ValidationError(f"unknown language model kind {kind!r}")
    model.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
    model.eval()
    return model
