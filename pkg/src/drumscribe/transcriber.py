"""Frame-to-tatum transcription models.

A convolutional encoder turns the (channels, 80, T) mel input into
frame-level latent features, a max-pool over each tatum's frame window
summarizes them at the tatum level, and a decoder (multi-head
self-attention stack or bidirectional GRU) maps the tatum features to
per-instrument onset probabilities.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError
from .features import MelFeature, MEL_BANDS
from .posenc import positional_encoding, ENCODING_KINDS
from .score import NUM_INSTRUMENTS, INSTRUMENTS, OnsetProbabilities, TatumGrid


@dataclass(frozen=True)
class SelfAttConfig:
    """Decoder hyperparameters; the FFN width is pinned to 4x the model
    width and the per-head width is d_f / heads."""

    heads: int = 2
    layers: int = 8
    d_f: int = 96
    d_ffn: int = 384
    dropout: float = 0.1
    encoding: str = "sync"
    max_len: int = 256

    def __post_init__(self):
        if self.heads < 1 or self.layers < 1 or self.d_f < 2:
            raise ValidationError("heads, layers, and d_f must be positive")
        if self.d_f % self.heads != 0:
            raise ValidationError(
                f"d_f={self.d_f} must be divisible by heads={self.heads}"
            )
        if self.d_ffn != 4 * self.d_f:
            raise ValidationError(f"d_ffn must equal 4 * d_f, got {self.d_ffn}")
        if self.encoding not in ENCODING_KINDS:
            raise ValidationError(f"unknown encoding kind {self.encoding!r}")

    @property
    def d_k(self) -> int:
        return self.d_f // self.heads


def init_he_conv(module: nn.Module) -> None:
    """He-normal weights, zero biases, for conv and linear layers."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def init_output_linear(linear: nn.Linear) -> None:
    """Output heads draw weights from Uniform(0, 1) with zero bias."""
    nn.init.uniform_(linear.weight, 0.0, 1.0)
    nn.init.zeros_(linear.bias)


class FrameEncoder(nn.Module):
    """Four 3x3 conv layers in two blocks, each block ending in a
    frequency-only 4x max-pool; the time axis is left untouched so frame
    indices stay aligned with tatum times."""

    def __init__(self, in_channels: int, d_f: int):
        super().__init__()
        if in_channels not in (1, 2):
            raise ValidationError(f"encoder expects 1 or 2 input channels, got {in_channels}")
        self.in_channels = in_channels
        self.d_f = d_f

        def block(cin, cout):
            return [
                nn.Conv2d(cin, cout, 3, padding=1),
                nn.BatchNorm2d(cout),
                nn.ReLU(),
                nn.Conv2d(cout, cout, 3, padding=1),
                nn.BatchNorm2d(cout),
                nn.ReLU(),
                nn.MaxPool2d((4, 1)),
            ]

        self.conv = nn.Sequential(*block(in_channels, 32), *block(32, 64))
        self.proj = nn.Linear(64 * (MEL_BANDS // 16), d_f)
        init_he_conv(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, 80, T) -> (B, T, d_f)."""
        if x.shape[-1] < 1:
            raise ValidationError("encoder input has no time frames")
        if x.shape[1] != self.in_channels:
            raise ValidationError(
                f"encoder built for {self.in_channels} channels, got {x.shape[1]}"
            )
        h = self.conv(x)  # (B, 64, 5, T)
        b, c, fq, t = h.shape
        h = h.permute(0, 3, 1, 2).reshape(b, t, c * fq)
        return self.proj(h)


def tatum_pool(frames: torch.Tensor, grid: TatumGrid) -> torch.Tensor:
    """Max over each tatum's frame window: (B, T, D) -> (B, N, D)."""
    grid.validate_frames(frames.shape[1])
    windows = grid.pooling_windows()
    pooled = [frames[:, lo:hi].amax(dim=1) for lo, hi in windows]
    return torch.stack(pooled, dim=1)


class SelfAttentionLayer(nn.Module):
    """One pre-norm decoder block: multi-head attention over the
    normalized input, its (dropped-out) output added back to the input,
    then a residual FFN over the normalized sum.  Both sublayers carry
    residual paths; without the FFN residual a stack of eight blocks
    does not optimize."""

    def __init__(self, d_f: int, heads: int, d_ffn: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.d_k = d_f // heads
        self.norm = nn.LayerNorm(d_f)
        self.query = nn.Linear(d_f, d_f)
        self.key = nn.Linear(d_f, d_f)
        self.value = nn.Linear(d_f, d_f)
        self.dropout = nn.Dropout(dropout)
        self.ffn_norm = nn.LayerNorm(d_f)
        self.ffn_in = nn.Linear(d_f, d_ffn)
        self.ffn_out = nn.Linear(d_ffn, d_f)

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, N, D) -> ((B, N, D), attention (B, heads, N, N))."""
        b, n, d = z.shape
        h = self.norm(z)

        def split(proj):
            return proj(h).view(b, n, self.heads, self.d_k).transpose(1, 2)

        q, k, v = split(self.query), split(self.key), split(self.value)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_k)
        alpha = torch.softmax(scores, dim=-1)
        heads = alpha @ v  # (B, I, N, d_k)
        merged = heads.transpose(1, 2).reshape(b, n, d)
        z = self.dropout(merged) + z
        z = z + self.ffn_out(F.relu(self.ffn_in(self.ffn_norm(z))))
        return z, alpha


class SelfAttentionStack(nn.Module):
    """L decoder blocks followed by a final layer norm."""

    def __init__(self, d_f: int, heads: int, layers: int, d_ffn: int, dropout: float):
        super().__init__()
        self.blocks = nn.ModuleList(
            SelfAttentionLayer(d_f, heads, d_ffn, dropout) for _ in range(layers)
        )
        self.final_norm = nn.LayerNorm(d_f)
        init_he_conv(self)

    def forward(
        self, z: torch.Tensor, collect_attention: bool = False
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        alphas = []
        for block in self.blocks:
            z, alpha = block(z)
            if collect_attention:
                alphas.append(alpha)
        return self.final_norm(z), alphas


class SelfAttentionDecoder(nn.Module):
    """Positional encoding + attention stack + sigmoid output head."""

    def __init__(self, cfg: SelfAttConfig):
        super().__init__()
        self.cfg = cfg
        self.stack = SelfAttentionStack(
            cfg.d_f, cfg.heads, cfg.layers, cfg.d_ffn, cfg.dropout
        )
        self.out = nn.Linear(cfg.d_f, NUM_INSTRUMENTS)
        init_output_linear(self.out)

    def _encoding(self, n: int, like: torch.Tensor) -> torch.Tensor:
        enc = positional_encoding(self.cfg.encoding, self.cfg.d_f, n)
        return torch.tensor(enc.values.T, dtype=like.dtype, device=like.device)

    def forward(
        self,
        g: torch.Tensor,
        collect_attention: bool = False,
        add_positions: bool = True,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """(B, N, D) tatum features -> ((B, N, M) probabilities, attention)."""
        n = g.shape[1]
        z = g + self._encoding(n, g) if add_positions else g
        z, alphas = self.stack(z, collect_attention)
        phi = torch.sigmoid(self.out(z))
        return phi, alphas


class BiGRUDecoder(nn.Module):
    """Bidirectional GRU over tatum features with a sigmoid output head;
    dropout sits just before the fully connected layer."""

    def __init__(self, d_f: int, hidden: int, layers: int, dropout: float = 0.2):
        super().__init__()
        self.d_f = d_f
        self.hidden = hidden
        self.layers = layers
        self.dropout_p = dropout
        self.gru = nn.GRU(
            d_f, hidden, num_layers=layers, bidirectional=True, batch_first=True
        )
        self.dropout = nn.Dropout(dropout)
        self.out = nn.Linear(2 * hidden, NUM_INSTRUMENTS)
        for name, param in self.gru.named_parameters():
            if name.startswith("weight"):
                nn.init.kaiming_normal_(param, nonlinearity="relu")
            else:
                nn.init.zeros_(param)
        init_output_linear(self.out)

    def forward(
        self, g: torch.Tensor, collect_attention: bool = False, add_positions: bool = True
    ) -> tuple[torch.Tensor, list]:
        h, _ = self.gru(g)
        phi = torch.sigmoid(self.out(self.dropout(h)))
        return phi, []


class TranscriptionModel(nn.Module):
    """Encoder + tatum pooling + decoder, operating on one piece at a time."""

    def __init__(self, encoder: FrameEncoder, decoder: nn.Module, config: dict):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder
        self.config = config

    def forward(
        self, x: torch.Tensor, grid: TatumGrid, collect_attention: bool = False
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """(B, C, 80, T) -> ((B, N, M) probabilities, attention maps)."""
        frames = self.encoder(x)
        g = tatum_pool(frames, grid)
        return self.decoder(g, collect_attention=collect_attention)

    @torch.no_grad()
    def transcribe(self, feature: MelFeature, grid: TatumGrid) -> OnsetProbabilities:
        self.eval()
        x = torch.tensor(feature.values, dtype=next(self.parameters()).dtype)[None]
        phi, _ = self.forward(x, grid)
        return OnsetProbabilities(phi[0].T.double().numpy())

    @torch.no_grad()
    def attention_maps(self, feature: MelFeature, grid: TatumGrid) -> np.ndarray:
        """Per-layer, per-head attention matrices, shape (L, I, N, N)."""
        if not isinstance(self.decoder, SelfAttentionDecoder):
            raise ValidationError("attention maps require the self-attention decoder")
        self.eval()
        x = torch.tensor(feature.values, dtype=next(self.parameters()).dtype)[None]
        _, alphas = self.forward(x, grid, collect_attention=True)
        return np.stack([a[0].double().numpy() for a in alphas])

    def init_onset_bias(self, onset_rate) -> None:
        """Bias the output head toward the corpus onset rate so training
        starts near the right operating point on sparse targets."""
        rate = np.clip(np.asarray(onset_rate, dtype=np.float64), 1e-4, 1 - 1e-4)
        logit = np.log(rate / (1 - rate))
        with torch.no_grad():
            bias = self.decoder.out.bias
            bias.copy_(torch.tensor(np.broadcast_to(logit, bias.shape).copy(),
                                    dtype=bias.dtype))


def build_selfatt_model(cfg: SelfAttConfig, in_channels: int = 1) -> TranscriptionModel:
    config = {
        "kind": "selfatt",
        "in_channels": in_channels,
        "instruments": list(INSTRUMENTS),
        **asdict(cfg),
    }
    return TranscriptionModel(
        FrameEncoder(in_channels, cfg.d_f), SelfAttentionDecoder(cfg), config
    )


def build_bigru_model(
    d_f: int = 96, hidden: int = 131, layers: int = 1,
    in_channels: int = 1, dropout: float = 0.2,
) -> TranscriptionModel:
    config = {
        "kind": "bigru",
        "in_channels": in_channels,
        "instruments": list(INSTRUMENTS),
        "d_f": d_f,
        "hidden": hidden,
        "layers": layers,
        "dropout": dropout,
    }
    return TranscriptionModel(
        FrameEncoder(in_channels, d_f), BiGRUDecoder(d_f, hidden, layers, dropout), config
    )


def build_model_from_config(config: dict) -> TranscriptionModel:
    kind = config.get("kind")
    if kind == "selfatt":
        cfg = SelfAttConfig(
            heads=config["heads"], layers=config["layers"], d_f=config["d_f"],
            d_ffn=config["d_ffn"], dropout=config["dropout"],
            encoding=config["encoding"], max_len=config["max_len"],
        )
        return build_selfatt_model(cfg, config["in_channels"])
    if kind == "bigru":
        return build_bigru_model(
            d_f=config["d_f"], hidden=config["hidden"], layers=config["layers"],
            in_channels=config["in_channels"], dropout=config["dropout"],
        )
    if kind == "frame_bigru":
        from .baseline import build_frame_model

        return build_frame_model(
            d_f=config["d_f"], hidden=config["hidden"], layers=config["layers"],
            in_channels=config["in_channels"], dropout=config["dropout"],
        )
    raise ValidationError(f"unknown model kind {kind!r} in checkpoint config")


def sidecar_path(checkpoint_path) -> Path:
    return Path(checkpoint_path).with_suffix(".json")


def save_model(model: nn.Module, path) -> None:
    """Parameter file plus a JSON sidecar describing the architecture."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    sidecar_path(path).write_text(json.dumps(model.config, indent=2) + "\n")


def load_model(path) -> nn.Module:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    sidecar = sidecar_path(path)
    if not sidecar.exists():
        raise ValidationError(f"checkpoint sidecar not found: {sidecar}")
    config = json.loads(sidecar.read_text())
    model = build_model_from_config(config)
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    model.eval()
    return model
