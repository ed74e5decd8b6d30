"""Command-line surface.

Subcommands mirror the experiment workflow: ``synth-data`` makes paired
audio/annotation corpora, ``pretrain-lm`` fits a language model on
score JSON files, ``train`` fits a transcription model, ``transcribe``
turns audio plus tatum times into a drum score, ``evaluate`` scores
estimates against references, and ``export-attention`` dumps attention
matrices and heatmaps.

Exit codes: 0 on success, 1 for validation problems (bad flags, bad or
missing files), 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ValidationError

_EXPERIMENT_FLAGS = (
    "data_dir", "model", "encoding", "lm", "lm_checkpoint", "in_channels",
    "heads", "layers", "d_f", "bigru_hidden", "bigru_layers",
    "val_fraction", "seed",
)
_TRAINING_FLAGS = (
    "gamma", "tau", "batch_size", "max_len", "base_lr", "warmup_steps",
    "lr_scale", "weight_decay", "specaugment", "specaugment_rate",
    "threshold", "epochs",
)


class _Parser(argparse.ArgumentParser):
    """Argument errors are validation errors (exit code 1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class JsonlLogger:
    """Line-oriented JSON metrics log."""

    def __init__(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self._f = open(path, "w")

    def __call__(self, entry: dict) -> None:
        self._f.write(json.dumps(entry) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()


def _write_args_snapshot(run_dir: Path, args: argparse.Namespace) -> None:
    data = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    (run_dir / "invocation.json").write_text(json.dumps(data, default=str, indent=2) + "\n")


# ---------------------------------------------------------------------------
# synth-data

def cmd_synth_data(args) -> int:
    from .synth import SyntheticSpec, synth_dataset, synth_scores, write_dataset

    spec = SyntheticSpec(
        pieces=args.pieces, tempo_min=args.tempo_min, tempo_max=args.tempo_max,
        pattern_count=args.patterns, period=args.period, noise=args.noise,
        bars=args.bars,
    )
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.scores_only:
        scores = synth_scores(spec, rng)
        for i, score in enumerate(scores):
            score.save(out / f"score_{i:03d}.score.json")
        print(f"wrote {len(scores)} scores to {out}")
    else:
        pieces = synth_dataset(spec, rng)
        write_dataset(pieces, out)
        print(f"wrote {len(pieces)} pieces to {out}")
    return 0


# ---------------------------------------------------------------------------
# pretrain-lm

def _load_score_corpus(corpus_dir) -> list:
    from .score import DrumScore

    root = Path(corpus_dir)
    if not root.is_dir():
        raise ValidationError(f"corpus directory not found: {root}")
    paths = sorted(root.glob("*.json"))
    if not paths:
        raise ValidationError(f"no score JSON files in {root}")
    return [DrumScore.load(p) for p in paths]


def cmd_pretrain_lm(args) -> int:
    from . import langmodel as lms

    run_dir = Path(args.run)
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_args_snapshot(run_dir, args)
    corpus = _load_score_corpus(args.corpus)
    log = JsonlLogger(run_dir / "metrics.jsonl")
    try:
        if args.kind == "bigram":
            model = lms.BigramLM(lms.bigram_fit(corpus))
        elif args.kind == "gru":
            model = lms.train_gru_lm(
                corpus, hidden=args.hidden, layers=args.gru_layers,
                epochs=args.epochs, seed=args.seed, log=log,
            )
        else:
            cfg = lms.MaskedLMConfig(
                heads=args.heads, layers=args.mlm_layers, d_f=args.d_f,
                d_ffn=4 * args.d_f, encoding=args.encoding,
                mask_rate=args.mask_rate,
            )
            model = lms.mlm_train(corpus, cfg, epochs=args.epochs,
                                  seed=args.seed, log=log)
    finally:
        log.close()
    path = lms.save_lm(model, run_dir / "lm")
    ppl = lms.corpus_perplexity(model, corpus)
    print(f"saved {args.kind} language model to {path}")
    print(f"training-corpus perplexity: {ppl:.4f}")
    return 0


# ---------------------------------------------------------------------------
# train

def _apply_overrides(cfg, args):
    overrides = {}
    for name in _EXPERIMENT_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    t_overrides = {}
    for name in _TRAINING_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            t_overrides[name] = value
    if args.beta is not None:
        parts = [float(v) for v in args.beta.split(",")]
        t_overrides["beta"] = tuple(parts)
    if t_overrides:
        cfg = cfg.with_training(**t_overrides)
    return cfg.with_training(seed=cfg.seed)


def cmd_train(args) -> int:
    import torch

    from .config import ExperimentConfig
    from .dataset import load_train_piece, scan_dataset, train_val_split
    from .langmodel import load_lm
    from .training import train_transcriber
    from .transcriber import (
        SelfAttConfig, build_bigru_model, build_selfatt_model, save_model,
    )

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg = _apply_overrides(cfg, args)
    if not cfg.data_dir:
        raise ValidationError("no dataset: pass --data-dir or set it in the config")

    run_dir = Path(args.run)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")
    _write_args_snapshot(run_dir, args)

    entries = scan_dataset(cfg.data_dir)
    train_entries, val_entries = train_val_split(entries, cfg.val_fraction, cfg.seed)
    cache = run_dir / "features"
    train_pieces = [load_train_piece(e, cfg.in_channels, cache) for e in train_entries]
    val_pieces = [load_train_piece(e, cfg.in_channels, cache) for e in val_entries]

    if cfg.model == "selfatt":
        model = build_selfatt_model(
            SelfAttConfig(
                heads=cfg.heads, layers=cfg.layers, d_f=cfg.d_f, d_ffn=cfg.d_ffn,
                encoding=cfg.encoding, max_len=cfg.training.max_len,
            ),
            cfg.in_channels,
        )
    else:
        model = build_bigru_model(
            d_f=cfg.d_f, hidden=cfg.bigru_hidden, layers=cfg.bigru_layers,
            in_channels=cfg.in_channels,
        )

    lm = None
    if cfg.lm != "none":
        if not cfg.lm_checkpoint:
            raise ValidationError(f"--lm {cfg.lm} requires --lm-checkpoint")
        lm = load_lm(cfg.lm_checkpoint)
        if getattr(lm, "kind", None) != cfg.lm:
            raise ValidationError(
                f"checkpoint {cfg.lm_checkpoint} holds a {getattr(lm, 'kind', '?')} model, "
                f"but --lm {cfg.lm} was requested"
            )
        if cfg.training.gamma == 0:
            print("note: gamma is 0, the language model will not affect the loss")

    log = JsonlLogger(run_dir / "metrics.jsonl")
    try:
        result = train_transcriber(
            model, train_pieces, val_pieces, cfg.training, lm=lm, log=log,
            checkpoint_dir=run_dir / "checkpoints",
        )
    finally:
        log.close()
    save_model(model, run_dir / "model.pt")
    print(f"trained {cfg.model} model for {cfg.training.epochs} epochs "
          f"({result.steps} steps); best validation epoch {result.best_epoch}")
    print(f"model saved to {run_dir / 'model.pt'}")
    return 0


# ---------------------------------------------------------------------------
# transcribe

def _collect_audio(audio_arg, tatums_arg) -> list[tuple[str, Path, Path]]:
    audio = Path(audio_arg)
    if audio.is_dir():
        jobs = []
        for wav in sorted(audio.glob("*.wav")):
            if wav.name.endswith(".drum.wav"):
                continue
            tatums = wav.parent / f"{wav.stem}.tatums.txt"
            if tatums.exists():
                jobs.append((wav.stem, wav, tatums))
        if not jobs:
            raise ValidationError(f"no wav + tatums pairs found in {audio}")
        return jobs
    if not audio.exists():
        raise ValidationError(f"audio file not found: {audio}")
    tatums = Path(tatums_arg) if tatums_arg else audio.parent / f"{audio.stem}.tatums.txt"
    if not tatums.exists():
        raise ValidationError(f"tatum file not found: {tatums}")
    return [(audio.stem, audio, tatums)]


def _piece_feature_for_model(model, wav: Path):
    from .features import extract_mel, load_wav, stack_channels

    audio, sr = load_wav(wav)
    feature = extract_mel(audio, sr)
    if model.config["in_channels"] == 2:
        drum = wav.parent / f"{wav.stem}.drum.wav"
        if not drum.exists():
            raise ValidationError(f"model expects a drum stem, missing: {drum}")
        drum_audio, drum_sr = load_wav(drum)
        feature = stack_channels(feature, extract_mel(drum_audio, drum_sr, channel="drum"))
    return feature


def cmd_transcribe(args) -> int:
    from .baseline import FrameDecoderModel, PeakPickConfig, frames_to_tatums, peak_pick
    from .score import (
        OnsetEvent, binarize, load_tatums, render_onsets, save_onsets, save_tatums,
    )
    from .transcriber import load_model

    model = load_model(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = _collect_audio(args.audio, args.tatums)
    for name, wav, tatums_path in jobs:
        feature = _piece_feature_for_model(model, wav)
        grid = load_tatums(tatums_path, feature.frame_rate)
        grid.validate_frames(feature.num_frames)
        if isinstance(model, FrameDecoderModel):
            phi_star = model.frame_probabilities(feature)
            picked = peak_pick(phi_star, PeakPickConfig(threshold=args.threshold))
            score, _ = frames_to_tatums(picked, grid)
            events = [
                OnsetEvent(m, t / grid.frame_rate)
                for m, frames in enumerate(picked) for t in frames
            ]
            events.sort(key=lambda ev: (ev.time, ev.instrument))
        else:
            phi = model.transcribe(feature, grid)
            score = binarize(phi, args.threshold)
            events = render_onsets(score, grid)
        score.save(out / f"{name}.score.json")
        save_onsets(out / f"{name}.onsets.txt", events)
        save_tatums(out / f"{name}.tatums.txt", grid.times)
    print(f"transcribed {len(jobs)} piece(s) into {out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate

def _evaluation_pairs(est_arg, gt_arg, est_tatums, gt_tatums):
    est, gt = Path(est_arg), Path(gt_arg)
    if est.is_dir() != gt.is_dir():
        raise ValidationError("--est and --gt must both be files or both be directories")
    if est.is_dir():
        pairs = []
        for est_onsets in sorted(est.glob("*.onsets.txt")):
            name = est_onsets.name[: -len(".onsets.txt")]
            gt_onsets = gt / f"{name}.onsets.txt"
            if not gt_onsets.exists():
                continue
            pairs.append((
                est_onsets, est / f"{name}.tatums.txt",
                gt_onsets, gt / f"{name}.tatums.txt",
            ))
        if not pairs:
            raise ValidationError(f"no matching .onsets.txt pieces between {est} and {gt}")
        return pairs
    if not est.exists():
        raise ValidationError(f"estimate file not found: {est}")
    if not gt.exists():
        raise ValidationError(f"reference file not found: {gt}")

    def sibling(onsets: Path, override) -> Path:
        if override:
            return Path(override)
        name = onsets.name
        stem = name[: -len(".onsets.txt")] if name.endswith(".onsets.txt") else onsets.stem
        return onsets.parent / f"{stem}.tatums.txt"

    return [(est, sibling(est, est_tatums), gt, sibling(gt, gt_tatums))]


def cmd_evaluate(args) -> int:
    from .metrics import PieceEval, corpus_metrics
    from .score import load_onsets, load_tatums, quantize_onsets

    pairs = _evaluation_pairs(args.est, args.gt, args.est_tatums, args.gt_tatums)
    pieces = []
    for est_onsets_path, est_tatums_path, gt_onsets_path, gt_tatums_path in pairs:
        for p in (est_tatums_path, gt_tatums_path):
            if not Path(p).exists():
                raise ValidationError(f"tatum file not found: {p}")
        est_onsets = load_onsets(est_onsets_path)
        gt_onsets = load_onsets(gt_onsets_path)
        est_score, _ = quantize_onsets(est_onsets, load_tatums(est_tatums_path),
                                       args.tolerance)
        gt_score, _ = quantize_onsets(gt_onsets, load_tatums(gt_tatums_path),
                                      args.tolerance)
        pieces.append(PieceEval(est_onsets, gt_onsets, est_score, gt_score))
    report = corpus_metrics(pieces, args.tolerance)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json", out / "report.txt")
    print(report.to_table())
    return 0


# ---------------------------------------------------------------------------
# export-attention

def cmd_export_attention(args) -> int:
    from .score import load_tatums
    from .transcriber import load_model

    model = load_model(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = _collect_audio(args.audio, args.tatums)
    name, wav, tatums_path = jobs[0]
    feature = _piece_feature_for_model(model, wav)
    grid = load_tatums(tatums_path, feature.frame_rate)
    grid.validate_frames(feature.num_frames)
    alpha = model.attention_maps(feature, grid)

    arrays = {"alpha": alpha, "tatum_times": np.asarray(grid.times)}
    if args.include_positional:
        from .posenc import positional_encoding

        enc = positional_encoding(model.config["encoding"], model.config["d_f"],
                                  grid.num_tatums)
        arrays["positional_encoding"] = enc.values
    np.savez(out / "attention.npz", **arrays)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    heatmap_dir = out / "heatmaps"
    heatmap_dir.mkdir(exist_ok=True)
    layers, heads = alpha.shape[:2]
    for l in range(layers):
        for h in range(heads):
            fig, ax = plt.subplots(figsize=(4, 4))
            ax.imshow(alpha[l, h], origin="lower", aspect="auto", cmap="magma")
            ax.set_xlabel("key tatum")
            ax.set_ylabel("query tatum")
            ax.set_title(f"layer {l} head {h}")
            fig.tight_layout()
            fig.savefig(heatmap_dir / f"layer{l}_head{h}.png", dpi=100)
            plt.close(fig)
    print(f"exported {layers * heads} attention maps for {name} to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="drumscribe",
                     description="Tatum-level drum transcription toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data",
                       help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pieces", type=int, default=10)
    p.add_argument("--tempo-min", type=float, default=110.0)
    p.add_argument("--tempo-max", type=float, default=130.0)
    p.add_argument("--patterns", type=int, default=5, help="pattern library size")
    p.add_argument("--period", type=int, default=16, choices=(8, 16, 32))
    p.add_argument("--noise", type=float, default=0.0,
                   help="per-cell pattern variation probability")
    p.add_argument("--bars", type=int, default=8, help="piece length in 4/4 bars")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scores-only", action="store_true",
                   help="emit only score JSON files (language model corpus)")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("pretrain-lm",
                       help="pretrain a drum score language model")
    p.add_argument("--corpus", required=True, help="directory of score JSON files")
    p.add_argument("--kind", required=True, choices=("bigram", "gru", "mlm"))
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--encoding", default="sync", choices=("standard", "sync"))
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--mlm-layers", type=int, default=8)
    p.add_argument("--d-f", type=int, default=112)
    p.add_argument("--mask-rate", type=float, default=0.15)
    p.add_argument("--hidden", type=int, default=64, help="GRU hidden size")
    p.add_argument("--gru-layers", type=int, default=3)
    p.set_defaults(func=cmd_pretrain_lm)

    p = sub.add_parser("train",
                       help="train a transcription model")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--config", default=None, help="experiment config JSON")
    p.add_argument("--data-dir", dest="data_dir", default=None)
    p.add_argument("--model", choices=("selfatt", "bigru"), default=None)
    p.add_argument("--encoding", choices=("standard", "sync"), default=None)
    p.add_argument("--lm", choices=("none", "bigram", "gru", "mlm"), default=None)
    p.add_argument("--lm-checkpoint", dest="lm_checkpoint", default=None)
    p.add_argument("--in-channels", dest="in_channels", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--d-f", dest="d_f", type=int, default=None)
    p.add_argument("--bigru-hidden", dest="bigru_hidden", type=int, default=None)
    p.add_argument("--bigru-layers", dest="bigru_layers", type=int, default=None)
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--beta", default=None, help="comma-separated onset weights")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--max-len", dest="max_len", type=int, default=None)
    p.add_argument("--base-lr", dest="base_lr", type=float, default=None)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int, default=None)
    p.add_argument("--lr-scale", dest="lr_scale", type=float, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument("--specaugment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--specaugment-rate", dest="specaugment_rate", type=float, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transcribe",
                       help="transcribe audio into a tatum-level drum score")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--audio", required=True, help="wav file or dataset directory")
    p.add_argument("--tatums", default=None,
                   help="tatum time file (defaults to <audio>.tatums.txt)")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.2)
    p.set_defaults(func=cmd_transcribe)

    p = sub.add_parser("evaluate",
                       help="score estimated onsets against a reference")
    p.add_argument("--est", required=True, help="onset file or directory of .onsets.txt")
    p.add_argument("--gt", required=True, help="reference onset file or directory")
    p.add_argument("--est-tatums", dest="est_tatums", default=None)
    p.add_argument("--gt-tatums", dest="gt_tatums", default=None)
    p.add_argument("--tolerance", type=float, default=0.050)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-attention",
                       help="dump attention matrices and heatmap images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--tatums", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--include-positional", action="store_true",
                   help="also store the positional encoding matrix")
    p.set_defaults(func=cmd_export_attention)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
