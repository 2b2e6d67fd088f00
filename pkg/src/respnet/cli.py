"""Command-line entry point: synth, prepare, train, predict, baseline, evaluate, plot."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from respnet.baselines import baseline_test_predictions
from respnet.errors import IoError, RespNetError, ShapeMismatch, WindowOutOfRange
from respnet.metrics import EVAL_FS, evaluate_method, format_table, reports_to_csv
from respnet.model import ModelConfig, build_model, load_checkpoint
from respnet.signalio import (
    SynthConfig,
    build_dataset,
    load_manifest,
    read_windowed,
    synth_record,
    write_manifest,
    write_record,
    write_windowed,
)
from respnet.trainer import TrainConfig, evaluate_predictions, predict, train

log = logging.getLogger("respnet")


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise IoError(f"no such file: {p}")
    return p


def cmd_synth(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    records, files = [], []

    def draw(bounds):
        return float(rng.uniform(*bounds))

    for i in range(args.n):
        cfg = SynthConfig(
            duration=args.duration,
            fs=args.fs,
            heart_rate=draw(args.hr),
            resp_rate=draw(args.rr),
            am_depth=draw(args.am),
            fm_depth=draw(args.fm),
            bw_depth=draw(args.bw),
            noise_std=args.noise,
            seed=int(rng.integers(2**31)),
        )
        rec = synth_record(cfg, record_id=f"synth_{i:04d}")
        name = f"{rec.record_id}.csv"
        write_record(rec, out / name)
        records.append(rec)
        files.append(name)
    write_manifest(out, records, files)
    print(f"wrote {len(records)} records to {out}")


def cmd_prepare(args) -> None:
    records = load_manifest(args.records)
    ds = build_dataset(
        records,
        train_frac=args.train_frac,
        seed=args.seed,
        by_subject=args.by_subject,
        window_s=args.window_s,
        fs=args.fs,
    )
    write_windowed(ds, args.out)
    print(ds.summary())


def _model_config(args) -> ModelConfig:
    return ModelConfig(
        input_length=args.input_length,
        levels=args.levels,
        base_filters=args.base_filters,
        max_filters=args.max_filters,
        seed=args.seed,
    )


def cmd_train(args) -> None:
    ds = read_windowed(_require_file(args.data))
    overrides = {k: v for k, v in dict(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, momentum=args.momentum).items() if v is not None}
    cfg = TrainConfig.preset(args.preset, seed=args.seed, checkpoint_every=args.checkpoint_every, track_test_loss=args.test_loss, **overrides)
    params = build_model(_model_config(args))
    resume = _require_file(args.resume) if args.resume else None
    _, history = train(params, ds, cfg, checkpoint_dir=args.out, resume_from=resume)
    final = history.train_loss[-1] if len(history) else float("nan")
    print(f"trained {len(history)} epochs, final train loss {final:.6f}; checkpoint {Path(args.out) / 'final.rspn'}")


def cmd_predict(args) -> None:
    ds = read_windowed(_require_file(args.data))
    params = load_checkpoint(_require_file(args.checkpoint))
    x, _ = ds.subset(train=args.split == "train")
    preds = np.asarray(predict(params, x)).reshape(len(x), -1)
    np.save(args.out, preds)
    print(f"wrote {len(preds)} predictions to {args.out}")


def cmd_baseline(args) -> None:
    ds = read_windowed(_require_file(args.data))
    preds, refs = baseline_test_predictions(ds, args.method)
    np.save(args.out, np.asarray(preds))
    print(f"wrote {len(preds)} {args.method.upper()} estimates at {EVAL_FS} Hz to {args.out}")


def cmd_evaluate(args) -> None:
    ds = read_windowed(_require_file(args.data))
    dataset_id = args.dataset_id or Path(args.data).stem
    reports = []
    for method in args.method:
        if method == "respnet":
            if not args.checkpoint:
                raise IoError("--checkpoint is required for --method respnet")
            params = load_checkpoint(_require_file(args.checkpoint))
            if params.config.input_length != ds.window_len:
                raise ShapeMismatch(
                    f"checkpoint expects {params.config.input_length}-sample windows, dataset has {ds.window_len}"
                )
            x, _ = ds.subset(train=False)
            reports.append(evaluate_predictions(predict(params, x), ds, dataset_id))
        else:
            preds, refs = baseline_test_predictions(ds, method)
            reports.append(evaluate_method(preds, refs, EVAL_FS, method.upper(), dataset_id))
    print(format_table(reports))
    if args.out:
        Path(args.out).write_text(reports_to_csv(reports), encoding="utf-8")


def render_svg(t, series: dict, width: int = 900, height: int = 420) -> str:
    """Standalone SVG with one min-max scaled polyline per series, stacked top to bottom."""
    colors = ["#1f77b4", "#2ca02c", "#d62728", "#9467bd"]
    rows = len(series)
    pad = 30
    lane = (height - 2 * pad) / max(rows, 1)
    t = np.asarray(t, dtype=float)
    span = (t[-1] - t[0]) or 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for k, (name, y) in enumerate(series.items()):
        y = np.asarray(y, dtype=float)
        lo, hi = np.min(y), np.max(y)
        scaled = (y - lo) / (hi - lo) if hi > lo else np.full_like(y, 0.5)
        top = pad + k * lane
        xs = pad + (t - t[0]) / span * (width - 2 * pad)
        ys = top + (1.0 - scaled) * (lane * 0.85)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(xs, ys))
        color = colors[k % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1" points="{pts}"/>')
        parts.append(f'<text x="{pad}" y="{top + 12:.1f}" font-family="sans-serif" font-size="12" fill="{color}">{name}</text>')
    parts.append(
        f'<text x="{width / 2:.0f}" y="{height - 8}" font-family="sans-serif" font-size="12" text-anchor="middle">time (s)</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(args) -> None:
    ds = read_windowed(_require_file(args.data))
    params = load_checkpoint(_require_file(args.checkpoint))
    x, y = ds.subset(train=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for idx in args.window:
        if not 0 <= idx < len(x):
            raise WindowOutOfRange(f"window {idx} outside test split of {len(x)} windows")
        pred = predict(params, x[idx : idx + 1])[0]
        t = np.arange(ds.window_len) / ds.fs
        stem = out / f"window_{idx:04d}"
        with stem.with_suffix(".csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_s", "ppg", "resp_ref", "resp_pred"])
            for row in zip(t, x[idx], y[idx], pred):
                w.writerow([repr(float(v)) for v in row])
        svg = render_svg(t, {"PPG": x[idx], "reference": y[idx], "RespNet": pred})
        stem.with_suffix(".svg").write_text(svg, encoding="utf-8")
        print(f"wrote {stem}.csv and {stem}.svg")


def _range(text: str) -> tuple:
    parts = [float(v) for v in text.split(",")]
    if len(parts) == 1:
        return (parts[0], parts[0])
    if len(parts) != 2 or parts[0] > parts[1]:
        raise argparse.ArgumentTypeError(f"expected LO,HI or a single value, got {text!r}")
    return tuple(parts)


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags with suppressed defaults so a value
    # given before the command name is not overwritten
    p = argparse.ArgumentParser(add_help=False)
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0))
    p.add_argument("--preset", choices=["paper", "desk"], default=d("desk"))
    p.add_argument("--threads", type=int, default=d(1), help="BLAS threads (1 = bit-reproducible)")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="respnet", description=__doc__, parents=[_global_flags(suppress=False)])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic PPG/respiration records")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--duration", type=float, default=480.0)
    p.add_argument("--fs", type=float, default=100.0)
    p.add_argument("--hr", type=_range, default=(70.0, 70.0), help="heart rate bpm, value or LO,HI")
    p.add_argument("--rr", type=_range, default=(15.0, 15.0), help="breaths/min, value or LO,HI")
    p.add_argument("--am", type=_range, default=(0.3, 0.3))
    p.add_argument("--fm", type=_range, default=(0.05, 0.05))
    p.add_argument("--bw", type=_range, default=(0.1, 0.1))
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", parents=[common], help="resample, window and split records")
    p.add_argument("--records", required=True, help="directory holding manifest.json")
    p.add_argument("--out", required=True)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--window-s", type=float, default=8.0)
    p.add_argument("--fs", type=int, default=256)
    p.add_argument("--by-subject", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="train RespNet on a windowed dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--test-loss", action="store_true", help="record test loss every epoch")
    p.add_argument("--resume")
    p.add_argument("--input-length", type=int, default=2048)
    p.add_argument("--levels", type=int, default=8)
    p.add_argument("--base-filters", type=int, default=16)
    p.add_argument("--max-filters", type=int, default=512)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="write RespNet predictions (.npy)")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("baseline", parents=[common], help="write WAM/WFM estimates for the test split (.npy)")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=["wam", "wfm"], required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", parents=[common], help="MSE / cross-correlation / lag report")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=["respnet", "wam", "wfm"], action="append", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset-id")
    p.add_argument("--out", help="CSV report path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", parents=[common], help="figure data (CSV + SVG) for test windows")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--window", type=int, action="append", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=max(1, args.threads)):
            args.func(args)
    except RespNetError as exc:
        print(f"error {exc.code}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error {IoError.code}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
