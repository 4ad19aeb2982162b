"""Command-line entry point: train, predict, evaluate, selftest, report.

Exit codes: 0 success, 1 pipeline error, 2 configuration/usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as config_mod
from . import data as data_mod
from . import metrics as metrics_mod
from . import reporting
from .errors import ConfigError, DrnetError
from .model import build, load_model, save_weights
from .selftest import run_selftest
from .training import train


def _collect_overrides(extra: list[str]) -> dict[str, str]:
    """Turn trailing ``--dotted.key value`` pairs into override entries."""
    overrides: dict[str, str] = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument {token!r}")
        if i + 1 >= len(extra):
            raise ConfigError(f"flag {token!r} is missing a value")
        overrides[token[2:]] = extra[i + 1]
        i += 2
    return overrides


def _write_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def _prob_to_png(prob: np.ndarray) -> np.ndarray:
    return np.round(255.0 * prob).astype(np.uint8)


def cmd_train(args, extra: list[str]) -> int:
    cfg = config_mod.load_run_config(args.config, _collect_overrides(extra))
    if not cfg.data.root:
        raise ConfigError("no dataset root configured (data.root or DRNET_DATA_ROOT)")
    if cfg.data.layout != "iostar":
        raise ConfigError(f"training is defined on the iostar layout, not {cfg.data.layout!r}")
    out_dir = Path(cfg.out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise ConfigError(f"run directory {out_dir} already exists and is not empty")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config_mod.resolved_text(cfg), encoding="utf-8")

    samples = data_mod.load_dataset(cfg.data.root, cfg.data.layout, cfg.data.gt_threshold)
    split = data_mod.protocol_split(
        samples, cfg.data.layout, cfg.data.train_count, cfg.data.val_fraction, cfg.seed
    )
    split.train = [data_mod.pad_to(s, cfg.model.input_size) for s in split.train]
    split.val = [data_mod.pad_to(s, cfg.model.input_size) for s in split.val]
    print(
        f"split sizes: train={len(split.train)} val={len(split.val)} test={len(split.test)}"
    )

    model, _ = build(cfg.model, rng_seed=cfg.seed)
    best_store, history = train(model, split, cfg.train)
    history.to_csv(out_dir / "history.csv")
    save_weights(best_store, out_dir / "best.ckpt")
    save_weights(model.parameter_store(), out_dir / "final.ckpt")
    print(
        f"best epoch {history.best_epoch} "
        f"(val_accuracy {history.records[history.best_epoch - 1].val_accuracy:.6f})"
    )
    print(f"run directory: {out_dir}")
    return 0


def cmd_predict(args, extra: list[str]) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments: {extra}")
    model = load_model(args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    image = data_mod.read_grayscale(Path(args.image))
    sample = data_mod.ImageSample(id=Path(args.image).stem, image=image,
                                  gt_mask=np.zeros(image.shape, dtype=np.uint8))
    padded = data_mod.pad_to(sample, model.config.input_size)
    prob = data_mod.crop_back(model.predict_map(padded.image), padded)
    mask = (prob > args.threshold).astype(np.uint8) * 255

    stem = sample.id
    _write_png(out_dir / f"{stem}_prob.png", _prob_to_png(prob))
    _write_png(out_dir / f"{stem}_mask.png", mask)
    if args.raw:
        np.save(out_dir / f"{stem}_prob.npy", prob)
    if args.gt:
        gt = data_mod.read_binary_mask(Path(args.gt))
        if gt.shape != image.shape:
            raise ConfigError(
                f"ground truth shape {gt.shape} does not match image shape {image.shape}"
            )
        # Side-by-side panel: real image | segmentation | annotation.
        panel = np.concatenate(
            [np.round(255.0 * image).astype(np.uint8), mask, gt * 255], axis=1
        )
        _write_png(out_dir / f"{stem}_panel.png", panel)
    print(f"wrote predictions for {stem} to {out_dir}")
    return 0


def cmd_evaluate(args, extra: list[str]) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments: {extra}")
    model = load_model(args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = data_mod.load_dataset(args.data_root, args.layout)
    if args.subset == "test" and args.layout == "iostar":
        samples = samples[args.train_count :]
        if not samples:
            raise ConfigError("no test samples left after the train split")
    samples = [data_mod.pad_to(s, model.config.input_size) for s in samples]
    report = metrics_mod.evaluate_dataset(
        model,
        samples,
        threshold=args.threshold,
        use_fov=args.fov,
        aggregation=args.aggregation,
    )
    row = reporting.report_to_row(report, method=f"this run ({args.aggregation})")

    reporting.write_metrics_csv(
        out_dir / "metrics.csv", list(reporting.BASELINES[args.layout]) + [row]
    )
    reporting.write_per_image_csv(out_dir / "per_image.csv", report)
    pooled_scores = []
    pooled_labels = []
    for s in samples:
        prob = data_mod.crop_back(model.predict_map(s.image), s)
        gt = data_mod.crop_back(s.gt_mask, s)
        fov = data_mod.crop_back(s.fov_mask, s) if (args.fov and s.fov_mask is not None) else None
        keep = fov.astype(bool) if fov is not None else np.ones(gt.shape, dtype=bool)
        pooled_scores.append(prob[keep].ravel())
        pooled_labels.append(gt[keep].ravel())
    thresholds, fpr, tpr = metrics_mod.roc_points(
        np.concatenate(pooled_scores), np.concatenate(pooled_labels)
    )
    reporting.write_roc_csv(out_dir / "roc.csv", thresholds, fpr, tpr)
    (out_dir / "report.md").write_text(
        reporting.render_markdown_table(args.layout, [row]), encoding="utf-8"
    )
    print(
        f"{args.layout}: sen={report.sen:.4f} spe={report.spe:.4f} acc={report.acc:.4f} "
        f"auc={report.auc:.4f} mcc={report.mcc:.4f} ({report.aggregation})"
    )
    print(f"evaluation written to {out_dir}")
    return 0


def cmd_selftest(args, extra: list[str]) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments: {extra}")
    results = run_selftest(verbose=True)
    return 0 if all(r.passed for r in results) else 1


def cmd_report(args, extra: list[str]) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments: {extra}")
    rows = []
    for csv_path in args.csv:
        rows.extend(
            r for r in reporting.read_metrics_csv(csv_path)
            if r not in reporting.BASELINES[args.dataset]
        )
    text = reporting.render_markdown_table(args.dataset, rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drnet", description="Retinal vessel segmentation for SLO images"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training protocol")
    p_train.add_argument("--config", default=None, help="key = value config file")
    p_train.set_defaults(func=cmd_train)

    p_pred = sub.add_parser("predict", help="segment one image with a checkpoint")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--image", required=True)
    p_pred.add_argument("--out", required=True)
    p_pred.add_argument("--gt", default=None, help="optional annotation for the panel image")
    p_pred.add_argument("--threshold", type=float, default=0.5)
    p_pred.add_argument("--raw", action="store_true", help="also dump the float32 map as .npy")
    p_pred.set_defaults(func=cmd_predict)

    p_eval = sub.add_parser("evaluate", help="compute metrics over a dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data-root", dest="data_root", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--layout", choices=("iostar", "rcslo"), default="iostar")
    p_eval.add_argument("--subset", choices=("test", "all"), default="test",
                        help="iostar: evaluate held-out test images or the whole set")
    p_eval.add_argument("--train-count", dest="train_count", type=int, default=20)
    p_eval.add_argument("--threshold", type=float, default=0.5)
    p_eval.add_argument("--fov", action="store_true", help="restrict metrics to the FOV mask")
    p_eval.add_argument("--aggregation", choices=metrics_mod.AGGREGATION_MODES,
                        default="pooled")
    p_eval.set_defaults(func=cmd_evaluate)

    p_self = sub.add_parser("selftest", help="run the built-in oracle suites")
    p_self.set_defaults(func=cmd_selftest)

    p_rep = sub.add_parser("report", help="render a markdown comparison table")
    p_rep.add_argument("--csv", nargs="*", default=[], help="metrics CSVs to merge in")
    p_rep.add_argument("--dataset", choices=("iostar", "rcslo"), default="iostar")
    p_rep.add_argument("--out", default=None)
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        return args.func(args, extra)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DrnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
