"""Command-line entry point: phantom, train, eval, ablate, plot."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .config import SUITES, ModelConfig, TrainConfig, load_flat_config, variant
from .data import Layout, Subject, load_subject, save_subject
from .errors import CKDError, ConfigError, IoError
from .utils import DETERMINISTIC_ENV, env_deterministic, set_deterministic

log = logging.getLogger("ckd_transbts")

INDEX_FILE = "index.json"
MANIFEST_FILE = "manifest.json"


def write_manifest(out_dir: Path, command: str, config: dict, seed, artifacts: Sequence[Path]) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": sorted(str(Path(a).name) for a in artifacts),
        "version": __version__,
        "deterministic": env_deterministic(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path = Path(out_dir) / MANIFEST_FILE
    try:
        path.write_text(json.dumps(manifest, indent=2, default=str))
    except OSError as exc:
        raise IoError(f"cannot write manifest {path}: {exc}") from exc
    return path


def load_dataset(data_dir, layout: Layout = Layout.PORTABLE, split: str = "subjects") -> List[Subject]:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise IoError(f"data directory {data_dir} does not exist")
    index = data_dir / INDEX_FILE
    if index.exists():
        ids = json.loads(index.read_text()).get(split)
        if ids is None:
            return []
    else:
        ids = sorted(p.name for p in data_dir.iterdir() if p.is_dir())
    return [load_subject(data_dir / i, layout) for i in ids]


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args) -> int:
    from .phantom import PhantomSpec, phantom_dataset

    out = Path(args.out)
    spec = PhantomSpec(dims=(args.dims,) * 3, n_lesions=args.lesions,
                       radius_range=(args.radius_min, args.radius_max), enhancement_gain=args.gain,
                       noise_sigma=args.noise, seed=args.seed)
    subjects = phantom_dataset(args.n, spec)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for s in subjects:
            written.append(save_subject(s, out / s.id))
        index = out / INDEX_FILE
        index.write_text(json.dumps({"subjects": [s.id for s in subjects]}, indent=2))
    except OSError as exc:
        raise IoError(str(exc)) from exc
    write_manifest(out, "phantom", asdict(spec), args.seed, written + [index])
    print(f"wrote {len(subjects)} phantoms to {out}")
    return 0


def _train_overrides(args) -> dict:
    return {
        "epochs": args.epochs,
        "base_lr": args.lr,
        "base_embed": args.base_embed,
        "crop_size": args.crop_size,
        "seed": args.seed,
        "max_steps": args.max_steps,
        "val_every": args.val_every,
        "augment": False if args.no_augment else None,
    }


def cmd_train(args) -> int:
    from .training import train

    model_cfg, train_cfg = load_flat_config(args.config, _train_overrides(args))
    subjects = load_dataset(args.data, Layout(args.layout))
    val = load_dataset(args.data, Layout(args.layout), "val") or subjects
    out = Path(args.out)
    train(model_cfg, train_cfg, subjects, val, out_dir=out)
    artifacts = [out / "best.ckpt", out / "last.ckpt", out / "log.jsonl"]
    write_manifest(out, "train", {**model_cfg.to_dict(), **train_cfg.to_dict()}, train_cfg.seed, artifacts)
    print(f"checkpoint: {out / 'best.ckpt'}")
    return 0


def save_prediction(masks, path: Path) -> None:
    np.ascontiguousarray(masks.to_label(), dtype=np.uint8).tofile(path)


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .metrics import emit_report, evaluate
    from .training import model_from_checkpoint

    expected = None
    if args.config:
        expected, _ = load_flat_config(args.config)
    ckpt = load_checkpoint(args.checkpoint, expected)
    model = model_from_checkpoint(ckpt)
    subjects = load_dataset(args.data, Layout(args.layout))
    predictions = {} if args.save_predictions else None
    report = evaluate(model, subjects, ckpt.model_cfg.crop_size, args.overlap, args.blend,
                      ckpt.model_cfg.grouping, name=args.name or Path(args.checkpoint).stem,
                      predictions=predictions)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    paths = [emit_report(report, out.with_suffix(".csv"), "csv"), emit_report(report, out.with_suffix(".json"), "json")]
    if predictions is not None:
        pred_dir = out.parent / f"{out.name}_predictions"
        pred_dir.mkdir(exist_ok=True)
        for sid, masks in predictions.items():
            save_prediction(masks, pred_dir / f"{sid}.u8raw")
            paths.append(pred_dir / f"{sid}.u8raw")
    write_manifest(out.parent, "eval", {"checkpoint": str(args.checkpoint), "overlap": args.overlap,
                                        "blend": args.blend, **ckpt.model_cfg.to_dict()},
                   ckpt.model_cfg.seed, paths)
    print(json.dumps(report.row(), indent=2))
    return 0


ABLATION_COLUMNS = ["preset", "model", "fusion", "calibration", "hybrid", "grouping", "params",
                    "dice_et", "dice_tc", "dice_wt", "dice_mean", "hd95_et", "hd95_tc", "hd95_wt", "hd95_mean"]


def run_ablation(suite: str, subjects, out_dir: Path, base: ModelConfig, train_cfg: TrainConfig,
                 val=None) -> List[dict]:
    from .metrics import evaluate, write_rows
    from .model import build, param_count
    from .training import model_from_checkpoint, train

    suite = suite.upper()
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    rows = []
    for preset in SUITES[suite]:
        cfg = variant(preset, base)
        result = train(cfg, train_cfg, subjects, None, out_dir=out_dir / preset.value)
        model = model_from_checkpoint(result.best)
        report = evaluate(model, val or subjects, cfg.crop_size, train_cfg.overlap, train_cfg.blend,
                          cfg.grouping, name=preset.value)
        rows.append({"preset": preset.name, "fusion": cfg.fusion, "calibration": cfg.calibration,
                     "hybrid": cfg.hybrid, "grouping": cfg.grouping.value,
                     "params": param_count(build(cfg)).total, **report.row()})
        log.info("%s: %s", preset.name, report.aggregates)
    write_rows(rows, out_dir / "ablation.csv", ABLATION_COLUMNS)
    return rows


def cmd_ablate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    subjects = load_dataset(args.data, Layout(args.layout))
    if not subjects:
        raise IoError(f"no subjects in {args.data}")
    base = ModelConfig(base_embed=args.base_embed, crop_size=args.crop_size, seed=args.seed)
    epochs = max(1, math.ceil(args.steps / len(subjects)))
    train_cfg = TrainConfig(base_lr=args.lr, epochs=epochs, max_steps=args.steps, crop_size=args.crop_size,
                            seed=args.seed, augment=not args.no_augment)
    run_ablation(args.suite, subjects, out, base, train_cfg)
    write_manifest(out, "ablate", {"suite": args.suite, **base.to_dict(), **train_cfg.to_dict()}, args.seed,
                   [out / "ablation.csv"])
    print(f"wrote {out / 'ablation.csv'}")
    return 0


# ED green, ET yellow, NCR red
OVERLAY_COLORS = {2: (0, 255, 0), 4: (255, 255, 0), 1: (255, 0, 0)}


def overlay_slice(image: np.ndarray, label: Optional[np.ndarray], alpha: float = 0.5) -> np.ndarray:
    """RGB uint8 overlay of a 2D label slice on a 2D grayscale slice."""
    img = image.astype(np.float64)
    lo, hi = float(img.min()), float(img.max())
    gray = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo) * 255.0
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    if label is not None:
        for code, color in OVERLAY_COLORS.items():
            m = label == code
            rgb[m] = (1 - alpha) * rgb[m] + alpha * np.asarray(color, dtype=np.float64)
    return np.round(rgb).clip(0, 255).astype(np.uint8)


def cmd_plot(args) -> int:
    from PIL import Image

    from .data import Modality, check_label

    subject = load_subject(args.subject, Layout(args.layout))
    label = None
    if args.prediction:
        try:
            raw = np.fromfile(args.prediction, dtype=np.uint8)
        except OSError as exc:
            raise IoError(str(exc)) from exc
        label = check_label(raw.reshape(subject.dims))
    elif args.ground_truth:
        label = subject.label
    z = subject.dims[2] // 2 if args.slice is None else args.slice
    image = subject.volume(Modality(args.modality)).voxels[:, :, z]
    rgb = overlay_slice(image, None if label is None else label[:, :, z], args.alpha)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.ascontiguousarray(np.transpose(rgb, (1, 0, 2)))).save(out, format="PNG")
    except OSError as exc:
        raise IoError(str(exc)) from exc
    write_manifest(out.parent, "plot", {"subject": str(args.subject), "prediction": args.prediction,
                                        "slice": z, "modality": args.modality}, None, [out])
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ckd-transbts", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--deterministic", action="store_true", help="same as CKD_DETERMINISTIC=1")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--dims", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lesions", type=int, default=1)
    p.add_argument("--radius-min", type=float, default=None)
    p.add_argument("--radius-max", type=float, default=None)
    p.add_argument("--gain", type=float, default=0.8)
    p.add_argument("--noise", type=float, default=0.03)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    def add_data(p):
        p.add_argument("--data", required=True)
        p.add_argument("--layout", default="portable", choices=[l.value for l in Layout])

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None)
    add_data(p)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--base-embed", type=int)
    p.add_argument("--crop-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--val-every", type=int)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    add_data(p)
    p.add_argument("--out", required=True, help="report path prefix (.csv and .json are written)")
    p.add_argument("--config", default=None, help="expected architecture; mismatch is an error")
    p.add_argument("--overlap", type=float, default=0.6)
    p.add_argument("--blend", default="gaussian", choices=["gaussian", "constant"])
    p.add_argument("--name", default=None)
    p.add_argument("--save-predictions", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate every row of an ablation table")
    p.add_argument("--suite", required=True, type=str.upper, choices=sorted(SUITES))
    add_data(p)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--base-embed", type=int, default=8)
    p.add_argument("--crop-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="axial slice with region overlay")
    p.add_argument("--subject", required=True)
    p.add_argument("--layout", default="portable", choices=[l.value for l in Layout])
    p.add_argument("--prediction", default=None, help="u8raw label file written by eval --save-predictions")
    p.add_argument("--ground-truth", action="store_true", help="overlay the subject label instead")
    p.add_argument("--slice", type=int, default=None)
    p.add_argument("--modality", default="t2flair")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.deterministic:
        os.environ[DETERMINISTIC_ENV] = "1"
    if env_deterministic():
        set_deterministic(True)
    if args.command == "phantom":
        lo = args.radius_min if args.radius_min is not None else 0.16 * args.dims
        hi = args.radius_max if args.radius_max is not None else 0.22 * args.dims
        args.radius_min, args.radius_max = lo, hi
    try:
        return args.func(args)
    except CKDError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
