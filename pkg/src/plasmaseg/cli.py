"""Command-line entry point: ``plasmaseg <command> [options]``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 training
divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from . import __version__
from .config import (
    config_hash,
    cytoplasm_checkpoint,
    deeplab_config,
    load_config,
    scale_config,
    synthetic_spec,
    train_spec,
    unet_config,
)
from .core import ConfigError, DataError, DivergenceError
from .cytoplasm_net import load_cytoplasm, train_cytoplasm_scale
from .data_io import generate_synthetic_scene, load_dataset, load_predictions, save_predictions, write_dataset
from .evaluation import mean_iou_score, write_report
from .nucleus_net import load_nucleus, train_nucleus
from .pipeline import Segmenter
from .plotting import plot_loss_history, plot_per_image_iou, plot_ratio_histogram
from .scale_analysis import compute_ratio_histogram, derive_scales, detect_peaks
from .training import CheckpointError, file_sha256

log = logging.getLogger("plasmaseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


def write_manifest(out_dir: Path, command: str, cfg: dict, seed: int | None = None,
                   checkpoints: Sequence[Path] = (), extra: dict | None = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "plasmaseg_version": __version__,
        "torch_version": torch.__version__,
        "numpy_version": np.__version__,
        "python": platform.python_version(),
        "config_sha256": config_hash(cfg),
        "config": cfg,
        "seed": seed,
        "checkpoints": {str(p): file_sha256(p) for p in checkpoints if Path(p).exists()},
        "note": "CPU float32 training; bit-identical reruns need the same torch build and thread count",
        **(extra or {}),
    }
    path = out_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _train_dirs(cfg, args) -> list[str]:
    dirs = args.data or cfg["data"]["train"]
    return [dirs] if isinstance(dirs, str) else list(dirs)


def _load_many(dirs: Sequence[str], label_map) -> list:
    records = []
    for d in dirs:
        records.extend(load_dataset(d, label_map))
    return records


def cmd_gen_synthetic(cfg, args) -> None:
    s = cfg["synthetic"]
    n_images = args.n_images if args.n_images is not None else s["n_images"]
    seed = args.seed if args.seed is not None else s["seed"]
    lo, hi = (s["n_cells"], s["n_cells"]) if isinstance(s["n_cells"], int) else s["n_cells"]
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_images):
        n_cells = int(rng.integers(lo, hi + 1))
        spec = synthetic_spec(cfg, n_cells, seed * 100003 + i)
        records.append(generate_synthetic_scene(spec, sample_id=f"{args.prefix}{i:04d}"))
    out = Path(args.out)
    write_dataset(records, out)
    write_manifest(out, "gen-synthetic", cfg, seed, extra={"n_images": n_images})
    print(f"wrote {n_images} scenes to {out}")


def cmd_train_nucleus(cfg, args) -> None:
    records = _load_many(_train_dirs(cfg, args), cfg["data"]["label_map"])
    ckpt = Path(args.checkpoint or cfg["nucleus"]["checkpoint"])
    spec = train_spec(cfg, "nucleus", str(ckpt))
    _, history = train_nucleus(records, spec, unet_config(cfg))
    _write_loss(ckpt.with_suffix(".loss"), history)
    write_manifest(ckpt.parent, "train-nucleus", cfg, spec.rng_seed, [ckpt])
    print(f"nucleus model: {ckpt} final loss {history[-1]:.4f}")


def cmd_train_cytoplasm(cfg, args) -> None:
    if args.scale is None:
        raise UsageError("train-cytoplasm requires --scale")
    records = _load_many(_train_dirs(cfg, args), cfg["data"]["label_map"])
    sc = scale_config(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else cytoplasm_checkpoint(cfg, args.scale)
    spec = train_spec(cfg, "cytoplasm", str(ckpt))
    _, history = train_cytoplasm_scale(
        records, args.scale, spec, deeplab_config(cfg), sc.network_input_side, sc.margin_factor
    )
    _write_loss(ckpt.with_suffix(".loss"), history)
    write_manifest(ckpt.parent, f"train-cytoplasm-{args.scale:g}", cfg, spec.rng_seed, [ckpt])
    print(f"cytoplasm model (scale {args.scale:g}): {ckpt} final loss {history[-1]:.4f}")


def _write_loss(stem: Path, history: Sequence[float]) -> None:
    stem.with_suffix(".loss.json").write_text(json.dumps({"loss": history}) + "\n")
    plot_loss_history(history, stem.with_suffix(".loss.png"))


def cmd_analyze_scales(cfg, args) -> None:
    a = cfg["analysis"]
    dirs = [args.data] if args.data else _train_dirs(cfg, args)
    records = _load_many(dirs, cfg["data"]["label_map"])
    hist = compute_ratio_histogram(records, a["bin_width"])
    peaks = detect_peaks(hist, a["smoothing_window"], a["min_prominence"]) if hist.counts.size else []
    scales = derive_scales(peaks, a["headroom"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plot_ratio_histogram(hist, peaks, scales, out / "ratio_histogram.png",
                         title=f"area ratio ({args.split}, n={hist.samples.size})")
    lines = [f"split\t{args.split}", f"n_instances\t{hist.samples.size}", "", "peak_ratio\tscale"]
    lines += [f"{p:.4f}\t{s:.4f}" for p, s in zip(peaks, derive_scales(peaks, a["headroom"], dedup=-1))]
    (out / "peaks.txt").write_text("\n".join(lines) + "\n")
    fragment = {"scales": {"scales": [round(s, 4) for s in scales]}} if scales else {}
    (out / "scales.yaml").write_text(_yaml_dump(fragment))
    write_manifest(out, "analyze-scales", cfg)
    print(f"{len(peaks)} peak(s) {['%.2f' % p for p in peaks]} -> scales {['%.3f' % s for s in scales]}")


def _yaml_dump(obj: Any) -> str:
    import yaml

    return yaml.safe_dump(obj, sort_keys=False)


def build_segmenter(cfg) -> tuple[Segmenter, list[Path]]:
    sc = scale_config(cfg)
    nuc_ckpt = Path(cfg["nucleus"]["checkpoint"])
    nucleus = load_nucleus(nuc_ckpt, unet_config(cfg))
    models, ckpts = [], [nuc_ckpt]
    for scale in sc.scales:
        path = cytoplasm_checkpoint(cfg, scale)
        if not path.exists():
            raise CheckpointError(f"missing cytoplasm checkpoint for scale {scale:g}: {path}")
        model, _, side = load_cytoplasm(path, scale, deeplab_config(cfg), sc.scales)
        if side != sc.network_input_side:
            raise CheckpointError(f"{path} expects {side}px crops, config has {sc.network_input_side}")
        models.append(model)
        ckpts.append(path)
    inst = cfg["instances"]
    return Segmenter(nucleus, models, sc, inst["threshold"], inst["min_area"]), ckpts


def cmd_infer(cfg, args) -> None:
    data = args.data or cfg["data"]["test"]
    records = load_dataset(data, cfg["data"]["label_map"])
    segmenter, ckpts = build_segmenter(cfg)
    workers = args.workers or cfg["infer"]["workers"]
    preds = segmenter.run(records, workers=workers)
    out = Path(args.out)
    save_predictions([p for ps in preds.values() for p in ps], out)
    write_manifest(out, "infer", cfg, None, ckpts,
                   extra={"n_images": len(records), "n_instances": sum(map(len, preds.values()))})
    print(f"wrote {sum(map(len, preds.values()))} instance predictions for {len(records)} images to {out}")


def cmd_evaluate(cfg, args) -> None:
    data = args.data or cfg["data"]["test"]
    records = load_dataset(data, cfg["data"]["label_map"])
    gt = {r.sample_id: r.fused_masks() for r in records}
    pred: dict[str, list] = {}
    for p in load_predictions(args.pred):
        pred.setdefault(p.sample_id, []).append(p)
    variant = args.variant or cfg["evaluation"]["variant"]
    result = mean_iou_score(gt, pred, variant)
    report = Path(args.out)
    write_report(result, report)
    plot_per_image_iou(result, report.with_suffix(".png"))
    write_manifest(report.parent, "evaluate", cfg, extra={"mean_iou": result.score, "variant": variant})
    print(f"mIoU ({variant}) = {result.score:.4f} over {result.n_instances} instances")


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train-nucleus": cmd_train_nucleus,
    "train-cytoplasm": cmd_train_cytoplasm,
    "analyze-scales": cmd_analyze_scales,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plasmaseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML config (default: $PLASMASEG_CONFIG)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, e.g. nucleus.train.epochs=30")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--prefix", default="synth")

    for name in ("train-nucleus", "train-cytoplasm"):
        p = sub.add_parser(name, parents=[common], help=f"{name.split('-')[1]} network training")
        p.add_argument("--data", action="append", help="dataset root (repeatable; default data.train)")
        p.add_argument("--checkpoint", help="output checkpoint path")
        if name == "train-cytoplasm":
            p.add_argument("--scale", type=float)

    p = sub.add_parser("analyze-scales", parents=[common], help="area-ratio histogram and scale derivation")
    p.add_argument("--data", help="dataset root (default data.train)")
    p.add_argument("--split", default="train", help="label recorded in the report")
    p.add_argument("--out", required=True)

    p = sub.add_parser("infer", parents=[common], help="run the full two-stage pipeline")
    p.add_argument("--data", help="dataset root (default data.test)")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="mean-IoU report")
    p.add_argument("--data", help="ground-truth dataset root (default data.test)")
    p.add_argument("--pred", required=True, help="prediction directory written by infer")
    p.add_argument("--out", required=True, help="report file")
    p.add_argument("--variant", choices=("best_match", "matched"))
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
