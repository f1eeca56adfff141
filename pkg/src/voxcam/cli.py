"""``voxcam`` command-line entry point.

Every subcommand writes a JSON snapshot of its arguments and effective
configuration next to its outputs. Set ``VOXCAM_THREADS`` to cap the BLAS
thread pool.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import metrics, pipeline
from .gradcam import gradcam
from .nn import load_checkpoint, predict
from .roi import ThresholdConfig, extract_roi, make_mask
from .volume import (
    PhantomSpec,
    Volume3D,
    generate_phantom_dataset,
    load_dataset,
    load_volume,
    normalize_intensity,
    resize_trilinear,
    save_dataset,
    save_volume,
    subject_split,
)



class CommandError(Exception):
    """A user-facing failure reported as one line on stderr."""


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _snapshot(path: Path, args: argparse.Namespace, **extra) -> None:
    flags = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dump({"command": args.command, "flags": flags, **extra}))


def _beside(path: Path) -> Path:
    return path.with_name(path.name + ".cmd.json")


def _load_config(args) -> pipeline.ExperimentConfig:
    if not args.config:
        raise CommandError("--config is required")
    try:
        cfg = pipeline.ExperimentConfig.load(args.config)
    except (TypeError, KeyError, json.JSONDecodeError) as e:
        raise CommandError(f"invalid config {args.config}: {e}") from e
    changes = {}
    if getattr(args, "out", None):
        changes["out_dir"] = args.out
    if args.seed is not None:
        changes.update(
            data_seed=args.seed,
            split_seed=args.seed,
            stage1=dataclasses.replace(cfg.stage1, seed=args.seed),
            stage2=dataclasses.replace(cfg.stage2, seed=args.seed + 100),
        )
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _load_spec(path) -> PhantomSpec:
    if not path:
        return PhantomSpec()
    try:
        return PhantomSpec(**json.loads(Path(path).read_text()))
    except (TypeError, json.JSONDecodeError) as e:
        raise CommandError(f"invalid phantom spec {path}: {e}") from e


def _model_input(model, vol: Volume3D) -> np.ndarray:
    """Resize to the model's input grid and min-max normalize, as in training."""
    dims = model.config.input_dims
    if vol.dims != dims:
        vol = resize_trilinear(vol, dims)
    return normalize_intensity(vol).data


def write_pgm_slices(values: np.ndarray, out_dir: Path, stem: str = "slice") -> list[Path]:
    """One 8-bit binary PGM per z-slice; values are expected in [0, 1]."""
    out_dir.mkdir(parents=True, exist_ok=True)
    img = np.round(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)
    paths = []
    for z in range(img.shape[2]):
        # rows run along y, columns along x
        plane = np.ascontiguousarray(img[:, :, z].T)
        p = out_dir / f"{stem}_{z:03d}.pgm"
        p.write_bytes(f"P5\n{plane.shape[1]} {plane.shape[0]}\n255\n".encode() + plane.tobytes())
        paths.append(p)
    return paths


# -- subcommands ------------------------------------------------------------

def cmd_gen_data(args) -> None:
    spec = _load_spec(args.spec)
    seed = 7 if args.seed is None else args.seed
    out = Path(args.out or "data")
    ds, anns = generate_phantom_dataset(spec, seed)
    save_dataset(ds, out, anns)
    _snapshot(out / "command.json", args, seed=seed, phantom=spec.to_dict())
    print(f"wrote {len(ds.subjects)} subjects to {out}")


def cmd_split(args) -> None:
    cfg = _load_config(args)
    if cfg.phantom is not None:
        ds, _ = generate_phantom_dataset(cfg.phantom, cfg.data_seed)
    else:
        ds, _ = load_dataset(cfg.dataset)
    plan = subject_split(ds, cfg.test_frac, cfg.k, cfg.split_seed)
    out = Path(args.out or "splits.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(plan.to_json())
    _snapshot(_beside(out), args, config=cfg.to_dict())
    print(f"wrote {out}: {len(plan.test_subject_ids)} test subjects, {len(plan.folds)} folds")


def cmd_train(args) -> None:
    cfg = _load_config(args)
    run_dir = pipeline.open_run_dir(cfg)
    data = pipeline.prepare_data(cfg)
    plan = pipeline.load_or_make_split(run_dir, data, cfg)
    if not 0 <= args.fold < len(plan.folds):
        raise CommandError(f"--fold must be in [0, {len(plan.folds)})")
    fold_dir = run_dir / f"fold-{args.fold}"
    fold_dir.mkdir(exist_ok=True)
    _, val = pipeline.stage1_for_fold(args.fold, fold_dir, data, plan, cfg)
    _snapshot(fold_dir / "command-train.json", args, config=cfg.to_dict())
    print(f"fold {args.fold}: val accuracy {val['accuracy']:.4f} -> {fold_dir / 'stage1.ckpt'}")


def cmd_explain(args) -> None:
    if not (args.ckpt and args.vol):
        raise CommandError("explain needs --ckpt and --vol")
    model, _, _ = load_checkpoint(args.ckpt)
    x = _model_input(model, load_volume(args.vol))
    c = predict(model, x)[0] if args.cls is None else args.cls
    heat = gradcam(model, x, c)
    out = Path(args.out or "heatmap.vol3")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(Volume3D(heat.values), out)
    if args.pgm:
        write_pgm_slices(heat.values, Path(args.pgm))
    _snapshot(_beside(out), args, cam_class=int(c))
    print(f"wrote {out} (class {c})")


def cmd_extract_roi(args) -> None:
    if not (args.ckpt and args.vol):
        raise CommandError("extract-roi needs --ckpt and --vol")
    thr = ThresholdConfig(args.a, args.band)
    model, _, _ = load_checkpoint(args.ckpt)
    x = _model_input(model, load_volume(args.vol))
    c = predict(model, x)[0] if args.cls is None else args.cls
    heat = gradcam(model, x, c)
    mask = make_mask(x, heat, thr)
    roi = extract_roi(mask, Volume3D(x), source_id=str(args.vol), a=thr.a, band=thr.band, cam_class=int(c))
    out = Path(args.out or "roi.vol3")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(roi.volume, out)
    mask_path = out.with_name(out.stem + "_mask.vol3")
    save_volume(Volume3D(mask), mask_path)
    _snapshot(_beside(out), args, cam_class=int(c), kept_voxels=int(mask.sum()))
    print(f"wrote {out} and {mask_path} ({int(mask.sum())} voxels kept)")


def _run(cfg: pipeline.ExperimentConfig, args) -> pipeline.RunRecord:
    rec = pipeline.kfold_run(cfg)
    _snapshot(Path(cfg.out_dir) / f"command-{args.command}.json", args, config=cfg.to_dict())
    return rec


def cmd_pipeline(args) -> None:
    rec = _run(_load_config(args), args)
    print(f"stage 1 accuracy {rec.stage1_average.accuracy:.4f}, "
          f"stage 2 accuracy {rec.stage2_average.accuracy:.4f} -> {rec.run_dir}")


def cmd_sweep(args) -> None:
    cfg = _load_config(args)
    if args.a:
        cfg = dataclasses.replace(cfg, sweep=[ThresholdConfig(a, args.band) for a in args.a])
    rec = _run(cfg, args)
    sys.stdout.write(pipeline.sweep_csv(rec.sweep_rows))


def cmd_report(args) -> None:
    run = Path(args.run or (_load_config(args).out_dir if args.config else ""))
    if not (run / "summary.json").exists():
        raise CommandError(f"no summary.json in {run or '.'}; pass --run or --config")
    summary = json.loads((run / "summary.json").read_text())
    out = Path(args.out) if args.out else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    for stage in ("stage1", "stage2"):
        (out / f"table_{stage}.csv").write_text(metrics.table_csv(summary[stage]["folds"]))
    rows = ["fold,tp,fp,fn,tn"]
    for path in sorted(run.glob("fold-*/report.json")):
        rep = json.loads(path.read_text())
        cm = rep["stage2"]["confusion"]
        rows.append(f"{rep['fold']},{cm['tp']},{cm['fp']},{cm['fn']},{cm['tn']}")
    cm = summary["stage2"]["average"]["confusion"]
    rows.append(f"Average,{cm['tp']},{cm['fp']},{cm['fn']},{cm['tn']}")
    (out / "confusion_stage2.csv").write_text("\n".join(rows) + "\n")
    (out / "sweep.csv").write_text(pipeline.sweep_csv(summary["sweep"]))
    _snapshot(out / "command.json", args)
    sys.stdout.write(metrics.table_csv(summary["stage2"]["folds"]))


COMMANDS = {
    "gen-data": (cmd_gen_data, "write a phantom dataset with manifest and annotations"),
    "split": (cmd_split, "write the subject-level test/fold split"),
    "train": (cmd_train, "train the whole-volume model of one fold"),
    "explain": (cmd_explain, "Grad-CAM heatmap of one volume"),
    "extract-roi": (cmd_extract_roi, "threshold a heatmap into an ROI volume and mask"),
    "pipeline": (cmd_pipeline, "run every fold, the sweep and the overlap report"),
    "sweep": (cmd_sweep, "add threshold-sweep cells to a run"),
    "report": (cmd_report, "export fold tables and confusion matrices of a run"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxcam", description="Grad-CAM ROI pipeline for 3-D volumes")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, (func, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        if name == "gen-data":
            p.add_argument("--spec", help="phantom spec JSON (defaults if omitted)")
        if name == "train":
            p.add_argument("--fold", type=int, default=0)
        if name in ("explain", "extract-roi"):
            p.add_argument("--ckpt")
            p.add_argument("--vol")
            p.add_argument("--class", dest="cls", type=int, help="class to explain (default: predicted)")
        if name == "explain":
            p.add_argument("--pgm", help="directory for per-slice PGM images")
        if name in ("extract-roi", "sweep"):
            p.add_argument("--a", type=float, action="append" if name == "sweep" else "store",
                           default=None if name == "sweep" else 0.7)
            p.add_argument("--band", choices=("top", "low"), default="top")
        if name == "report":
            p.add_argument("--run", help="run directory (default: out_dir of --config)")
    return parser


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    threads = os.environ.get("VOXCAM_THREADS")
    try:
        limit = int(threads) if threads else None
    except ValueError:
        print(f"voxcam: error: VOXCAM_THREADS must be an integer, got {threads!r}", file=sys.stderr)
        return 1
    try:
        with threadpool_limits(limits=limit):
            args.func(args)
    except (CommandError, ValueError, OSError, KeyError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"voxcam: error: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
