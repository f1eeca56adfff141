"""Two-stage experiment: whole-volume CNN -> Grad-CAM ROIs -> ROI CNN.

Run directory layout::

    config.json  splits.json  sweep.csv  overlap.csv  summary.json
    fold-K/stage1.ckpt  history.csv  stage2.ckpt  history_stage2.csv
           report.json  roc.csv
    fold-K/sweep/<tag>/stage2.ckpt  history.csv  report.json

``report.json`` files are written last, so a fold (or sweep cell) that has
one is complete and is skipped on resume.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .gradcam import gradcam_batch
from .nn import (
    ModelConfig,
    ModelParams,
    TrainConfig,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
    train,
)
from .roi import ThresholdConfig, apply_mask, kept_fraction, make_mask, overlap_csv, overlap_report
from .volume import (
    Dataset,
    PhantomSpec,
    RegionAnnotation,
    SplitPlan,
    Volume3D,
    center_slab,
    dataset_digest,
    generate_phantom_dataset,
    load_dataset,
    normalize_intensity,
    resize_trilinear,
    subject_split,
)

log = logging.getLogger(__name__)

DEFAULT_SWEEP = [(0.9, "top"), (0.8, "top"), (0.7, "top"), (0.6, "top"), (0.5, "top"), (0.7, "low")]


@dataclass
class PreprocessConfig:
    n_slices: int | None = None  # None keeps every slice
    target_dims: tuple[int, int, int] = (32, 32, 16)

    def __post_init__(self):
        self.target_dims = tuple(int(n) for n in self.target_dims)


@dataclass
class ExperimentConfig:
    out_dir: str = "run"
    phantom: PhantomSpec | None = field(default_factory=PhantomSpec)
    dataset: str | None = None
    data_seed: int = 7
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=3))
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=3, seed=100))
    threshold: ThresholdConfig = field(default_factory=ThresholdConfig)
    sweep: list[ThresholdConfig] = field(default_factory=lambda: [ThresholdConfig(a, b) for a, b in DEFAULT_SWEEP])
    test_frac: float = 0.1
    k: int = 5
    split_seed: int = 0
    min_overlap: float = 0.1

    def __post_init__(self):
        if (self.phantom is None) == (self.dataset is None):
            raise ValueError("exactly one of 'phantom' and 'dataset' must be given")
        # ROI volumes keep full dims, so both stages see the preprocessed dims
        if self.model.input_dims != self.preprocess.target_dims:
            self.model = dataclasses.replace(self.model, input_dims=self.preprocess.target_dims)

    def to_dict(self) -> dict:
        return {
            "out_dir": self.out_dir,
            "phantom": self.phantom.to_dict() if self.phantom else None,
            "dataset": self.dataset,
            "data_seed": self.data_seed,
            "preprocess": dataclasses.asdict(self.preprocess),
            "model": self.model.to_dict(),
            "stage1": self.stage1.to_dict(),
            "stage2": self.stage2.to_dict(),
            "threshold": dataclasses.asdict(self.threshold),
            "sweep": [dataclasses.asdict(t) for t in self.sweep],
            "test_frac": self.test_frac,
            "k": self.k,
            "split_seed": self.split_seed,
            "min_overlap": self.min_overlap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "phantom" in d:
            d["phantom"] = PhantomSpec(**d["phantom"]) if d["phantom"] is not None else None
        elif d.get("dataset"):
            d["phantom"] = None
        if "preprocess" in d:
            d["preprocess"] = PreprocessConfig(**d["preprocess"])
        if "model" in d:
            d["model"] = ModelConfig(**d["model"])
        for stage in ("stage1", "stage2"):
            if stage in d:
                d[stage] = TrainConfig(**d[stage])
        if "threshold" in d:
            d["threshold"] = ThresholdConfig(**d["threshold"])
        if "sweep" in d:
            d["sweep"] = [ThresholdConfig(**t) if isinstance(t, dict) else ThresholdConfig(*t) for t in d["sweep"]]
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        """Hash of everything that changes trained models; the sweep list only adds cells."""
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("sweep")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def full_scale_preset(cls, dataset: str, out_dir: str = "run") -> "ExperimentConfig":
        """Full-size settings: middle 32 slices resized to 128x128x32."""
        return cls(out_dir=out_dir, phantom=None, dataset=dataset,
                   preprocess=PreprocessConfig(n_slices=32, target_dims=(128, 128, 32)),
                   stage1=TrainConfig(epochs=50), stage2=TrainConfig(epochs=50, seed=100))


# -- data -------------------------------------------------------------------

def preprocess_volume(vol: Volume3D, pre: PreprocessConfig) -> Volume3D:
    if pre.n_slices is not None:
        vol = center_slab(vol, pre.n_slices)
    return normalize_intensity(resize_trilinear(vol, pre.target_dims))


def _preprocess_annotation(ann: RegionAnnotation, pre: PreprocessConfig) -> RegionAnnotation:
    vol = ann.mask
    if pre.n_slices is not None:
        vol = center_slab(vol, pre.n_slices)
    vol = resize_trilinear(vol, pre.target_dims)
    return RegionAnnotation(ann.name, Volume3D((vol.data >= 0.5).astype(np.float32)))


@dataclass
class PreparedData:
    dataset: Dataset
    annotations: list[RegionAnnotation]
    volumes: dict[str, np.ndarray]  # subject id -> (n_scans, X, Y, Z)
    digest: str

    def arrays(self, ids):
        """Stack every scan of ``ids``: returns (x, labels, owner ids)."""
        lookup = self.dataset.by_id()
        xs, ys, owners = [], [], []
        for sid in ids:
            vols = self.volumes[sid]
            xs.append(vols)
            ys.extend([lookup[sid].label] * len(vols))
            owners.extend([sid] * len(vols))
        return np.concatenate(xs), np.asarray(ys, dtype=np.int64), owners


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    if cfg.phantom is not None:
        ds, anns = generate_phantom_dataset(cfg.phantom, cfg.data_seed)
    else:
        ds, anns = load_dataset(cfg.dataset)
    volumes = {
        s.id: np.stack([preprocess_volume(v, cfg.preprocess).data for v in s.scans])
        for s in ds.subjects
    }
    anns = [_preprocess_annotation(a, cfg.preprocess) for a in anns]
    return PreparedData(ds, anns, volumes, dataset_digest(ds))


# -- stages -----------------------------------------------------------------

def _seeded(tc: TrainConfig, fold: int) -> TrainConfig:
    return dataclasses.replace(tc, seed=tc.seed + 1000 * fold)


def _report(model: ModelParams, x, y, fold=None):
    probs = predict_proba(model, x)
    preds = probs.argmax(axis=1)
    return metrics.evaluate(preds, probs[:, 1], y, fold), preds


def run_stage1(fold: int, data: PreparedData, plan: SplitPlan, cfg: ExperimentConfig):
    """Train the whole-volume model of one fold; returns (model, history, val_report)."""
    train_ids, val_ids = plan.folds[fold]
    x_tr, y_tr, _ = data.arrays(train_ids)
    x_va, y_va, _ = data.arrays(val_ids)
    model, hist = train(cfg.model, _seeded(cfg.stage1, fold), (x_tr, y_tr), (x_va, y_va))
    val_report, _ = _report(model, x_va, y_va, fold)
    return model, hist, val_report


def extract_train_rois(stage1: ModelParams, x: np.ndarray, y: np.ndarray, threshold: ThresholdConfig):
    """ROIs of the samples stage 1 classifies correctly, Grad-CAM'd on their true class.

    Returns ``(roi_volumes, labels, kept_indices)``.
    """
    probs = predict_proba(stage1, x)
    correct = np.flatnonzero(probs.argmax(axis=1) == y)
    for label in (0, 1):
        if label in y and not np.any(y[correct] == label):
            raise ValueError(f"stage 1 classifies no class-{label} sample correctly; stage 2 is untrainable")
    heat = gradcam_batch(stage1, x[correct], y[correct])
    masks = make_mask(x[correct], heat, threshold)
    return apply_mask(masks, x[correct]), y[correct], correct


def run_stage2(fold: int, roi_train, roi_val, cfg: ExperimentConfig):
    """Fresh model with the stage-1 architecture, trained on ROI volumes."""
    model, hist = train(cfg.model, _seeded(cfg.stage2, fold), roi_train, roi_val)
    return model, hist


def test_rois(stage1: ModelParams, x: np.ndarray, threshold: ThresholdConfig):
    """Masks and ROI volumes of unlabeled scans, Grad-CAM'd on the stage-1 prediction."""
    pred = predict_proba(stage1, x).argmax(axis=1)
    heat = gradcam_batch(stage1, x, pred)
    masks = make_mask(x, heat, threshold)
    return masks, apply_mask(masks, x), heat


def evaluate_on_test(stage1: ModelParams, stage2: ModelParams, x: np.ndarray, y: np.ndarray,
                     threshold: ThresholdConfig, fold=None):
    """Stage-2 report on test ROIs; returns (report, masks, heatmaps)."""
    masks, rois, heat = test_rois(stage1, x, threshold)
    report, _ = _report(stage2, rois, y, fold)
    return report, masks, heat


# -- k-fold driver ----------------------------------------------------------

@dataclass
class RunRecord:
    run_dir: Path
    fold_reports: list[dict]
    stage1_average: metrics.EvalReport
    stage2_average: metrics.EvalReport
    sweep_rows: list[dict]
    overlap_rows: list[dict]
    summary: dict


def _write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def stage1_for_fold(fold: int, fold_dir: Path, data, plan, cfg):
    """Train and persist a fold's stage-1 model, or load it if already there."""
    ckpt = fold_dir / "stage1.ckpt"
    meta_path = fold_dir / "stage1_val.json"
    if ckpt.exists() and meta_path.exists():
        model, _, _ = load_checkpoint(ckpt)
        return model, json.loads(meta_path.read_text())
    log.info("fold %d: training stage 1", fold)
    model, hist, val_report = run_stage1(fold, data, plan, cfg)
    save_checkpoint(ckpt, model, hist.adam, {"stage": 1, "fold": fold, "best_epoch": hist.best_epoch})
    _write(fold_dir / "history.csv", hist.to_csv())
    val = _strip_roc(val_report.to_dict())
    _write(meta_path, _dump(val))
    return model, val


def _strip_roc(d: dict) -> dict:
    d = dict(d)
    d.pop("roc", None)
    return d


def _stage2_cell(fold: int, cell_dir: Path, stage1, data, plan, cfg, threshold: ThresholdConfig,
                 history_name: str = "history.csv") -> dict:
    """Train and evaluate stage 2 for one (fold, threshold); cached in ``report.json``."""
    report_path = cell_dir / "report.json"
    if report_path.exists():
        return json.loads(report_path.read_text())
    cell_dir.mkdir(parents=True, exist_ok=True)
    train_ids, val_ids = plan.folds[fold]
    x_tr, y_tr, own_tr = data.arrays(train_ids)
    x_va, y_va, own_va = data.arrays(val_ids)
    x_te, y_te, own_te = data.arrays(plan.test_subject_ids)

    log.info("fold %d: ROI extraction %s", fold, threshold.tag)
    r_tr, ry_tr, keep_tr = extract_train_rois(stage1, x_tr, y_tr, threshold)
    r_va, ry_va, keep_va = extract_train_rois(stage1, x_va, y_va, threshold)
    log.info("fold %d: training stage 2 on %d + %d ROIs", fold, len(r_tr), len(r_va))
    stage2, hist = run_stage2(fold, (r_tr, ry_tr), (r_va, ry_va), cfg)
    save_checkpoint(cell_dir / "stage2.ckpt", stage2, hist.adam,
                    {"stage": 2, "fold": fold, "a": threshold.a, "band": threshold.band,
                     "best_epoch": hist.best_epoch})
    _write(cell_dir / history_name, hist.to_csv())
    s1_test, _ = _report(stage1, x_te, y_te, fold)
    s2_test, masks, heat = evaluate_on_test(stage1, stage2, x_te, y_te, threshold, fold)
    s2_val, _ = _report(stage2, r_va, ry_va, fold)
    report = {
        "fold": fold,
        "threshold": {"a": threshold.a, "band": threshold.band},
        "stage1": s1_test.to_dict(),
        "stage2": s2_test.to_dict(),
        "stage2_val": _strip_roc(s2_val.to_dict()),
        "kept": {"train": int(len(keep_tr)), "train_of": int(len(x_tr)),
                 "val": int(len(keep_va)), "val_of": int(len(x_va))},
        "test_kept_fraction": float(np.mean([kept_fraction(h, threshold.a) for h in heat])),
        "test_mask_fraction": float(masks.mean()),
        "subjects": {
            "test": sorted(set(own_te)),
            "stage1_train": sorted(set(train_ids)),
            "stage1_val": sorted(set(val_ids)),
            "roi_sources": sorted(set(own_tr) | set(own_va)),
            "stage2_train": sorted({own_tr[i] for i in keep_tr}),
            "stage2_val": sorted({own_va[i] for i in keep_va}),
        },
    }
    _write(cell_dir / "roc.csv", metrics.roc_csv(s2_test.roc))
    _write(report_path, _dump(report))
    return report


def threshold_sweep(thresholds, folds, data, plan, cfg: ExperimentConfig, run_dir: Path,
                    stage1_models: dict, main_reports: dict | None = None) -> list[dict]:
    """One stage-2 run per (threshold, fold), all sharing each fold's stage-1 model.

    Returns one row per threshold with its metrics averaged over folds.
    """
    rows = []
    for thr in thresholds:
        reports = []
        for k in folds:
            if main_reports is not None and thr == cfg.threshold:
                rep = main_reports[k]
            else:
                cell = run_dir / f"fold-{k}" / "sweep" / thr.tag
                rep = _stage2_cell(k, cell, stage1_models[k], data, plan, cfg, thr)
            reports.append(metrics.EvalReport.from_dict(rep["stage2"]))
        avg, _, _ = metrics.aggregate_folds(reports)
        rows.append({"a": thr.a, "band": thr.band, "label": thr.label,
                     "accuracy": avg.accuracy, "precision": avg.precision,
                     "recall": avg.recall, "f1": avg.f1, "auc": avg.auc})
    return rows


def sweep_csv(rows) -> str:
    lines = ["a,band,label,accuracy,precision,recall,f1,auc"]
    for r in rows:
        lines.append(f"{r['a']},{r['band']},{r['label']},{r['accuracy']:.4f},{r['precision']:.4f},"
                     f"{r['recall']:.4f},{r['f1']:.4f},{r['auc']:.4f}")
    return "\n".join(lines) + "\n"


def load_or_make_split(run_dir: Path, data: PreparedData, cfg: ExperimentConfig) -> SplitPlan:
    path = run_dir / "splits.json"
    if path.exists():
        plan = SplitPlan.from_json(path.read_text())
    else:
        plan = subject_split(data.dataset, cfg.test_frac, cfg.k, cfg.split_seed)
        _write(path, plan.to_json())
    plan.check([s.id for s in data.dataset.subjects])
    return plan


def open_run_dir(cfg: ExperimentConfig) -> Path:
    """Create ``cfg.out_dir`` and record the config; refuses a dir trained under another config."""
    run_dir = Path(cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg_path = run_dir / "config.json"
    if cfg_path.exists():
        old = ExperimentConfig.load(cfg_path)
        if old.digest() != cfg.digest():
            raise ValueError(f"{run_dir} holds a run with a different config; use a fresh directory")
    _write(cfg_path, cfg.to_json())
    return run_dir


def kfold_run(cfg: ExperimentConfig, data: PreparedData | None = None) -> RunRecord:
    """Run every fold, the threshold sweep and the overlap report; resumable."""
    run_dir = open_run_dir(cfg)
    data = data or prepare_data(cfg)
    plan = load_or_make_split(run_dir, data, cfg)
    x_te, y_te, _ = data.arrays(plan.test_subject_ids)

    stage1_models, main, s1_val = {}, {}, {}
    test_masks, test_classes = [], []
    for k in range(len(plan.folds)):
        fold_dir = run_dir / f"fold-{k}"
        fold_dir.mkdir(exist_ok=True)
        stage1_models[k], s1_val[k] = stage1_for_fold(k, fold_dir, data, plan, cfg)
        main[k] = _stage2_cell(k, fold_dir, stage1_models[k], data, plan, cfg, cfg.threshold,
                               history_name="history_stage2.csv")
        if not (fold_dir / "stage2.ckpt").exists():
            raise RuntimeError(f"fold {k}: stage-2 checkpoint missing")
        masks, _, _ = test_rois(stage1_models[k], x_te, cfg.threshold)
        test_masks.extend(masks)
        test_classes.extend(y_te)

    s1_reports = [metrics.EvalReport.from_dict(main[k]["stage1"]) for k in sorted(main)]
    s2_reports = [metrics.EvalReport.from_dict(main[k]["stage2"]) for k in sorted(main)]
    s1_avg, _, s1_rows = metrics.aggregate_folds(s1_reports)
    s2_avg, _, s2_rows = metrics.aggregate_folds(s2_reports)

    sweep_rows = threshold_sweep(cfg.sweep, sorted(main), data, plan, cfg, run_dir, stage1_models, main)
    _write(run_dir / "sweep.csv", sweep_csv(sweep_rows))

    overlap_rows = overlap_report(test_masks, data.annotations, cfg.min_overlap, test_classes,
                                  data.dataset.class_names) if data.annotations else []
    _write(run_dir / "overlap.csv", overlap_csv(overlap_rows))

    summary = {
        "config_digest": cfg.digest(),
        "dataset_digest": data.digest,
        "threshold": {"a": cfg.threshold.a, "band": cfg.threshold.band},
        "stage1": {"folds": s1_rows, "average": _strip_roc(s1_avg.to_dict())},
        "stage2": {"folds": s2_rows, "average": _strip_roc(s2_avg.to_dict())},
        "stage1_val": [s1_val[k] for k in sorted(s1_val)],
        "sweep": sweep_rows,
        "overlap": overlap_rows,
        "kept": [main[k]["kept"] for k in sorted(main)],
        "test_kept_fraction": [main[k]["test_kept_fraction"] for k in sorted(main)],
    }
    _write(run_dir / "summary.json", _dump(summary))
    return RunRecord(run_dir, [main[k] for k in sorted(main)], s1_avg, s2_avg, sweep_rows, overlap_rows, summary)


def check_hygiene(run_dir) -> None:
    """Assert that no test subject fed any training stage or ROI-extraction input."""
    run_dir = Path(run_dir)
    plan = SplitPlan.from_json((run_dir / "splits.json").read_text())
    plan.check()
    test = set(plan.test_subject_ids)
    reports = sorted(run_dir.glob("fold-*/report.json")) + sorted(run_dir.glob("fold-*/sweep/*/report.json"))
    if not reports:
        raise AssertionError(f"no fold reports under {run_dir}")
    for path in reports:
        rep = json.loads(path.read_text())
        subj = rep["subjects"]
        assert set(subj["test"]) == test, f"{path}: test set differs from splits.json"
        for key in ("stage1_train", "stage1_val", "roi_sources", "stage2_train", "stage2_val"):
            leaked = test & set(subj[key])
            assert not leaked, f"{path}: test subjects {sorted(leaked)} in {key}"
        train, val = plan.folds[rep["fold"]]
        assert set(subj["stage1_train"]) == set(train), f"{path}: stage-1 train set differs from split"
        assert set(subj["roi_sources"]) <= set(train) | set(val), f"{path}: ROI sources outside fold"


def reevaluate_fold(run_dir, fold: int, data: PreparedData | None = None, tag: str | None = None) -> dict:
    """Recompute a fold's test reports from its persisted checkpoints."""
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.load(run_dir / "config.json")
    data = data or prepare_data(cfg)
    plan = SplitPlan.from_json((run_dir / "splits.json").read_text())
    fold_dir = run_dir / f"fold-{fold}"
    cell = fold_dir if tag is None else fold_dir / "sweep" / tag
    rep = json.loads((cell / "report.json").read_text())
    threshold = ThresholdConfig(**rep["threshold"])
    stage1, _, _ = load_checkpoint(fold_dir / "stage1.ckpt")
    stage2, _, _ = load_checkpoint(cell / "stage2.ckpt")
    x_te, y_te, _ = data.arrays(plan.test_subject_ids)
    s1, _ = _report(stage1, x_te, y_te, fold)
    s2, _, _ = evaluate_on_test(stage1, stage2, x_te, y_te, threshold, fold)
    return {"stage1": s1.to_dict(), "stage2": s2.to_dict()}
