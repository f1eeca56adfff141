"""Heatmap thresholding into ROI masks, masked ROI volumes and region overlap."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .volume.core import RegionAnnotation, Volume3D

BANDS = ("top", "low")


@dataclass(frozen=True)
class ThresholdConfig:
    a: float = 0.7
    band: str = "top"

    def __post_init__(self):
        if not 0 < self.a < 1:
            raise ValueError(f"threshold a must be in (0, 1), got {self.a}")
        if self.band not in BANDS:
            raise ValueError(f"band must be one of {BANDS}, got {self.band!r}")

    @property
    def b(self) -> float:
        return 1.0 - self.a

    @property
    def label(self) -> str:
        pct = int(round((1.0 - self.a) * 100))
        return f"{'Top' if self.band == 'top' else 'Low'} {pct}%"

    @property
    def tag(self) -> str:
        return f"a{self.a:.2f}-{self.band}"


@dataclass
class ROIVolume:
    volume: Volume3D
    source_id: str | None = None
    a: float | None = None
    band: str | None = None
    cam_class: int | None = None


def _values(v) -> np.ndarray:
    if isinstance(v, Volume3D):
        return v.data
    return np.asarray(getattr(v, "values", v))


def make_mask(vol, heatmap, cfg: ThresholdConfig) -> np.ndarray:
    """Binary mask (float 0/1) for one volume or a stack of volumes.

    Top band keeps voxels with ``x*H >= a*x``; where ``x == 0`` that holds
    trivially, and the masked product is zero there anyway. Low band keeps
    ``H <= 1 - a``.
    """
    x = _values(vol).astype(np.float64)
    h = _values(heatmap).astype(np.float64)
    if x.shape != h.shape:
        raise ValueError(f"volume dims {x.shape} != heatmap dims {h.shape}")
    if cfg.band == "top":
        keep = x * h >= cfg.a * x
    else:
        keep = h <= cfg.b
    return keep.astype(np.float32)


def apply_mask(mask: np.ndarray, x: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    x = np.asarray(x)
    if mask.shape != x.shape:
        raise ValueError(f"mask dims {mask.shape} != volume dims {x.shape}")
    return (mask * x).astype(x.dtype)


def extract_roi(mask, vol: Volume3D, **provenance) -> ROIVolume:
    return ROIVolume(Volume3D(apply_mask(_values(mask), vol.data)), **provenance)


def kept_fraction(heatmap, a: float) -> float:
    """Fraction of voxels whose heatmap value is at least ``a``."""
    return float(np.mean(_values(heatmap) >= a))


def region_overlap(mask: np.ndarray, region: np.ndarray) -> float:
    """Fraction of the region's voxels covered by the mask."""
    region = np.asarray(region) > 0
    return float((np.asarray(mask)[region] > 0).sum() / region.sum())


def overlap_report(masks, annotations: list[RegionAnnotation], min_overlap: float = 0.1,
                   classes=None, class_names=("stable", "progressive")) -> list[dict]:
    """Percent of masks covering at least ``min_overlap`` of each annotated region.

    One row per (region, class) plus an ``all`` row per region. A mask may
    count for several regions, so percentages across regions need not sum to 100.
    """
    masks = [_values(m) for m in masks]
    if classes is None:
        groups = [("all", np.arange(len(masks)))]
    else:
        classes = np.asarray(classes)
        groups = [(name, np.flatnonzero(classes == k)) for k, name in enumerate(class_names)]
        groups.append(("all", np.arange(len(masks))))
    rows = []
    for ann in annotations:
        region = ann.mask.data > 0
        if not region.any():
            raise ValueError(f"annotation {ann.name!r} is empty")
        hits = np.array([region_overlap(m, region) >= min_overlap for m in masks], dtype=bool)
        for name, idx in groups:
            pct = 100.0 * hits[idx].mean() if len(idx) else 0.0
            rows.append({"region": ann.name, "class": name, "percent": float(pct), "n": int(len(idx))})
    return rows


def overlap_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["region", "class", "percent"])
    for r in rows:
        w.writerow([r["region"], r["class"], f"{r['percent']:.2f}"])
    return buf.getvalue()
