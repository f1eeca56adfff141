"""VOL3 binary volume format and dataset manifests.

Layout: 4-byte magic ``VOL3``, three little-endian uint32 dims (x, y, z),
then x*y*z little-endian float32 intensities with x varying fastest.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import Dataset, RegionAnnotation, Subject, Volume3D

MAGIC = b"VOL3"
_HEADER = struct.Struct("<4sIII")


class VolumeFormatError(ValueError):
    """Base class for unreadable volume files."""


class MalformedHeaderError(VolumeFormatError):
    pass


class SizeMismatchError(VolumeFormatError):
    pass


class NegativeIntensityError(VolumeFormatError):
    pass


def encode_volume(vol: Volume3D) -> bytes:
    header = _HEADER.pack(MAGIC, *vol.dims)
    return header + np.asarray(vol.data, dtype="<f4").tobytes(order="F")


def decode_volume(raw: bytes) -> Volume3D:
    if len(raw) < _HEADER.size:
        raise MalformedHeaderError(f"file too short for header ({len(raw)} bytes)")
    magic, nx, ny, nz = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}")
    if min(nx, ny, nz) < 1:
        raise MalformedHeaderError(f"header dims must be >= 1, got {(nx, ny, nz)}")
    expected = nx * ny * nz * 4
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise SizeMismatchError(f"expected {expected} payload bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape((nx, ny, nz), order="F")
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError("non-finite intensities in payload")
    if np.any(data < 0):
        raise NegativeIntensityError("negative intensities in payload")
    return Volume3D(data.astype(np.float32))


def save_volume(vol: Volume3D, path) -> None:
    Path(path).write_bytes(encode_volume(vol))


def load_volume(path) -> Volume3D:
    return decode_volume(Path(path).read_bytes())


def save_dataset(ds: Dataset, out_dir, annotations=()) -> Path:
    """Write every scan as ``.vol3`` plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    subjects = []
    for subj in ds.subjects:
        scans = []
        for t, scan in enumerate(subj.scans):
            rel = f"scans/{subj.id}_t{t}.vol3"
            save_volume(scan, out / rel)
            scans.append({"file": rel, "timepoint": t})
        subjects.append({"id": subj.id, "label": ds.class_names[subj.label], "scans": scans})
    regions = []
    if annotations:
        (out / "annotations").mkdir(exist_ok=True)
        for ann in annotations:
            rel = f"annotations/{ann.name}.vol3"
            save_volume(ann.mask, out / rel)
            regions.append({"name": ann.name, "file": rel})
    manifest = {"class_names": ds.class_names, "subjects": subjects, "annotations": regions}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_dataset(path) -> tuple[Dataset, list[RegionAnnotation]]:
    """Read a dataset from a directory or its ``manifest.json``."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    root = path.parent
    manifest = json.loads(path.read_text())
    names = manifest["class_names"]
    subjects = []
    for entry in manifest["subjects"]:
        scans = sorted(entry["scans"], key=lambda s: s["timepoint"])
        subjects.append(Subject(
            id=entry["id"],
            label=names.index(entry["label"]),
            scans=[load_volume(root / s["file"]) for s in scans],
        ))
    anns = [RegionAnnotation(a["name"], load_volume(root / a["file"]))
            for a in manifest.get("annotations", [])]
    return Dataset(subjects, list(names)), anns
