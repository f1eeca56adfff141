"""Volume, subject and dataset containers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CLASS_NAMES = ["stable", "progressive"]


@dataclass
class Volume3D:
    """Dense non-negative scalar field indexed ``data[x, y, z]``.

    Stored as float32, matching the on-disk format.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume must be 3-D with every dim >= 1, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite intensities")
        if np.any(arr < 0):
            raise ValueError("volume contains negative intensities")
        self.data = arr

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.data, other.data)


@dataclass
class Subject:
    id: str
    label: int
    scans: list[Volume3D] = field(default_factory=list)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if not self.scans:
            raise ValueError(f"subject {self.id} has no scans")
        dims = {s.dims for s in self.scans}
        if len(dims) != 1:
            raise ValueError(f"subject {self.id} has scans of differing dims: {sorted(dims)}")


@dataclass
class Dataset:
    subjects: list[Subject]
    class_names: list[str] = field(default_factory=lambda: list(CLASS_NAMES))

    def __post_init__(self):
        if len(self.class_names) != 2:
            raise ValueError("exactly two class names are required")
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValueError("subject ids must be unique")
        if {s.label for s in self.subjects} != {0, 1}:
            raise ValueError("both classes must be present")

    def by_id(self) -> dict[str, Subject]:
        return {s.id: s for s in self.subjects}

    def scans_of(self, ids) -> tuple[list[Volume3D], np.ndarray, list[str]]:
        """Flatten the scans of ``ids`` into (volumes, labels, owning subject ids)."""
        lookup = self.by_id()
        vols, labels, owners = [], [], []
        for sid in ids:
            subj = lookup[sid]
            for scan in subj.scans:
                vols.append(scan)
                labels.append(subj.label)
                owners.append(sid)
        return vols, np.asarray(labels, dtype=np.int64), owners


@dataclass
class RegionAnnotation:
    name: str
    mask: Volume3D

    def __post_init__(self):
        if not np.all((self.mask.data == 0) | (self.mask.data == 1)):
            raise ValueError(f"annotation {self.name!r} mask must be binary")
