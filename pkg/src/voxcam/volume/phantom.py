"""Seeded synthetic brain-like phantoms with planted class differences.

Every phantom is an ellipsoidal "brain" of soft tissue with a cortical shell,
a central fluid-filled ventricle and a dark off-centre structure blob. Fluid
is the brightest compartment. The progressive class shrinks the structure,
dilates the ventricle and thins a sector of the cortex next to the structure,
and the tissue lost to each change turns into fluid. Nothing else differs
between the classes apart from per-scan noise and translation jitter.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .core import Dataset, RegionAnnotation, Subject, Volume3D
from .io import encode_volume

# fluid is bright (T2-like contrast), so atrophy shows up as added signal
TISSUE = 0.45
CORTEX = 0.65
FLUID = 1.0
STRUCTURE = 0.2


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 16)
    n_subjects_per_class: int = 50
    scans_per_subject: int = 1
    noise_sigma: float = 0.03
    # structure blob; centre as a fraction of each dim, radius in x-voxels
    structure_center: tuple[float, float, float] = (0.68, 0.34, 0.5)
    structure_radius: float = 3.5
    shrink: float = 0.45
    # ventricle semi-axes as fractions of dims
    ventricle_radii: tuple[float, float, float] = (0.08, 0.13, 0.22)
    dilation: float = 1.6
    # cortical shell thickness as a fraction of the brain radius
    cortex_thickness: float = 0.22
    cortex_thinning: float = 0.4
    brain_radii: tuple[float, float, float] = (0.44, 0.44, 0.44)
    jitter: int = 1

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.structure_center = tuple(float(v) for v in self.structure_center)
        self.ventricle_radii = tuple(float(v) for v in self.ventricle_radii)
        self.brain_radii = tuple(float(v) for v in self.brain_radii)
        if len(self.dims) != 3:
            raise ValueError("dims must have three entries")
        if self.structure_radius <= 0 or min(self.ventricle_radii) <= 0 or min(self.brain_radii) <= 0:
            raise ValueError("radii must be > 0")
        if not 0 < self.shrink <= 1:
            raise ValueError(f"shrink must be in (0, 1], got {self.shrink}")
        if not 0 < self.cortex_thinning <= 1:
            raise ValueError(f"cortex_thinning must be in (0, 1], got {self.cortex_thinning}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.noise_sigma < 0 or self.jitter < 0:
            raise ValueError("noise_sigma and jitter must be >= 0")
        if self.n_subjects_per_class < 1 or self.scans_per_subject < 1:
            raise ValueError("need at least one subject per class and one scan per subject")

    def to_dict(self) -> dict:
        return asdict(self)


def _grid(dims):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")


def _ellipsoid_rho(dims, center, semi_axes):
    """Normalized ellipsoidal radius; < 1 inside."""
    return np.sqrt(sum(((g - c) / r) ** 2 for g, c, r in zip(_grid(dims), center, semi_axes)))


@dataclass
class _Template:
    volume: np.ndarray
    structure: np.ndarray
    ventricle: np.ndarray
    cortex_sector: np.ndarray = field(repr=False)


def _template(spec: PhantomSpec, progressive: bool) -> _Template:
    dims = spec.dims
    center = [(n - 1) / 2.0 for n in dims]
    brain_axes = [f * n for f, n in zip(spec.brain_radii, dims)]
    rho = _ellipsoid_rho(dims, center, brain_axes)
    brain = rho <= 1.0

    gx, gy, gz = _grid(dims)
    s_center = [f * (n - 1) for f, n in zip(spec.structure_center, dims)]
    # affected cortex sector: the part of the shell on the structure's side
    dirn = np.array(s_center[:2]) - np.array(center[:2])
    dirn = dirn / (np.linalg.norm(dirn) + 1e-12)
    proj = ((gx - center[0]) / brain_axes[0]) * dirn[0] + ((gy - center[1]) / brain_axes[1]) * dirn[1]
    sector = proj > 0.45 * rho

    thickness = spec.cortex_thickness
    thin = thickness * (spec.cortex_thinning if progressive else 1.0)
    shell = brain & (rho > 1.0 - thickness)
    shell_thin = brain & (rho > 1.0 - thin)
    cortex = np.where(sector, shell_thin, shell)

    v_axes = [f * n * (spec.dilation if progressive else 1.0) for f, n in zip(spec.ventricle_radii, dims)]
    ventricle = brain & (_ellipsoid_rho(dims, center, v_axes) <= 1.0)

    radius = spec.structure_radius * (spec.shrink if progressive else 1.0)
    # isotropic in physical terms: z extent scaled by the depth/width aspect
    s_axes = [radius, radius * dims[1] / dims[0], radius * dims[2] / dims[0]]
    structure = brain & (_ellipsoid_rho(dims, s_center, s_axes) <= 1.0)

    vol = np.zeros(dims)
    vol[brain] = TISSUE
    vol[cortex] = CORTEX
    if progressive:
        # tissue lost to atrophy is replaced by fluid
        full = brain & (_ellipsoid_rho(dims, s_center, [r / spec.shrink for r in s_axes]) <= 1.0)
        vol[full & ~structure] = FLUID
        vol[shell & sector & ~cortex] = FLUID
    vol[ventricle] = FLUID
    vol[structure] = STRUCTURE
    return _Template(vol, structure, ventricle, shell & sector)


def phantom_templates(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray, list[RegionAnnotation]]:
    """Noise-free stable and progressive templates plus the region annotations."""
    stable = _template(spec, progressive=False)
    prog = _template(spec, progressive=True)
    for name, a, b in (("structure", stable.structure, prog.structure),
                       ("ventricle", stable.ventricle, prog.ventricle)):
        if not a.any() or not b.any():
            raise ValueError(f"dims {spec.dims} too small to contain the {name} geometry "
                             f"for both classes; enlarge dims or radii")
    if not stable.cortex_sector.any():
        raise ValueError(f"dims {spec.dims} too small to contain a cortical shell")
    # regions cover every voxel where the painted classes can differ
    annotations = [
        RegionAnnotation("structure", Volume3D((stable.structure | prog.structure).astype(np.float32))),
        RegionAnnotation("ventricle", Volume3D((stable.ventricle | prog.ventricle).astype(np.float32))),
        RegionAnnotation("cortex-shell", Volume3D(stable.cortex_sector.astype(np.float32))),
    ]
    return stable.volume, prog.volume, annotations


def _shift(arr: np.ndarray, offset) -> np.ndarray:
    if not any(offset):
        return arr
    return ndimage.shift(arr, offset, order=0, mode="constant", cval=0.0)


def generate_phantom_dataset(spec: PhantomSpec, seed: int) -> tuple[Dataset, list[RegionAnnotation]]:
    if min(spec.dims) < 8:
        raise ValueError(f"every dim must be >= 8 to hold the phantom geometry, got {spec.dims}")
    templates = phantom_templates(spec)
    annotations = templates[2]
    rng = np.random.default_rng(seed)
    subjects = []
    n = spec.n_subjects_per_class
    for label in (0, 1):
        base = templates[label]
        for i in range(n):
            scans = []
            for _ in range(spec.scans_per_subject):
                offset = rng.integers(-spec.jitter, spec.jitter + 1, size=3)
                vol = _shift(base, offset)
                if spec.noise_sigma > 0:
                    vol = vol + rng.normal(0.0, spec.noise_sigma, size=vol.shape)
                scans.append(Volume3D(np.maximum(vol, 0.0)))
            subjects.append(Subject(f"sub-{label * n + i:03d}", label, scans))
    return Dataset(subjects), annotations


def dataset_digest(ds: Dataset) -> str:
    """SHA-256 over subject ids, labels and encoded scans."""
    h = hashlib.sha256()
    for subj in ds.subjects:
        h.update(f"{subj.id}:{subj.label}:{len(subj.scans)};".encode())
        for scan in subj.scans:
            h.update(encode_volume(scan))
    return h.hexdigest()
