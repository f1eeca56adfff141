"""Preprocessing and augmentation of volumes."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .core import Volume3D

ROTATION_ANGLES = (-10, -5, 5, 10)


def center_slab(vol: Volume3D, n_slices: int) -> Volume3D:
    """Keep ``n_slices`` contiguous z-slices around the middle; ties go low."""
    depth = vol.dims[2]
    if not 1 <= n_slices <= depth:
        raise ValueError(f"n_slices must be in [1, {depth}], got {n_slices}")
    start = (depth - n_slices) // 2
    return Volume3D(vol.data[:, :, start:start + n_slices].copy())


def _interp_axis(arr: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = arr.shape[axis]
    if n_out == n_in:
        return arr
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(np.int64), 0, max(n_in - 2, 0))
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    shape = [1] * arr.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    return a * (1.0 - frac) + b * frac


def resize_array(arr: np.ndarray, target_dims) -> np.ndarray:
    """Corner-aligned trilinear resampling of the last three axes.

    Separable: linear interpolation along x, then y, then z.
    """
    target_dims = tuple(int(n) for n in target_dims)
    if len(target_dims) != 3 or min(target_dims) < 1:
        raise ValueError(f"target dims must be three values >= 1, got {target_dims}")
    out = np.asarray(arr, dtype=np.float64)
    offset = out.ndim - 3
    for k, n in enumerate(target_dims):
        out = _interp_axis(out, offset + k, n)
    return out


def resize_trilinear(vol: Volume3D, target_dims) -> Volume3D:
    if tuple(target_dims) == vol.dims:
        return Volume3D(vol.data.copy())
    out = resize_array(vol.data, target_dims)
    # float32 rounding can step a hair outside the source range
    out = np.clip(out, vol.data.min(), vol.data.max())
    return Volume3D(out)


def normalize_intensity(vol: Volume3D) -> Volume3D:
    """Min-max map to [0, 1]; a constant volume becomes all zeros."""
    data = vol.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    if hi <= lo:
        return Volume3D(np.zeros(vol.dims, dtype=np.float32))
    return Volume3D((data - lo) / (hi - lo))


def rotate_inplane(data: np.ndarray, angle: float) -> np.ndarray:
    """Rotate every z-slice about the slice centre; bilinear, zero fill."""
    out = ndimage.rotate(data, angle, axes=(0, 1), reshape=False, order=1,
                         mode="constant", cval=0.0)
    return np.maximum(out, 0.0)


def augment(vol: Volume3D, op: str, angle: float | None = None) -> Volume3D:
    """Apply ``flip_h`` (x axis), ``flip_v`` (y axis) or ``rotate`` by ``angle`` degrees."""
    if op == "flip_h":
        return Volume3D(vol.data[::-1, :, :].copy())
    if op == "flip_v":
        return Volume3D(vol.data[:, ::-1, :].copy())
    if op == "rotate":
        if angle not in ROTATION_ANGLES:
            raise ValueError(f"rotation angle must be one of {ROTATION_ANGLES}, got {angle!r}")
        return Volume3D(rotate_inplane(vol.data, angle))
    raise ValueError(f"unknown augmentation {op!r}")


def augment_batch(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Expand ``(N, X, Y, Z)`` samples into originals, flips and one random rotation each.

    Output order is all originals, then flip_h, flip_v, rotated.
    """
    flips_h = x[:, ::-1, :, :]
    flips_v = x[:, :, ::-1, :]
    angles = rng.choice(ROTATION_ANGLES, size=len(x))
    rotated = np.stack([rotate_inplane(s, float(a)) for s, a in zip(x, angles)]) if len(x) else x
    return np.concatenate([x, flips_h, flips_v, rotated.astype(x.dtype)], axis=0)
