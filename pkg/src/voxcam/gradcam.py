"""Grad-CAM heatmaps from the last convolutional block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import layers as L
from .nn.model import ModelParams, class_score_gradient, forward
from .volume.core import Volume3D
from .volume.transforms import resize_array


@dataclass
class Heatmap:
    values: np.ndarray  # in [0, 1]
    source_dims: tuple[int, int, int]

    @property
    def dims(self):
        return tuple(self.values.shape[-3:])


def feature_weights(dS_dC: np.ndarray) -> np.ndarray:
    """Sum the class-score gradient over each feature map's voxels.

    ``dS_dC`` is ``(..., F, x, y, z)``; returns ``(..., F)``. With the sum
    (not the mean) the weights of a pooled-linear classifier come back as
    exactly its dense weights. Any constant rescaling cancels in
    ``normalize_heatmap``.
    """
    dS_dC = np.asarray(dS_dC)
    if dS_dC.size == 0 or dS_dC.ndim < 4:
        raise ValueError(f"expected a non-empty (F, x, y, z) gradient, got shape {dS_dC.shape}")
    return dS_dC.sum(axis=(-3, -2, -1))


def cam(weights: np.ndarray, C: np.ndarray) -> np.ndarray:
    """ReLU of the weighted sum of feature maps, at feature-map resolution."""
    weights = np.asarray(weights)
    C = np.asarray(C)
    if weights.shape[-1] != C.shape[-4]:
        raise ValueError(f"{weights.shape[-1]} weights for {C.shape[-4]} feature maps")
    raw = np.einsum("...f,...fxyz->...xyz", weights, C)
    return np.maximum(raw, 0.0)


def normalize_heatmap(raw: np.ndarray) -> Heatmap:
    """Min-max map to [0, 1]; a constant map becomes all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    values = np.zeros_like(raw) if hi <= lo else (raw - lo) / (hi - lo)
    return Heatmap(values, tuple(raw.shape))


def upsample_heatmap(h: Heatmap, volume_dims) -> Heatmap:
    values = np.clip(resize_array(h.values, volume_dims), 0.0, 1.0)
    return Heatmap(values, h.source_dims)


def gradcam_batch(model: ModelParams, x: np.ndarray, classes, batch_size: int = 32) -> np.ndarray:
    """Heatmaps ``(N, X, Y, Z)`` for every volume in ``x``, each w.r.t. its own class."""
    x = np.asarray(x)
    classes = np.broadcast_to(np.asarray(classes), (len(x),))
    dims = model.config.input_dims
    out = np.empty((len(x),) + dims)
    for i in range(0, len(x), batch_size):
        _, cache = forward(model, x[i:i + batch_size], train=False)
        grad = class_score_gradient(cache, classes[i:i + batch_size]).astype(np.float64)
        raw = cam(feature_weights(grad), cache.features.astype(np.float64))
        for j, r in enumerate(raw):
            out[i + j] = upsample_heatmap(normalize_heatmap(r), dims).values
    return out


def gradcam(model: ModelParams, vol, c: int) -> Heatmap:
    """Eval-mode Grad-CAM heatmap of class ``c`` at volume resolution."""
    data = vol.data if isinstance(vol, Volume3D) else np.asarray(vol)
    if not 0 <= c < model.config.n_classes:
        raise ValueError(f"class index {c} out of range")
    values = gradcam_batch(model, data[None], [c])[0]
    return Heatmap(values, model.config.feature_dims)


def gap_linear_weights(C: np.ndarray, W: np.ndarray, b: np.ndarray, c: int):
    """Grad-CAM weights of a features -> global-average-pool -> dense model.

    ``C`` is ``(F, x, y, z)``, ``W`` is ``(F, n_classes)``. The class-score
    gradient is obtained by backpropagating through the pooling and dense
    layers; returns ``(grad_cam_weights, W[:, c])``, which agree exactly for
    this architecture.
    """
    pooled, pool_cache = L.global_avg_pool(np.asarray(C)[None])
    scores, dense_cache = L.dense(pooled, W, b)
    seed = np.zeros_like(scores)
    seed[0, c] = 1.0
    d_pooled, _, _ = L.dense_backward(seed, dense_cache)
    dS_dC = L.global_avg_pool_backward(d_pooled, pool_cache)[0]
    return feature_weights(dS_dC), np.asarray(W)[:, c]
