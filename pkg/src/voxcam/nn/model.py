"""Three-block 3D CNN classifier.

Block: conv 3x3x3 -> LeakyReLU -> maxpool 2 -> batchnorm -> dropout.
Head: flatten -> dense -> LeakyReLU -> batchnorm -> dropout -> dense -> softmax.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L


@dataclass
class ModelConfig:
    input_dims: tuple[int, int, int] = (32, 32, 16)
    filters: tuple[int, int, int] = (32, 64, 64)
    kernel: int = 3
    leaky_alpha: float = 0.1
    pool: int = 2
    dropout: tuple[float, float, float] = (0.3, 0.3, 0.3)
    dense_units: int = 128
    head_dropout: float = 0.3
    n_classes: int = 2

    def __post_init__(self):
        self.input_dims = tuple(int(n) for n in self.input_dims)
        self.filters = tuple(int(n) for n in self.filters)
        self.dropout = tuple(float(r) for r in self.dropout)
        if self.n_classes != 2:
            raise ValueError("only two-class models are supported")
        if len(self.filters) != 3 or len(self.dropout) != 3:
            raise ValueError("exactly three blocks are required")
        if self.kernel % 2 != 1:
            raise ValueError("kernel extent must be odd")
        if min(self.pooled_dims) < 1:
            raise ValueError(f"input dims {self.input_dims} vanish after three {self.pool}-poolings")
        if not all(0 <= r < 1 for r in self.dropout + (self.head_dropout,)):
            raise ValueError("dropout rates must be in [0, 1)")

    def block_dims(self, i: int) -> tuple[int, int, int]:
        """Spatial dims entering block ``i`` (i == 3 gives the final pooled dims)."""
        dims = self.input_dims
        for _ in range(i):
            dims = tuple(n // self.pool for n in dims)
        return dims

    @property
    def pooled_dims(self):
        return self.block_dims(3)

    @property
    def feature_dims(self):
        """Dims of the Grad-CAM feature maps: block-3 activations before pooling."""
        return self.block_dims(2)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def arch_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ModelParams:
    config: ModelConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self):
        return self.params["conv0.w"].dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.config,
                           {k: v.copy() for k, v in self.params.items()},
                           {k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config,
                           {k: v.astype(dtype) for k, v in self.params.items()},
                           {k: v.astype(dtype) for k, v in self.buffers.items()})


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Fan-in scaled uniform init with the LeakyReLU gain; zero biases."""
    rng = np.random.default_rng(seed)
    gain2 = 2.0 / (1.0 + config.leaky_alpha ** 2)
    k = config.kernel
    params, buffers = {}, {}

    def uniform(shape, fan_in, g2):
        bound = np.sqrt(3.0 * g2 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    c_in = 1
    for i, f in enumerate(config.filters):
        params[f"conv{i}.w"] = uniform((f, c_in, k, k, k), c_in * k ** 3, gain2)
        params[f"conv{i}.b"] = np.zeros(f, dtype)
        params[f"bn{i}.gamma"] = np.ones(f, dtype)
        params[f"bn{i}.beta"] = np.zeros(f, dtype)
        buffers[f"bn{i}.mean"] = np.zeros(f, dtype)
        buffers[f"bn{i}.var"] = np.ones(f, dtype)
        c_in = f
    n_flat = c_in * int(np.prod(config.pooled_dims))
    u = config.dense_units
    params["fc1.w"] = uniform((n_flat, u), n_flat, gain2)
    params["fc1.b"] = np.zeros(u, dtype)
    params["bnf.gamma"] = np.ones(u, dtype)
    params["bnf.beta"] = np.zeros(u, dtype)
    buffers["bnf.mean"] = np.zeros(u, dtype)
    buffers["bnf.var"] = np.ones(u, dtype)
    params["fc2.w"] = uniform((u, config.n_classes), u, 1.0)
    params["fc2.b"] = np.zeros(config.n_classes, dtype)
    return ModelParams(config, params, buffers)


@dataclass
class ActivationCache:
    """Everything backward needs, plus the Grad-CAM feature maps."""

    tape: list
    logits: np.ndarray
    features: np.ndarray  # block-3 LeakyReLU output, (B, F, *feature_dims)
    pooled: np.ndarray  # block-3 output after pool/bn/dropout
    new_buffers: dict
    features_index: int = 0  # tape position whose backward yields d/d features


def _as_batch(model: ModelParams, x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim == 4:
        x = x[:, None]
    if x.ndim != 5 or x.shape[1] != 1:
        raise ValueError(f"expected (B, X, Y, Z) input, got {x.shape}")
    if tuple(x.shape[2:]) != model.config.input_dims:
        raise ValueError(f"input dims {tuple(x.shape[2:])} != model dims {model.config.input_dims}")
    return x.astype(model.dtype, copy=False)


def forward(model: ModelParams, x, train: bool = False, rng: np.random.Generator | None = None):
    """Run the network; returns ``(logits, ActivationCache)``.

    Pure: batch-norm running statistics produced in train mode are returned
    in ``cache.new_buffers`` rather than written back.
    """
    cfg, p, buf = model.config, model.params, model.buffers
    h = _as_batch(model, x)
    tape = []
    new_buffers = {}
    features = features_index = None
    for i in range(3):
        h, c = L.conv3d(h, p[f"conv{i}.w"], p[f"conv{i}.b"])
        tape.append(("conv", i, c))
        h, c = L.leaky_relu(h, cfg.leaky_alpha)
        tape.append(("leaky", i, c))
        if i == 2:
            features, features_index = h, len(tape)
        h, c = L.maxpool3d(h, cfg.pool)
        tape.append(("pool", i, c))
        h, c, stats = L.batchnorm(h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"],
                                  buf[f"bn{i}.mean"], buf[f"bn{i}.var"], train)
        new_buffers[f"bn{i}.mean"], new_buffers[f"bn{i}.var"] = stats
        tape.append(("bn", f"bn{i}", c))
        h, c = L.dropout(h, cfg.dropout[i], train, rng)
        tape.append(("drop", i, c))
    pooled = h
    tape.append(("flatten", None, h.shape))
    h = h.reshape(h.shape[0], -1)
    h, c = L.dense(h, p["fc1.w"], p["fc1.b"])
    tape.append(("dense", "fc1", c))
    h, c = L.leaky_relu(h, cfg.leaky_alpha)
    tape.append(("leaky", "fc1", c))
    h, c, stats = L.batchnorm(h, p["bnf.gamma"], p["bnf.beta"], buf["bnf.mean"], buf["bnf.var"], train)
    new_buffers["bnf.mean"], new_buffers["bnf.var"] = stats
    tape.append(("bn", "bnf", c))
    h, c = L.dropout(h, cfg.head_dropout, train, rng)
    tape.append(("drop", "head", c))
    logits, c = L.dense(h, p["fc2.w"], p["fc2.b"])
    tape.append(("dense", "fc2", c))
    return logits, ActivationCache(tape, logits, features, pooled, new_buffers, features_index)


def _backprop(cache: ActivationCache, dlogits: np.ndarray, stop: int = 0):
    """Walk the tape backwards down to position ``stop``; returns (d_input_of_stop, grads)."""
    grads = {}
    d = dlogits
    for kind, name, c in reversed(cache.tape[stop:]):
        if kind == "dense":
            d, grads[f"{name}.w"], grads[f"{name}.b"] = L.dense_backward(d, c)
        elif kind == "bn":
            d, grads[f"{name}.gamma"], grads[f"{name}.beta"] = L.batchnorm_backward(d, c)
        elif kind == "leaky":
            d = L.leaky_relu_backward(d, c)
        elif kind == "drop":
            d = L.dropout_backward(d, c)
        elif kind == "flatten":
            d = d.reshape(c)
        elif kind == "pool":
            d = L.maxpool3d_backward(d, c)
        elif kind == "conv":
            # the network input needs no gradient
            d, grads[f"conv{name}.w"], grads[f"conv{name}.b"] = L.conv3d_backward(d, c, need_dx=name > 0)
    return d, grads


def backward(model: ModelParams, cache: ActivationCache, labels):
    """Gradients of the mean cross-entropy w.r.t. every learnable parameter.

    Returns ``(grads, loss, probs)``.
    """
    probs, loss, dlogits = L.softmax_cross_entropy(cache.logits, labels)
    _, grads = _backprop(cache, dlogits)
    return grads, loss, probs


def class_score_gradient(cache: ActivationCache, classes) -> np.ndarray:
    """d logit[b, classes[b]] / d features[b] for every sample b of an eval-mode cache."""
    classes = np.atleast_1d(np.asarray(classes))
    B, n_classes = cache.logits.shape
    if np.any(classes < 0) or np.any(classes >= n_classes):
        raise ValueError(f"class index out of range [0, {n_classes})")
    seed = np.zeros_like(cache.logits)
    seed[np.arange(B), classes] = 1.0
    d, _ = _backprop(cache, seed, stop=cache.features_index)
    return d


def score_gradient_wrt_features(model: ModelParams, vol, c: int) -> np.ndarray:
    """Gradient of the pre-softmax score of class ``c`` w.r.t. the feature maps, shape (F, x, y, z)."""
    _, cache = forward(model, vol, train=False)
    return class_score_gradient(cache, [c])[0]


def predict_proba(model: ModelParams, x, batch_size: int = 32) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    out = []
    for i in range(0, len(x), batch_size):
        logits, _ = forward(model, x[i:i + batch_size], train=False)
        out.append(L.softmax(logits.astype(np.float64)))
    return np.concatenate(out)


def predict(model: ModelParams, vol) -> tuple[int, np.ndarray]:
    """Eval-mode class and probabilities for one volume; ties go to class 0."""
    probs = predict_proba(model, vol)[0]
    return int(np.argmax(probs)), probs
