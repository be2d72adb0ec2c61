"""Dense-network primitives with hand-written gradients.

Activations are batched row-wise: a ``(batch, features)`` array, or a single
1-D feature vector. Every layer caches what its backward pass needs during
``forward``; calling ``backward`` first raises :class:`UsageError`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# configs / parameter holders
# ---------------------------------------------------------------------------


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=DTYPE)
        self.bias = np.asarray(self.bias, dtype=DTYPE)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"weights {self.weights.shape} and bias {self.bias.shape} disagree"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise NumericError("non-finite dense parameters")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "DenseLayer":
        """Glorot-uniform weights, zero bias."""
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        w = rng.uniform(-limit, limit, size=(out_dim, in_dim))
        return cls(w, np.zeros(out_dim))


@dataclass
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=DTYPE)
        self.beta = np.asarray(self.beta, dtype=DTYPE)
        if self.eps <= 0:
            raise ValueError("layer-norm eps must be positive")
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ShapeError(f"gamma {self.gamma.shape} vs beta {self.beta.shape}")

    @classmethod
    def init(cls, dim: int, eps: float = 1e-5) -> "LayerNormParams":
        return cls(np.ones(dim), np.zeros(dim), eps)


@dataclass(frozen=True)
class LeakyReluConfig:
    slope: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.slope < 1.0:
            raise ValueError(f"leaky-relu slope must be in [0, 1), got {self.slope}")


@dataclass(frozen=True)
class DropoutConfig:
    rate: float = 0.1
    seed: int = 0
    mode: str = "train"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"dropout mode must be 'train' or 'eval', got {self.mode!r}")


@dataclass(frozen=True)
class HuberConfig:
    alpha: float = 1.2

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"huber alpha must be positive, got {self.alpha}")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------


def _check_last_dim(x: np.ndarray, n: int, what: str):
    if x.shape[-1] != n:
        raise ShapeError(f"{what}: expected last dim {n}, got input of shape {x.shape}")


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    _check_last_dim(x, layer.in_dim, "dense")
    return x @ layer.weights.T + layer.bias


def _ln_stats(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return (x - mu) * inv_std, inv_std


def layer_norm_forward(p: LayerNormParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    _check_last_dim(x, p.gamma.shape[0], "layer_norm")
    xhat, _ = _ln_stats(x, p.eps)
    return p.gamma * xhat + p.beta


def leaky_relu(x, cfg: LeakyReluConfig = LeakyReluConfig()) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    return np.maximum(cfg.slope * x, x)


def dropout_forward(x, cfg: DropoutConfig, rng: np.random.Generator | None = None):
    """Inverted dropout. Returns ``(output, mask)``; the mask already carries
    the 1/(1-rate) scale so that backward is ``grad * mask``."""
    x = np.asarray(x, dtype=DTYPE)
    if cfg.mode == "eval" or cfg.rate == 0.0:
        return x.copy(), np.ones_like(x)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    keep = rng.random(x.shape) >= cfg.rate
    mask = keep / (1.0 - cfg.rate)
    return x * mask, mask


def huber_loss(x, y, cfg: HuberConfig = HuberConfig()) -> float:
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE)
    if x.shape != y.shape:
        raise ShapeError(f"huber_loss: shapes {x.shape} and {y.shape} differ")
    a = cfg.alpha
    r = np.abs(x - y)
    per = np.where(r < a, 0.5 * r * r, a * r - 0.5 * a * a)
    return float(per.mean())


def huber_grad(x, y, cfg: HuberConfig = HuberConfig()) -> np.ndarray:
    """Gradient of the mean Huber loss with respect to ``x``."""
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE)
    if x.shape != y.shape:
        raise ShapeError(f"huber_grad: shapes {x.shape} and {y.shape} differ")
    r = x - y
    g = np.clip(r, -cfg.alpha, cfg.alpha)
    return g / r.size


# ---------------------------------------------------------------------------
# stateful layers (cache + backward)
# ---------------------------------------------------------------------------


class Layer:
    def parameters(self) -> dict[str, np.ndarray]:
        return {}

    def gradients(self) -> dict[str, np.ndarray]:
        return {}

    def _cached(self):
        if self._cache is None:
            raise UsageError(f"{type(self).__name__}.backward called without a cached forward")
        return self._cache


class Dense(Layer):
    def __init__(self, params: DenseLayer):
        self.p = params
        self.grad_weights = np.zeros_like(params.weights)
        self.grad_bias = np.zeros_like(params.bias)
        self._cache = None

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        out = dense_forward(self.p, x)
        self._cache = x
        return out

    def backward(self, grad):
        x = self._cached()
        x2 = np.atleast_2d(x)
        g2 = np.atleast_2d(grad)
        self.grad_weights = g2.T @ x2
        self.grad_bias = g2.sum(axis=0)
        return grad @ self.p.weights

    def parameters(self):
        return {"weight": self.p.weights, "bias": self.p.bias}

    def gradients(self):
        return {"weight": self.grad_weights, "bias": self.grad_bias}


class LayerNorm(Layer):
    def __init__(self, params: LayerNormParams):
        self.p = params
        self.grad_gamma = np.zeros_like(params.gamma)
        self.grad_beta = np.zeros_like(params.beta)
        self._cache = None

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        _check_last_dim(x, self.p.gamma.shape[0], "layer_norm")
        xhat, inv_std = _ln_stats(x, self.p.eps)
        self._cache = (xhat, inv_std)
        return self.p.gamma * xhat + self.p.beta

    def backward(self, grad):
        xhat, inv_std = self._cached()
        g2 = np.atleast_2d(grad)
        self.grad_gamma = (g2 * np.atleast_2d(xhat)).sum(axis=0)
        self.grad_beta = g2.sum(axis=0)
        dxhat = grad * self.p.gamma
        return inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )

    def parameters(self):
        return {"gamma": self.p.gamma, "beta": self.p.beta}

    def gradients(self):
        return {"gamma": self.grad_gamma, "beta": self.grad_beta}


class LeakyReLU(Layer):
    def __init__(self, cfg: LeakyReluConfig = LeakyReluConfig()):
        self.cfg = cfg
        self._cache = None

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        self._cache = x
        return leaky_relu(x, self.cfg)

    def backward(self, grad):
        x = self._cached()
        return np.where(x >= 0, grad, self.cfg.slope * grad)


class Dropout(Layer):
    """Inverted dropout driven by its own seeded generator, so the mask
    sequence is a function of the seed and the number of calls."""

    def __init__(self, cfg: DropoutConfig = DropoutConfig()):
        self.cfg = cfg
        self.training = cfg.mode == "train"
        self.rng = np.random.default_rng(cfg.seed)
        self._cache = None

    def reseed(self, seed: int | None = None):
        self.rng = np.random.default_rng(self.cfg.seed if seed is None else seed)

    def forward(self, x):
        mode = "train" if self.training else "eval"
        cfg = DropoutConfig(self.cfg.rate, self.cfg.seed, mode)
        out, mask = dropout_forward(x, cfg, self.rng)
        self._cache = mask
        return out

    def backward(self, grad):
        return grad * self._cached()


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update, applied in place to ``params``.

    Blocks are visited in the insertion order of ``params``. The step counter
    is incremented before bias correction.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter block {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        _adam_kernel(
            p.reshape(-1), np.ascontiguousarray(g, dtype=DTYPE).reshape(-1),
            state.m[name].reshape(-1), state.v[name].reshape(-1),
            state.lr, b1, b2, state.eps, c1, c2,
        )
    return params


@njit(cache=True)
def _adam_kernel(p, g, m, v, lr, b1, b2, eps, c1, c2):
    for i in range(p.size):
        m[i] = b1 * m[i] + (1.0 - b1) * g[i]
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
        p[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)
