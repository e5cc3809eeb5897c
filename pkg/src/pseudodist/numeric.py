"""Dense float64 building blocks for small feed-forward networks.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and shape
``(rows, cols)``. Every layer comes as a forward function plus a backward
function; backward functions accumulate into ``Param.grad`` and return the
gradient with respect to their input.

Random streams use numpy's PCG64 bit generator seeded through
``SeedSequence``. A named sub-stream for seed ``s`` and name ``k`` is
``SeedSequence(s, spawn_key=(crc32(k),))``, so adding a new consumer never
shifts the draws seen by existing ones.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

DTYPE = np.float64


def make_rng(seed: int, stream: str = "") -> np.random.Generator:
    """PCG64 generator for the named sub-stream of ``seed``."""
    key = (zlib.crc32(stream.encode("utf-8")),) if stream else ()
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def as_matrix(x, cols: int | None = None, what: str = "input") -> np.ndarray:
    m = np.asarray(x, dtype=DTYPE)
    if m.ndim == 1:
        m = m.reshape(1, -1) if cols is None or m.size == cols else m.reshape(-1, cols)
    if m.ndim != 2:
        raise DimensionError(f"{what}: expected a 2-D matrix, got shape {m.shape}")
    if cols is not None and m.shape[1] != cols:
        raise DimensionError(f"{what}: expected {cols} columns, got shape {m.shape}")
    return m


@dataclass(eq=False)
class Param:
    """A trainable tensor with its gradient and momentum buffer.

    ``decay`` marks tensors that receive weight decay (weights, not biases).
    """

    value: np.ndarray
    name: str = ""
    decay: bool = True
    grad: np.ndarray = field(init=False)
    momentum_buffer: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        if self.value.ndim != 2:
            raise DimensionError(f"param {self.name!r} must be 2-D, got {self.value.shape}")
        self.grad = np.zeros_like(self.value)
        self.momentum_buffer = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def copy(self) -> "Param":
        p = Param(self.value.copy(), self.name, self.decay)
        p.grad[...] = self.grad
        p.momentum_buffer[...] = self.momentum_buffer
        return p


def affine_forward(x: np.ndarray, W: Param, b: Param | None) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"affine: input {x.shape} incompatible with weight {W.shape}")
    y = x @ W.value
    if b is not None:
        if b.shape != (1, W.shape[1]):
            raise DimensionError(f"affine: bias {b.shape} incompatible with weight {W.shape}")
        y += b.value
    return y


def affine_backward(x: np.ndarray, W: Param, b: Param | None, dy: np.ndarray) -> np.ndarray:
    """Accumulate dW = x^T dy, db = colsum(dy); return dx = dy W^T."""
    if dy.shape != (x.shape[0], W.shape[1]):
        raise DimensionError(f"affine backward: dy {dy.shape} vs expected {(x.shape[0], W.shape[1])}")
    W.grad += x.T @ dy
    if b is not None:
        b.grad += dy.sum(axis=0, keepdims=True)
    return dy @ W.value.T


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    # max(x, slope * x) equals the two-branch form for 0 < slope < 1
    y = np.multiply(x, slope)
    np.maximum(x, y, out=y)
    return y


def leaky_relu_backward(x: np.ndarray, dy: np.ndarray, slope: float) -> np.ndarray:
    # strict > puts x == 0 on the slope branch
    g = np.multiply(x > 0, 1.0 - slope)
    g += slope
    g *= dy
    return g


def dropout(x: np.ndarray, p: float, train_mode: bool, rng: np.random.Generator | None):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` is None when inactive.

    The mask already contains the 1/(1-p) survivor scaling, so backward is
    simply ``dy * mask``.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not train_mode or p == 0.0:
        return x, None
    if rng is None:
        raise ConfigError("dropout in train mode needs an rng")
    keep = rng.random(x.shape) >= p
    mask = keep / (1.0 - p)
    return x * mask, mask


def dropout_backward(dy: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return dy if mask is None else dy * mask


def global_grad_norm(params) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


def grad_check(loss_fn, params, eps: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn()`` must return the scalar loss and accumulate its gradient
    into ``params`` each time it is called; it has to be deterministic, so
    dropout must be disabled or its mask frozen. With ``max_coords`` only a
    random subset of coordinates is probed.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError(f"eps must be in [1e-7, 1e-3], got {eps}")
    params = list(params)
    for p in params:
        p.zero_grad()
    f0 = loss_fn()
    if not np.isfinite(f0):
        raise NumericError(f"grad_check: loss is not finite ({f0})")
    analytic = [p.grad.copy() for p in params]

    coords = [(k, idx) for k, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng if rng is not None else make_rng(0, "grad_check")
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for k, idx in coords:
        p = params[k]
        orig = p.value[idx]
        p.value[idx] = orig + eps
        f_plus = loss_fn()
        p.value[idx] = orig - eps
        f_minus = loss_fn()
        p.value[idx] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"grad_check: non-finite loss at {p.name}{idx}")
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = analytic[k][idx]
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)

    for p in params:
        p.zero_grad()
    return worst
