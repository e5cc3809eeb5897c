"""Encoder, distance model and classification head.

The encoder maps R^D to R^d. The distance model scores a concatenated pair
``[z_a | z_b]`` (enrollment side first) with a single logit; its output
layer starts at exactly zero so every pair initially scores 0.5. The head
is one affine layer d -> L feeding the auxiliary classification loss.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DimensionError
from .numeric import (
    DTYPE, Param, affine_backward, affine_forward, as_matrix, dropout,
    dropout_backward, leaky_relu, leaky_relu_backward, make_rng,
)

log = logging.getLogger(__name__)

_PROB_LO = np.finfo(DTYPE).tiny
_PROB_HI = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    embedding_dim: int
    hidden_dims: tuple = ()
    slope: float = 0.01
    identity_init: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, self.embedding_dim) + self.hidden_dims
        if any(int(n) < 1 for n in dims):
            raise ConfigError(f"encoder dims must be >= 1: {dims}")
        if not 0.0 < self.slope < 1.0:
            raise ConfigError(f"LeakyReLU slope must be in (0, 1), got {self.slope}")
        if self.identity_init and (self.hidden_dims or self.input_dim != self.embedding_dim):
            raise ConfigError("identity encoder needs no hidden layers and input_dim == embedding_dim")
        if self.input_dim < self.embedding_dim:
            log.warning("encoder input_dim %d is smaller than embedding_dim %d",
                        self.input_dim, self.embedding_dim)


@dataclass(frozen=True)
class DistanceConfig:
    embedding_dim: int
    depth: int = 3
    width: int = 256
    dropout_p: float = 0.1
    slope: float = 0.01

    def __post_init__(self):
        if self.embedding_dim < 1 or self.depth < 1 or self.width < 1:
            raise ConfigError(f"distance model dims must be >= 1: d={self.embedding_dim}, "
                              f"depth={self.depth}, width={self.width}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not 0.0 < self.slope < 1.0:
            raise ConfigError(f"LeakyReLU slope must be in (0, 1), got {self.slope}")

    @property
    def input_dim(self):
        return 2 * self.embedding_dim


Layer = tuple  # (W: Param, b: Param)


@dataclass(eq=False)
class ModelBundle:
    enc_cfg: EncoderConfig
    dist_cfg: DistanceConfig
    num_classes: int
    encoder: list
    distance: list
    head_W: Param
    head_b: Param | None = None
    train_step: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        e, d = self.enc_cfg, self.dist_cfg
        if e.embedding_dim != d.embedding_dim:
            raise DimensionError(f"encoder emits d={e.embedding_dim} but distance model expects "
                                 f"d={d.embedding_dim}")
        enc_dims = (e.input_dim,) + e.hidden_dims + (e.embedding_dim,)
        _check_chain("encoder", self.encoder, enc_dims)
        dist_dims = (d.input_dim,) + (d.width,) * d.depth + (1,)
        _check_chain("distance", self.distance, dist_dims)
        if self.num_classes < 1:
            raise DimensionError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.head_W.shape != (e.embedding_dim, self.num_classes):
            raise DimensionError(f"head weight {self.head_W.shape} != {(e.embedding_dim, self.num_classes)}")
        if self.head_b is not None and self.head_b.shape != (1, self.num_classes):
            raise DimensionError(f"head bias {self.head_b.shape} != {(1, self.num_classes)}")

    def named_parameters(self):
        for group, layers in (("encoder", self.encoder), ("distance", self.distance)):
            for k, (W, b) in enumerate(layers):
                yield f"{group}.{k}.W", W
                yield f"{group}.{k}.b", b
        yield "head.W", self.head_W
        if self.head_b is not None:
            yield "head.b", self.head_b

    def parameters(self, encoder=True, distance=True, head=True):
        out = []
        if encoder:
            out += [p for layer in self.encoder for p in layer]
        if distance:
            out += [p for layer in self.distance for p in layer]
        if head:
            out.append(self.head_W)
            if self.head_b is not None:
                out.append(self.head_b)
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def copy(self) -> "ModelBundle":
        return copy.deepcopy(self)

    def config_dict(self) -> dict:
        return {
            "encoder": asdict(self.enc_cfg),
            "distance": asdict(self.dist_cfg),
            "num_classes": self.num_classes,
            "head_bias": self.head_b is not None,
            "train_step": self.train_step,
            "meta": self.meta,
        }


def _check_chain(name, layers, dims):
    if len(layers) != len(dims) - 1:
        raise DimensionError(f"{name}: {len(layers)} layers for dimension chain {dims}")
    for k, (W, b) in enumerate(layers):
        if W.shape != (dims[k], dims[k + 1]) or b.shape != (1, dims[k + 1]):
            raise DimensionError(f"{name} layer {k}: W{W.shape} b{b.shape}, expected "
                                 f"W{(dims[k], dims[k + 1])}")


def _uniform_layer(rng, fan_in, fan_out, gain_sq, name):
    bound = np.sqrt(3.0 * gain_sq / fan_in)
    W = Param(rng.uniform(-bound, bound, size=(fan_in, fan_out)), f"{name}.W")
    b = Param(np.zeros((1, fan_out)), f"{name}.b", decay=False)
    return W, b


def init_models(enc_cfg: EncoderConfig, dist_cfg: DistanceConfig, num_classes: int, seed: int,
                head_bias: bool = True, head_init: str = "zero") -> ModelBundle:
    """Fresh bundle. Hidden layers use fan-in uniform He scaling for LeakyReLU.

    ``head_init`` is ``"zero"`` (logits start uniform) or ``"uniform"``;
    the additive-margin loss normalizes the head columns and needs the
    latter.
    """
    if enc_cfg.embedding_dim != dist_cfg.embedding_dim:
        raise ConfigError(f"encoder d={enc_cfg.embedding_dim} != distance d={dist_cfg.embedding_dim}")
    if num_classes < 1:
        raise ConfigError(f"num_classes must be >= 1, got {num_classes}")
    rng = make_rng(seed, "init")

    enc_dims = (enc_cfg.input_dim,) + enc_cfg.hidden_dims + (enc_cfg.embedding_dim,)
    he = 2.0 / (1.0 + enc_cfg.slope ** 2)
    encoder = []
    for k in range(len(enc_dims) - 1):
        last = k == len(enc_dims) - 2
        encoder.append(_uniform_layer(rng, enc_dims[k], enc_dims[k + 1], 1.0 if last else he,
                                      f"encoder.{k}"))
    if enc_cfg.identity_init:
        encoder[0][0].value[...] = np.eye(enc_cfg.input_dim)

    he = 2.0 / (1.0 + dist_cfg.slope ** 2)
    dist_dims = (dist_cfg.input_dim,) + (dist_cfg.width,) * dist_cfg.depth
    distance = [_uniform_layer(rng, dist_dims[k], dist_dims[k + 1], he, f"distance.{k}")
                for k in range(dist_cfg.depth)]
    distance.append((Param(np.zeros((dist_cfg.width, 1)), f"distance.{dist_cfg.depth}.W"),
                     Param(np.zeros((1, 1)), f"distance.{dist_cfg.depth}.b", decay=False)))

    d = enc_cfg.embedding_dim
    if head_init == "zero":
        head_W = np.zeros((d, num_classes))
    elif head_init == "uniform":
        bound = np.sqrt(3.0 / d)
        head_W = rng.uniform(-bound, bound, size=(d, num_classes))
    else:
        raise ConfigError(f"unknown head_init {head_init!r}")
    head_b = Param(np.zeros((1, num_classes)), "head.b", decay=False) if head_bias else None
    return ModelBundle(enc_cfg, dist_cfg, num_classes, encoder, distance,
                       Param(head_W, "head.W"), head_b)


# ---------------------------------------------------------------------------
# forward / backward


def encode_forward(bundle: ModelBundle, x):
    """Encoder forward keeping what backward needs."""
    x = as_matrix(x, bundle.enc_cfg.input_dim, "encoder input")
    slope = bundle.enc_cfg.slope
    inputs, pre = [], []
    h = x
    n_layers = len(bundle.encoder)
    for k, (W, b) in enumerate(bundle.encoder):
        inputs.append(h)
        a = affine_forward(h, W, b)
        if k < n_layers - 1:
            pre.append(a)
            h = leaky_relu(a, slope)
        else:
            h = a
    return h, (inputs, pre)


def encode_backward(bundle: ModelBundle, cache, dz):
    inputs, pre = cache
    slope = bundle.enc_cfg.slope
    g = dz
    for k in range(len(bundle.encoder) - 1, -1, -1):
        W, b = bundle.encoder[k]
        if k < len(bundle.encoder) - 1:
            g = leaky_relu_backward(pre[k], g, slope)
        g = affine_backward(inputs[k], W, b, g)
    return g


def encode(bundle: ModelBundle, x, train_mode: bool = False) -> np.ndarray:
    # the encoder has no stochastic layers; train_mode is accepted for symmetry
    z, _ = encode_forward(bundle, x)
    return z


def distance_forward(bundle: ModelBundle, z_a, z_b, train_mode: bool = False, rng=None):
    """Logits for rows of (z_a, z_b); dropout sits only before the output layer."""
    cfg = bundle.dist_cfg
    z_a = as_matrix(z_a, cfg.embedding_dim, "distance input z_a")
    z_b = as_matrix(z_b, cfg.embedding_dim, "distance input z_b")
    if z_a.shape[0] != z_b.shape[0]:
        raise DimensionError(f"distance: z_a has {z_a.shape[0]} rows, z_b has {z_b.shape[0]}")
    h = np.concatenate([z_a, z_b], axis=1)
    inputs, pre = [], []
    for W, b in bundle.distance[:-1]:
        inputs.append(h)
        a = affine_forward(h, W, b)
        pre.append(a)
        h = leaky_relu(a, cfg.slope)
    h, mask = dropout(h, cfg.dropout_p, train_mode, rng)
    inputs.append(h)
    W, b = bundle.distance[-1]
    logits = affine_forward(h, W, b)
    return logits, (inputs, pre, mask)


def distance_backward(bundle: ModelBundle, cache, dlogits):
    inputs, pre, mask = cache
    d = bundle.dist_cfg.embedding_dim
    W, b = bundle.distance[-1]
    g = affine_backward(inputs[-1], W, b, dlogits)
    g = dropout_backward(g, mask)
    for k in range(len(bundle.distance) - 2, -1, -1):
        g = leaky_relu_backward(pre[k], g, bundle.dist_cfg.slope)
        W, b = bundle.distance[k]
        g = affine_backward(inputs[k], W, b, g)
    return g[:, :d], g[:, d:]


def distance_score(bundle: ModelBundle, z_a, z_b, train_mode: bool = False, rng=None):
    """``(probs, logits)``, both m x 1. ``probs`` never reaches exactly 0 or 1."""
    logits, _ = distance_forward(bundle, z_a, z_b, train_mode, rng)
    probs = np.clip(expit(logits), _PROB_LO, _PROB_HI)
    return probs, logits


def classify_logits(bundle: ModelBundle, z) -> np.ndarray:
    z = as_matrix(z, bundle.enc_cfg.embedding_dim, "head input")
    return affine_forward(z, bundle.head_W, bundle.head_b)


def classify_backward(bundle: ModelBundle, z, dlogits):
    return affine_backward(z, bundle.head_W, bundle.head_b, dlogits)
