"""Pair discrimination loss, auxiliary classification losses and their sum.

Each loss returns its value together with gradients with respect to its
inputs. ``combined_loss`` runs the full forward pass of a batch and pushes
gradients into every parameter of the bundle in a single backward pass.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .errors import BatchError, ConfigError, DataError
from .models import (
    ModelBundle, classify_backward, classify_logits, distance_backward, distance_forward,
    encode_backward, encode_forward,
)
from .pairing import PairIndex

log = logging.getLogger(__name__)

AUX_KINDS = ("standard", "additive_margin", "none")
NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    aux_kind: str = "standard"
    label_smoothing: float = 0.0
    am_scale: float = 30.0
    am_margin: float = 0.35
    aux_weight: float = 1.0

    def __post_init__(self):
        if self.aux_kind not in AUX_KINDS:
            raise ConfigError(f"aux_kind must be one of {AUX_KINDS}, got {self.aux_kind!r}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.am_scale <= 0:
            raise ConfigError(f"am_scale must be > 0, got {self.am_scale}")
        if self.am_margin < 0:
            raise ConfigError(f"am_margin must be >= 0, got {self.am_margin}")
        if self.aux_weight < 0:
            raise ConfigError(f"aux_weight must be >= 0, got {self.aux_weight}")

    @property
    def effective_aux_weight(self) -> float:
        return 0.0 if self.aux_kind == "none" else self.aux_weight


@dataclass(frozen=True)
class LossBreakdown:
    pair: float
    aux: float
    total: float


def pair_bce_loss(pos_logits, neg_logits):
    """``-mean log sigmoid(pos) - mean log(1 - sigmoid(neg))`` on raw logits.

    Returns ``(loss, d_pos, d_neg)``. An empty side contributes zero.
    """
    pos = np.asarray(pos_logits, dtype=np.float64)
    neg = np.asarray(neg_logits, dtype=np.float64)
    if pos.size == 0 and neg.size == 0:
        raise BatchError("pair loss needs at least one positive or negative pair")
    loss = 0.0
    d_pos = np.zeros_like(pos)
    d_neg = np.zeros_like(neg)
    if pos.size:
        # -log sigmoid(x) = softplus(-x)
        loss += float(np.mean(np.logaddexp(0.0, -pos)))
        d_pos = (expit(pos) - 1.0) / pos.size
    else:
        log.warning("no positive pairs in batch; positive term set to 0")
    if neg.size:
        loss += float(np.mean(np.logaddexp(0.0, neg)))
        d_neg = expit(neg) / neg.size
    else:
        log.warning("no negative pairs in batch; negative term set to 0")
    return loss, d_pos, d_neg


def _check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"labels must be in [0, {n_classes}), got range "
                        f"[{labels.min()}, {labels.max()}]")
    return labels.astype(np.intp)


def smoothed_cross_entropy(logits, labels, eps: float = 0.0):
    """Mean cross-entropy against ``(1 - eps) * onehot + eps / L``.

    Returns ``(loss, d_logits)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n, L = logits.shape
    labels = _check_labels(labels, L)
    if n == 0:
        return 0.0, np.zeros_like(logits)
    target = np.full((n, L), eps / L)
    target[np.arange(n), labels] += 1.0 - eps
    logp = log_softmax(logits, axis=1)
    loss = float(-np.sum(target * logp) / n)
    d_logits = (softmax(logits, axis=1) - target) / n
    return loss, d_logits


def _normalize(v, axis):
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm < NORM_FLOOR):
        log.warning("zero-norm vector in additive-margin loss; norm floored at %g", NORM_FLOOR)
    norm = np.maximum(norm, NORM_FLOOR)
    return v / norm, norm


def _normalize_backward(unit, norm, d_unit, axis):
    floored = norm <= NORM_FLOOR
    radial = np.sum(unit * d_unit, axis=axis, keepdims=True)
    dv = (d_unit - np.where(floored, 0.0, radial) * unit) / norm
    return dv


def am_softmax_loss(z, head_weight, labels, s: float = 30.0, m: float = 0.35, eps: float = 0.0):
    """Additive-margin softmax on unit-normalized embeddings and class weights.

    Logits are ``s * cos`` with ``m`` subtracted from the true-class cosine;
    the label-smoothed cross-entropy is applied on top. Returns
    ``(loss, d_z, d_head_weight)``.
    """
    if s <= 0 or m < 0:
        raise ConfigError(f"need s > 0 and m >= 0, got s={s}, m={m}")
    z = np.asarray(z, dtype=np.float64)
    W = np.asarray(head_weight, dtype=np.float64)
    n = z.shape[0]
    labels = _check_labels(labels, W.shape[1])
    z_unit, z_norm = _normalize(z, axis=1)
    w_unit, w_norm = _normalize(W, axis=0)
    cos = z_unit @ w_unit
    logits = s * cos
    logits[np.arange(n), labels] -= s * m
    loss, d_logits = smoothed_cross_entropy(logits, labels, eps)
    d_cos = s * d_logits
    d_z = _normalize_backward(z_unit, z_norm, d_cos @ w_unit.T, axis=1)
    d_W = _normalize_backward(w_unit, w_norm, z_unit.T @ d_cos, axis=0)
    return loss, d_z, d_W


def combined_loss(bundle: ModelBundle, x, labels, pairs: PairIndex, cfg: LossConfig,
                  train_mode: bool = True, rng=None, backward: bool = True,
                  encoder_grad: bool = True) -> LossBreakdown:
    """Pair loss plus weighted auxiliary loss for one batch.

    With ``backward`` set, gradients are accumulated into the encoder,
    distance model and head parameters (encoder skipped when
    ``encoder_grad`` is false).
    """
    labels = np.asarray(labels)
    z, enc_cache = encode_forward(bundle, x)
    n_pos = len(pairs.pos)
    idx = np.concatenate([pairs.pos, pairs.neg]).reshape(-1, 2)
    logits, dist_cache = distance_forward(bundle, z[idx[:, 0]], z[idx[:, 1]], train_mode, rng)
    logits = logits[:, 0]
    pair_loss, d_pos, d_neg = pair_bce_loss(logits[:n_pos], logits[n_pos:])

    weight = cfg.effective_aux_weight
    aux_loss = 0.0
    d_z_aux = None
    if weight > 0:
        if cfg.aux_kind == "standard":
            head_logits = classify_logits(bundle, z)
            aux_loss, d_head = smoothed_cross_entropy(head_logits, labels, cfg.label_smoothing)
            if backward:
                d_z_aux = classify_backward(bundle, z, weight * d_head)
        else:
            aux_loss, d_z_am, d_W = am_softmax_loss(z, bundle.head_W.value, labels, cfg.am_scale,
                                                    cfg.am_margin, cfg.label_smoothing)
            if backward:
                bundle.head_W.grad += weight * d_W
                d_z_aux = weight * d_z_am

    if backward:
        d_logits = np.concatenate([d_pos, d_neg]).reshape(-1, 1)
        d_za, d_zb = distance_backward(bundle, dist_cache, d_logits)
        if encoder_grad:
            d_z = np.zeros_like(z)
            np.add.at(d_z, idx[:, 0], d_za)
            np.add.at(d_z, idx[:, 1], d_zb)
            if d_z_aux is not None:
                d_z += d_z_aux
            encode_backward(bundle, enc_cache, d_z)

    return LossBreakdown(pair_loss, aux_loss, pair_loss + weight * aux_loss)
