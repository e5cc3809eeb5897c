"""Finite-difference checks of every backward pass on small random networks."""
from __future__ import annotations

import numpy as np

from .losses import LossConfig, am_softmax_loss, combined_loss, pair_bce_loss, smoothed_cross_entropy
from .models import DistanceConfig, EncoderConfig, distance_forward, encode_forward, init_models
from .numeric import Param, grad_check, make_rng
from .pairing import enumerate_pairs

AUX_VARIANTS = ("standard", "additive_margin")
# central differences are meaningless across a LeakyReLU kink, so batches
# whose pre-activations come this close to zero are redrawn
KINK_MARGIN = 1e-3


def random_bundle(seed, input_dim=7, hidden=(5,), d=3, depth=2, width=6, dropout_p=0.1,
                  num_classes=2):
    """Bundle whose zero-initialized layers are randomized so all paths carry gradient."""
    enc = EncoderConfig(input_dim, d, hidden)
    dist = DistanceConfig(d, depth, width, dropout_p)
    bundle = init_models(enc, dist, num_classes, seed, head_init="uniform")
    rng = make_rng(seed, "gradcheck.params")
    for W, b in bundle.encoder + bundle.distance:
        W.value[...] = rng.normal(scale=0.6, size=W.shape)
        b.value[...] = rng.normal(scale=0.1, size=b.shape)
    bundle.head_b.value[...] = rng.normal(scale=0.1, size=bundle.head_b.shape)
    return bundle


def full_network_error(seed: int, aux_kind: str, eps: float = 1e-5) -> float:
    """Max relative error of L' over encoder, distance model and head.

    Six examples from two classes; dropout is on but its mask is frozen by
    re-seeding the dropout stream for every evaluation.
    """
    bundle = random_bundle(seed)
    rng = make_rng(seed, "gradcheck.batch")
    y = np.array([0, 0, 0, 1, 1, 1])
    pairs = enumerate_pairs(y)
    while True:
        x = rng.normal(size=(6, bundle.enc_cfg.input_dim))
        if _clear_of_kinks(bundle, x, pairs):
            break
    cfg = LossConfig(aux_kind, label_smoothing=0.1, am_scale=5.0, am_margin=0.2)

    def loss():
        return combined_loss(bundle, x, y, pairs, cfg, train_mode=True,
                             rng=make_rng(seed, "gradcheck.mask")).total

    return grad_check(loss, bundle.parameters(), eps)


def _clear_of_kinks(bundle, x, pairs):
    z, (_, enc_pre) = encode_forward(bundle, x)
    idx = np.concatenate([pairs.pos, pairs.neg]).reshape(-1, 2)
    _, (_, dist_pre, _) = distance_forward(bundle, z[idx[:, 0]], z[idx[:, 1]])
    return all(np.min(np.abs(a)) > KINK_MARGIN for a in enc_pre + dist_pre)


def component_errors(seed: int, eps: float = 1e-5) -> dict:
    """Checks of the individual losses against their own input gradients."""
    rng = make_rng(seed, "gradcheck.components")
    out = {}

    pos = Param(rng.normal(size=(4, 1)))
    neg = Param(rng.normal(size=(5, 1)))

    def bce():
        loss, dp, dn = pair_bce_loss(pos.value, neg.value)
        pos.grad += dp
        neg.grad += dn
        return loss

    out["pair_bce"] = grad_check(bce, [pos, neg], eps)

    logits = Param(rng.normal(size=(5, 4)))
    labels = rng.integers(0, 4, size=5)

    def ce():
        loss, d = smoothed_cross_entropy(logits.value, labels, 0.1)
        logits.grad += d
        return loss

    out["smoothed_ce"] = grad_check(ce, [logits], eps)

    z = Param(rng.normal(size=(5, 3)))
    W = Param(rng.normal(size=(3, 4)))

    def am():
        loss, dz, dW = am_softmax_loss(z.value, W.value, labels, 5.0, 0.3, 0.1)
        z.grad += dz
        W.grad += dW
        return loss

    out["am_softmax"] = grad_check(am, [z, W], eps)
    return out


def run_suite(n_seeds: int = 20, base_seed: int = 0, eps: float = 1e-5) -> dict:
    """Worst relative error per check over ``n_seeds`` random instances."""
    worst: dict = {}
    for s in range(base_seed, base_seed + n_seeds):
        for kind in AUX_VARIANTS:
            key = f"full_network[{kind}]"
            worst[key] = max(worst.get(key, 0.0), full_network_error(s, kind, eps))
        for key, err in component_errors(s, eps).items():
            worst[key] = max(worst.get(key, 0.0), err)
    return worst
