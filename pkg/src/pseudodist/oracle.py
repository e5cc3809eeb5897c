"""Isotropic Gaussian class-conditional tasks with closed-form pair posteriors.

For class means mu_c, shared variance s2 and priors pi, same-class pairs
have density ``p+(a, b) = sum_c w_c N(a; mu_c) N(b; mu_c)`` with
``w_c ~ pi_c^2`` and different-class pairs ``p-(a, b) = sum_{c != c'}
v_cc' N(a; mu_c) N(b; mu_c')`` with ``v_cc' ~ pi_c pi_c'``. The optimal
pair scorer is ``lr / (1 + lr)`` with ``lr = p+ / p-``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .errors import ConfigError, DimensionError, NumericError
from .models import ModelBundle, distance_score, encode
from .numeric import make_rng
from .scoring import compute_eer

NEGATIVE_MODES = ("conditional", "product")


@dataclass(frozen=True)
class GaussianSpec:
    class_means: np.ndarray  # L x dims
    variance: float = 1.0
    priors: np.ndarray | None = None
    negatives: str = "conditional"

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.class_means, dtype=np.float64))
        object.__setattr__(self, "class_means", means)
        L = means.shape[0]
        priors = np.full(L, 1.0 / L) if self.priors is None else np.asarray(self.priors, dtype=np.float64)
        object.__setattr__(self, "priors", priors)
        if L < 2:
            raise ConfigError("a verification task needs at least two classes")
        if self.variance < 0:
            raise ConfigError(f"variance must be >= 0, got {self.variance}")
        if priors.shape != (L,) or np.any(priors <= 0) or not np.isclose(priors.sum(), 1.0):
            raise ConfigError(f"priors must be {L} positive numbers summing to 1, got {priors}")
        # coincident means are accepted: they give the indistinguishable-class task
        if self.negatives not in NEGATIVE_MODES:
            raise ConfigError(f"negatives must be one of {NEGATIVE_MODES}, got {self.negatives!r}")

    @property
    def dims(self) -> int:
        return self.class_means.shape[1]

    @property
    def num_classes(self) -> int:
        return self.class_means.shape[0]

    def same_class_weights(self) -> np.ndarray:
        w = self.priors ** 2
        return w / w.sum()

    def diff_class_weights(self) -> np.ndarray:
        """L x L weights over (class of a, class of b) for negative pairs."""
        w = np.outer(self.priors, self.priors)
        if self.negatives == "conditional":
            np.fill_diagonal(w, 0.0)
        return w / w.sum()


def synth_generate(spec: GaussianSpec, n_per_class: int, seed: int):
    """``(features, labels)`` with ``n_per_class`` draws from each class."""
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = make_rng(seed, "synth")
    sd = np.sqrt(spec.variance)
    labels = np.repeat(np.arange(spec.num_classes), n_per_class)
    x = spec.class_means[labels] + sd * rng.standard_normal((labels.size, spec.dims))
    return x, labels


def _log_normal(x, spec):
    """n x L matrix of log N(x_i; mu_c, s2 I)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != spec.dims:
        raise DimensionError(f"points have {x.shape[1]} dims, spec has {spec.dims}")
    if spec.variance == 0:
        raise NumericError("densities are degenerate for zero variance")
    sq = np.sum((x[:, None, :] - spec.class_means[None, :, :]) ** 2, axis=2)
    return -0.5 * sq / spec.variance - 0.5 * spec.dims * np.log(2 * np.pi * spec.variance)


def log_pair_densities(spec: GaussianSpec, xa, xb):
    """``(log p+, log p-)`` per row pair."""
    la = _log_normal(xa, spec)
    lb = _log_normal(xb, spec)
    if la.shape[0] != lb.shape[0]:
        raise DimensionError(f"{la.shape[0]} vs {lb.shape[0]} points")
    with np.errstate(divide="ignore"):
        log_w_same = np.log(spec.same_class_weights())
        log_w_diff = np.log(spec.diff_class_weights())
    log_pos = logsumexp(la + lb + log_w_same[None, :], axis=1)
    joint = la[:, :, None] + lb[:, None, :] + log_w_diff[None, :, :]
    log_neg = logsumexp(joint.reshape(len(la), -1), axis=1)
    bad = ~(np.isfinite(log_pos) | np.isfinite(log_neg))
    if np.any(bad):
        raise NumericError(f"both pair densities underflow at row {int(np.flatnonzero(bad)[0])}")
    return log_pos, log_neg


def analytic_pair_posterior(spec: GaussianSpec, xa, xb):
    """``(lr, d_star)`` arrays; ``d_star = lr / (1 + lr)``."""
    log_pos, log_neg = log_pair_densities(spec, xa, xb)
    log_lr = log_pos - log_neg
    with np.errstate(over="ignore"):
        lr = np.exp(log_lr)
    return lr, expit(log_lr)


def sample_pairs(spec: GaussianSpec, n: int, target: bool, rng):
    """``n`` pairs drawn from p+ (``target``) or p-."""
    L = spec.num_classes
    if target:
        ca = rng.choice(L, size=n, p=spec.same_class_weights())
        cb = ca
    else:
        flat = rng.choice(L * L, size=n, p=spec.diff_class_weights().ravel())
        ca, cb = np.divmod(flat, L)
    sd = np.sqrt(spec.variance)
    xa = spec.class_means[ca] + sd * rng.standard_normal((n, spec.dims))
    xb = spec.class_means[cb] + sd * rng.standard_normal((n, spec.dims))
    return xa, xb


@dataclass(frozen=True)
class OracleEER:
    eer: float
    stderr: float


def oracle_eer(spec: GaussianSpec, n_mc: int, seed: int) -> OracleEER:
    """Monte Carlo EER of the likelihood-ratio scorer, the task's floor."""
    if n_mc < 1000:
        raise ConfigError(f"n_mc must be >= 1000, got {n_mc}")
    rng = make_rng(seed, "oracle_eer")
    ta, tb = sample_pairs(spec, n_mc, True, rng)
    na, nb = sample_pairs(spec, n_mc, False, rng)
    log_pos_t, log_neg_t = log_pair_densities(spec, ta, tb)
    log_pos_n, log_neg_n = log_pair_densities(spec, na, nb)
    scores = np.concatenate([log_pos_t - log_neg_t, log_pos_n - log_neg_n])
    labels = np.concatenate([np.ones(n_mc, dtype=int), np.zeros(n_mc, dtype=int)])
    eer, _ = compute_eer(scores, labels)
    # each error rate at the EER point is a binomial proportion over n_mc trials
    stderr = float(np.sqrt(max(eer * (1 - eer), 1.0 / n_mc) / (2 * n_mc)))
    return OracleEER(eer, stderr)


@dataclass(frozen=True)
class OracleComparison:
    mae: float
    trained_eer: float
    oracle_eer: float


def _is_identity_encoder(bundle: ModelBundle) -> bool:
    e = bundle.enc_cfg
    if e.hidden_dims or e.input_dim != e.embedding_dim or len(bundle.encoder) != 1:
        return False
    W, b = bundle.encoder[0]
    return bool(np.array_equal(W.value, np.eye(e.input_dim)) and not np.any(b.value))


def compare_to_oracle(bundle: ModelBundle, spec: GaussianSpec, n_pairs: int, seed: int):
    """Mean |D - d_star| and both EERs on a balanced held-out pair sample."""
    if not _is_identity_encoder(bundle):
        raise ConfigError("compare_to_oracle needs an identity encoder (passthrough, D == d)")
    if bundle.enc_cfg.input_dim != spec.dims:
        raise DimensionError(f"bundle dims {bundle.enc_cfg.input_dim} != spec dims {spec.dims}")
    rng = make_rng(seed, "compare_to_oracle")
    n_t = n_pairs // 2
    ta, tb = sample_pairs(spec, n_t, True, rng)
    na, nb = sample_pairs(spec, n_pairs - n_t, False, rng)
    xa = np.concatenate([ta, na])
    xb = np.concatenate([tb, nb])
    labels = np.concatenate([np.ones(n_t, dtype=int), np.zeros(n_pairs - n_t, dtype=int)])
    probs, _ = distance_score(bundle, encode(bundle, xa), encode(bundle, xb))
    lr, d_star = analytic_pair_posterior(spec, xa, xb)
    mae = float(np.mean(np.abs(probs[:, 0] - d_star)))
    trained = compute_eer(probs[:, 0], labels)[0]
    oracle = compute_eer(d_star, labels)[0]
    return OracleComparison(mae, trained, oracle)
