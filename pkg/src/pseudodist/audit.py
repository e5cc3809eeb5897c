"""How close ``D' = 1 - D`` comes to a metric.

Three statistics are collected: the self-distance ``D'(x, x)``, the
symmetry gap ``|D'(a, b) - D'(b, a)|`` and the triangle slack
``max(D'(b, c) - (D'(a, b) + D'(a, c)), 0)``. The audit only measures;
it never asserts anything about the model.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .errors import ConfigError, DataError
from .models import ModelBundle, distance_score, encode

EXHAUSTIVE_MAX_N = 30


@dataclass(frozen=True)
class PropertyStats:
    values: np.ndarray
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def n(self):
        return int(self.values.size)

    def summary(self) -> dict:
        v = self.values
        return {"n": self.n, "min": float(v.min()), "median": float(np.median(v)),
                "mean": float(v.mean()), "max": float(v.max()),
                "zero_fraction": float(np.mean(v == 0.0))}


@dataclass(frozen=True)
class AuditReport:
    self_distance: PropertyStats
    symmetry_gap: PropertyStats
    triangle_slack: PropertyStats
    seed: int

    def items(self):
        return (("self_distance", self.self_distance), ("symmetry_gap", self.symmetry_gap),
                ("triangle_slack", self.triangle_slack))


def bundle_distance(bundle: ModelBundle):
    """``D'`` as a function of two row-aligned embedding matrices."""
    def dprime(za, zb):
        probs, _ = distance_score(bundle, za, zb)
        return 1.0 - probs[:, 0]
    return dprime


def _stats(values, bins):
    values = np.asarray(values, dtype=np.float64)
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return PropertyStats(values, edges, counts)


def _sample_pairs(n, n_pairs, rng):
    total = comb(n, 2)
    if n_pairs >= total:
        i, j = np.triu_indices(n, k=1)
        return i, j
    flat = np.sort(rng.choice(total, size=n_pairs, replace=False))
    # decode a flat index over the upper triangle, row by row
    row_starts = np.cumsum([0] + [n - 1 - r for r in range(n - 1)])
    i = np.searchsorted(row_starts, flat, side="right") - 1
    j = flat - row_starts[i] + i + 1
    return i, j


def _sample_triplets(n, n_triplets, rng, exhaustive):
    """Ordered triples (a, b, c) of distinct indices, without replacement."""
    total = n * (n - 1) * (n - 2)
    if exhaustive or n_triplets >= total:
        if n > EXHAUSTIVE_MAX_N and n_triplets < total:
            raise ConfigError(f"exhaustive triplets only for n <= {EXHAUSTIVE_MAX_N}")
        grid = np.array(np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij"))
        a, b, c = grid.reshape(3, -1)
        keep = (a != b) & (a != c) & (b != c)
        return a[keep], b[keep], c[keep]
    flat = rng.choice(total, size=n_triplets, replace=False)
    a, rem = np.divmod(flat, (n - 1) * (n - 2))
    b, c = np.divmod(rem, n - 2)
    b = b + (b >= a)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    c = c + (c >= lo)
    c = c + (c >= hi)
    return a, b, c


def audit_properties(dprime, z, n_pairs: int, n_triplets: int, bins: int = 20,
                     rng: np.random.Generator | None = None, seed: int = 0,
                     exhaustive: bool = False) -> AuditReport:
    """Audit any pairwise scorer ``dprime(za, zb) -> D'`` over embeddings ``z``."""
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    if n == 0:
        raise DataError("audit needs a nonempty dataset")
    if n_triplets < 1:
        raise ConfigError("n_triplets must be >= 1")
    if n < 3:
        raise DataError("triangle audit needs at least 3 examples")
    if rng is None:
        from .numeric import make_rng
        rng = make_rng(seed, "audit")

    self_d = dprime(z, z)

    i, j = _sample_pairs(n, n_pairs, rng)
    gap = np.abs(dprime(z[i], z[j]) - dprime(z[j], z[i]))

    a, b, c = _sample_triplets(n, n_triplets, rng, exhaustive)
    slack = np.maximum(dprime(z[b], z[c]) - (dprime(z[a], z[b]) + dprime(z[a], z[c])), 0.0)

    return AuditReport(_stats(self_d, bins), _stats(gap, bins), _stats(slack, bins), seed)


def audit_bundle(bundle: ModelBundle, features, n_pairs: int = 10000, n_triplets: int = 10000,
                 bins: int = 20, seed: int = 0) -> AuditReport:
    z = encode(bundle, features)
    return audit_properties(bundle_distance(bundle), z, n_pairs, n_triplets, bins, seed=seed)
