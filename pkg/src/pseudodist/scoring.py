"""Trials, trial scoring and evaluation metrics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError, DataError, DimensionError, MetricError
from .models import ModelBundle, distance_score, encode

log = logging.getLogger(__name__)

SCORE_CHUNK = 16384


@dataclass(frozen=True)
class Trial:
    enroll_ids: tuple
    test_id: int
    label: int  # 1 = target, 0 = nontarget

    def __post_init__(self):
        if not self.enroll_ids:
            raise DataError("trial needs at least one enrollment example")
        if self.label not in (0, 1):
            raise DataError(f"trial label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class ScoredTrial:
    trial: Trial
    score_e2e: float
    score_cos: float
    score_fused: float


@dataclass(frozen=True)
class RocReport:
    thresholds: np.ndarray
    far: np.ndarray
    miss: np.ndarray
    eer: float
    eer_threshold: float
    one_minus_auc: float


# ---------------------------------------------------------------------------
# trials


def generate_trials(labels, mode="all_pairs", n: int | None = None, target_fraction: float = 0.5,
                    rng: np.random.Generator | None = None) -> list:
    """Single-enrollment trials over one split.

    ``all_pairs`` emits every unordered pair (i < j, i enrolls). ``sampled``
    draws ``n`` distinct unordered pairs with exactly
    ``round(n * target_fraction)`` targets, orientation chosen at random.
    """
    labels = np.asarray(labels)
    n_ex = len(labels)
    if mode == "all_pairs":
        if len(np.unique(labels)) < 2:
            log.warning("single-class split: all trials are targets, EER is undefined")
        i, j = np.triu_indices(n_ex, k=1)
        tgt = labels[i] == labels[j]
        return [Trial((int(a),), int(b), int(t)) for a, b, t in zip(i, j, tgt)]
    if mode != "sampled":
        raise ConfigError(f"unknown trial mode {mode!r}")
    if n is None or n < 1:
        raise ConfigError("sampled trials need n >= 1")
    if rng is None:
        raise ConfigError("sampled trials need an rng")
    if not 0.0 <= target_fraction <= 1.0:
        raise ConfigError(f"target_fraction must be in [0, 1], got {target_fraction}")
    n_tgt = int(round(n * target_fraction))
    n_non = n - n_tgt

    classes, counts = np.unique(labels, return_counts=True)
    pair_counts = counts * (counts - 1) // 2
    avail_tgt = int(pair_counts.sum())
    avail_non = n_ex * (n_ex - 1) // 2 - avail_tgt
    if n_tgt > avail_tgt or n_non > avail_non:
        raise ConfigError(f"cannot draw {n_tgt} target / {n_non} nontarget trials; only "
                          f"{avail_tgt} / {avail_non} distinct pairs exist")
    members = {c: np.flatnonzero(labels == c) for c in classes}
    class_p = pair_counts / avail_tgt if avail_tgt else None

    def draw(count, target):
        seen, out = set(), []
        while len(out) < count:
            if target:
                c = classes[rng.choice(len(classes), p=class_p)]
                a, b = rng.choice(members[c], size=2, replace=False)
            else:
                a, b = rng.choice(n_ex, size=2, replace=False)
                if labels[a] == labels[b]:
                    continue
            key = (min(a, b), max(a, b))
            if key in seen:
                continue
            seen.add(key)
            out.append(Trial((int(a),), int(b), int(target)))
        return out

    trials = draw(n_tgt, True) + draw(n_non, False)
    return [trials[k] for k in rng.permutation(len(trials))]


def trial_labels(trials) -> np.ndarray:
    return np.array([t.label for t in trials], dtype=np.int64)


def score_trials(bundle: ModelBundle, features, trials) -> list:
    """E2E, cosine and fused scores; each embedding is computed once.

    Enrollment sets are scored by the mean of per-example scores with the
    enrollment example in the distance model's first slot.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    flat_enroll, flat_test, owner = [], [], []
    for k, t in enumerate(trials):
        for e in t.enroll_ids:
            flat_enroll.append(e)
            flat_test.append(t.test_id)
            owner.append(k)
    flat_enroll = np.asarray(flat_enroll, dtype=np.int64)
    flat_test = np.asarray(flat_test, dtype=np.int64)
    owner = np.asarray(owner, dtype=np.int64)
    if len(trials) == 0:
        return []
    for ids in (flat_enroll, flat_test):
        if ids.min() < 0 or ids.max() >= n:
            bad = ids[(ids < 0) | (ids >= n)][0]
            raise DataError(f"unknown example id {bad} (dataset has {n} examples)")

    uniq, inverse = np.unique(np.concatenate([flat_enroll, flat_test]), return_inverse=True)
    z = encode(bundle, features[uniq])
    ze = z[inverse[:len(flat_enroll)]]
    zt = z[inverse[len(flat_enroll):]]

    e2e = np.empty(len(flat_enroll))
    for s in range(0, len(flat_enroll), SCORE_CHUNK):
        probs, _ = distance_score(bundle, ze[s:s + SCORE_CHUNK], zt[s:s + SCORE_CHUNK])
        e2e[s:s + SCORE_CHUNK] = probs[:, 0]
    cos = cosine_rows(ze, zt)

    sizes = np.bincount(owner, minlength=len(trials))
    e2e_mean = np.bincount(owner, weights=e2e, minlength=len(trials)) / sizes
    cos_mean = np.bincount(owner, weights=cos, minlength=len(trials)) / sizes
    return [ScoredTrial(t, float(a), float(c), float(a + c))
            for t, a, c in zip(trials, e2e_mean, cos_mean)]


def cosine_rows(a, b) -> np.ndarray:
    na = np.maximum(np.linalg.norm(a, axis=1), 1e-12)
    nb = np.maximum(np.linalg.norm(b, axis=1), 1e-12)
    return np.clip(np.sum(a * b, axis=1) / (na * nb), -1.0, 1.0)


# ---------------------------------------------------------------------------
# EER / ROC / AUC


def _split_scores(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise DimensionError(f"{scores.shape[0]} scores but {labels.shape[0]} labels")
    tgt = scores[labels == 1]
    non = scores[labels != 1]
    if tgt.size == 0 or non.size == 0:
        raise MetricError(f"need both target and nontarget scores (got {tgt.size} / {non.size})")
    if not (np.all(np.isfinite(tgt)) and np.all(np.isfinite(non))):
        raise MetricError("scores must be finite")
    return tgt, non


def operating_points(scores, labels):
    """Thresholds (ascending, with -inf/+inf ends) and the FAR/miss at each.

    FAR(t) = P(nontarget >= t), miss(t) = P(target < t). Interior thresholds
    sit at midpoints between adjacent distinct scores.
    """
    tgt, non = _split_scores(scores, labels)
    uniq = np.unique(np.concatenate([tgt, non]))
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    thresholds = np.concatenate([[-np.inf], mids, [np.inf]])
    tgt_sorted = np.sort(tgt)
    non_sorted = np.sort(non)
    miss = np.searchsorted(tgt_sorted, thresholds, side="left") / tgt.size
    far = 1.0 - np.searchsorted(non_sorted, thresholds, side="left") / non.size
    return thresholds, far, miss


def compute_eer(scores, labels):
    """``(eer, threshold)`` by linear interpolation where FAR crosses miss."""
    thresholds, far, miss = operating_points(scores, labels)
    diff = far - miss  # non-increasing from 1 to -1
    k = int(np.flatnonzero(diff >= 0)[-1])
    if diff[k] == 0.0 or k == len(diff) - 1:
        return float(far[k]), float(thresholds[k])
    t = diff[k] / (diff[k] - diff[k + 1])
    eer = far[k] + t * (far[k + 1] - far[k])
    lo, hi = thresholds[k], thresholds[k + 1]
    if np.isfinite(lo) and np.isfinite(hi):
        thr = lo + t * (hi - lo)
    else:
        thr = hi if np.isfinite(hi) else lo
    return float(eer), float(thr)


def compute_auc(scores, labels) -> float:
    """``1 - AUC`` from the Mann-Whitney statistic, ties counted as 1/2.

    Counts are combined as exact rationals before the final division.
    """
    tgt, non = _split_scores(scores, labels)
    non_sorted = np.sort(non)
    below = np.searchsorted(non_sorted, tgt, side="left")
    at_or_below = np.searchsorted(non_sorted, tgt, side="right")
    # twice the concordance count keeps the ties integral
    twice = int(np.sum(below + at_or_below))
    auc = Fraction(twice, 2 * tgt.size * non.size)
    return float(1 - auc)


def roc_report(scores, labels) -> RocReport:
    thresholds, far, miss = operating_points(scores, labels)
    eer, thr = compute_eer(scores, labels)
    return RocReport(thresholds, far, miss, eer, thr, compute_auc(scores, labels))


# ---------------------------------------------------------------------------
# retrieval and clustering


def cosine_similarity_matrix(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    unit = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    return unit @ unit.T


def pairwise_distance_scores(bundle: ModelBundle, z) -> np.ndarray:
    """Matrix ``S[i, j] = D(z_i, z_j)`` (i in the first slot)."""
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    i, j = i.ravel(), j.ravel()
    out = np.empty(n * n)
    for s in range(0, n * n, SCORE_CHUNK):
        probs, _ = distance_score(bundle, z[i[s:s + SCORE_CHUNK]], z[j[s:s + SCORE_CHUNK]])
        out[s:s + SCORE_CHUNK] = probs[:, 0]
    return out.reshape(n, n)


def recall_at_k(labels, k_values, embeddings=None, similarity=None) -> dict:
    """Fraction of queries with a same-class item among their top-k neighbours.

    Neighbours are ranked by cosine similarity of ``embeddings`` or by a
    precomputed ``similarity`` matrix (row = query). Ties go to the lower
    index.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if (embeddings is None) == (similarity is None):
        raise ConfigError("pass exactly one of embeddings or similarity")
    if n < 2:
        raise ConfigError("recall@k needs at least 2 examples")
    sim = cosine_similarity_matrix(embeddings) if similarity is None else np.asarray(similarity, dtype=np.float64)
    if sim.shape != (n, n):
        raise DimensionError(f"similarity matrix {sim.shape} does not match {n} labels")
    k_values = [int(k) for k in k_values]
    for k in k_values:
        if not 1 <= k < n:
            raise ConfigError(f"k must be in [1, {n - 1}], got {k}")
    sim = sim.copy()
    np.fill_diagonal(sim, -np.inf)
    # stable sort on -sim keeps index order among ties
    order = np.argsort(-sim, axis=1, kind="stable")
    hit = labels[order] == labels[:, None]
    hit[:, -1] = False  # the query itself lands last
    first_hit = np.where(hit.any(axis=1), hit.argmax(axis=1), n)
    return {k: float(np.mean(first_hit < k)) for k in k_values}


def kmeans(x, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6):
    """k-means++ seeding followed by Lloyd iterations.

    Stops when inertia changes by less than ``tol`` relative, or after
    ``max_iter`` iterations. Returns ``(assignments, centroids, inertia)``.
    """
    from .numeric import make_rng

    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"k must be in [1, {n}], got {k}")
    rng = make_rng(seed, "kmeans")

    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total > 0:
            pick = rng.choice(n, p=d2 / total)
        else:
            pick = rng.integers(n)
        centroids[c] = x[pick]
        d2 = np.minimum(d2, np.sum((x - centroids[c]) ** 2, axis=1))

    prev = np.inf
    for _ in range(max_iter):
        dist = _sq_dists(x, centroids)
        assign = np.argmin(dist, axis=1)
        inertia = float(dist[np.arange(n), assign].sum())
        for c in range(k):
            members = assign == c
            if members.any():
                centroids[c] = x[members].mean(axis=0)
            else:
                # re-seed an empty cluster at the point farthest from its centroid
                far = int(np.argmax(dist[np.arange(n), assign]))
                centroids[c] = x[far]
        if prev == 0.0 or (np.isfinite(prev) and abs(prev - inertia) <= tol * prev):
            break
        prev = inertia
    dist = _sq_dists(x, centroids)
    assign = np.argmin(dist, axis=1)
    inertia = float(dist[np.arange(n), assign].sum())
    return assign, centroids, inertia


def _sq_dists(x, c):
    d = np.sum(x * x, axis=1)[:, None] - 2.0 * x @ c.T + np.sum(c * c, axis=1)[None, :]
    return np.maximum(d, 0.0)


def nmi(assignments, labels) -> float:
    """I(A;Y) / sqrt(H(A) H(Y)), natural log; 0 when either entropy is 0."""
    a = np.asarray(assignments)
    y = np.asarray(labels)
    if a.shape != y.shape:
        raise DataError(f"assignments ({a.shape[0]}) and labels ({y.shape[0]}) differ in length")
    n = a.size
    if n == 0:
        return 0.0
    _, ai = np.unique(a, return_inverse=True)
    _, yi = np.unique(y, return_inverse=True)
    # a single cluster has zero entropy; test that exactly, not via rounding
    if ai.max() == 0 or yi.max() == 0:
        return 0.0
    joint = np.zeros((ai.max() + 1, yi.max() + 1))
    np.add.at(joint, (ai, yi), 1.0)
    joint /= n
    pa = joint.sum(axis=1)
    py = joint.sum(axis=0)
    h_a = -float(np.sum(pa * np.log(pa)))
    h_y = -float(np.sum(py * np.log(py)))
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / np.outer(pa, py)[nz])))
    return float(min(1.0, max(0.0, mi / math.sqrt(h_a * h_y))))


def d_cluster_assign(bundle: ModelBundle, embeddings, centroids) -> np.ndarray:
    """Assign each point to the centroid with the smallest ``1 - D(z, centroid)``."""
    z = np.asarray(embeddings, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    d = bundle.dist_cfg.embedding_dim
    if z.ndim != 2 or c.ndim != 2 or z.shape[1] != d or c.shape[1] != d:
        raise DimensionError(f"embeddings {z.shape} / centroids {c.shape} must have {d} columns")
    n, k = z.shape[0], c.shape[0]
    dist = np.empty((n, k))
    for j in range(k):
        probs, _ = distance_score(bundle, z, np.repeat(c[j:j + 1], n, axis=0))
        dist[:, j] = 1.0 - probs[:, 0]
    return np.argmin(dist, axis=1)  # first index wins ties
