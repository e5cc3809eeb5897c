"""Class-balanced minibatches and in-batch pair enumeration."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import BatchError, ConfigError


class PairingWarning(UserWarning):
    """A batch yields no positive or no negative pairs."""


@dataclass(frozen=True)
class BatchPlan:
    classes_per_batch: int   # S
    examples_per_class: int  # R

    def __post_init__(self):
        if self.classes_per_batch < 2:
            raise ConfigError("classes_per_batch must be >= 2 to form negative pairs")
        if self.examples_per_class < 2:
            raise ConfigError("examples_per_class must be >= 2 to form positive pairs")

    @property
    def batch_size(self) -> int:
        return self.classes_per_batch * self.examples_per_class


@dataclass(frozen=True)
class PairIndex:
    """Unordered in-batch pairs, each stored as (i, j) with i < j.

    ``pos`` and ``neg`` are integer arrays of shape (k, 2).
    """

    pos: np.ndarray
    neg: np.ndarray

    @property
    def positives(self):
        return [tuple(map(int, p)) for p in self.pos]

    @property
    def negatives(self):
        return [tuple(map(int, p)) for p in self.neg]


def enumerate_pairs(labels) -> PairIndex:
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n < 2:
        raise BatchError(f"need at least 2 examples to form pairs, got {n}")
    i, j = np.triu_indices(n, k=1)  # row-major, hence lexicographic
    same = labels[i] == labels[j]
    pos = np.stack([i[same], j[same]], axis=1)
    neg = np.stack([i[~same], j[~same]], axis=1)
    if len(pos) == 0:
        warnings.warn("batch has no positive pairs", PairingWarning, stacklevel=2)
    if len(neg) == 0:
        warnings.warn("batch has no negative pairs", PairingWarning, stacklevel=2)
    return PairIndex(pos, neg)


def make_class_groups(labels, per_class: int, rng: np.random.Generator) -> list:
    """Shuffle each class and cut it into groups of ``per_class`` indices.

    A trailing partial group is topped up from the rest of its class; classes
    smaller than ``per_class`` are sampled with replacement.
    """
    labels = np.asarray(labels)
    groups = []
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        if len(members) < per_class:
            extra = rng.choice(members, size=per_class - len(members), replace=True)
            groups.append((c, np.concatenate([members, extra])))
            continue
        n_full = len(members) // per_class
        for g in range(n_full):
            groups.append((c, members[g * per_class:(g + 1) * per_class]))
        tail = members[n_full * per_class:]
        if len(tail):
            rest = members[:n_full * per_class]
            fill = rng.choice(rest, size=per_class - len(tail), replace=False)
            groups.append((c, np.concatenate([tail, fill])))
    order = rng.permutation(len(groups))
    return [groups[k] for k in order]


def class_balanced_batches(labels, plan: BatchPlan, rng: np.random.Generator):
    """Endless stream of index arrays, each holding S distinct classes x R examples.

    Batches take per-class groups off a shuffled list in order, skipping
    groups whose class is already in the batch. Skipped groups stay queued;
    a fresh shuffled list is appended whenever the queue runs short. Example
    order inside a batch is shuffled so pair orientation is not tied to
    class order.
    """
    labels = np.asarray(labels)
    n_classes = len(np.unique(labels))
    S = plan.classes_per_batch
    if n_classes < S:
        raise ConfigError(f"dataset has {n_classes} classes but the batch plan needs {S}")
    queue: list = []
    while True:
        picked, seen = [], set()
        k = 0
        while len(picked) < S:
            if k >= len(queue):
                queue.extend(make_class_groups(labels, plan.examples_per_class, rng))
            c, idx = queue[k]
            if c in seen:
                k += 1
                continue
            seen.add(c)
            picked.append(idx)
            del queue[k]
        batch = np.concatenate(picked)
        yield batch[rng.permutation(len(batch))]
