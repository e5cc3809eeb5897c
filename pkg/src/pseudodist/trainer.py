"""Minibatch SGD with momentum over encoder, distance model and head jointly."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, MetricError, NumericError, TrainingDiverged
from .losses import LossConfig, combined_loss
from .models import DistanceConfig, EncoderConfig, init_models
from .numeric import clip_grad_norm, make_rng
from .pairing import BatchPlan, class_balanced_batches, enumerate_pairs
from .scoring import compute_eer, generate_trials, score_trials, trial_labels

log = logging.getLogger(__name__)

LR_FLOOR = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.001
    patience: int = 10
    lr_factor: float = 0.1
    grad_clip: float | None = None
    max_iterations: int = 5000
    plan: BatchPlan = field(default_factory=lambda: BatchPlan(10, 6))
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    eval_every: int = 250
    valid_trials: int = 2000
    freeze_encoder: bool = False
    head_bias: bool = True
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.lr_factor < 1.0:
            raise ConfigError(f"lr_factor must be in (0, 1), got {self.lr_factor}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be > 0, got {self.grad_clip}")
        if self.max_iterations < 0 or self.eval_every < 1 or self.valid_trials < 2:
            raise ConfigError("max_iterations >= 0, eval_every >= 1 and valid_trials >= 2 required")


@dataclass
class TrainLogEntry:
    step: int
    epoch: float
    loss_pair: float
    loss_aux: float
    loss_total: float
    lr: float
    valid_eer: float | None
    wall_time: float

    @classmethod
    def header(cls):
        return [f.name for f in fields(cls)]

    def row(self):
        def fmt(v):
            if v is None:
                return ""
            return repr(float(v)) if isinstance(v, float) else str(v)
        return [fmt(getattr(self, f.name)) for f in fields(self)]


def sgd_momentum_step(params, lr: float, momentum: float, weight_decay: float):
    """One heavy-ball step; decay applies only to params flagged ``decay``.

    Gradients are zeroed afterwards. Raises NumericError (and leaves values
    untouched) if any update would be non-finite.
    """
    updates = []
    for p in params:
        g = p.grad + weight_decay * p.value if (p.decay and weight_decay) else p.grad
        buf = momentum * p.momentum_buffer + g
        new = p.value - lr * buf
        if not np.all(np.isfinite(new)):
            raise NumericError(f"non-finite update for {p.name or 'parameter'}")
        updates.append((p, buf, new))
    for p, buf, new in updates:
        p.momentum_buffer[...] = buf
        p.value[...] = new
        p.zero_grad()


def lr_plateau_update(history, patience: int, lr_factor: float, lr: float) -> float:
    """Learning rate after the latest validation EER in ``history``.

    Replays the history: a counter grows on every evaluation that fails to
    strictly beat the best EER so far and resets on improvement; reaching
    ``patience`` triggers a reduction and resets the counter. Only a
    reduction triggered by the last entry changes ``lr``.
    """
    if patience < 1:
        raise ConfigError(f"patience must be >= 1, got {patience}")
    best = math.inf
    stale = 0
    reduce_now = False
    for k, eer in enumerate(history):
        reduce_now = False
        if eer < best:
            best = eer
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                stale = 0
                reduce_now = k == len(history) - 1
    if reduce_now:
        return max(lr * lr_factor, LR_FLOOR)
    return lr


def validation_eer(bundle, valid_features, trials, labels) -> float:
    scored = score_trials(bundle, valid_features, trials)
    return compute_eer([s.score_e2e for s in scored], labels)[0]


def train(train_x, train_y, valid_x, valid_y, enc_cfg: EncoderConfig, dist_cfg: DistanceConfig,
          cfg: TrainConfig, bundle=None, log_path=None):
    """Run the training loop; return ``(best_bundle, log_entries)``.

    Labels are remapped to 0..L-1 for the auxiliary head. Every
    ``eval_every`` steps the E2E EER on a fixed, seed-determined balanced
    validation trial list drives the plateau schedule and best-bundle
    selection. A non-finite loss raises TrainingDiverged carrying the best
    bundle so far.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    classes, train_targets = np.unique(np.asarray(train_y), return_inverse=True)
    if len(classes) < cfg.plan.classes_per_batch:
        raise ConfigError(f"training set has {len(classes)} classes, batch plan needs "
                          f"{cfg.plan.classes_per_batch}")
    if bundle is None:
        head_init = "uniform" if cfg.loss.aux_kind == "additive_margin" else "zero"
        bundle = init_models(enc_cfg, dist_cfg, len(classes), cfg.seed,
                             head_bias=cfg.head_bias, head_init=head_init)
    bundle.meta.setdefault("classes", [int(c) for c in classes])

    have_valid = valid_x is not None and len(valid_x) > 1 and len(np.unique(valid_y)) > 1
    if have_valid:
        valid_x = np.asarray(valid_x, dtype=np.float64)
        v_trials = generate_trials(valid_y, "sampled", n=cfg.valid_trials, target_fraction=0.5,
                                   rng=make_rng(cfg.seed, "valid_trials"))
        v_labels = trial_labels(v_trials)

    batches = class_balanced_batches(train_targets, cfg.plan, make_rng(cfg.seed, "sampler"))
    drop_rng = make_rng(cfg.seed, "dropout")
    params = bundle.parameters(encoder=not cfg.freeze_encoder)
    bundle.zero_grad()

    lr = cfg.lr
    history: list = []
    best_eer = math.inf
    best = bundle.copy()
    entries: list = []
    start = time.perf_counter()
    writer = _LogWriter(log_path)

    try:
        for it in range(cfg.max_iterations):
            idx = next(batches)
            y = train_targets[idx]
            pairs = enumerate_pairs(y)
            parts = combined_loss(bundle, train_x[idx], y, pairs, cfg.loss, train_mode=True,
                                  rng=drop_rng, encoder_grad=not cfg.freeze_encoder)
            if not math.isfinite(parts.total):
                raise TrainingDiverged(f"non-finite loss at step {bundle.train_step}", best, entries)
            if cfg.grad_clip is not None:
                clip_grad_norm(params, cfg.grad_clip)
            try:
                sgd_momentum_step(params, lr, cfg.momentum, cfg.weight_decay)
            except NumericError as exc:
                raise TrainingDiverged(str(exc), best, entries) from exc
            bundle.train_step += 1

            eer = None
            last = it == cfg.max_iterations - 1
            if have_valid and (bundle.train_step % cfg.eval_every == 0 or last):
                try:
                    eer = validation_eer(bundle, valid_x, v_trials, v_labels)
                except MetricError as exc:
                    raise TrainingDiverged(f"validation failed at step {bundle.train_step}: {exc}",
                                           best, entries) from exc
                history.append(eer)
                if eer < best_eer:
                    best_eer = eer
                    best = bundle.copy()
                    _save_best(best, cfg.checkpoint_dir)
                lr_next = lr_plateau_update(history, cfg.patience, cfg.lr_factor, lr)
                if lr_next != lr:
                    log.info("step %d: plateau, lr %g -> %g", bundle.train_step, lr, lr_next)

            entry = TrainLogEntry(
                step=bundle.train_step,
                epoch=bundle.train_step * cfg.plan.batch_size / len(train_x),
                loss_pair=parts.pair, loss_aux=parts.aux, loss_total=parts.total,
                lr=lr, valid_eer=eer, wall_time=time.perf_counter() - start,
            )
            entries.append(entry)
            writer.write(entry)
            if eer is not None:
                lr = lr_next
    finally:
        writer.close()

    if not have_valid:
        best = bundle.copy()
        _save_best(best, cfg.checkpoint_dir)
    return best, entries


def _save_best(bundle, checkpoint_dir):
    if checkpoint_dir is None:
        return
    from .io import save_checkpoint

    path = Path(checkpoint_dir)
    path.mkdir(parents=True, exist_ok=True)
    save_checkpoint(bundle, path / "best.ckpt")


class _LogWriter:
    def __init__(self, path):
        self.fh = None
        if path is not None:
            import csv

            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "w", newline="")
            self.csv = csv.writer(self.fh, lineterminator="\n")
            self.csv.writerow(TrainLogEntry.header())

    def write(self, entry):
        if self.fh is not None:
            self.csv.writerow(entry.row())
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def steps_to_reach(entries, target_eer: float):
    """First logged step whose validation EER is at or below ``target_eer``."""
    for e in entries:
        if e.valid_eer is not None and e.valid_eer <= target_eer:
            return e.step
    return None
