"""Cross-entropy training with RMSprop and early stopping."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import (
    FeatureStats,
    Featurizer,
    OriginBatch,
    build_origin_batch,
    full_origin_batch,
    normalize_features,
)
from .geodata import Dataset, SplitAssignment
from .model import ModelConfig, backward, forward, init_params, learnable
from .nnkernel import NumericHealthError, make_rng, softmax

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
LOG_HEADER = ("epoch", "train_loss", "val_loss", "seconds", "improved")

__all__ = [
    "TrainConfig", "OptimizerState", "TrainingLog", "OriginBatch", "normalize_features",
    "build_origin_batch", "cross_entropy", "cross_entropy_grad", "rmsprop_step", "train",
    "predict_volumes", "featurizer_for",
]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    rmsprop_alpha: float = 0.99
    rmsprop_eps: float = 1e-8
    batch_origins: int = 512
    patience: int = 20
    max_epochs: int = 200
    seed: int = 1234

    def validate(self) -> None:
        if self.learning_rate < 0 or self.momentum < 0 or not 0 < self.rmsprop_alpha < 1:
            raise ValueError("invalid optimizer settings")
        if self.batch_origins < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_origins, patience and max_epochs must be >= 1")


@dataclass
class OptimizerState:
    square_avg: dict = field(default_factory=dict)
    momentum_buf: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# loss


def cross_entropy(target: np.ndarray, probs: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Sum over origins of ``-sum_j t_j ln max(p_j, 1e-12)`` over unmasked slots.

    Accepts a single origin (1-D arrays) or a batch (B, n).
    """
    target = np.asarray(target, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if mask is None:
        mask = np.ones(target.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if np.any((target > 0) & ~mask):
        raise ValueError("target has mass on masked slots")
    if np.any((probs > 0) & ~mask):
        raise ValueError("probabilities on masked slots (mask disagreement)")
    logp = np.log(np.maximum(probs, PROB_FLOOR))
    return float(-np.sum(np.where(mask, target * logp, 0.0)))


def cross_entropy_grad(target: np.ndarray, probs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Gradient of :func:`cross_entropy` w.r.t. the pre-softmax scores.

    Slots whose probability sits under the clamp floor contribute no gradient,
    matching the clamped loss exactly.
    """
    live = np.where(mask & (probs > PROB_FLOOR), target, 0.0)
    return probs * live.sum(axis=-1, keepdims=True) - live


# --------------------------------------------------------------------------
# optimizer


def rmsprop_step(params: dict, grads: dict, state: OptimizerState, config: TrainConfig) -> dict:
    """One RMSprop-with-momentum update; returns new float32 params (state updated in place)."""
    new = dict(params)
    a, mu, eps, lr = config.rmsprop_alpha, config.momentum, config.rmsprop_eps, config.learning_rate
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NumericHealthError(f"non-finite gradient for {name}")
        p = np.asarray(params[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        sq = state.square_avg.get(name)
        sq = (1.0 - a) * g * g if sq is None else a * sq + (1.0 - a) * g * g
        step = g / (np.sqrt(sq) + eps)
        buf = state.momentum_buf.get(name)
        buf = step if buf is None else mu * buf + step
        state.square_avg[name] = sq
        state.momentum_buf[name] = buf
        new[name] = (p - lr * buf).astype(np.float32)
    return new


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def add(self, epoch, train_loss, val_loss, seconds, improved):
        self.rows.append((epoch, train_loss, val_loss, seconds, improved))

    @property
    def epochs(self) -> int:
        return len(self.rows)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_HEADER)
            for e, tl, vl, sec, imp in self.rows:
                w.writerow([e, repr(tl), repr(vl), f"{sec:.3f}", int(imp)])


def featurizer_for(dataset: Dataset, config: ModelConfig, stats: FeatureStats) -> Featurizer:
    return Featurizer(dataset, stats, config.encoder(), config.rle_variant)


def fit_stats(dataset: Dataset, split: SplitAssignment) -> FeatureStats:
    rows = [dataset.regions.idx(r) for r in split.train_origins]
    return normalize_features(dataset.regions.features, fit_rows=rows)[1]


def with_stats(params: dict, stats: FeatureStats) -> dict:
    out = dict(params)
    out["stats.mean"] = stats.mean.astype(np.float32)
    out["stats.std"] = stats.std.astype(np.float32)
    return out


def stats_of(params: dict) -> FeatureStats:
    return FeatureStats(params["stats.mean"].astype(np.float64), params["stats.std"].astype(np.float64))


def _sorted_idx(dataset: Dataset, ids) -> list[int]:
    return sorted(dataset.regions.idx(r) for r in ids)


def batch_loss_and_grads(params, config, featurizer, batches, training, rng):
    t = featurizer.tensors(batches)
    scores, probs, _, cache = forward(params, config, t, training=training, rng=rng)
    loss = cross_entropy(t.target, probs, t.mask)
    grads = backward(cross_entropy_grad(t.target, probs, t.mask), cache, params, config)
    return loss, grads


def mean_loss(params, config, featurizer, batches: list[OriginBatch], chunk: int = 64) -> float:
    total = 0.0
    for k in range(0, len(batches), chunk):
        part = batches[k:k + chunk]
        t = featurizer.tensors(part)
        _, probs, _, _ = forward(params, config, t, training=False)
        total += cross_entropy(t.target, probs, t.mask)
    return total / max(1, len(batches))


def train(dataset: Dataset, split: SplitAssignment, model_config: ModelConfig,
          train_config: TrainConfig, params: dict | None = None):
    """Fit the model; returns (best params incl. normalization stats, TrainingLog).

    Validation loss (eval mode, fixed destination sample) drives early
    stopping: training ends once it fails to improve for ``patience``
    consecutive epochs, or after ``max_epochs``.
    """
    train_config.validate()
    if not split.train_origins or not split.val_origins:
        raise ValueError("training needs non-empty train and validation origin sets")
    seed = train_config.seed
    stats = fit_stats(dataset, split)
    feat = featurizer_for(dataset, model_config, stats)
    ids = dataset.regions.ids
    cap = model_config.max_destinations
    train_idx = _sorted_idx(dataset, split.train_origins)
    val_batches = [build_origin_batch(o, dataset.flows, ids, cap, seed, 0)
                   for o in _sorted_idx(dataset, split.val_origins)]
    if params is None:
        params = init_params(model_config, seed)
    params = {k: v for k, v in params.items() if not k.startswith("stats.")}
    state = OptimizerState()
    history = TrainingLog()
    best, best_val, since = dict(params), np.inf, 0
    for epoch in range(1, train_config.max_epochs + 1):
        t0 = time.perf_counter()
        order = make_rng(seed, "shuffle", epoch).permutation(len(train_idx))
        epoch_loss = 0.0
        for bi, start in enumerate(range(0, len(order), train_config.batch_origins)):
            group = [train_idx[k] for k in order[start:start + train_config.batch_origins]]
            batches = [build_origin_batch(o, dataset.flows, ids, cap, seed, epoch) for o in group]
            rng = make_rng(seed, "dropout", epoch, bi)
            try:
                loss, grads = batch_loss_and_grads(params, model_config, feat, batches, True, rng)
                params = rmsprop_step(params, {k: grads[k] for k in learnable(params)}, state, train_config)
            except NumericHealthError as exc:
                raise NumericHealthError(f"epoch {epoch}, batch {bi}: {exc}") from None
            epoch_loss += loss
        train_loss = epoch_loss / len(train_idx)
        val_loss = mean_loss(params, model_config, feat, val_batches)
        improved = val_loss < best_val
        if improved:
            best, best_val, since = dict(params), val_loss, 0
            history.best_epoch = epoch
        else:
            since += 1
        history.add(epoch, train_loss, val_loss, time.perf_counter() - t0, improved)
        log.info("epoch %d train %.5f val %.5f%s", epoch, train_loss, val_loss, " *" if improved else "")
        if since >= train_config.patience:
            history.stopped_early = True
            break
    return with_stats(best, stats), history


# --------------------------------------------------------------------------
# prediction


def predict_volumes(params: dict, config: ModelConfig, dataset: Dataset, origins,
                    chunk: int = 32) -> dict:
    """Predicted volumes {(origin idx, dest idx): volume} over each origin's observed destinations.

    Origins with more destinations than ``max_destinations`` are scored in
    chunks of that width and normalized with one softmax over all chunks.
    """
    feat = featurizer_for(dataset, config, stats_of(params))
    cap = config.max_destinations
    ids = dataset.regions.ids
    small, large = [], []
    for o in sorted(origins):
        b = full_origin_batch(o, dataset.flows, ids, cap)
        (small if b.n_real <= cap else large).append(b)
    out: dict = {}
    for k in range(0, len(small), chunk):
        part = small[k:k + chunk]
        t = feat.tensors(part)
        _, probs, _, _ = forward(params, config, t, training=False)
        for row, b in enumerate(part):
            for j in range(b.n_real):
                out[(b.origin, int(b.dest[j]))] = float(probs[row, j] * b.outflow)
    for b in large:
        scores = []
        for s in range(0, b.n_real, cap):
            sub = OriginBatch(b.origin, b.origin_id, b.dest[s:s + cap], b.dest_ids[s:s + cap],
                              np.zeros(min(cap, b.n_real - s)), np.ones(min(cap, b.n_real - s), bool), b.outflow)
            t = feat.tensors([sub])
            sc, _, _, _ = forward(params, config, t, training=False)
            scores.append(sc[0])
        probs = softmax(np.concatenate(scores))
        for j in range(b.n_real):
            out[(b.origin, int(b.dest[j]))] = float(probs[j] * b.outflow)
    return out
