"""Feature normalization and per-origin batches of candidate destinations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geodata import N_FEATURES, Dataset, FlowTable
from .locenc import EncoderConfig, encode_inputs
from .nnkernel import make_rng

N_FLOW_FEATURES = 2 * N_FEATURES + 1


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray


def normalize_features(features: np.ndarray, stats: FeatureStats | None = None,
                       fit_rows=None) -> tuple[np.ndarray, FeatureStats]:
    """``log1p`` then z-score.

    Without ``stats`` the mean/std are fitted on ``fit_rows`` (all rows by
    default) and returned; with ``stats`` they are applied unchanged.  A
    constant column gets std 1, so it normalizes to 0.
    """
    z = np.log1p(np.asarray(features, dtype=np.float64))
    if stats is None:
        fit = z if fit_rows is None else z[np.asarray(sorted(fit_rows), dtype=np.int64)]
        constant = np.ptp(fit, axis=0) == 0
        mean = np.where(constant, fit[0], fit.mean(axis=0))
        std = np.where(constant, 1.0, fit.std(axis=0))
        stats = FeatureStats(mean, std)
    return (z - stats.mean) / stats.std, stats


@dataclass
class OriginBatch:
    """One origin and its candidate destinations, padded to a fixed width.

    Real destinations occupy the leading slots; ``dest`` is -1 on padding.
    """

    origin: int
    origin_id: str
    dest: np.ndarray
    dest_ids: list
    target: np.ndarray
    mask: np.ndarray
    outflow: float

    @property
    def n_real(self) -> int:
        return int(self.mask.sum())


def _pad(origin, origin_id, dest, vol, cap, regions_ids) -> OriginBatch:
    n = len(dest)
    total = float(vol.sum())
    width = max(cap, n)
    d = np.full(width, -1, dtype=np.int64)
    d[:n] = dest
    target = np.zeros(width)
    target[:n] = vol / total
    mask = np.zeros(width, dtype=bool)
    mask[:n] = True
    ids = [regions_ids[k] for k in dest] + [""] * (width - n)
    return OriginBatch(origin, origin_id, d, ids, target, mask, total)


def build_origin_batch(origin: int, flows: FlowTable, regions_ids, cap: int = 256,
                       seed: int = 1234, epoch: int = 0) -> OriginBatch:
    """Observed destinations of ``origin``; sampled down to ``cap`` or zero-padded up to it.

    The sample depends only on (seed, origin, epoch).  Targets are the
    observed volume shares over the selected destinations.
    """
    dest, vol = flows.of_origin(origin)
    oid = regions_ids[origin]
    if len(dest) == 0 or vol.sum() <= 0:
        raise ValueError(f"origin {oid!r} has zero outflow")
    if len(dest) > cap:
        rng = make_rng(seed, "sample", origin, epoch)
        pick = np.sort(rng.choice(len(dest), cap, replace=False))
        dest, vol = dest[pick], vol[pick]
        if vol.sum() <= 0:
            raise ValueError(f"origin {oid!r}: sampled destinations carry no volume")
    return _pad(origin, oid, dest, vol, cap, regions_ids)


def full_origin_batch(origin: int, flows: FlowTable, regions_ids, cap: int = 256) -> OriginBatch:
    """All observed destinations of ``origin`` (no sampling), padded to at least ``cap``."""
    dest, vol = flows.of_origin(origin)
    if len(dest) == 0 or vol.sum() <= 0:
        raise ValueError(f"origin {regions_ids[origin]!r} has zero outflow")
    return _pad(origin, regions_ids[origin], dest, vol, cap, regions_ids)


@dataclass
class BatchTensors:
    X: np.ndarray          # (B, n, 41)
    pe_a: np.ndarray | None
    pe_b: np.ndarray | None
    mask: np.ndarray       # (B, n)
    target: np.ndarray     # (B, n)
    outflow: np.ndarray    # (B,)
    rl: np.ndarray         # (B, n, 2)


class Featurizer:
    """Turns origin batches into model inputs for one dataset and normalization."""

    def __init__(self, dataset: Dataset, stats: FeatureStats, enc: EncoderConfig, variant: str):
        self.dataset = dataset
        self.stats = stats
        self.enc = enc
        self.variant = variant
        self.norm, _ = normalize_features(dataset.regions.features, stats)
        self.lambda_max = dataset.lambda_max

    def tensors(self, batches: list[OriginBatch], width: int | None = None) -> BatchTensors:
        n = width or max(b.n_real for b in batches)
        B = len(batches)
        X = np.zeros((B, n, N_FLOW_FEATURES))
        rl = np.zeros((B, n, 2))
        mask = np.zeros((B, n), dtype=bool)
        target = np.zeros((B, n))
        outflow = np.array([b.outflow for b in batches], dtype=np.float64)
        for k, b in enumerate(batches):
            m = b.n_real
            if m > n:
                raise ValueError(f"batch width {n} smaller than {m} real destinations")
            dest = b.dest[:m]
            X[k, :m, :N_FEATURES] = self.norm[b.origin]
            X[k, :m, N_FEATURES:2 * N_FEATURES] = self.norm[dest]
            X[k, :m, -1] = self.dataset.distances_from(b.origin, dest) / self.lambda_max
            rl[k, :m] = self.dataset.rel_locations(b.origin, dest)
            mask[k, :m] = True
            target[k, :m] = b.target[:m]
        pe_a = pe_b = None
        if self.variant != "none":
            pe_a, pe_b = encode_inputs(rl, self.enc, self.variant)
        return BatchTensors(X, pe_a, pe_b, mask, target, outflow, rl)
