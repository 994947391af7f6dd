"""Gravity and radiation baselines for outflow allocation."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .geodata import Dataset

BETA_RANGE = (0.0, 3.0)
GAMMA_RANGE = (0.0, 5.0)
COARSE_STEP = 0.05
FINE_STEP = 0.005


class BaselineWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GravityParams:
    beta: float
    gamma: float
    warning: bool = False


def gravity_probs(masses, distances, params: GravityParams) -> np.ndarray:
    """P(j | i) proportional to m_j^beta * r_ij^-gamma over the candidate set."""
    m = np.asarray(masses, dtype=np.float64)
    r = np.asarray(distances, dtype=np.float64)
    if m.size == 0:
        raise ValueError("gravity_probs: empty candidate set")
    if np.any(r <= 0):
        raise ValueError("gravity_probs: zero distance (origin among candidates)")
    if np.any(m <= 0):
        raise ValueError("gravity_probs: masses must be positive")
    logw = params.beta * np.log(m) - params.gamma * np.log(r)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def _grid(lo, hi, step):
    n = int(round((hi - lo) / step))
    return lo + step * np.arange(n + 1)


def _gravity_arrays(dataset: Dataset, origins):
    pops = np.maximum(dataset.regions.population, 1.0)
    logm, logr, target, offsets = [], [], [], [0]
    for o in sorted(origins):
        dest, vol = dataset.flows.of_origin(o)
        keep = dest != o
        dest, vol = dest[keep], vol[keep]
        if len(dest) == 0 or vol.sum() <= 0:
            continue
        logm.append(np.log(pops[dest]))
        logr.append(np.log(dataset.distances_from(o, dest)))
        target.append(vol / vol.sum())
        offsets.append(offsets[-1] + len(dest))
    if len(offsets) == 1:
        raise ValueError("fit_gravity: no origin with flows")
    return (np.concatenate(logm), np.concatenate(logr), np.concatenate(target),
            np.asarray(offsets, dtype=np.int64))


def gravity_loss(dataset: Dataset, origins, beta: float, gamma: float) -> float:
    return float(kernels.gravity_grid_loss([beta], [gamma], *_gravity_arrays(dataset, origins))[0, 0])


def fit_gravity(dataset: Dataset, origins) -> GravityParams:
    """Cross-entropy fit of (beta, gamma) by grid search plus local refinement.

    Masses are destination populations (floored at 1); the candidate set of
    each origin is its observed destinations.  Ties go to the lowest beta,
    then the lowest gamma.  ``warning`` is set for degenerate data (no origin
    with two or more destinations) or a boundary optimum.
    """
    arrays = _gravity_arrays(dataset, origins)
    offsets = arrays[3]
    degenerate = not np.any(np.diff(offsets) >= 2)
    betas = _grid(*BETA_RANGE, COARSE_STEP)
    gammas = _grid(*GAMMA_RANGE, COARSE_STEP)
    loss = kernels.gravity_grid_loss(betas, gammas, *arrays)
    a, c = np.unravel_index(np.argmin(loss), loss.shape)
    b0, g0 = betas[a], gammas[c]
    fb = _grid(max(BETA_RANGE[0], b0 - COARSE_STEP), min(BETA_RANGE[1], b0 + COARSE_STEP), FINE_STEP)
    fg = _grid(max(GAMMA_RANGE[0], g0 - COARSE_STEP), min(GAMMA_RANGE[1], g0 + COARSE_STEP), FINE_STEP)
    fine = kernels.gravity_grid_loss(fb, fg, *arrays)
    a, c = np.unravel_index(np.argmin(fine), fine.shape)
    beta, gamma = float(np.round(fb[a], 6)), float(np.round(fg[c], 6))
    on_edge = beta in BETA_RANGE or gamma in GAMMA_RANGE
    flag = bool(degenerate or on_edge)
    if flag:
        warnings.warn(f"gravity fit degenerate or on grid boundary (beta={beta}, gamma={gamma})",
                      BaselineWarning, stacklevel=2)
    return GravityParams(beta, gamma, flag)


# --------------------------------------------------------------------------
# radiation


def radiation_raw(p_i, p_j, s_ij):
    """Unnormalized radiation score p_i p_j / ((p_i + S)(p_i + p_j + S))."""
    p_i = np.asarray(p_i, dtype=np.float64)
    p_j = np.asarray(p_j, dtype=np.float64)
    s = np.asarray(s_ij, dtype=np.float64)
    den = (p_i + s) * (p_i + p_j + s)
    return np.where(den > 0, p_i * p_j / np.where(den > 0, den, 1.0), 0.0)


def intervening_population(dataset: Dataset, origin: int, dest: int) -> float:
    """Population of regions strictly closer to ``origin`` than ``dest`` is (both excluded)."""
    d = dataset.distances_from(origin)
    inside = d < d[dest]
    inside[[origin, dest]] = False
    return float(dataset.regions.population[inside].sum())


def intervening_matrix(dataset: Dataset) -> np.ndarray:
    return kernels.intervening_population(dataset.distance_matrix(), dataset.regions.population)


def radiation_probs(p_origin: float, p_dests, s_ij) -> np.ndarray:
    """Radiation scores renormalized over the candidate destinations."""
    if p_origin <= 0:
        raise ValueError("radiation_probs: origin population must be positive")
    raw = radiation_raw(p_origin, p_dests, s_ij)
    total = raw.sum()
    if total <= 0:
        warnings.warn("radiation scores all zero; falling back to uniform", BaselineWarning, stacklevel=2)
        return np.full(len(raw), 1.0 / len(raw))
    return raw / total


# --------------------------------------------------------------------------
# predictions over a dataset


def gravity_predict(dataset: Dataset, params: GravityParams, origins) -> dict:
    pops = np.maximum(dataset.regions.population, 1.0)
    out = {}
    for o in sorted(origins):
        dest, vol = dataset.flows.of_origin(o)
        if len(dest) == 0:
            continue
        total = vol.sum()
        keep = dest != o
        probs = np.zeros(len(dest))
        if keep.any():
            probs[keep] = gravity_probs(pops[dest[keep]], dataset.distances_from(o, dest[keep]), params)
        else:
            probs[:] = 1.0 / len(dest)
        for d, p in zip(dest, probs):
            out[(o, int(d))] = float(p * total)
    return out


def radiation_predict(dataset: Dataset, origins, S: np.ndarray | None = None) -> dict:
    pops = dataset.regions.population
    S = intervening_matrix(dataset) if S is None else S
    out = {}
    for o in sorted(origins):
        dest, vol = dataset.flows.of_origin(o)
        if len(dest) == 0:
            continue
        total = vol.sum()
        if pops[o] > 0:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", BaselineWarning)
                probs = radiation_probs(pops[o], pops[dest], S[o, dest])
        else:
            probs = np.full(len(dest), 1.0 / len(dest))
        for d, p in zip(dest, probs):
            out[(o, int(d))] = float(p * total)
    return out


def gravity_synthetic(params: GravityParams, n_regions: int = 200, mean_outflow: float = 5000.0,
                      seed: int = 1234) -> Dataset:
    """Synthetic city whose flows are drawn from the gravity model itself.

    Regions come from :func:`geodata.synth_city`; each origin's outflow is
    split multinomially by ``gravity_probs`` over every other region, using
    floored populations as masses.
    """
    from .geodata import FlowTable, SynthConfig, synth_city
    from .nnkernel import make_rng

    city = synth_city(SynthConfig(n_regions=n_regions, mean_outflow=mean_outflow), seed)
    pops = np.maximum(city.regions.population, 1.0)
    rng = make_rng(seed, "gravity-synth")
    lam = mean_outflow * pops / pops.mean()
    o_idx, d_idx, vol = [], [], []
    everyone = np.arange(n_regions)
    for i in everyone:
        dest = everyone[everyone != i]
        p = gravity_probs(pops[dest], city.distances_from(i, dest), params)
        counts = rng.multinomial(rng.poisson(lam[i]), p)
        nz = np.flatnonzero(counts)
        o_idx.append(np.full(len(nz), i))
        d_idx.append(dest[nz])
        vol.append(counts[nz].astype(np.float64))
    flows = FlowTable(np.concatenate(o_idx), np.concatenate(d_idx), np.concatenate(vol), n_regions)
    return Dataset(city.regions, flows, city.crs_mode, city.lambda_max)
