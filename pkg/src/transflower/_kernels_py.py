"""Pure-numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` function for function and are used whenever the
compiled extension is unavailable (or ``TRANSFLOWER_PURE=1``).
"""
from __future__ import annotations

import numpy as np


def multiscale_pe(rl, basis, lambda_min, g, n_scales):
    rl = np.ascontiguousarray(rl, dtype=np.float64).reshape(-1, 2)
    basis = np.asarray(basis, dtype=np.float64)
    proj = rl @ basis.T                                   # (m, 3)
    expo = np.arange(n_scales) / (n_scales - 1)
    lam = lambda_min * np.power(g, expo)                  # (S,)
    phase = proj[:, None, :] / lam[None, :, None]         # (m, S, 3)
    out = np.empty((rl.shape[0], n_scales, 3, 2))
    out[..., 0] = np.cos(phase)
    out[..., 1] = np.sin(phase)
    return out.reshape(rl.shape[0], n_scales * 6)


def intervening_population(D, pops):
    """S[i, j] = population strictly closer to i than j is, excluding i and j."""
    D = np.asarray(D, dtype=np.float64)
    pops = np.asarray(pops, dtype=np.float64)
    n = D.shape[0]
    S = np.zeros((n, n))
    for i in range(n):
        order = np.argsort(D[i], kind="stable")
        d_sorted = D[i, order]
        csum = np.concatenate(([0.0], np.cumsum(pops[order])))
        # number of regions with distance strictly below D[i, j]
        k = np.searchsorted(d_sorted, D[i], side="left")
        s = csum[k]
        # origin sits at distance 0; drop it wherever it was counted
        s = s - np.where(D[i, i] < D[i], pops[i], 0.0)
        s[i] = 0.0
        S[i] = s
    return S


def gravity_grid_loss(betas, gammas, logm, logr, target, offsets):
    """Summed per-origin cross-entropy of the constrained gravity model.

    Candidate arrays are concatenated over origins; origin ``o`` owns the
    slice ``offsets[o]:offsets[o + 1]``.  Returns an array (len(betas), len(gammas)).
    """
    betas = np.asarray(betas, dtype=np.float64)
    gammas = np.asarray(gammas, dtype=np.float64)
    logm = np.asarray(logm, dtype=np.float64)
    logr = np.asarray(logr, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.int64)
    seg = np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))
    tm = np.bincount(seg, target * logm, minlength=len(offsets) - 1)
    tr = np.bincount(seg, target * logr, minlength=len(offsets) - 1)
    tsum = np.bincount(seg, target, minlength=len(offsets) - 1)
    starts = offsets[:-1]
    out = np.empty((len(betas), len(gammas)))
    for a, b in enumerate(betas):
        for c, gm in enumerate(gammas):
            w = b * logm - gm * logr
            mx = np.maximum.reduceat(w, starts)
            lse = np.log(np.add.reduceat(np.exp(w - mx[seg]), starts)) + mx
            out[a, c] = float(np.sum(tsum * lse - b * tm + gm * tr))
    return out


def bin_cells(rl, cell_size, lambda_max):
    """Cell indices of each relative location on the [-lmax, lmax]^2 grid.

    Returns (ix, iy, n_clamped); out-of-extent points are clamped to the edge.
    """
    rl = np.asarray(rl, dtype=np.float64).reshape(-1, 2)
    n_cells = int(np.ceil(2.0 * lambda_max / cell_size))
    raw = np.floor((rl + lambda_max) / cell_size).astype(np.int64)
    clamped = np.clip(raw, 0, n_cells - 1)
    n_clamped = int(np.count_nonzero(np.any(raw != clamped, axis=1)))
    return clamped[:, 0].copy(), clamped[:, 1].copy(), n_clamped
