# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, exp, log, floor, ceil, pow

cnp.import_array()


def multiscale_pe(rl, basis, double lambda_min, double g, int n_scales):
    cdef double[:, ::1] r = np.ascontiguousarray(rl, dtype=np.float64).reshape(-1, 2)
    cdef double[:, ::1] a = np.ascontiguousarray(basis, dtype=np.float64)
    cdef Py_ssize_t m = r.shape[0], i, s, j
    out_arr = np.empty((m, n_scales * 6), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] inv_lam = np.empty(n_scales, dtype=np.float64)
    cdef double proj, ph
    for s in range(n_scales):
        inv_lam[s] = 1.0 / (lambda_min * pow(g, <double>s / (n_scales - 1)))
    for i in range(m):
        for j in range(3):
            proj = r[i, 0] * a[j, 0] + r[i, 1] * a[j, 1]
            for s in range(n_scales):
                ph = proj * inv_lam[s]
                out[i, 6 * s + 2 * j] = cos(ph)
                out[i, 6 * s + 2 * j + 1] = sin(ph)
    return out_arr


def intervening_population(D, pops):
    cdef double[:, ::1] d = np.ascontiguousarray(D, dtype=np.float64)
    cdef double[::1] p = np.ascontiguousarray(pops, dtype=np.float64)
    cdef Py_ssize_t n = d.shape[0], i, k, q, start
    S_arr = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] S = S_arr
    cdef long[::1] order
    cdef double run, group, dk
    for i in range(n):
        order = np.argsort(D[i], kind="stable").astype(np.int_)
        run = 0.0
        k = 0
        while k < n:
            # tie group [start, k): all regions at the same distance
            start = k
            dk = d[i, order[k]]
            group = 0.0
            while k < n and d[i, order[k]] == dk:
                if order[k] != i:
                    group += p[order[k]]
                k += 1
            for q in range(start, k):
                S[i, order[q]] = run
            run += group
        S[i, i] = 0.0
    return S_arr


def gravity_grid_loss(betas, gammas, logm, logr, target, offsets):
    cdef double[::1] B = np.ascontiguousarray(betas, dtype=np.float64)
    cdef double[::1] G = np.ascontiguousarray(gammas, dtype=np.float64)
    cdef double[::1] lm = np.ascontiguousarray(logm, dtype=np.float64)
    cdef double[::1] lr = np.ascontiguousarray(logr, dtype=np.float64)
    cdef double[::1] t = np.ascontiguousarray(target, dtype=np.float64)
    cdef long long[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef Py_ssize_t nb = B.shape[0], ng = G.shape[0], no = off.shape[0] - 1
    cdef Py_ssize_t a, c, o, j, lo, hi
    out_arr = np.empty((nb, ng), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    # grid-independent target moments per origin
    ts_arr = np.zeros(no)
    cdef double[::1] ts = ts_arr
    cdef double tm = 0.0, tr = 0.0
    for o in range(no):
        for j in range(off[o], off[o + 1]):
            ts[o] += t[j]
            tm += t[j] * lm[j]
            tr += t[j] * lr[j]
    w_arr = np.empty(lm.shape[0])
    cdef double[::1] w = w_arr
    cdef double b, gm, mx, acc, total
    for a in range(nb):
        b = B[a]
        for c in range(ng):
            gm = G[c]
            total = 0.0
            for o in range(no):
                lo = off[o]
                hi = off[o + 1]
                mx = -1e308
                for j in range(lo, hi):
                    w[j] = b * lm[j] - gm * lr[j]
                    if w[j] > mx:
                        mx = w[j]
                acc = 0.0
                for j in range(lo, hi):
                    acc += exp(w[j] - mx)
                total += ts[o] * (log(acc) + mx)
            out[a, c] = total - b * tm + gm * tr
    return out_arr


def bin_cells(rl, double cell_size, double lambda_max):
    cdef double[:, ::1] r = np.ascontiguousarray(rl, dtype=np.float64).reshape(-1, 2)
    cdef Py_ssize_t m = r.shape[0], i
    cdef long long n_cells = <long long>ceil(2.0 * lambda_max / cell_size)
    ix_arr = np.empty(m, dtype=np.int64)
    iy_arr = np.empty(m, dtype=np.int64)
    cdef long long[::1] ix = ix_arr
    cdef long long[::1] iy = iy_arr
    cdef long long u, v
    cdef Py_ssize_t n_clamped = 0
    cdef bint hit
    for i in range(m):
        u = <long long>floor((r[i, 0] + lambda_max) / cell_size)
        v = <long long>floor((r[i, 1] + lambda_max) / cell_size)
        hit = False
        if u < 0:
            u = 0; hit = True
        elif u > n_cells - 1:
            u = n_cells - 1; hit = True
        if v < 0:
            v = 0; hit = True
        elif v > n_cells - 1:
            v = n_cells - 1; hit = True
        if hit:
            n_clamped += 1
        ix[i] = u
        iy[i] = v
    return ix_arr, iy_arr, int(n_clamped)
