import os
import subprocess
import sys

import numpy as np
import pytest

from transflower import _kernels_py as pure
from transflower import kernels, locenc

compiled = kernels.compiled
needs_ext = pytest.mark.skipif(compiled is None, reason="compiled extension not built")


@needs_ext
def test_compiled_backend_selected():
    assert kernels.BACKEND == "compiled"


def test_pure_fallback_selected_by_env():
    code = "import transflower.kernels as k; print(k.BACKEND)"
    env = dict(os.environ, TRANSFLOWER_PURE="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "pure"


@needs_ext
def test_multiscale_pe_parity(rng):
    rl = rng.normal(size=(300, 2)) * 5000
    for basis in (locenc.BASIS_A, locenc.BASIS_B):
        a = compiled.multiscale_pe(rl, basis, 1.0, 20000.0, 16)
        b = pure.multiscale_pe(rl, basis, 1.0, 20000.0, 16)
        assert np.allclose(a, b, atol=1e-9)


@needs_ext
def test_intervening_population_parity(rng):
    xy = rng.uniform(0, 100, size=(60, 2))
    xy[5] = xy[6] + [3, 4]
    xy[7] = xy[6] - [3, 4]  # equidistant ties
    D = np.hypot(*(xy[:, None] - xy[None]).transpose(2, 0, 1))
    pops = rng.uniform(0, 50, size=60)
    assert np.allclose(compiled.intervening_population(D, pops), pure.intervening_population(D, pops), atol=1e-9)


@needs_ext
def test_gravity_grid_parity(rng):
    n = 200
    logm, logr = rng.normal(size=n), rng.normal(size=n) + 5
    offsets = np.array([0, 50, 51, 130, 200], dtype=np.int64)
    target = rng.random(n)
    for a, b in zip(offsets[:-1], offsets[1:]):
        target[a:b] /= target[a:b].sum()
    betas, gammas = np.linspace(0, 3, 7), np.linspace(0, 5, 9)
    a = compiled.gravity_grid_loss(betas, gammas, logm, logr, target, offsets)
    b = pure.gravity_grid_loss(betas, gammas, logm, logr, target, offsets)
    assert np.allclose(a, b, rtol=1e-12)


@needs_ext
def test_bin_cells_parity(rng):
    rl = rng.uniform(-1200, 1200, size=(500, 2))
    a = compiled.bin_cells(rl, 20.0, 1000.0)
    b = pure.bin_cells(rl, 20.0, 1000.0)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) and a[2] == b[2]
