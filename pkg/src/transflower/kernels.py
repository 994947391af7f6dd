"""Kernel backend selection.

The compiled extension is used when it imports; otherwise (or when the
environment variable ``TRANSFLOWER_PURE`` is set to a non-empty value other
than ``0``) the numpy implementations are used.  Both backends expose the same
functions: ``multiscale_pe``, ``intervening_population``,
``gravity_grid_loss`` and ``bin_cells``.  The grid loss always dispatches to
numpy, which is faster for it.
"""
from __future__ import annotations

import os

from . import _kernels_py as pure

_force_pure = os.environ.get("TRANSFLOWER_PURE", "") not in ("", "0")

compiled = None
if not _force_pure:
    try:
        from . import _kernels as compiled  # type: ignore[no-redef]
    except ImportError:
        compiled = None

backend = compiled if compiled is not None else pure
BACKEND = "compiled" if compiled is not None else "pure"

multiscale_pe = backend.multiscale_pe
intervening_population = backend.intervening_population
# The grid loss is bound by exp(); numpy's vectorized exp beats the scalar
# libm loop of the compiled twin (see benchmarks/bench_kernels.py).
gravity_grid_loss = pure.gravity_grid_loss
bin_cells = backend.bin_cells
