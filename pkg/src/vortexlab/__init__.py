"""Simulation laboratory for the stochastic point-vortex system and its mean-field limit."""

import os

# must happen before numba is imported anywhere
if "VORTEX_THREADS" in os.environ and "NUMBA_NUM_THREADS" not in os.environ:
    os.environ["NUMBA_NUM_THREADS"] = os.environ["VORTEX_THREADS"]
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
