"""Spatio-temporal convnets built by inflating trained 2D conv weights.

Subpackages and modules:

* ``tensor``: array helpers and the seeded PCG64 ``Rng``
* ``nn``: layer specs, forward/backward passes, SGD training, gradient checks
* ``inflate``: the IA / IS / ZWI / NWI inflation schemes and their checks
* ``data``: synthetic shape images and moving-shape clips
* ``checkpoint``: the ``STCW`` binary checkpoint format
* ``cli``: the command-line pipeline
"""

import os as _os

# Deterministic mode: single-threaded BLAS keeps reduction order fixed. Only
# effective when set before numpy is first imported.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
