"""Cross-domain few-shot classification engine.

Aligns a pretrained representation to a new task twice over: a closed-form
ridge reprojection of class prototypes into the query feature space, and a
re-normalization of support features with statistics taken from the query
batch. A three-stage loop (source pretraining, two-stage target
finetuning, querying) drives both.
"""

import os

# The engine's matrices are small; threaded BLAS loses far more to
# synchronization than it gains. Respected only if the user has not set it.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
del os, _var

__version__ = "0.1.0"

from .data import FeatureBank, load_bank, save_bank  # noqa: F401
