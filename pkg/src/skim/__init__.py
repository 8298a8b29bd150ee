"""Low-rank bypass adaptation of a frozen ViT segmenter on synthetic fabric data."""

import os

# Single-threaded BLAS keeps forward/backward bit-reproducible run to run.
# Must be set before numpy loads its BLAS backend.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

__version__ = "0.1.0"
