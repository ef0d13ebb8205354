"""Online unsupervised adaptation engine for semantic segmentation.

A tiny differentiable segmentation network, a procedural domain-shifting
world, a zoo of per-frame adaptation strategies, and the
pretrain -> validate -> deploy evaluation pipeline around them.

Importing the package pins BLAS to one thread (the kernels are too small
to parallelize profitably and single-threaded runs are bit-reproducible)
and raises the glibc mmap threshold so per-frame scratch buffers are
reused instead of page-faulted; both are skipped if the environment
already chose otherwise.
"""

import os
import sys

if "numpy" not in sys.modules:
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    os.environ.setdefault("MKL_NUM_THREADS", "1")

from .runtime import enable_fast_allocator

enable_fast_allocator()

__version__ = "0.1.0"
