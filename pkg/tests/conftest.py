import os
import sys

# Pin BLAS threading before numpy loads anywhere: benchmarks and timing
# assertions assume a single-threaded process.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

sys.path.insert(0, os.path.dirname(__file__))
