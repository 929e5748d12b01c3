import os

# Keep BLAS single-threaded before numpy loads: training determinism
# contracts (bitwise-identical histories) assume one reduction order.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
