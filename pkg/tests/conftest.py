import os

# keep BLAS single-threaded before numpy loads: small matmuls gain nothing
# from threading and single-threaded mode is the determinism contract
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
