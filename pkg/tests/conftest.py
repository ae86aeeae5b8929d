import os
import sys

# Pin BLAS pools before numpy loads anywhere: timing assertions compare
# serial against worker-parallel execution and must not race library threads.
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

sys.path.insert(0, os.path.dirname(__file__))
