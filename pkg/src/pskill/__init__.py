"""Goal-parameterized behavioral cloning in a 2D button-grid world."""

import os

# Strict mode pins BLAS to one thread so reductions run in a fixed order.
if os.environ.get("PSKL_STRICT_DETERMINISM") == "1":
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
