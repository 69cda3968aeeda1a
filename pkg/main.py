import os
import sys

def setup_environment():
    # Keep numpy's BLAS from oversubscribing the worker threads
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")

# Set up environment before importing other modules
setup_environment()

from interface.cli import main

if __name__ == "__main__":
    sys.exit(main())
