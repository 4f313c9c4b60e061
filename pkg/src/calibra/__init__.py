"""Multi-task semi-supervised classification, segmentation and explanation
with calibrated pseudo-labels."""
import os as _os

# worker count must reach BLAS before numpy loads
_threads = _os.environ.get("CALIBRA_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .kernels import BACKEND  # noqa: E402
from .tensor import DiffArray, backward, no_grad  # noqa: E402

__version__ = "0.1.0"

__all__ = ["BACKEND", "DiffArray", "backward", "no_grad", "__version__"]
