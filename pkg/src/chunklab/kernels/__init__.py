"""Kernel backend selection.

The hot per-token kernels (layer norm, GELU, softmax and friends) exist in
two implementations: a fused Cython extension and a pure-numpy fallback.
The compiled backend is preferred when importable; set
``CHUNKLAB_KERNELS=numpy`` or ``CHUNKLAB_KERNELS=cython`` to force one.
Matmul goes through BLAS (``numpy.matmul``) under either backend.
"""

import os

from . import _npkernels

_choice = os.environ.get("CHUNKLAB_KERNELS", "").strip().lower()

if _choice == "numpy":
    _impl = _npkernels
    BACKEND = "numpy"
elif _choice == "cython":
    from . import _cykernels as _impl  # hard import: fail loudly when forced

    BACKEND = "cython"
else:
    try:
        from . import _cykernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _npkernels
        BACKEND = "numpy"

LN_EPS = _npkernels.LN_EPS

layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
tanh_fwd = _impl.tanh_fwd
tanh_bwd = _impl.tanh_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
log_softmax_fwd = _impl.log_softmax_fwd
log_softmax_bwd = _impl.log_softmax_bwd


def get_backends():
    """Return {name: module} for every importable backend (for benchmarks)."""
    out = {"numpy": _npkernels}
    try:
        from . import _cykernels

        out["cython"] = _cykernels
    except ImportError:
        pass
    return out
