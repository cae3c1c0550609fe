"""Hot kernels with a compiled (Cython) core and a numpy fallback.

The backend is chosen once at import. Set ``OPRESLAB_PURE_PYTHON=1`` to
force the fallback; :data:`BACKEND` reports which one is active.
"""
import os

from . import _pykernels as python

compiled = None
if os.environ.get("OPRESLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else python
BACKEND = "cython" if compiled is not None else "python"

darcy_stencil = _impl.darcy_stencil
darcy_diagonal = _impl.darcy_diagonal
darcy_pcg = _impl.darcy_pcg
# batched BLAS matmul beats a hand-written loop here; see benchmarks/bench_kernels.py
mode_contract = python.mode_contract
mode_contract_grads = python.mode_contract_grads

__all__ = [
    "BACKEND", "compiled", "python",
    "darcy_stencil", "darcy_diagonal", "darcy_pcg",
    "mode_contract", "mode_contract_grads",
]
