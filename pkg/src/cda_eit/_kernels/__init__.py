"""Element kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import time.  Set ``CDA_EIT_NUMBA=0`` in the
environment to force the numpy implementation (useful for debugging and for
platforms without numba).
"""

import os

from . import _numpy

NAMES = (
    "geometry",
    "p1_local_matrix",
    "rt0_local_matrix",
    "shape_gradient_local",
    "dgdu_local",
    "adjoint_flux_rhs_local",
    "flux_bound_local",
)


def _want_numba():
    flag = os.environ.get("CDA_EIT_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


BACKEND = "numpy"
_impl = _numpy
if _want_numba():
    try:
        from . import _numba as _impl  # noqa: F811

        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _impl = _numpy

geometry = _impl.geometry
p1_local_matrix = _impl.p1_local_matrix
rt0_local_matrix = _impl.rt0_local_matrix
shape_gradient_local = _impl.shape_gradient_local
dgdu_local = _impl.dgdu_local
adjoint_flux_rhs_local = _impl.adjoint_flux_rhs_local
flux_bound_local = _impl.flux_bound_local

__all__ = ["BACKEND", *NAMES]
