"""Hot numerical kernels with a compiled core and a NumPy fallback.

The Cython extension ``geomext._kernels`` is used when it was built;
otherwise, or when ``GEOMEXT_PURE_PYTHON=1`` is set, the NumPy versions in
``geomext._kernels_py`` are used. ``BACKEND`` records the choice. The gauge
always uses the NumPy version unless a backend is passed explicitly.
"""

from __future__ import annotations

import os
from types import ModuleType

import numpy as np

from geomext import _kernels_py

_compiled: ModuleType | None
try:
    from geomext import _kernels as _compiled  # type: ignore[attr-defined]
except ImportError:  # extension not built
    _compiled = None

if _compiled is not None and os.environ.get("GEOMEXT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    _impl: ModuleType = _compiled
    BACKEND = "cython"
else:
    _impl = _kernels_py
    BACKEND = "python"

calibration_index = _kernels_py.calibration_index


def available_backends() -> dict[str, ModuleType]:
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def _f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def pairwise_loglik(ZT, pi, pj, rho, tau, impl: ModuleType | None = None):
    """See :func:`geomext._kernels_py.pairwise_loglik`; ``ZT`` is sites x days."""
    impl = impl or _impl
    return impl.pairwise_loglik(
        _f64(ZT),
        np.ascontiguousarray(pi, dtype=np.intp),
        np.ascontiguousarray(pj, dtype=np.intp),
        _f64(rho),
        float(tau),
    )


def gauge_batch(W, Linv, gamma, impl: ModuleType | None = None):
    # the BLAS matmul in the NumPy version beats the compiled row loop
    impl = impl or _kernels_py
    W = np.atleast_2d(_f64(W))
    return impl.gauge_batch(W, _f64(Linv), float(gamma))


def critical_scale(Y, q, m, impl: ModuleType | None = None):
    impl = impl or _impl
    return impl.critical_scale(np.atleast_2d(_f64(Y)), _f64(q), int(m))


def window_critical_scale(B, q, m, run_len, impl: ModuleType | None = None):
    impl = impl or _impl
    return impl.window_critical_scale(_f64(B), _f64(q), int(m), int(run_len))


def at_least_m(Y, q, m, impl: ModuleType | None = None):
    impl = impl or _impl
    return impl.at_least_m(np.atleast_2d(_f64(Y)), _f64(q), int(m))


def joint_exceedance_counts(E, impl: ModuleType | None = None):
    impl = impl or _impl
    return impl.joint_exceedance_counts(np.ascontiguousarray(E, dtype=np.uint8))
