"""Backend selection for the count-likelihood kernels.

The compiled extension is preferred when it imported cleanly; the
pure-numpy implementation is the fallback. Set ``CROSSVI_PURE_PYTHON=1``
to force the fallback (used by the backend-comparison benchmark).
"""

from __future__ import annotations

import os

from . import _numpy

_force_python = os.environ.get("CROSSVI_PURE_PYTHON", "").strip() not in ("", "0")

if _force_python:
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        from . import _native as _impl  # type: ignore[no-redef]

        BACKEND = "native"
    except ImportError:
        _impl = _numpy
        BACKEND = "numpy"

PARAM_FLOOR = _numpy.PARAM_FLOOR

poisson_logpmf = _impl.poisson_logpmf
poisson_logpmf_grad = _impl.poisson_logpmf_grad
nb_logpmf = _impl.nb_logpmf
nb_logpmf_grad = _impl.nb_logpmf_grad
zinb_logpmf = _impl.zinb_logpmf
zinb_logpmf_grad = _impl.zinb_logpmf_grad


def available_backends() -> dict[str, object]:
    """Importable kernel modules by name (for tests and benchmarks)."""
    out = {"numpy": _numpy}
    try:
        from . import _native

        out["native"] = _native
    except ImportError:
        pass
    return out
