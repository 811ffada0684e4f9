"""Numerical kernel backend selection.

The compiled extension (``_gls``, built from Cython) is preferred; the
pure-numpy twin (``_gls_py``) is used when the extension is unavailable.
Set ``BATCHCAST_BACKEND=python`` or ``=c`` to force a choice; forcing ``c``
raises if the extension was not built.
"""

import os

_requested = os.environ.get("BATCHCAST_BACKEND", "").lower() or None
if _requested not in (None, "c", "python"):
    raise RuntimeError(
        f"BATCHCAST_BACKEND must be 'c' or 'python', got {_requested!r}"
    )

if _requested == "python":
    from . import _gls_py as _impl

    BACKEND = "python"
else:
    try:
        from . import _gls as _impl  # type: ignore[no-redef]

        BACKEND = "c"
    except ImportError:
        if _requested == "c":
            raise
        from . import _gls_py as _impl  # type: ignore[no-redef]

        BACKEND = "python"

JITTER_LADDER = _impl.JITTER_LADDER
LOG_2PI = _impl.LOG_2PI
cholesky_factor = _impl.cholesky_factor
solve_factor = _impl.solve_factor
logdet_factor = _impl.logdet_factor
quad_form_factor = _impl.quad_form_factor
gls_nll_grad = _impl.gls_nll_grad
conditional_moments = _impl.conditional_moments

__all__ = [
    "BACKEND",
    "JITTER_LADDER",
    "LOG_2PI",
    "cholesky_factor",
    "solve_factor",
    "logdet_factor",
    "quad_form_factor",
    "gls_nll_grad",
    "conditional_moments",
]
