"""Backend selection for the LSTM cell kernels.

The compiled extension is used when it imports; set ``RVAR_PURE_PYTHON=1``
to force the numpy implementation. ``BACKEND`` names the active one.
"""
import os

from . import _lstm_py

BACKEND = "python"
if os.environ.get("RVAR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _lstm_ext as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _lstm_py
else:
    _impl = _lstm_py

lstm_forward = _impl.lstm_forward
lstm_backward = _impl.lstm_backward


def backends() -> dict:
    """All importable backends keyed by name (for tests and benchmarks)."""
    out = {"python": _lstm_py}
    try:
        from . import _lstm_ext
        out["cython"] = _lstm_ext
    except ImportError:
        pass
    return out
