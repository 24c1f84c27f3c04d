"""Hot raster kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly, unless the environment
variable ``ADCDS_DISABLE_NUMBA`` is set to ``1``/``true``/``yes``. Both
paths return identical results, so the choice never changes pipeline output.
"""

import os

from . import _numpy

_DISABLED = os.environ.get("ADCDS_DISABLE_NUMBA", "").strip().lower() in {
    "1", "true", "yes"}

try:
    from . import _numba
except ImportError:  # pragma: no cover - numba is a hard dependency
    _numba = None

_impl = _numpy if (_DISABLED or _numba is None) else _numba
BACKEND = "numpy" if _impl is _numpy else "numba"

box3_sum = _impl.box3_sum
otsu_threshold = _impl.otsu_threshold
label4 = _impl.label4
component_stats = _impl.component_stats
majority_filter = _impl.majority_filter
rle_encode = _impl.rle_encode
rle_decode = _impl.rle_decode


def backends():
    """Available kernel modules keyed by name (used by tests and benchmarks)."""
    out = {"numpy": _numpy}
    if _numba is not None:
        out["numba"] = _numba
    return out


__all__ = [
    "BACKEND", "backends", "box3_sum", "otsu_threshold", "label4",
    "component_stats", "majority_filter", "rle_encode", "rle_decode",
]
