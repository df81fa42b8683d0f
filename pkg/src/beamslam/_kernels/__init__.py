"""Hot numeric kernels with a compiled core and a numpy fallback.

The compiled extension is preferred when importable; set BEAMSLAM_PURE=1
to force the numpy implementation (used by the equivalence tests and the
benchmark). Both backends expose the same four functions.
"""

import os

from . import _ref

if os.environ.get("BEAMSLAM_PURE"):
    _backend = _ref
    COMPILED = False
else:
    try:
        from . import _core as _backend  # type: ignore[no-redef]

        COMPILED = True
    except ImportError:
        _backend = _ref
        COMPILED = False

pair_response = _backend.pair_response
bearing_loglik = _backend.bearing_loglik
systematic_resample = _backend.systematic_resample
wrapped_angle_diff = _backend.wrapped_angle_diff

__all__ = [
    "COMPILED",
    "pair_response",
    "bearing_loglik",
    "systematic_resample",
    "wrapped_angle_diff",
]
