"""Hot inner loops with a compiled backend and a numpy fallback.

The compiled extension is used when it imports; set ``ANIMSYN_KERNELS=python``
to force the fallback. ``BACKEND`` names the active choice.
"""
import os

from . import _fallback

_compiled = None
if os.environ.get("ANIMSYN_KERNELS", "auto").lower() != "python":
    try:
        from . import _core as _compiled
    except ImportError:  # extension not built
        _compiled = None

_impl = _compiled if _compiled is not None else _fallback
BACKEND = "compiled" if _compiled is not None else "python"

rasterize_capsules = _impl.rasterize_capsules
gaussian_filter_valid = _impl.gaussian_filter_valid
color_histogram = _impl.color_histogram

__all__ = ["BACKEND", "rasterize_capsules", "gaussian_filter_valid", "color_histogram"]
