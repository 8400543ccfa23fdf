"""Hot loops, compiled when the extension is built, numpy otherwise.

Set ``SEARCHLAB_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

try:
    if os.environ.get("SEARCHLAB_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python kernels requested")
    from . import _kernels as _impl  # type: ignore[attr-defined]
    BACKEND = "compiled"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"

merge_pair = _impl.merge_pair
rank_sum_counts = _impl.rank_sum_counts
permutation_ratios = _impl.permutation_ratios
