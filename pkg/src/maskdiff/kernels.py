"""Scan kernel selection.

The compiled extension ``maskdiff._scan`` is used when it imports; otherwise
(or when ``MASKDIFF_PURE_PYTHON=1``) the numpy implementation in
``maskdiff._scan_py`` is used. Both expose the same four functions.
"""

import os

from . import _scan_py

if os.environ.get("MASKDIFF_PURE_PYTHON", "") not in ("", "0"):
    _impl = _scan_py
    BACKEND = "python"
else:
    try:
        from . import _scan as _impl  # type: ignore[attr-defined]
        BACKEND = "compiled"
    except ImportError:
        _impl = _scan_py
        BACKEND = "python"

linear_scan_fwd = _impl.linear_scan_fwd
linear_scan_bwd = _impl.linear_scan_bwd
selective_scan_fwd = _impl.selective_scan_fwd
selective_scan_bwd = _impl.selective_scan_bwd

python_kernels = _scan_py
