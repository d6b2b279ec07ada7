"""Event-loop kernel selection.

Imports the compiled extension when present, else the pure-Python
reference. Set SAFELB_PURE_PY=1 before import to force the fallback;
both produce bit-identical runs, the extension is just faster.
"""

import os

from safelb import _pure

if os.environ.get("SAFELB_PURE_PY", "") not in ("", "0"):
    _core = None
else:
    try:
        from safelb import _core
    except ImportError:
        _core = None

HAS_COMPILED = _core is not None
ACTIVE = "compiled" if HAS_COMPILED else "pure"


def get_kernel(name: str = None):
    """run_chain for the named kernel: 'pure', 'compiled', or None for
    the active default."""
    if name in (None, "auto"):
        return _core.run_chain if HAS_COMPILED else _pure.run_chain
    if name == "pure":
        return _pure.run_chain
    if name == "compiled":
        if not HAS_COMPILED:
            raise RuntimeError("compiled kernel unavailable "
                               "(extension not built or disabled)")
        return _core.run_chain
    raise ValueError(f"unknown kernel: {name!r}")
