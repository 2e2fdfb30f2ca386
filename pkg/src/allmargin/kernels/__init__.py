"""Kernel backend selection.

The compiled extension is preferred when importable; ALLMARGIN_KERNELS=py or
=c forces a backend (forcing c raises if the extension is missing, rather
than silently falling back). Both backends expose the same three entry
points with identical semantics; see _py.py for the contracts.
"""

import os

from . import _py

_forced = os.environ.get("ALLMARGIN_KERNELS", "").strip().lower()

if _forced == "py":
    _impl = _py
elif _forced == "c":
    from . import _core as _impl
else:
    try:
        from . import _core as _impl
    except ImportError:
        _impl = _py

BACKEND = _impl.BACKEND
ACT_IDS = _py.ACT_IDS
MODE_IDS = _py.MODE_IDS

forward_pass = _impl.forward_pass
head_values = _impl.head_values
backward_pass = _impl.backward_pass


def backends():
    """All importable backends, for tests and the benchmark."""
    found = {"py": _py}
    try:
        from . import _core
        found["c"] = _core
    except ImportError:
        pass
    return found
