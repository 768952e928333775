"""Hot inner loops with a compiled backend and a numpy fallback.

The compiled extension is used when it was built at install time.  Set
``CAGNN_BACKEND=python`` to force the numpy fallback (the test suite runs
both).  ``BACKEND`` names the active implementation.
"""
import os

from cagnn._kernels import _pykernels

_NAMES = (
    "spmm",
    "spmm_t",
    "sddmm",
    "segment_softmax",
    "segment_softmax_backward",
    "kendall_counts",
    "kendall_permutation_tail",
)


def _load(name):
    if name == "python":
        return _pykernels
    if name == "cython":
        from cagnn._kernels import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    found = ["python"]
    try:
        _load("cython")
    except ImportError:
        pass
    else:
        found.insert(0, "cython")
    return found


def get_backend(name):
    """Return the kernel module for ``name`` ('cython' or 'python')."""
    return _load(name)


def use_backend(name):
    """Rebind the module-level kernel functions to backend ``name``."""
    global BACKEND
    mod = _load(name)
    g = globals()
    for fn in _NAMES:
        g[fn] = getattr(mod, fn)
    BACKEND = name


BACKEND = None
_requested = os.environ.get("CAGNN_BACKEND", "").strip().lower()
if _requested:
    use_backend(_requested)
else:
    use_backend(available_backends()[0])
