"""Backend selection for the hot rate kernels.

The compiled ``_ckernels`` extension is used when it imports; otherwise
the numpy versions in ``_kernels_py``. Set ``CFNOMA_PURE_PYTHON=1`` to
force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

_ext = None
if not os.environ.get("CFNOMA_PURE_PYTHON"):
    try:
        from . import _ckernels as _ext
    except ImportError:  # extension not built
        _ext = None

BACKEND = "cython" if _ext is not None else "numpy"
_impl = _ext if _ext is not None else _kernels_py


def _prep(S, ici, beta):
    # the compiled kernels take writable C-contiguous buffers
    S = np.require(S, np.float64, ["C", "W"])
    ici = np.require(ici, np.float64, ["C", "W"])
    beta = np.require(beta, np.float64, ["C", "W"])
    if S.ndim != 3 or S.shape[1] != S.shape[2]:
        raise ValueError(f"S must be (B, K, K), got {S.shape}")
    if ici.shape != S.shape[:2] or beta.shape != S.shape:
        raise ValueError("ici/beta shapes do not match S")
    return S, ici, beta


def cell_interference(S, ici, beta, impl=None):
    """Interference ``Intf[b, i, k]``; diagonal holds the own-decode term."""
    S, ici, beta = _prep(S, ici, beta)
    return (impl or _impl).cell_interference(S, ici, beta)


def convex_interference(S, ici, beta_t, impl=None):
    """Max-form interference over the complement variables ``beta_t``."""
    S, ici, beta_t = _prep(S, ici, beta_t)
    return (impl or _impl).convex_interference(S, ici, beta_t)


def cell_rates(S, ici, beta, sigma2, impl=None):
    """Return ``(intf, r, R, argmin)`` for a flat batch of cells."""
    S, ici, beta = _prep(S, ici, beta)
    intf, r, R, arg = (impl or _impl).cell_rates(S, ici, beta, float(sigma2))
    return intf, r, R, np.asarray(arg, dtype=np.intp)


def implementations():
    """Available backends by name, for benchmarks and cross-checks."""
    out = {"numpy": _kernels_py}
    if _ext is not None:
        out["cython"] = _ext
    return out
