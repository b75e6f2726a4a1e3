"""Backend selection for the correlation kernels.

The compiled extension is preferred when present; set PDELEARN_KERNELS to
"python" or "compiled" to force one side (useful for the benchmark and for
debugging).  Both backends implement:

    corr_many(u, filt, wrap)   -> (B, F, H, W)   correlation with F filters
    corr_accum(g, filt, wrap)  -> (B, H, W)      sum_f correlation (adjoint path)
    corr_wgrad(g, u, n, wrap)  -> (F, n, n)      gradient w.r.t. filter weights

with centered odd-sized filters; wrap=True is periodic, wrap=False zero-pads.
"""

import os

import numpy as np

from . import _convnp

_FORCED = os.environ.get("PDELEARN_KERNELS", "auto").lower()

_compiled = None
if _FORCED in ("auto", "compiled"):
    try:
        from . import _convcore as _compiled
    except ImportError:
        _compiled = None
        if _FORCED == "compiled":
            raise

_impl = _compiled if _compiled is not None else _convnp

_threads = int(os.environ.get("PDELEARN_THREADS", "0")) or (os.cpu_count() or 1)


def set_threads(n: int) -> None:
    """Thread count for the compiled kernels (ignored by the fallback)."""
    global _threads
    _threads = max(1, int(n))


def get_threads() -> int:
    return _threads


def backend_name() -> str:
    return "compiled" if _impl is _compiled and _compiled is not None else "python"


def get_backend(name: str):
    """Return the kernel module for an explicit backend name."""
    if name == "python":
        return _convnp
    if name == "compiled":
        from . import _convcore

        return _convcore
    raise ValueError(f"unknown kernel backend {name!r}")


def _check(shape_hw, n):
    h, w = shape_hw
    if n % 2 == 0:
        raise ValueError(f"filter side must be odd, got {n}")
    if n > h or n > w:
        raise ValueError(f"{n}x{n} filter does not fit a {h}x{w} grid")


def _kwargs():
    return {"threads": _threads} if _impl is _compiled else {}


def corr_many(u: np.ndarray, filt: np.ndarray, wrap: bool) -> np.ndarray:
    _check(u.shape[-2:], filt.shape[-1])
    u = np.ascontiguousarray(u, dtype=np.float64)
    filt = np.ascontiguousarray(filt, dtype=np.float64)
    return np.asarray(_impl.corr_many(u, filt, wrap, **_kwargs()))


def corr_accum(g: np.ndarray, filt: np.ndarray, wrap: bool) -> np.ndarray:
    _check(g.shape[-2:], filt.shape[-1])
    g = np.ascontiguousarray(g, dtype=np.float64)
    filt = np.ascontiguousarray(filt, dtype=np.float64)
    return np.asarray(_impl.corr_accum(g, filt, wrap, **_kwargs()))


def corr_wgrad(g: np.ndarray, u: np.ndarray, n: int, wrap: bool) -> np.ndarray:
    _check(u.shape[-2:], n)
    g = np.ascontiguousarray(g, dtype=np.float64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    return np.asarray(_impl.corr_wgrad(g, u, n, wrap, **_kwargs()))


def correlate2d(u: np.ndarray, weights: np.ndarray, wrap: bool) -> np.ndarray:
    """Single-field, single-filter correlation."""
    out = corr_many(u[None], weights[None], wrap)
    return out[0, 0]
