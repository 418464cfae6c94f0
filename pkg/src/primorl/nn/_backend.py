"""Kernel backend selection, resolved once at import.

PRIMORL_BACKEND controls the choice:
  auto      compiled extension if built, numpy otherwise (default)
  compiled  require the extension, fail loudly if missing
  numpy     force the pure-numpy fallback

The compiled kernels fuse bias/activation work and beat numpy when
batches are small (per-call overhead dominates); for large batches
numpy's SIMD elementwise ops win, so the compiled backend hands batches
above ``_SMALL_BATCH`` rows back to the numpy implementation.
"""

import os

from . import _numpy_kernels

_SMALL_BATCH = 64

_choice = os.environ.get("PRIMORL_BACKEND", "auto").lower()
if _choice not in ("auto", "compiled", "numpy"):
    raise ValueError(
        f"PRIMORL_BACKEND must be auto, compiled or numpy; got {_choice!r}"
    )

_ckernels = None
if _choice in ("auto", "compiled"):
    try:
        from . import _ckernels  # type: ignore[no-redef]
    except ImportError:
        if _choice == "compiled":
            raise
        _ckernels = None


class _Dispatch:
    NAME = "compiled"

    @staticmethod
    def mlp_forward(Ws, bs, X, need_cache):
        mod = _ckernels if X.shape[0] <= _SMALL_BATCH else _numpy_kernels
        return mod.mlp_forward(Ws, bs, X, need_cache)

    @staticmethod
    def mlp_vjp(Ws, bs, cache, dY):
        mod = _ckernels if dY.shape[0] <= _SMALL_BATCH else _numpy_kernels
        return mod.mlp_vjp(Ws, bs, cache, dY)


if _choice == "numpy" or _ckernels is None:
    kernels = _numpy_kernels
else:
    kernels = _Dispatch

BACKEND = kernels.NAME
