"""Selective-scan recurrence with a compiled core and a numpy fallback.

The backend is chosen once at import: the Cython extension ``_scan_ext`` when
it was built, otherwise ``_scan_py``. Setting ``HSIMAMBA_PURE_PYTHON=1`` forces
the fallback. Both backends are always importable by name for benchmarking.
"""
from __future__ import annotations

import os

import numpy as np
import torch

from . import _scan_py

try:
    from . import _scan_ext
except ImportError:  # extension not built
    _scan_ext = None

BACKENDS = {"python": _scan_py}
if _scan_ext is not None:
    BACKENDS["cython"] = _scan_ext

if _scan_ext is not None and os.environ.get("HSIMAMBA_PURE_PYTHON", "") in ("", "0"):
    BACKEND = "cython"
else:
    BACKEND = "python"

__all__ = ["BACKEND", "BACKENDS", "scan", "scan_numpy"]


def _np(t: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype=np.float64)


def scan_numpy(x, delta, A, B, C, backend: str | None = None):
    """Forward recurrence on numpy arrays; returns ``(y, hidden_states)``."""
    impl = BACKENDS[backend or BACKEND]
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (x, delta, A, B, C)]
    return impl.scan_forward(*args)


class _ScanFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, delta, A, B, C, backend):
        impl = BACKENDS[backend]
        arrays = [_np(t) for t in (x, delta, A, B, C)]
        y, hs = impl.scan_forward(*arrays)
        ctx.impl = impl
        ctx.arrays = arrays
        ctx.hs = hs
        ctx.dtype = x.dtype
        return torch.from_numpy(y).to(x.dtype)

    @staticmethod
    def backward(ctx, gy):
        grads = ctx.impl.scan_backward(_np(gy), *ctx.arrays, ctx.hs)
        out = tuple(torch.from_numpy(g).to(ctx.dtype) for g in grads)
        return (*out, None)


def scan(x: torch.Tensor, delta: torch.Tensor, A: torch.Tensor, B: torch.Tensor,
         C: torch.Tensor, backend: str | None = None) -> torch.Tensor:
    """Run ``h_t = exp(delta_t * A) h_{t-1} + delta_t B_t x_t``, ``y_t = C_t . h_t``.

    ``x`` and ``delta`` are ``[N, L, d]``; ``A`` is ``[d, s]``; ``B`` and ``C`` are
    ``[N, L, s]``. Differentiable with respect to all five tensors.
    """
    return _ScanFunction.apply(x, delta, A, B, C, backend or BACKEND)
