"""Pure-numpy selective-scan recurrence (fallback when the extension is absent).

Shapes: ``x, delta`` are ``[N, L, d]``, ``A`` is ``[d, s]``, ``B, C`` are
``[N, L, s]``. ``N`` is an independent batch of sequences.
"""
from __future__ import annotations

import numpy as np


def scan_forward(x, delta, A, B, C):
    n, length, d = x.shape
    s = A.shape[1]
    h = np.zeros((n, d, s))
    hs = np.empty((n, length, d, s))
    y = np.empty((n, length, d))
    for t in range(length):
        decay = np.exp(delta[:, t, :, None] * A[None])
        h = decay * h + (delta[:, t] * x[:, t])[:, :, None] * B[:, t, None, :]
        hs[:, t] = h
        y[:, t] = np.einsum("nds,ns->nd", h, C[:, t])
    return y, hs


def scan_backward(gy, x, delta, A, B, C, hs):
    n, length, d = x.shape
    s = A.shape[1]
    gx = np.empty_like(x)
    gdelta = np.empty_like(delta)
    gA = np.zeros_like(A)
    gB = np.empty_like(B)
    gC = np.empty_like(C)
    gh = np.zeros((n, d, s))
    zeros = np.zeros((n, d, s))
    for t in range(length - 1, -1, -1):
        gh = gh + gy[:, t, :, None] * C[:, t, None, :]
        gC[:, t] = np.einsum("nd,nds->ns", gy[:, t], hs[:, t])
        h_prev = hs[:, t - 1] if t > 0 else zeros
        decay = np.exp(delta[:, t, :, None] * A[None])
        g_arg = gh * h_prev * decay
        ghb = (gh * B[:, t, None, :]).sum(-1)
        gdelta[:, t] = (g_arg * A[None]).sum(-1) + ghb * x[:, t]
        gA += np.einsum("nds,nd->ds", g_arg, delta[:, t])
        gB[:, t] = np.einsum("nds,nd->ns", gh, delta[:, t] * x[:, t])
        gx[:, t] = ghb * delta[:, t]
        gh = gh * decay
    return gx, gdelta, gA, gB, gC
