"""Fused numba kernels for group normalisation over channel-last ``(B, L, C)``."""
from __future__ import annotations

import numba as nb
import numpy as np


@nb.njit(cache=True, fastmath=True)
def _group_reduce(acc, groups, n):
    # per-channel sums -> per-group means broadcast back to channels
    C = acc.shape[0]
    cg = C // groups
    out = np.empty_like(acc)
    for gi in range(groups):
        s = 0.0
        for c in range(gi * cg, (gi + 1) * cg):
            s += acc[c]
        m = s / n
        for c in range(gi * cg, (gi + 1) * cg):
            out[c] = m
    return out


@nb.njit(cache=True, fastmath=True)
def group_norm_fwd(x, groups, gamma, beta, eps):
    B, L, C = x.shape
    n = L * (C // groups)
    xhat = np.empty_like(x)
    out = np.empty_like(x)
    inv = np.empty((B, C), dtype=x.dtype)
    acc = np.empty(C, dtype=np.float64)
    for b in range(B):
        acc[:] = 0.0
        for l in range(L):
            for c in range(C):
                acc[c] += x[b, l, c]
        mu = _group_reduce(acc, groups, n)
        acc[:] = 0.0
        for l in range(L):
            for c in range(C):
                d = x[b, l, c] - mu[c]
                acc[c] += d * d
        var = _group_reduce(acc, groups, n)
        for c in range(C):
            inv[b, c] = 1.0 / np.sqrt(var[c] + eps)
        for l in range(L):
            for c in range(C):
                h = (x[b, l, c] - mu[c]) * inv[b, c]
                xhat[b, l, c] = h
                out[b, l, c] = h * gamma[c] + beta[c]
    return out, xhat, inv


@nb.njit(cache=True, fastmath=True)
def group_norm_bwd(g, xhat, inv, gamma, groups):
    B, L, C = g.shape
    n = L * (C // groups)
    gx = np.empty_like(g)
    a1 = np.empty(C, dtype=np.float64)
    a2 = np.empty(C, dtype=np.float64)
    for b in range(B):
        a1[:] = 0.0
        a2[:] = 0.0
        for l in range(L):
            for c in range(C):
                gh = g[b, l, c] * gamma[c]
                a1[c] += gh
                a2[c] += gh * xhat[b, l, c]
        m1 = _group_reduce(a1, groups, n)
        m2 = _group_reduce(a2, groups, n)
        for l in range(L):
            for c in range(C):
                gh = g[b, l, c] * gamma[c]
                gx[b, l, c] = inv[b, c] * (gh - m1[c] - xhat[b, l, c] * m2[c])
    return gx
