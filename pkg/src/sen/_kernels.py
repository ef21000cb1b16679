"""Compiled row kernels for layer normalisation.

Rows are grouped: row ``i`` uses affine row ``i // rows_per_group`` of the
``(G, d)`` gamma/beta tables, which lets stacked per-modality encoders share
one call.
"""
import math

import numba as nb
import numpy as np


@nb.njit(cache=True)
def ln_forward(x, gamma, beta, eps):
    n, d = x.shape
    per = n // gamma.shape[0]
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty(n)
    for i in range(n):
        grp = i // per
        m = 0.0
        for j in range(d):
            m += x[i, j]
        m /= d
        v = 0.0
        for j in range(d):
            c = x[i, j] - m
            v += c * c
        iv = 1.0 / math.sqrt(v / d + eps)
        inv[i] = iv
        for j in range(d):
            h = (x[i, j] - m) * iv
            xhat[i, j] = h
            out[i, j] = h * gamma[grp, j] + beta[grp, j]
    return out, xhat, inv


@nb.njit(cache=True)
def ln_backward(g, xhat, inv, gamma):
    n, d = g.shape
    groups = gamma.shape[0]
    per = n // groups
    gx = np.empty_like(g)
    ggamma = np.zeros((groups, d))
    gbeta = np.zeros((groups, d))
    for i in range(n):
        grp = i // per
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            gh = g[i, j] * gamma[grp, j]
            s1 += gh
            s2 += gh * xhat[i, j]
            ggamma[grp, j] += g[i, j] * xhat[i, j]
            gbeta[grp, j] += g[i, j]
        s1 /= d
        s2 /= d
        for j in range(d):
            gx[i, j] = inv[i] * (g[i, j] * gamma[grp, j] - s1 - xhat[i, j] * s2)
    return gx, ggamma, gbeta


# GELU (tanh form). numba's scalar tanh is slow without SVML, so the
# transcendental runs in numpy between two fused polynomial passes.

@nb.njit(cache=True)
def gelu_inner(x, c, a, out):
    f = x.ravel()
    o = out.ravel()
    for i in range(f.size):
        v = f[i]
        o[i] = c * v * (1.0 + a * v * v)


@nb.njit(cache=True)
def gelu_outer(x, t, out):
    f = x.ravel()
    tt = t.ravel()
    o = out.ravel()
    for i in range(f.size):
        o[i] = 0.5 * f[i] * (1.0 + tt[i])


@nb.njit(cache=True)
def gelu_backward(x, t, g, c, a):
    f = x.ravel()
    tt = t.ravel()
    gg = g.ravel()
    gx = np.empty(f.size)
    for i in range(f.size):
        v = f[i]
        th = tt[i]
        gx[i] = gg[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * c * (1.0 + 3.0 * a * v * v))
    return gx.reshape(x.shape)
