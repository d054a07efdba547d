"""Compiled elementwise kernels for float32 GELU.

erf uses the rational approximation x*P(x^2)/Q(x^2) on the clamped range
[-4, 4] (Eigen/XLA single-precision coefficients, max abs error ~3e-7).
"""

import numba
import numpy as np

_F = np.float32


@numba.njit(fastmath=True, cache=True)
def _erf32(v):
    if v > _F(4.0):
        v = _F(4.0)
    elif v < _F(-4.0):
        v = _F(-4.0)
    v2 = v * v
    p = _F(-2.72614225801306e-10)
    p = p * v2 + _F(2.77068142495902e-08)
    p = p * v2 + _F(-2.10102402082508e-06)
    p = p * v2 + _F(-5.69250639462346e-05)
    p = p * v2 + _F(-7.34990630326855e-04)
    p = p * v2 + _F(-2.95459980854025e-03)
    p = p * v2 + _F(-1.60960333262415e-02)
    q = _F(-1.45660718464996e-05)
    q = q * v2 + _F(-2.13374055278905e-04)
    q = q * v2 + _F(-1.68282697438203e-03)
    q = q * v2 + _F(-7.37332916720468e-03)
    q = q * v2 + _F(-1.42647390514189e-02)
    return v * p / q


@numba.njit(fastmath=True, cache=True)
def gelu_forward_f32(x, out, cdf):
    for i in range(x.size):
        c = _F(0.5) + _F(0.5) * _erf32(x[i] * _F(0.70710678118654752))
        cdf[i] = c
        out[i] = x[i] * c


@numba.njit(fastmath=True, cache=True)
def gelu_backward_f32(x, cdf, g, gx):
    for i in range(x.size):
        pdf = np.exp(_F(-0.5) * x[i] * x[i]) * _F(0.3989422804014327)
        gx[i] = g[i] * (cdf[i] + x[i] * pdf)


@numba.njit(fastmath=True, cache=True)
def bn_stats(x, mean, var):
    """Per-column mean and biased variance of a row-major ``(R, C)`` array."""
    rows, cols = x.shape
    s = np.zeros(cols, dtype=np.float64)
    for r in range(rows):
        for c in range(cols):
            s[c] += x[r, c]
    for c in range(cols):
        mean[c] = s[c] / rows
    ss = np.zeros(cols, dtype=np.float64)
    for r in range(rows):
        for c in range(cols):
            d = x[r, c] - mean[c]
            ss[c] += d * d
    for c in range(cols):
        var[c] = ss[c] / rows


@numba.njit(fastmath=True, cache=True)
def bn_apply(x, mean, inv_std, gamma, beta, out):
    rows, cols = x.shape
    scale = np.empty(cols, dtype=x.dtype)
    shift = np.empty(cols, dtype=x.dtype)
    for c in range(cols):
        scale[c] = gamma[c] * inv_std[c]
        shift[c] = beta[c] - mean[c] * gamma[c] * inv_std[c]
    for r in range(rows):
        for c in range(cols):
            out[r, c] = x[r, c] * scale[c] + shift[c]


@numba.njit(fastmath=True, cache=True)
def bn_backward_train(x, g, mean, inv_std, gamma, gx, ggamma, gbeta):
    rows, cols = x.shape
    sg = np.zeros(cols, dtype=np.float64)
    sgx = np.zeros(cols, dtype=np.float64)
    for r in range(rows):
        for c in range(cols):
            xh = (x[r, c] - mean[c]) * inv_std[c]
            sg[c] += g[r, c]
            sgx[c] += g[r, c] * xh
    a = np.empty(cols, dtype=x.dtype)
    b = np.empty(cols, dtype=x.dtype)
    k = np.empty(cols, dtype=x.dtype)
    for c in range(cols):
        ggamma[c] = sgx[c]
        gbeta[c] = sg[c]
        k[c] = gamma[c] * inv_std[c]
        a[c] = sg[c] / rows
        b[c] = sgx[c] / rows
    for r in range(rows):
        for c in range(cols):
            xh = (x[r, c] - mean[c]) * inv_std[c]
            gx[r, c] = k[c] * (g[r, c] - a[c] - xh * b[c])
