"""Elementwise pieces of the transformer.

Layer norm and the GELU/softmax backward passes are fused numba loops over a
2-D C-contiguous view ``(rows, width)``, with numpy twins used when JIT is
disabled. The forward GELU and softmax stay in numpy because its vectorized
``tanh``/``exp`` are much faster than scalar calls from compiled loops.
"""

import math

import numpy as np

from ._jit import JIT_ENABLED, njit

LN_EPS = 1e-5
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


@njit
def _gelu_back_jit(dy, z, t, dz):
    rows, w = z.shape
    for i in range(rows):
        for j in range(w):
            x = z[i, j]
            th = t[i, j]
            d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            dz[i, j] = dy[i, j] * d


@njit
def _softmax_back_jit(P, dP, scale, dS):
    rows, w = P.shape
    for i in range(rows):
        acc = 0.0
        for j in range(w):
            acc += dP[i, j] * P[i, j]
        for j in range(w):
            dS[i, j] = P[i, j] * (dP[i, j] - acc) * scale


@njit
def _layernorm_jit(x, g, b, y, xhat, inv):
    rows, w = x.shape
    for i in range(rows):
        mu = 0.0
        for j in range(w):
            mu += x[i, j]
        mu /= w
        var = 0.0
        for j in range(w):
            d = x[i, j] - mu
            var += d * d
        var /= w
        iv = 1.0 / np.sqrt(var + LN_EPS)
        inv[i, 0] = iv
        for j in range(w):
            xh = (x[i, j] - mu) * iv
            xhat[i, j] = xh
            y[i, j] = xh * g[j] + b[j]


@njit
def _layernorm_back_jit(dy, g, xhat, inv, dx, dg, db):
    rows, w = dy.shape
    for j in range(w):
        dg[j] = 0.0
        db[j] = 0.0
    for i in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(w):
            d = dy[i, j] * g[j]
            m1 += d
            m2 += d * xhat[i, j]
            dg[j] += dy[i, j] * xhat[i, j]
            db[j] += dy[i, j]
        m1 /= w
        m2 /= w
        for j in range(w):
            dx[i, j] = inv[i, 0] * (dy[i, j] * g[j] - m1 - xhat[i, j] * m2)


# ---------------------------------------------------------------- dispatch

def gelu(z):
    """Tanh-approximate GELU; returns ``(value, tanh term)``.

    Always numpy: its SIMD ``tanh`` beats a scalar libm call from numba.
    """
    one = z.dtype.type(1.0)
    u = z * z
    u *= z.dtype.type(GELU_A)
    u += one
    u *= z
    u *= z.dtype.type(GELU_C)
    t = np.tanh(u, out=u)
    out = t + one
    out *= z
    out *= z.dtype.type(0.5)
    return out, t


def gelu_back(dy, z, t):
    if JIT_ENABLED:
        shape = z.shape
        dz = np.empty((z.size // shape[-1], shape[-1]), dtype=z.dtype)
        _gelu_back_jit(np.ascontiguousarray(dy).reshape(dz.shape), z.reshape(dz.shape),
                       t.reshape(dz.shape), dz)
        return dz.reshape(shape)
    c = z.dtype.type(GELU_C)
    a = z.dtype.type(3.0 * GELU_A)
    return dy * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * c * (1.0 + a * z * z))


def softmax(s):
    """Softmax over the last axis (numpy for the vectorized ``exp``)."""
    e = s - s.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_back(P, dP, scale):
    """Gradient w.r.t. pre-softmax scores (times ``scale``)."""
    if JIT_ENABLED:
        w = P.shape[-1]
        dS = np.empty((P.size // w, w), dtype=P.dtype)
        _softmax_back_jit(P.reshape(dS.shape), np.ascontiguousarray(dP).reshape(dS.shape),
                          scale, dS)
        return dS.reshape(P.shape)
    return P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * P.dtype.type(scale)


def layernorm(x, g, b):
    """Returns ``(y, cache)``; normalization over the last axis."""
    if JIT_ENABLED:
        w = x.shape[-1]
        x2 = np.ascontiguousarray(x).reshape(-1, w)
        y = np.empty_like(x2)
        xhat = np.empty_like(x2)
        inv = np.empty((x2.shape[0], 1), dtype=x.dtype)
        _layernorm_jit(x2, g, b, y, xhat, inv)
        return y.reshape(x.shape), (xhat.reshape(x.shape), inv.reshape(x.shape[:-1] + (1,)))
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(LN_EPS))
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def layernorm_back(dy, g, cache):
    """Returns ``(dx, dg, db)``."""
    xhat, inv = cache
    w = dy.shape[-1]
    if JIT_ENABLED:
        dy2 = np.ascontiguousarray(dy).reshape(-1, w)
        dx = np.empty_like(dy2)
        dg = np.empty(w, dtype=dy.dtype)
        db = np.empty(w, dtype=dy.dtype)
        _layernorm_back_jit(dy2, g, xhat.reshape(dy2.shape), inv.reshape(-1, 1), dx, dg, db)
        return dx.reshape(dy.shape), dg, db
    dxhat = dy * g
    dg = (dy * xhat).reshape(-1, w).sum(axis=0)
    db = dy.reshape(-1, w).sum(axis=0)
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db
