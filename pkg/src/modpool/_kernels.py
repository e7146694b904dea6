"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``MODPOOL_DISABLE_NUMBA`` is unset (or ``0``). Both paths expose
the same functions with the same semantics; the benchmark in
``benchmarks/bench_kernels.py`` times them against each other.
"""
from __future__ import annotations

import logging
import os

import numpy as np

logger = logging.getLogger(__name__)

_DISABLED = os.environ.get("MODPOOL_DISABLE_NUMBA", "0") not in ("", "0", "false", "False")

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(func):
            return func

        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return wrap


USE_NUMBA = HAVE_NUMBA and not _DISABLED


# ---------------------------------------------------------------------------
# numpy reference versions


def sqdist_np(q, p):
    diff = q[:, None, :] - p[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def sqdist_grad_np(g, q, p):
    # d/dq_i sum_j g_ij |q_i - p_j|^2 = 2 sum_j g_ij (q_i - p_j)
    gq = 2.0 * (g.sum(axis=1)[:, None] * q - g @ p)
    gp = 2.0 * (g.sum(axis=0)[:, None] * p - g.T @ q)
    return gq.astype(q.dtype, copy=False), gp.astype(p.dtype, copy=False)


def layernorm_np(x, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return (xc * inv).astype(x.dtype, copy=False), inv[:, 0].astype(x.dtype, copy=False)


def layernorm_grad_np(gy, y, inv):
    mg = gy.mean(axis=1, keepdims=True)
    mgy = (gy * y).mean(axis=1, keepdims=True)
    gx = inv[:, None] * (gy - mg - y * mgy)
    return gx.astype(y.dtype, copy=False)


def log_softmax_np(x):
    m = x.max(axis=1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def log_softmax_grad_np(gy, y):
    return gy - np.exp(y) * gy.sum(axis=1, keepdims=True)


def adam_update_np(p, g, m, v, lr, b1, b2, eps, t):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    mhat = m / (1.0 - b1**t)
    vhat = v / (1.0 - b2**t)
    p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# numba versions


@njit(cache=True)
def sqdist_nb(q, p):
    nq, d = q.shape
    npr = p.shape[0]
    out = np.empty((nq, npr), dtype=q.dtype)
    for i in range(nq):
        for j in range(npr):
            acc = 0.0
            for k in range(d):
                t = q[i, k] - p[j, k]
                acc += t * t
            out[i, j] = acc
    return out


@njit(cache=True)
def sqdist_grad_nb(g, q, p):
    nq, d = q.shape
    npr = p.shape[0]
    gq = np.zeros_like(q)
    gp = np.zeros_like(p)
    for i in range(nq):
        for j in range(npr):
            w = 2.0 * g[i, j]
            for k in range(d):
                t = w * (q[i, k] - p[j, k])
                gq[i, k] += t
                gp[j, k] -= t
    return gq, gp


@njit(cache=True)
def layernorm_nb(x, eps):
    n, d = x.shape
    y = np.empty_like(x)
    inv = np.empty(n, dtype=x.dtype)
    for i in range(n):
        mu = 0.0
        for k in range(d):
            mu += x[i, k]
        mu /= d
        var = 0.0
        for k in range(d):
            t = x[i, k] - mu
            var += t * t
        var /= d
        r = 1.0 / np.sqrt(var + eps)
        inv[i] = r
        for k in range(d):
            y[i, k] = (x[i, k] - mu) * r
    return y, inv


@njit(cache=True)
def layernorm_grad_nb(gy, y, inv):
    n, d = y.shape
    gx = np.empty_like(y)
    for i in range(n):
        mg = 0.0
        mgy = 0.0
        for k in range(d):
            mg += gy[i, k]
            mgy += gy[i, k] * y[i, k]
        mg /= d
        mgy /= d
        for k in range(d):
            gx[i, k] = inv[i] * (gy[i, k] - mg - y[i, k] * mgy)
    return gx


@njit(cache=True)
def log_softmax_nb(x):
    n, c = x.shape
    out = np.empty_like(x)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(c):
            s += np.exp(x[i, j] - m)
        lse = m + np.log(s)
        for j in range(c):
            out[i, j] = x[i, j] - lse
    return out


@njit(cache=True)
def log_softmax_grad_nb(gy, y):
    n, c = y.shape
    gx = np.empty_like(y)
    for i in range(n):
        s = 0.0
        for j in range(c):
            s += gy[i, j]
        for j in range(c):
            gx[i, j] = gy[i, j] - np.exp(y[i, j]) * s
    return gx


@njit(cache=True)
def adam_update_nb(p, g, m, v, lr, b1, b2, eps, t):
    pf = p.ravel()
    gf = g.ravel()
    mf = m.ravel()
    vf = v.ravel()
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i in range(pf.size):
        mf[i] = b1 * mf[i] + (1.0 - b1) * gf[i]
        vf[i] = b2 * vf[i] + (1.0 - b2) * (gf[i] * gf[i])
        mhat = mf[i] / c1
        vhat = vf[i] / c2
        pf[i] -= lr * mhat / (np.sqrt(vhat) + eps)


NUMPY_KERNELS = {
    "sqdist": sqdist_np,
    "sqdist_grad": sqdist_grad_np,
    "layernorm": layernorm_np,
    "layernorm_grad": layernorm_grad_np,
    "log_softmax": log_softmax_np,
    "log_softmax_grad": log_softmax_grad_np,
    "adam_update": adam_update_np,
}

NUMBA_KERNELS = {
    "sqdist": sqdist_nb,
    "sqdist_grad": sqdist_grad_nb,
    "layernorm": layernorm_nb,
    "layernorm_grad": layernorm_grad_nb,
    "log_softmax": log_softmax_nb,
    "log_softmax_grad": log_softmax_grad_nb,
    "adam_update": adam_update_nb,
}

_active = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS
logger.debug("modpool kernels: %s", "numba" if USE_NUMBA else "numpy")

sqdist = _active["sqdist"]
sqdist_grad = _active["sqdist_grad"]
layernorm = _active["layernorm"]
layernorm_grad = _active["layernorm_grad"]
log_softmax = _active["log_softmax"]
log_softmax_grad = _active["log_softmax_grad"]
adam_update = _active["adam_update"]

BACKEND = "numba" if USE_NUMBA else "numpy"
