"""Hot inner loops, compiled with numba when available.

Every kernel has a plain numpy twin with identical semantics; the
compiled path only removes temporaries and interpreter overhead. All
loops are sequential, so results are reproducible run to run.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap


def _gn_forward_np(x, groups, gamma, beta, eps):
    rows, ch = x.shape
    size = ch // groups
    xg = x.reshape(rows, groups, size)
    mu = np.einsum("rgs->rg", xg) / size
    xc = xg - mu[:, :, None]
    var = np.einsum("rgs,rgs->rg", xc, xc) / size
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc
    xhat *= inv[:, :, None]
    xhat = xhat.reshape(rows, ch)
    out = xhat * gamma
    out += beta
    return out, xhat, inv


def _gn_backward_np(g, gamma, xhat, inv, groups):
    rows, ch = g.shape
    size = ch // groups
    dgamma = np.einsum("rc,rc->c", g, xhat)
    dbeta = g.sum(axis=0)
    dx = (g * gamma).reshape(rows, groups, size)
    xh = xhat.reshape(rows, groups, size)
    mean_dxh = np.einsum("rgs->rg", dx) / size
    mean_proj = np.einsum("rgs,rgs->rg", dx, xh) / size
    dx -= mean_dxh[:, :, None]
    dx -= xh * mean_proj[:, :, None]
    dx *= inv[:, :, None]
    return dx.reshape(rows, ch), dgamma, dbeta


def _leaky_forward_np(x, slope):
    return np.maximum(x, x * slope)


def _leaky_backward_np(x, g, slope):
    scale = (x > 0).astype(g.dtype)
    scale *= 1.0 - slope
    scale += slope
    scale *= g
    return scale


def _max_mid_np(x):
    arg = np.argmax(x, axis=1)
    out = np.take_along_axis(x, arg[:, None, :], axis=1)[:, 0, :]
    return out, arg


def _max_mid_grad_np(g, arg, k):
    n, c = g.shape
    full = np.zeros((n, k, c), dtype=g.dtype)
    np.put_along_axis(full, arg[:, None, :], g[:, None, :], axis=1)
    return full


def _edge_combine_np(center, offset, nbr):
    n, c = center.shape
    k = nbr.shape[1]
    out = offset[nbr.reshape(-1)]
    out3 = out.reshape(n, k, c)
    out3 += center[:, None, :]
    return out


def _edge_combine_grad_np(g, nbr, n_rows):
    n, k = nbr.shape
    c = g.shape[1]
    dcenter = g.reshape(n, k, c).sum(axis=1)
    flat = nbr.reshape(-1)
    mat_t = sp.csr_array(
        (np.ones(flat.size, dtype=g.dtype), (flat, np.arange(flat.size))),
        shape=(n_rows, flat.size),
    )
    return dcenter, mat_t @ g


def _max_head_np(x):
    arg = np.argmax(x, axis=0)
    return x[arg, np.arange(x.shape[1])], arg


def _max_head_grad_np(g, arg, n):
    full = np.zeros((n, g.shape[0]), dtype=g.dtype)
    full[arg, np.arange(g.shape[0])] = g
    return full


@njit(cache=True)
def _gn_forward_jit(x, groups, gamma, beta, eps):
    rows, ch = x.shape
    size = ch // groups
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty((rows, groups), dtype=x.dtype)
    one = x.dtype.type(1.0)
    epsd = x.dtype.type(eps)
    sized = x.dtype.type(size)
    for r in range(rows):
        for grp in range(groups):
            base = grp * size
            s = x.dtype.type(0.0)
            for j in range(size):
                s += x[r, base + j]
            mu = s / sized
            v = x.dtype.type(0.0)
            for j in range(size):
                d = x[r, base + j] - mu
                v += d * d
            iv = one / np.sqrt(v / sized + epsd)
            inv[r, grp] = iv
            for j in range(size):
                xh = (x[r, base + j] - mu) * iv
                xhat[r, base + j] = xh
                out[r, base + j] = xh * gamma[base + j] + beta[base + j]
    return out, xhat, inv


@njit(cache=True)
def _gn_backward_jit(g, gamma, xhat, inv, groups):
    rows, ch = g.shape
    size = ch // groups
    dx = np.empty_like(g)
    dgamma = np.zeros(ch, dtype=g.dtype)
    dbeta = np.zeros(ch, dtype=g.dtype)
    sized = g.dtype.type(size)
    for r in range(rows):
        for grp in range(groups):
            base = grp * size
            s1 = g.dtype.type(0.0)
            s2 = g.dtype.type(0.0)
            for j in range(size):
                c = base + j
                gv = g[r, c]
                xh = xhat[r, c]
                dgamma[c] += gv * xh
                dbeta[c] += gv
                dxh = gv * gamma[c]
                s1 += dxh
                s2 += dxh * xh
            m1 = s1 / sized
            m2 = s2 / sized
            iv = inv[r, grp]
            for j in range(size):
                c = base + j
                dx[r, c] = (g[r, c] * gamma[c] - m1 - xhat[r, c] * m2) * iv
    return dx, dgamma, dbeta


@njit(cache=True)
def _leaky_forward_jit(x, slope):
    out = np.empty_like(x)
    s = x.dtype.type(slope)
    flat = x.reshape(-1)
    oflat = out.reshape(-1)
    for i in range(flat.size):
        v = flat[i]
        oflat[i] = v if v > 0 else v * s
    return out


@njit(cache=True)
def _leaky_backward_jit(x, g, slope):
    dx = np.empty_like(g)
    s = g.dtype.type(slope)
    xflat = x.reshape(-1)
    gflat = g.reshape(-1)
    dflat = dx.reshape(-1)
    for i in range(xflat.size):
        gv = gflat[i]
        dflat[i] = gv if xflat[i] > 0 else gv * s
    return dx


@njit(cache=True)
def _max_mid_jit(x):
    n, k, c = x.shape
    out = np.empty((n, c), dtype=x.dtype)
    arg = np.zeros((n, c), dtype=np.int64)
    for i in range(n):
        for j in range(c):
            out[i, j] = x[i, 0, j]
        for kk in range(1, k):
            for j in range(c):
                v = x[i, kk, j]
                if v > out[i, j]:
                    out[i, j] = v
                    arg[i, j] = kk
    return out, arg


@njit(cache=True)
def _max_mid_grad_jit(g, arg, k):
    n, c = g.shape
    full = np.zeros((n, k, c), dtype=g.dtype)
    for i in range(n):
        for j in range(c):
            full[i, arg[i, j], j] = g[i, j]
    return full


@njit(cache=True)
def _edge_combine_jit(center, offset, nbr):
    n, c = center.shape
    k = nbr.shape[1]
    out = np.empty((n * k, c), dtype=center.dtype)
    for i in range(n):
        for j in range(k):
            src = nbr[i, j]
            row = i * k + j
            for q in range(c):
                out[row, q] = center[i, q] + offset[src, q]
    return out


@njit(cache=True)
def _edge_combine_grad_jit(g, nbr, n_rows):
    n, k = nbr.shape
    c = g.shape[1]
    dcenter = np.zeros((n, c), dtype=g.dtype)
    doffset = np.zeros((n_rows, c), dtype=g.dtype)
    for i in range(n):
        for j in range(k):
            row = i * k + j
            src = nbr[i, j]
            for q in range(c):
                gv = g[row, q]
                dcenter[i, q] += gv
                doffset[src, q] += gv
    return dcenter, doffset


@njit(cache=True)
def _max_head_jit(x):
    n, c = x.shape
    out = np.empty(c, dtype=x.dtype)
    arg = np.zeros(c, dtype=np.int64)
    for j in range(c):
        out[j] = x[0, j]
    for i in range(1, n):
        for j in range(c):
            v = x[i, j]
            if v > out[j]:
                out[j] = v
                arg[j] = i
    return out, arg


@njit(cache=True)
def _max_head_grad_jit(g, arg, n):
    c = g.shape[0]
    full = np.zeros((n, c), dtype=g.dtype)
    for j in range(c):
        full[arg[j], j] = g[j]
    return full


def _floats(*arrays):
    return all(a.dtype.kind == "f" for a in arrays)


def gn_forward(x, groups, gamma, beta, eps):
    if HAVE_NUMBA and _floats(x, gamma, beta) and x.dtype == gamma.dtype == beta.dtype:
        return _gn_forward_jit(x, groups, gamma, beta, eps)
    return _gn_forward_np(x, groups, gamma, beta, eps)


def gn_backward(g, gamma, xhat, inv, groups):
    if HAVE_NUMBA and _floats(g, gamma) and g.dtype == gamma.dtype == xhat.dtype:
        return _gn_backward_jit(g, gamma, xhat, inv, groups)
    return _gn_backward_np(g, gamma, xhat, inv, groups)


def leaky_forward(x, slope):
    if HAVE_NUMBA and x.ndim >= 1 and x.dtype.kind == "f":
        return _leaky_forward_jit(x, slope)
    return _leaky_forward_np(x, slope)


def leaky_backward(x, g, slope):
    if HAVE_NUMBA and x.ndim >= 1 and _floats(x, g):
        return _leaky_backward_jit(x, g, slope)
    return _leaky_backward_np(x, g, slope)


def max_mid(x):
    if HAVE_NUMBA and x.dtype.kind == "f":
        return _max_mid_jit(x)
    return _max_mid_np(x)


def max_mid_grad(g, arg, k):
    if HAVE_NUMBA and g.dtype.kind == "f":
        return _max_mid_grad_jit(g, arg, k)
    return _max_mid_grad_np(g, arg, k)


def edge_combine(center, offset, nbr):
    if HAVE_NUMBA and _floats(center, offset) and center.dtype == offset.dtype:
        return _edge_combine_jit(center, offset, nbr)
    return _edge_combine_np(center, offset, nbr)


def edge_combine_grad(g, nbr, n_rows):
    if HAVE_NUMBA and g.dtype.kind == "f":
        return _edge_combine_grad_jit(g, nbr, n_rows)
    return _edge_combine_grad_np(g, nbr, n_rows)


def max_head(x):
    if HAVE_NUMBA and x.dtype.kind == "f":
        return _max_head_jit(x)
    return _max_head_np(x)


def max_head_grad(g, arg, n):
    if HAVE_NUMBA and g.dtype.kind == "f":
        return _max_head_grad_jit(g, arg, n)
    return _max_head_grad_np(g, arg, n)
