"""Hot numeric kernels, each in a numba and a pure-numpy flavour.

All array kernels use channels-last layout ``[B, H, W, C]``. The public
names at the bottom of the module are bound to one flavour according to
:data:`saconvnet._accel.BACKEND`; the ``*_numpy`` / ``*_numba`` variants
stay importable for benchmarking and cross-checking.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import BACKEND, njit

# ---------------------------------------------------------------------------
# conv2d, stride 1, zero "same" padding, odd square kernel
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    xp = np.pad(x, ((0, 0), (r, r), (r, r), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # [B,H,W,C,k,k]
    b, h, w, c = x.shape
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, k * k * c)


def conv2d_forward_numpy(x, kernel, bias):
    b, h, w, _ = x.shape
    k, _, cin, cout = kernel.shape
    cols = _im2col(x, k)
    y = cols @ kernel.reshape(k * k * cin, cout) + bias
    return y.reshape(b, h, w, cout)


def conv2d_backward_numpy(x, kernel, grad_out):
    k, _, cin, cout = kernel.shape
    cols = _im2col(x, k)
    g2 = grad_out.reshape(-1, cout)
    grad_kernel = (cols.T @ g2).reshape(k, k, cin, cout)
    grad_bias = g2.sum(axis=0)
    flipped = np.ascontiguousarray(kernel[::-1, ::-1].transpose(0, 1, 3, 2))
    grad_x = conv2d_forward_numpy(grad_out, flipped, np.zeros(cin))
    return grad_x, grad_kernel, grad_bias


@njit
def conv2d_forward_numba(x, kernel, bias):
    nb, h, w, cin = x.shape
    k = kernel.shape[0]
    cout = kernel.shape[3]
    r = k // 2
    y = np.empty((nb, h, w, cout))
    for n in range(nb):
        for i in range(h):
            for j in range(w):
                for o in range(cout):
                    y[n, i, j, o] = bias[o]
                for a in range(k):
                    ii = i + a - r
                    if ii < 0 or ii >= h:
                        continue
                    for bb in range(k):
                        jj = j + bb - r
                        if jj < 0 or jj >= w:
                            continue
                        for c in range(cin):
                            xv = x[n, ii, jj, c]
                            for o in range(cout):
                                y[n, i, j, o] += xv * kernel[a, bb, c, o]
    return y


@njit
def conv2d_backward_numba(x, kernel, grad_out):
    nb, h, w, cin = x.shape
    k = kernel.shape[0]
    cout = kernel.shape[3]
    r = k // 2
    grad_x = np.zeros((nb, h, w, cin))
    grad_kernel = np.zeros((k, k, cin, cout))
    grad_bias = np.zeros(cout)
    for n in range(nb):
        for i in range(h):
            for j in range(w):
                for o in range(cout):
                    grad_bias[o] += grad_out[n, i, j, o]
                for a in range(k):
                    ii = i + a - r
                    if ii < 0 or ii >= h:
                        continue
                    for bb in range(k):
                        jj = j + bb - r
                        if jj < 0 or jj >= w:
                            continue
                        for c in range(cin):
                            xv = x[n, ii, jj, c]
                            acc = 0.0
                            for o in range(cout):
                                g = grad_out[n, i, j, o]
                                grad_kernel[a, bb, c, o] += xv * g
                                acc += kernel[a, bb, c, o] * g
                            grad_x[n, ii, jj, c] += acc
    return grad_x, grad_kernel, grad_bias


# ---------------------------------------------------------------------------
# max-pool, window = stride = p, trailing rows/cols dropped
# ---------------------------------------------------------------------------


def maxpool_forward_numpy(x, p):
    b, h, w, c = x.shape
    ho, wo = h // p, w // p
    win = (
        x[:, : ho * p, : wo * p, :]
        .reshape(b, ho, p, wo, p, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(b, ho, wo, c, p * p)
    )
    idx = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool_backward_numpy(grad_out, idx, in_shape, p):
    b, h, w, c = in_shape
    ho, wo = grad_out.shape[1], grad_out.shape[2]
    win = np.zeros((b, ho, wo, c, p * p))
    np.put_along_axis(win, idx[..., None], grad_out[..., None], axis=-1)
    core = win.reshape(b, ho, wo, c, p, p).transpose(0, 1, 4, 2, 5, 3)
    grad_x = np.zeros(in_shape)
    grad_x[:, : ho * p, : wo * p, :] = core.reshape(b, ho * p, wo * p, c)
    return grad_x


@njit
def maxpool_forward_numba(x, p):
    nb, h, w, c = x.shape
    ho = h // p
    wo = w // p
    y = np.empty((nb, ho, wo, c))
    idx = np.empty((nb, ho, wo, c), dtype=np.int64)
    for n in range(nb):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    best = x[n, i * p, j * p, ch]
                    arg = 0
                    for a in range(p):
                        for bb in range(p):
                            v = x[n, i * p + a, j * p + bb, ch]
                            if v > best:
                                best = v
                                arg = a * p + bb
                    y[n, i, j, ch] = best
                    idx[n, i, j, ch] = arg
    return y, idx


@njit
def _maxpool_backward_numba(grad_out, idx, grad_x, p):
    nb, ho, wo, c = grad_out.shape
    for n in range(nb):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    a = idx[n, i, j, ch] // p
                    bb = idx[n, i, j, ch] % p
                    grad_x[n, i * p + a, j * p + bb, ch] += grad_out[n, i, j, ch]
    return grad_x


def maxpool_backward_numba(grad_out, idx, in_shape, p):
    return _maxpool_backward_numba(grad_out, idx, np.zeros(in_shape), p)


# ---------------------------------------------------------------------------
# Mann-Whitney pair count: #(pos > neg) + 0.5 * #(pos == neg)
# ---------------------------------------------------------------------------


def pair_wins_numpy(pos, neg):
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    upto = np.searchsorted(neg_sorted, pos, side="right")
    return float(below.sum()) + 0.5 * float((upto - below).sum())


@njit
def pair_wins_numba(pos, neg):
    # merge two sorted arrays; lo counts negatives strictly below, hi those <=
    ps = np.sort(pos)
    ns = np.sort(neg)
    n = ns.shape[0]
    lo = 0
    hi = 0
    below = 0
    ties = 0
    for i in range(ps.shape[0]):
        while lo < n and ns[lo] < ps[i]:
            lo += 1
        if hi < lo:
            hi = lo
        while hi < n and ns[hi] <= ps[i]:
            hi += 1
        below += lo
        ties += hi - lo
    return float(below) + 0.5 * float(ties)


# ---------------------------------------------------------------------------
# scaled dot-product attention on pre-scaled queries
#   weights = softmax(q k^T) row-wise, out = weights v
# ---------------------------------------------------------------------------


def attention_forward_numpy(q, k, v):
    # one sample at a time keeps the T x T block cache-resident
    nb, t, _ = q.shape
    weights = np.empty((nb, t, t))
    out = np.empty((nb, t, v.shape[2]))
    for b in range(nb):
        w = weights[b]
        np.matmul(q[b], k[b].T, out=w)
        w -= w.max(axis=1, keepdims=True)
        np.exp(w, out=w)
        w /= w.sum(axis=1, keepdims=True)
        np.matmul(w, v[b], out=out[b])
    return out, weights


def attention_backward_numpy(q, k, v, weights, out, grad_out):
    grad_q = np.empty_like(q)
    grad_k = np.empty_like(k)
    grad_v = np.empty_like(v)
    for b in range(q.shape[0]):
        w = weights[b]
        g = grad_out[b]
        grad_v[b] = w.T @ g
        ds = g @ v[b].T
        ds -= np.sum(g * out[b], axis=1)[:, None]
        ds *= w
        grad_q[b] = ds @ k[b]
        grad_k[b] = ds.T @ q[b]
    return grad_q, grad_k, grad_v


@njit
def attention_forward_numba(q, k, v):
    nb, t, dk = q.shape
    dv = v.shape[2]
    w = np.empty((nb, t, t))
    out = np.zeros((nb, t, dv))
    for b in range(nb):
        for i in range(t):
            row = w[b, i]
            m = -np.inf
            for j in range(t):
                s = 0.0
                for d in range(dk):
                    s += q[b, i, d] * k[b, j, d]
                row[j] = s
                if s > m:
                    m = s
            tot = 0.0
            for j in range(t):
                e = np.exp(row[j] - m)
                row[j] = e
                tot += e
            inv = 1.0 / tot
            for j in range(t):
                p = row[j] * inv
                row[j] = p
                for d in range(dv):
                    out[b, i, d] += p * v[b, j, d]
    return out, w


@njit
def attention_backward_numba(q, k, v, weights, out, grad_out):
    nb, t, dk = q.shape
    dv = v.shape[2]
    grad_q = np.zeros_like(q)
    grad_k = np.zeros_like(k)
    grad_v = np.zeros_like(v)
    for b in range(nb):
        for i in range(t):
            row = weights[b, i]
            dot = 0.0
            for d in range(dv):
                dot += grad_out[b, i, d] * out[b, i, d]
            for j in range(t):
                p = row[j]
                dp = 0.0
                for d in range(dv):
                    g = grad_out[b, i, d]
                    dp += g * v[b, j, d]
                    grad_v[b, j, d] += p * g
                ds = p * (dp - dot)
                for d in range(dk):
                    grad_q[b, i, d] += ds * k[b, j, d]
                    grad_k[b, j, d] += ds * q[b, i, d]
    return grad_q, grad_k, grad_v


# Past a few input channels im2col + BLAS beats the jitted loops.
NUMBA_CONV_MAX_CIN = 4


def _conv_forward_by_depth(x, kernel, bias):
    if kernel.shape[2] <= NUMBA_CONV_MAX_CIN:
        return conv2d_forward_numba(x, kernel, bias)
    return conv2d_forward_numpy(x, kernel, bias)


def _conv_backward_by_depth(x, kernel, grad_out):
    if kernel.shape[2] <= NUMBA_CONV_MAX_CIN:
        return conv2d_backward_numba(x, kernel, grad_out)
    return conv2d_backward_numpy(x, kernel, grad_out)


if BACKEND == "numba":
    conv2d_forward = _conv_forward_by_depth
    conv2d_backward = _conv_backward_by_depth
    maxpool_forward = maxpool_forward_numba
    maxpool_backward = maxpool_backward_numba
else:
    conv2d_forward = conv2d_forward_numpy
    conv2d_backward = conv2d_backward_numpy
    maxpool_forward = maxpool_forward_numpy
    maxpool_backward = maxpool_backward_numpy

# numpy's sort + searchsorted beats the jitted merge
pair_wins = pair_wins_numpy

# Without SVML the jitted loops evaluate exp() one element at a time and
# lose to BLAS + vectorised numpy (see benchmarks/bench_kernels.py), so the
# attention kernel is numpy under both backends.
attention_forward = attention_forward_numpy
attention_backward = attention_backward_numpy
