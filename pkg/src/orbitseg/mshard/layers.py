"""Batched layer primitives with hand-written adjoints.

Activations are ``(B, C, H, W)`` arrays. Every ``*_forward`` returns the
output and a cache tuple; the matching ``*_backward`` takes the cache and
the upstream gradient and returns input/parameter gradients.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..raster import pad_matrix, resample_matrix


@lru_cache(maxsize=None)
def _pad(n: int, p: int, dtype: str) -> np.ndarray:
    m = pad_matrix(n, p, p).astype(dtype)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=None)
def _resize(n_in: int, n_out: int, dtype: str) -> np.ndarray:
    m = resample_matrix(n_in, n_out, "bilinear").astype(dtype)
    m.setflags(write=False)
    return m


# --------------------------------------------------------------------------
# reflect padding and bilinear resizing (both separable linear maps)


def sep_apply(x: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    return np.matmul(mh, x @ mw.T)


def sep_adjoint(g: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    return np.matmul(mh.T, g @ mw)


def resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    dt = x.dtype.str
    return sep_apply(x, _resize(x.shape[-2], out_h, dt), _resize(x.shape[-1], out_w, dt))


def resize_backward(g: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    dt = g.dtype.str
    return sep_adjoint(g, _resize(in_h, g.shape[-2], dt), _resize(in_w, g.shape[-1], dt))


# --------------------------------------------------------------------------
# convolution (cross-correlation, reflect padding)


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1):
    bsz, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    dt = x.dtype.str
    xp = sep_apply(x, _pad(h, p, dt), _pad(wd, p, dt))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, c * k * k)
    out = cols @ w.reshape(o, -1).T + b
    out = out.reshape(bsz, ho, wo, o).transpose(0, 3, 1, 2)
    return out, (x.shape, cols, w, stride, xp.shape)


def conv_backward(cache, g: np.ndarray):
    xshape, cols, w, stride, pshape = cache
    bsz, c, h, wd = xshape
    o, _, k, _ = w.shape
    p = k // 2
    ho, wo = g.shape[2], g.shape[3]
    gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (gm.T @ cols).reshape(w.shape)
    db = gm.sum(axis=0)
    dcols = (gm @ w.reshape(o, -1)).reshape(bsz, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros(pshape, dtype=g.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + span_h : stride, j : j + span_w : stride] += dcols[..., i, j]
    dt = g.dtype.str
    dx = sep_adjoint(dxp, _pad(h, p, dt), _pad(wd, p, dt))
    return dx, dw, db


def pointwise_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """1x1 projection without bias: w has shape (C_out, C_in)."""
    return np.einsum("oc,bchw->bohw", w, x, optimize=True)


def pointwise_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray):
    dw = np.einsum("bohw,bchw->oc", g, x, optimize=True)
    dx = np.einsum("oc,bohw->bchw", w, g, optimize=True)
    return dx, dw


# --------------------------------------------------------------------------
# attention


def positional_encoding(h: int, w: int, c: int, dtype=np.float64) -> np.ndarray:
    """Fixed 2-D sinusoidal code of shape (C, H, W); half the channels per axis."""
    pe = np.zeros((c, h, w))
    rows = np.arange(h)[:, None] + 0.5
    cols = np.arange(w)[None, :] + 0.5
    half = max(c // 2, 1)
    for i in range(c):
        axis_pos = rows if i < half else cols
        j = i if i < half else i - half
        freq = 1.0 / (10.0 ** (2.0 * (j // 2) / max(half, 1)))
        wave = np.sin(axis_pos * freq) if j % 2 == 0 else np.cos(axis_pos * freq)
        pe[i] = np.broadcast_to(wave, (h, w))
    return pe.astype(dtype)


def window_shape(h: int, w: int, windowed: bool, size: int = 8) -> tuple[int, int]:
    if not windowed:
        return h, w
    return (size if h % size == 0 else h), (size if w % size == 0 else w)


def to_tokens(x: np.ndarray, wh: int, ww: int) -> np.ndarray:
    b, c, h, w = x.shape
    t = x.reshape(b, c, h // wh, wh, w // ww, ww).transpose(0, 2, 4, 3, 5, 1)
    return t.reshape(b * (h // wh) * (w // ww), wh * ww, c)


def from_tokens(t: np.ndarray, shape: tuple, wh: int, ww: int) -> np.ndarray:
    b, c, h, w = shape
    x = t.reshape(b, h // wh, w // ww, wh, ww, c).transpose(0, 5, 1, 3, 2, 4)
    return x.reshape(b, c, h, w)


def softmax(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def attention_forward(x, wq, wk, wv, gamma, pe, windowed: bool):
    """gamma * softmax(Q K^T / sqrt(d_k)) V + x over (windowed) spatial tokens."""
    wh, ww = window_shape(x.shape[2], x.shape[3], windowed)
    xt = to_tokens(x, wh, ww)
    xpt = to_tokens(x + pe[None], wh, ww)
    dk = wq.shape[1]
    q = xpt @ wq
    k = xpt @ wk
    v = xt @ wv
    att = softmax(q @ k.transpose(0, 2, 1) / math.sqrt(dk))
    o = att @ v
    out_t = gamma[0] * o + xt
    out = from_tokens(out_t, x.shape, wh, ww)
    return out, (x.shape, wh, ww, xt, xpt, q, k, v, att, o, wq, wk, wv, gamma)


def attention_backward(cache, g):
    shape, wh, ww, xt, xpt, q, k, v, att, o, wq, wk, wv, gamma = cache
    gt = to_tokens(g, wh, ww)
    dgamma = np.array([np.sum(gt * o)], dtype=g.dtype)
    do = gamma[0] * gt
    datt = do @ v.transpose(0, 2, 1)
    dv = att.transpose(0, 2, 1) @ do
    ds = att * (datt - np.sum(datt * att, axis=-1, keepdims=True))
    scale = 1.0 / math.sqrt(wq.shape[1])
    dq = ds @ k * scale
    dk_ = ds.transpose(0, 2, 1) @ q * scale
    c = xt.shape[-1]
    dwq = xpt.reshape(-1, c).T @ dq.reshape(-1, dq.shape[-1])
    dwk = xpt.reshape(-1, c).T @ dk_.reshape(-1, dk_.shape[-1])
    dwv = xt.reshape(-1, c).T @ dv.reshape(-1, c)
    dxt = gt + dv @ wv.T + dq @ wq.T + dk_ @ wk.T
    return from_tokens(dxt, shape, wh, ww), dwq, dwk, dwv, dgamma, att


# --------------------------------------------------------------------------
# dense heads


def mlp_forward(x, w1, b1, w2, b2):
    a = np.tanh(x @ w1 + b1)
    return a @ w2 + b2, (x, a, w1, w2)


def mlp_backward(cache, g):
    x, a, w1, w2 = cache
    dw2 = a.T @ g
    db2 = g.sum(axis=0)
    da = (g @ w2.T) * (1.0 - a * a)
    dw1 = x.T @ da
    db1 = da.sum(axis=0)
    return da @ w1.T, dw1, db1, dw2, db2
