"""Fused transformer pieces with hand-written gradients.

Each kernel equals a composition of :mod:`diffcr.tensor` primitives (the
tests check both values and gradients against that composition) but
records a single tape node and keeps fewer activations alive.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, _GELU_C, _unbroadcast, record


def _flat_wgrad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with w of shape (d_in, d_out)."""
    xd, wd = x.data, w.data

    def vjp(g):
        return (g @ wd.T if x.requires_grad else None,
                _flat_wgrad(xd, g) if w.requires_grad else None,
                g.reshape(-1, g.shape[-1]).sum(axis=0) if b.requires_grad else None)

    return record(xd @ wd + b.data, (x, w, b), vjp, "affine")


def modulated_layernorm(h: Tensor, gain: Tensor, bias: Tensor, shift: Tensor, scale: Tensor,
                        eps: float = 1e-10) -> Tensor:
    """(layernorm(h) * gain + bias) * (1 + scale) + shift.

    ``h`` is (B, n, d); ``shift``/``scale`` broadcast as (B, 1, d).
    """
    d = h.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xh = xc * inv
    del xc
    gd, bd = gain.data, bias.data
    one_scale = 1.0 + scale.data
    out = (xh * gd + bd) * one_scale + shift.data

    def vjp(g):
        y0 = xh * gd + bd
        g_shift = _unbroadcast(g, shift.shape)
        g_scale = _unbroadcast(g * y0, scale.shape)
        gy0 = g * one_scale
        g_gain = _unbroadcast(gy0 * xh, gain.shape)
        g_bias = _unbroadcast(gy0, bias.shape)
        gx = gy0 * gd
        gm = gx.mean(axis=-1, keepdims=True)
        gxm = (gx * xh).mean(axis=-1, keepdims=True)
        gh = inv * (gx - gm - xh * gxm)
        return gh, g_gain, g_bias, g_shift, g_scale

    return record(out, (h, gain, bias, shift, scale), vjp, "modulated_layernorm")


def self_attention(h: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, heads: int) -> Tensor:
    """Multi-head softmax attention over the rows of ``h`` (B, n, d), before
    the output projection."""
    hd = h.data
    bsz, n, d = hd.shape
    dh = d // heads
    c = 1.0 / math.sqrt(dh)

    def split(x):
        return np.ascontiguousarray(x.reshape(bsz, n, heads, dh).transpose(0, 2, 1, 3))

    def merge(x):
        return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(bsz, n, d)

    q = split(hd @ wq.data)
    k = split(hd @ wk.data)
    v = split(hd @ wv.data)
    s = (q @ np.swapaxes(k, -1, -2)) * c
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s, out=s)
    p /= p.sum(axis=-1, keepdims=True)
    out = merge(p @ v)

    def vjp(g):
        gh_ = split(g)
        dp = gh_ @ np.swapaxes(v, -1, -2)
        dv = np.swapaxes(p, -1, -2) @ gh_
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        ds *= c
        dq = merge(ds @ k)
        dk = merge(np.swapaxes(ds, -1, -2) @ q)
        dv = merge(dv)
        gx = None
        if h.requires_grad:
            gx = dq @ wq.data.T + dk @ wk.data.T + dv @ wv.data.T
        return (gx,
                _flat_wgrad(hd, dq) if wq.requires_grad else None,
                _flat_wgrad(hd, dk) if wk.requires_grad else None,
                _flat_wgrad(hd, dv) if wv.requires_grad else None)

    return record(out, (h, wq, wk, wv), vjp, "self_attention")


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """gelu(x @ w1 + b1) @ w2 + b2, tanh-approximated GELU."""
    xd, w1d, w2d = x.data, w1.data, w2.data
    u = xd @ w1d + b1.data
    th = np.tanh(_GELU_C * u * (1.0 + 0.044715 * (u * u)))
    a = 0.5 * u * (1.0 + th)
    out = a @ w2d + b2.data
    del a

    def vjp(g):
        act = 0.5 * u * (1.0 + th)
        ga = g @ w2d.T
        du = _GELU_C * (1.0 + 3 * 0.044715 * (u * u))
        gu = ga * (0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * du)
        return (gu @ w1d.T if x.requires_grad else None,
                _flat_wgrad(xd, gu) if w1.requires_grad else None,
                gu.reshape(-1, gu.shape[-1]).sum(axis=0) if b1.requires_grad else None,
                _flat_wgrad(act, g) if w2.requires_grad else None,
                g.reshape(-1, g.shape[-1]).sum(axis=0) if b2.requires_grad else None)

    return record(out, (x, w1, b1, w2, b2), vjp, "mlp")
