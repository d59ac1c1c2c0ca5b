"""Transformer building blocks with explicit backward passes.

Every ``*_fwd`` returns ``(out, cache)``; the matching ``*_bwd`` takes the
upstream gradient and the cache and returns the input gradient plus a dict of
parameter gradients. Activations carry a leading batch axis: ``(B, N, D)``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

LN_EPS = 1e-6
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def linear_fwd(x, w, b):
    return x @ w + b, x


def linear_bwd(dy, x, w):
    dx = dy @ w.T
    dw = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dw, db


def layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def layernorm_bwd(dy, cache, g):
    xhat, rstd = cache
    flat_dy = dy.reshape(-1, dy.shape[-1])
    dg = (flat_dy * xhat.reshape(flat_dy.shape)).sum(axis=0)
    db = flat_dy.sum(axis=0)
    dxhat = dy * g
    dx = rstd * (
        dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def gelu_fwd(x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * cdf, (x, cdf)


def gelu_bwd(dy, cache):
    x, cdf = cache
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def softmax(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _qkv_bias(qv_b, D):
    # no key bias: it adds a per-query constant to every score, which softmax ignores
    return np.concatenate([qv_b[:D], np.zeros(D, dtype=qv_b.dtype), qv_b[D:]])


def attention_fwd(x, p, prefix, heads):
    """Multi-head scaled dot-product self-attention over the N axis."""
    B, N, D = x.shape
    hd = D // heads
    qkv, qkv_in = linear_fwd(x, p[prefix + "qkv.w"], _qkv_bias(p[prefix + "qv.b"], D))
    qkv = qkv.reshape(B, N, 3, heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = 1.0 / math.sqrt(hd)
    att = softmax((q @ k.swapaxes(-1, -2)) * scale)
    o = (att @ v).transpose(0, 2, 1, 3).reshape(B, N, D)
    out, o_in = linear_fwd(o, p[prefix + "proj.w"], p[prefix + "proj.b"])
    return out, (qkv_in, q, k, v, att, o_in, scale, heads)


def attention_bwd(dout, cache, p, prefix, grads):
    qkv_in, q, k, v, att, o_in, scale, heads = cache
    B, N, D = o_in.shape
    hd = D // heads
    do, grads[prefix + "proj.w"], grads[prefix + "proj.b"] = linear_bwd(dout, o_in, p[prefix + "proj.w"])
    do = do.reshape(B, N, heads, hd).transpose(0, 2, 1, 3)
    datt = do @ v.swapaxes(-1, -2)
    dv = att.swapaxes(-1, -2) @ do
    ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.swapaxes(-1, -2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, N, 3 * D)
    dx, grads[prefix + "qkv.w"], db = linear_bwd(dqkv, qkv_in, p[prefix + "qkv.w"])
    grads[prefix + "qv.b"] = np.concatenate([db[:D], db[2 * D :]])
    return dx


def block_fwd(x, p, prefix, heads):
    """Pre-norm transformer block: x + attn(ln1(x)), then + mlp(ln2(.))."""
    a_in, ln1 = layernorm_fwd(x, p[prefix + "ln1.g"], p[prefix + "ln1.b"])
    a_out, attn = attention_fwd(a_in, p, prefix + "attn.", heads)
    h = x + a_out
    m_in, ln2 = layernorm_fwd(h, p[prefix + "ln2.g"], p[prefix + "ln2.b"])
    f1, f1_in = linear_fwd(m_in, p[prefix + "mlp.fc1.w"], p[prefix + "mlp.fc1.b"])
    act, gl = gelu_fwd(f1)
    f2, f2_in = linear_fwd(act, p[prefix + "mlp.fc2.w"], p[prefix + "mlp.fc2.b"])
    return h + f2, (ln1, attn, ln2, f1_in, gl, f2_in)


def block_bwd(dy, cache, p, prefix, grads):
    ln1, attn, ln2, f1_in, gl, f2_in = cache
    dact, grads[prefix + "mlp.fc2.w"], grads[prefix + "mlp.fc2.b"] = linear_bwd(dy, f2_in, p[prefix + "mlp.fc2.w"])
    df1 = gelu_bwd(dact, gl)
    dm_in, grads[prefix + "mlp.fc1.w"], grads[prefix + "mlp.fc1.b"] = linear_bwd(df1, f1_in, p[prefix + "mlp.fc1.w"])
    dh_ln, grads[prefix + "ln2.g"], grads[prefix + "ln2.b"] = layernorm_bwd(dm_in, ln2, p[prefix + "ln2.g"])
    dh = dy + dh_ln
    da_in = attention_bwd(dh, attn, p, prefix + "attn.", grads)
    dx_ln, grads[prefix + "ln1.g"], grads[prefix + "ln1.b"] = layernorm_bwd(da_in, ln1, p[prefix + "ln1.g"])
    return dh + dx_ln
