"""Differentiable building blocks with hand-written backward passes.

Each ``*_fwd`` returns ``(output, cache)`` and the matching ``*_bwd`` takes the
upstream gradient plus that cache. Arrays may carry any number of leading
batch axes; the last axis is the feature axis. Everything is dtype-agnostic so
the same code serves float32 training and float64 gradient checks.
"""

from __future__ import annotations

import math
from typing import Dict, Tuple

import numpy as np

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def linear_fwd(x, w, b):
    return x @ w + b, x


def linear_bwd(dy, x, w):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ w.T, x2.T @ dy2, dy2.sum(axis=0)


def gelu_fwd(x):
    """tanh approximation of GELU."""
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_bwd(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layernorm_bwd(dy, cache):
    xhat, rstd, g = cache
    d = xhat.shape[-1]
    dy2 = dy.reshape(-1, d)
    xh2 = xhat.reshape(-1, d)
    dg = (dy2 * xh2).sum(axis=0)
    db = dy2.sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def attention_fwd(x, p: Dict[str, np.ndarray], pre: str, heads: int):
    """Multi-head self-attention over the second-to-last axis."""
    *lead, n, d = x.shape
    dh = d // heads
    qkv, c_qkv = linear_fwd(x, p[pre + "qkv.w"], p[pre + "qkv.b"])
    qkv = qkv.reshape(*lead, n, 3, heads, dh)
    qkv = np.moveaxis(qkv, (-3, -2), (0, -3))  # (3, ..., heads, n, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = 1.0 / math.sqrt(dh)
    a = softmax((q @ np.swapaxes(k, -1, -2)) * scale)
    o = a @ v  # (..., heads, n, dh)
    o_flat = np.moveaxis(o, -3, -2).reshape(*lead, n, d)
    y, c_proj = linear_fwd(o_flat, p[pre + "proj.w"], p[pre + "proj.b"])
    return y, (c_qkv, q, k, v, a, c_proj, scale, heads)


def attention_bwd(dy, cache, p, pre: str, g: Dict[str, np.ndarray]):
    c_qkv, q, k, v, a, c_proj, scale, heads = cache
    *lead, n, d = dy.shape
    dh = d // heads
    do_flat, dw, db = linear_bwd(dy, c_proj, p[pre + "proj.w"])
    g[pre + "proj.w"] += dw
    g[pre + "proj.b"] += db
    do = np.moveaxis(do_flat.reshape(*lead, n, heads, dh), -2, -3)
    da = do @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(a, -1, -2) @ do
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q
    dqkv = np.stack([dq, dk, dv])  # (3, ..., heads, n, dh)
    dqkv = np.moveaxis(dqkv, (0, -3), (-3, -2)).reshape(*lead, n, 3 * d)
    dx, dw, db = linear_bwd(dqkv, c_qkv, p[pre + "qkv.w"])
    g[pre + "qkv.w"] += dw
    g[pre + "qkv.b"] += db
    return dx


def mlp_fwd(x, p, pre: str):
    h, c1 = linear_fwd(x, p[pre + "fc1.w"], p[pre + "fc1.b"])
    h, cg = gelu_fwd(h)
    y, c2 = linear_fwd(h, p[pre + "fc2.w"], p[pre + "fc2.b"])
    return y, (c1, cg, c2)


def mlp_bwd(dy, cache, p, pre: str, g):
    c1, cg, c2 = cache
    dh, dw, db = linear_bwd(dy, c2, p[pre + "fc2.w"])
    g[pre + "fc2.w"] += dw
    g[pre + "fc2.b"] += db
    dh = gelu_bwd(dh, cg)
    dx, dw, db = linear_bwd(dh, c1, p[pre + "fc1.w"])
    g[pre + "fc1.w"] += dw
    g[pre + "fc1.b"] += db
    return dx


def block_fwd(x, pos, p, pre: str, heads: int):
    """Pre-norm transformer block; positions are added at the block input."""
    h0 = x + pos
    n1, c_n1 = layernorm_fwd(h0, p[pre + "ln1.g"], p[pre + "ln1.b"])
    at, c_at = attention_fwd(n1, p, pre + "attn.", heads)
    h1 = h0 + at
    n2, c_n2 = layernorm_fwd(h1, p[pre + "ln2.g"], p[pre + "ln2.b"])
    ml, c_ml = mlp_fwd(n2, p, pre + "mlp.")
    return h1 + ml, (c_n1, c_at, c_n2, c_ml)


def block_bwd(dy, cache, p, pre: str, g) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (d input tokens, d positions); both equal the residual gradient."""
    c_n1, c_at, c_n2, c_ml = cache
    dn2 = mlp_bwd(dy, c_ml, p, pre + "mlp.", g)
    dh1, dg, db = layernorm_bwd(dn2, c_n2)
    g[pre + "ln2.g"] += dg
    g[pre + "ln2.b"] += db
    dh1 = dh1 + dy
    dn1 = attention_bwd(dh1, c_at, p, pre + "attn.", g)
    dh0, dg, db = layernorm_bwd(dn1, c_n1)
    g[pre + "ln1.g"] += dg
    g[pre + "ln1.b"] += db
    dh0 = dh0 + dh1
    return dh0, dh0


def pointnet_fwd(x, p, pre: str):
    """Shared point-wise MLP (3 -> hidden -> d) then max over the point axis."""
    h, c1 = linear_fwd(x, p[pre + "fc1.w"], p[pre + "fc1.b"])
    h, cg = gelu_fwd(h)
    y, c2 = linear_fwd(h, p[pre + "fc2.w"], p[pre + "fc2.b"])
    arg = np.argmax(y, axis=-2)
    out = np.take_along_axis(y, arg[..., None, :], axis=-2)[..., 0, :]
    return out, (c1, cg, c2, arg, y.shape)


def pointnet_bwd(dout, cache, p, pre: str, g):
    c1, cg, c2, arg, shape = cache
    dy = np.zeros(shape, dtype=dout.dtype)
    np.put_along_axis(dy, arg[..., None, :], dout[..., None, :], axis=-2)
    dh, dw, db = linear_bwd(dy, c2, p[pre + "fc2.w"])
    g[pre + "fc2.w"] += dw
    g[pre + "fc2.b"] += db
    dh = gelu_bwd(dh, cg)
    _, dw, db = linear_bwd(dh, c1, p[pre + "fc1.w"])
    g[pre + "fc1.w"] += dw
    g[pre + "fc1.b"] += db
