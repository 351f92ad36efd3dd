"""Composite layers: transformer encoder layer and CBAM-style channel attention.

Parameters are passed as a mapping of local names (``"q.weight"``, ...) to
arrays; backward passes return gradients under the same names.
"""

from __future__ import annotations

import math
from typing import Dict

import numpy as np

from . import functional as F


class ConfigError(ValueError):
    pass


def encoder_param_shapes(d: int, ffn: int, symmetric_qk: bool = False) -> Dict[str, tuple]:
    shapes = {"ln1.gain": (d,), "ln1.bias": (d,)}
    projections = ("q", "v", "o") if symmetric_qk else ("q", "k", "v", "o")
    for p in projections:
        shapes[f"attn.{p}.weight"] = (d, d)
        shapes[f"attn.{p}.bias"] = (d,)
    shapes.update(
        {
            "ln2.gain": (d,),
            "ln2.bias": (d,),
            "ffn.fc1.weight": (ffn, d),
            "ffn.fc1.bias": (ffn,),
            "ffn.fc2.weight": (d, ffn),
            "ffn.fc2.bias": (d,),
        }
    )
    return shapes


def _split_heads(x, h):
    B, T, d = x.shape
    return x.reshape(B, T, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, h * dh)


def mha_forward(x, p, heads, symmetric_qk=False):
    """Unmasked scaled dot-product self-attention over x (B, T, d)."""
    d = x.shape[-1]
    if d % heads:
        raise ConfigError(f"model width d={d} is not divisible by heads={heads}")
    q, cq = F.linear_forward(x, p["q.weight"], p["q.bias"])
    if symmetric_qk:
        k, ck = q, None
    else:
        k, ck = F.linear_forward(x, p["k.weight"], p["k.bias"])
    v, cv = F.linear_forward(x, p["v.weight"], p["v.bias"])
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scale = 1.0 / math.sqrt(d // heads)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    attn = F.softmax(scores, axis=-1)
    ctx = _merge_heads(attn @ vh)
    out, co = F.linear_forward(ctx, p["o.weight"], p["o.bias"])
    cache = (cq, ck, cv, co, qh, kh, vh, attn, scale, heads, symmetric_qk)
    return out, cache


def mha_backward(dout, cache):
    cq, ck, cv, co, qh, kh, vh, attn, scale, heads, symmetric_qk = cache
    g = {}
    dctx, g["o.weight"], g["o.bias"] = F.linear_backward(dout, co)
    dctxh = _split_heads(dctx, heads)
    dattn = dctxh @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ dctxh
    dscores = F.softmax_backward(dattn, (attn, -1)) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh
    dq, dk, dv = _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)
    if symmetric_qk:
        dq = dq + dk
    dx, g["q.weight"], g["q.bias"] = F.linear_backward(dq, cq)
    if not symmetric_qk:
        dxk, g["k.weight"], g["k.bias"] = F.linear_backward(dk, ck)
        dx = dx + dxk
    dxv, g["v.weight"], g["v.bias"] = F.linear_backward(dv, cv)
    return dx + dxv, g


def _sub(p, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in p.items() if k.startswith(prefix)}


def encoder_layer_forward(x, p, heads=1, symmetric_qk=False, ln_eps=1e-5):
    """Pre-norm transformer encoder layer: x + MHA(LN(x)), then x + FFN(LN(x))."""
    n1, c_ln1 = F.layer_norm_forward(x, p["ln1.gain"], p["ln1.bias"], ln_eps)
    a, c_attn = mha_forward(n1, _sub(p, "attn."), heads, symmetric_qk)
    x1 = x + a
    n2, c_ln2 = F.layer_norm_forward(x1, p["ln2.gain"], p["ln2.bias"], ln_eps)
    h, c_fc1 = F.linear_forward(n2, p["ffn.fc1.weight"], p["ffn.fc1.bias"])
    hr, c_relu = F.relu_forward(h)
    f, c_fc2 = F.linear_forward(hr, p["ffn.fc2.weight"], p["ffn.fc2.bias"])
    return x1 + f, (c_ln1, c_attn, c_ln2, c_fc1, c_relu, c_fc2)


def encoder_layer_backward(dout, cache):
    c_ln1, c_attn, c_ln2, c_fc1, c_relu, c_fc2 = cache
    g = {}
    dhr, g["ffn.fc2.weight"], g["ffn.fc2.bias"] = F.linear_backward(dout, c_fc2)
    dh = F.relu_backward(dhr, c_relu)
    dn2, g["ffn.fc1.weight"], g["ffn.fc1.bias"] = F.linear_backward(dh, c_fc1)
    dx1_ln, g["ln2.gain"], g["ln2.bias"] = F.layer_norm_backward(dn2, c_ln2)
    dx1 = dout + dx1_ln
    dn1, ga = mha_backward(dx1, c_attn)
    g.update({f"attn.{k}": v for k, v in ga.items()})
    dx_ln, g["ln1.gain"], g["ln1.bias"] = F.layer_norm_backward(dn1, c_ln1)
    return dx1 + dx_ln, g


def attention_weights(x, p, heads=1, symmetric_qk=False, ln_eps=1e-5):
    """Attention probabilities (B, heads, T, T) of the layer's attention block."""
    n1, _ = F.layer_norm_forward(x, p["ln1.gain"], p["ln1.bias"], ln_eps)
    _, cache = mha_forward(n1, _sub(p, "attn."), heads, symmetric_qk)
    return cache[7]


# -- channel attention ---------------------------------------------------------


def channel_attention_param_shapes(C: int, reduction: int, plain: bool = False) -> Dict[str, tuple]:
    if plain:
        return {"weight": (C,)}
    hidden = max(C // reduction, 1)
    return {
        "fc1.weight": (hidden, C),
        "fc1.bias": (hidden,),
        "fc2.weight": (C, hidden),
        "fc2.bias": (C,),
    }


def _mlp_forward(s, p):
    h, c1 = F.linear_forward(s, p["fc1.weight"], p["fc1.bias"])
    hr, cr = F.relu_forward(h)
    z, c2 = F.linear_forward(hr, p["fc2.weight"], p["fc2.bias"])
    return z, (c1, cr, c2)


def _mlp_backward(dz, cache, g):
    c1, cr, c2 = cache
    dhr, dw2, db2 = F.linear_backward(dz, c2)
    dh = F.relu_backward(dhr, cr)
    ds, dw1, db1 = F.linear_backward(dh, c1)
    for k, v in (("fc1.weight", dw1), ("fc1.bias", db1), ("fc2.weight", dw2), ("fc2.bias", db2)):
        g[k] = g[k] + v if k in g else v
    return ds


def channel_attention_forward(v, p, plain=False):
    """Gate channels of v (N, C, h, w).

    Returns ``(w, v_weighted, cache)`` with ``w = sigmoid(MLP(avg) + MLP(max))``
    of shape (N, C); with ``plain`` the gate is ``sigmoid(weight)`` shared by
    all inputs.
    """
    N, C = v.shape[:2]
    flat = v.reshape(N, C, -1)
    if plain:
        w = np.broadcast_to(F.sigmoid(p["weight"]), (N, C)).copy()
        cache = (v, w, None, plain)
    else:
        avg = flat.mean(axis=-1)
        arg = flat.argmax(axis=-1)
        mx = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        za, ca = _mlp_forward(avg, p)
        zm, cm = _mlp_forward(mx, p)
        w = F.sigmoid(za + zm)
        cache = (v, w, (ca, cm, arg), plain)
    return w, v * w[:, :, None, None], cache


def channel_attention_backward(dvw, cache):
    v, w, extra, plain = cache
    N, C = v.shape[:2]
    g = {}
    dv = dvw * w[:, :, None, None]
    dw = (dvw * v).reshape(N, C, -1).sum(axis=-1)
    dz = dw * w * (1 - w)
    if plain:
        g["weight"] = dz.sum(axis=0)
        return dv, g
    ca, cm, arg = extra
    davg = _mlp_backward(dz, ca, g)
    dmx = _mlp_backward(dz, cm, g)
    hw = v.shape[2] * v.shape[3]
    dflat = dv.reshape(N, C, -1) + davg[..., None] / hw
    np.put_along_axis(dflat, arg[..., None], np.take_along_axis(dflat, arg[..., None], -1) + dmx[..., None], -1)
    return dflat.reshape(v.shape), g


def channel_mean_forward(v):
    """Average over the channel axis: (N, C, h, w) -> (N, h, w)."""
    return v.mean(axis=1), v.shape


def channel_mean_backward(dout, cache):
    shape = cache
    return np.broadcast_to(dout[:, None] / shape[1], shape).copy()
