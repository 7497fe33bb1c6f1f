"""Tiny post-LN transformer over a vector sequence.

The input vector is projected to ``seq_len`` tokens of width ``hidden_dim``;
each encoder layer is single-head self-attention followed by a tanh FFN, with
a residual connection and LayerNorm after each block. Logits come from the
mean-pooled final tokens.
"""

from __future__ import annotations

import numpy as np

from itss.nn.layout import LayerLayout

LN_EPS = 1e-5


def ffn_width(hidden):
    return 2 * hidden


def embedding_shapes(input_dim, hidden, seq_len):
    return {
        "embedding.weight": (seq_len * hidden, input_dim),
        "embedding.bias": (seq_len * hidden,),
    }


def layer_layout(index, hidden) -> LayerLayout:
    f = ffn_width(hidden)
    return LayerLayout(
        f"layer{index}",
        (
            ("attention.query.weight", (hidden, hidden)),
            ("attention.query.bias", (hidden,)),
            ("attention.key.weight", (hidden, hidden)),
            ("attention.key.bias", (hidden,)),
            ("attention.value.weight", (hidden, hidden)),
            ("attention.value.bias", (hidden,)),
            ("attention.output.weight", (hidden, hidden)),
            ("attention.output.bias", (hidden,)),
            ("attention.layernorm.weight", (hidden,)),
            ("attention.layernorm.bias", (hidden,)),
            ("ffn.intermediate.weight", (f, hidden)),
            ("ffn.intermediate.bias", (f,)),
            ("ffn.output.weight", (hidden, f)),
            ("ffn.output.bias", (hidden,)),
            ("output.layernorm.weight", (hidden,)),
            ("output.layernorm.bias", (hidden,)),
        ),
    )


def readout_shapes(hidden, num_classes):
    return {"readout.weight": (num_classes, hidden), "readout.bias": (num_classes,)}


def init_params(rng, spec):
    h, d, L = spec.hidden_dim, spec.input_dim, spec.seq_len
    f = ffn_width(h)
    emb = {
        "embedding.weight": rng.standard_normal((L * h, d)) / np.sqrt(d),
        "embedding.bias": np.zeros(L * h),
    }
    layers = []
    for _ in range(spec.depth):
        p = {}
        for name in ("query", "key", "value", "output"):
            p[f"attention.{name}.weight"] = rng.standard_normal((h, h)) * (spec.init_gain / np.sqrt(h))
            p[f"attention.{name}.bias"] = rng.standard_normal(h) * spec.bias_scale
        p["attention.layernorm.weight"] = np.ones(h)
        p["attention.layernorm.bias"] = np.zeros(h)
        p["ffn.intermediate.weight"] = rng.standard_normal((f, h)) * (spec.init_gain / np.sqrt(h))
        p["ffn.intermediate.bias"] = rng.standard_normal(f) * spec.bias_scale
        p["ffn.output.weight"] = rng.standard_normal((h, f)) * (spec.init_gain / np.sqrt(f))
        p["ffn.output.bias"] = rng.standard_normal(h) * spec.bias_scale
        p["output.layernorm.weight"] = np.ones(h)
        p["output.layernorm.bias"] = np.zeros(h)
        layers.append(p)
    readout = {
        "readout.weight": rng.standard_normal((spec.num_classes, h)) / np.sqrt(h),
        "readout.bias": np.zeros(spec.num_classes),
    }
    return emb, layers, readout


def _layernorm(r, gain, bias):
    mu = r.mean(axis=-1, keepdims=True)
    xc = r - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _layernorm_back(dy, gain, cache):
    xhat, inv = cache
    dgain = (dy * xhat).sum(axis=(0, 1))
    dbias = dy.sum(axis=(0, 1))
    dxhat = dy * gain
    dr = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dr, dgain, dbias


def _affine(x, w, b):
    return x @ w.T + b


def _affine_back(dy, x, w):
    dw = np.einsum("nli,nlj->ij", dy, x)
    return dy @ w, dw, dy.sum(axis=(0, 1))


def _layer_forward(p, x):
    h = x.shape[-1]
    q = _affine(x, p["attention.query.weight"], p["attention.query.bias"])
    k = _affine(x, p["attention.key.weight"], p["attention.key.bias"])
    v = _affine(x, p["attention.value.weight"], p["attention.value.bias"])
    s = q @ k.transpose(0, 2, 1) / np.sqrt(h)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    attn = e / e.sum(axis=-1, keepdims=True)
    ctx = attn @ v
    o = _affine(ctx, p["attention.output.weight"], p["attention.output.bias"])
    y1, ln1 = _layernorm(x + o, p["attention.layernorm.weight"], p["attention.layernorm.bias"])
    pre = _affine(y1, p["ffn.intermediate.weight"], p["ffn.intermediate.bias"])
    act = np.tanh(pre)
    f2 = _affine(act, p["ffn.output.weight"], p["ffn.output.bias"])
    y2, ln2 = _layernorm(y1 + f2, p["output.layernorm.weight"], p["output.layernorm.bias"])
    return y2, (x, q, k, v, attn, ctx, y1, ln1, act, ln2)


def _layer_backward(p, cache, dy2):
    x, q, k, v, attn, ctx, y1, ln1, act, ln2 = cache
    h = x.shape[-1]
    g = {}
    dr2, g["output.layernorm.weight"], g["output.layernorm.bias"] = _layernorm_back(
        dy2, p["output.layernorm.weight"], ln2)
    dact, g["ffn.output.weight"], g["ffn.output.bias"] = _affine_back(dr2, act, p["ffn.output.weight"])
    dpre = dact * (1.0 - act * act)
    dy1, g["ffn.intermediate.weight"], g["ffn.intermediate.bias"] = _affine_back(
        dpre, y1, p["ffn.intermediate.weight"])
    dy1 = dy1 + dr2
    dr1, g["attention.layernorm.weight"], g["attention.layernorm.bias"] = _layernorm_back(
        dy1, p["attention.layernorm.weight"], ln1)
    dctx, g["attention.output.weight"], g["attention.output.bias"] = _affine_back(
        dr1, ctx, p["attention.output.weight"])
    dattn = dctx @ v.transpose(0, 2, 1)
    dv = attn.transpose(0, 2, 1) @ dctx
    ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) / np.sqrt(h)
    dq = ds @ k
    dk = ds.transpose(0, 2, 1) @ q
    dx = dr1
    for name, dz in (("query", dq), ("key", dk), ("value", dv)):
        dxi, g[f"attention.{name}.weight"], g[f"attention.{name}.bias"] = _affine_back(
            dz, x, p[f"attention.{name}.weight"])
        dx = dx + dxi
    return dx, g


def forward(emb, layers, readout, x, seq_len):
    n = x.shape[0]
    z = (x @ emb["embedding.weight"].T + emb["embedding.bias"]).reshape(n, seq_len, -1)
    caches = []
    for p in layers:
        z, c = _layer_forward(p, z)
        caches.append(c)
    pooled = z.mean(axis=1)
    logits = pooled @ readout["readout.weight"].T + readout["readout.bias"]
    return logits, (x, caches, pooled, seq_len)


def backward(emb, layers, readout, cache, dlogits):
    x, caches, pooled, seq_len = cache
    g_read = {
        "readout.weight": dlogits.T @ pooled,
        "readout.bias": dlogits.sum(axis=0),
    }
    dpooled = dlogits @ readout["readout.weight"]
    dz = np.repeat(dpooled[:, None, :] / seq_len, seq_len, axis=1)
    g_layers = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        dz, g_layers[i] = _layer_backward(layers[i], caches[i], dz)
    dz = dz.reshape(x.shape[0], -1)
    g_emb = {"embedding.weight": dz.T @ x, "embedding.bias": dz.sum(axis=0)}
    return g_emb, g_layers, g_read
