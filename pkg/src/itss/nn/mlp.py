"""Tanh MLP: affine embedding, ``depth`` square affine+tanh layers, affine readout."""

from __future__ import annotations

import numpy as np

from itss.nn.layout import LayerLayout


def embedding_shapes(input_dim, hidden):
    return {"embedding.weight": (hidden, input_dim), "embedding.bias": (hidden,)}


def layer_layout(index, hidden) -> LayerLayout:
    return LayerLayout(
        f"layer{index}",
        (("dense.weight", (hidden, hidden)), ("dense.bias", (hidden,))),
    )


def readout_shapes(hidden, num_classes):
    return {"readout.weight": (num_classes, hidden), "readout.bias": (num_classes,)}


def init_params(rng, spec):
    h, d = spec.hidden_dim, spec.input_dim
    emb = {
        "embedding.weight": rng.standard_normal((h, d)) / np.sqrt(d),
        "embedding.bias": np.zeros(h),
    }
    layers = []
    for i in range(spec.depth):
        layers.append({
            "dense.weight": rng.standard_normal((h, h)) * (spec.init_gain / np.sqrt(h)),
            "dense.bias": rng.standard_normal(h) * spec.bias_scale,
        })
    readout = {
        "readout.weight": rng.standard_normal((spec.num_classes, h)) / np.sqrt(h),
        "readout.bias": np.zeros(spec.num_classes),
    }
    return emb, layers, readout


def forward(emb, layers, readout, x):
    z = x @ emb["embedding.weight"].T + emb["embedding.bias"]
    acts = [z]
    for p in layers:
        z = np.tanh(z @ p["dense.weight"].T + p["dense.bias"])
        acts.append(z)
    logits = z @ readout["readout.weight"].T + readout["readout.bias"]
    return logits, (x, acts)


def backward(emb, layers, readout, cache, dlogits):
    x, acts = cache
    g_read = {
        "readout.weight": dlogits.T @ acts[-1],
        "readout.bias": dlogits.sum(axis=0),
    }
    dz = dlogits @ readout["readout.weight"]
    g_layers = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        out = acts[i + 1]
        da = dz * (1.0 - out * out)
        g_layers[i] = {"dense.weight": da.T @ acts[i], "dense.bias": da.sum(axis=0)}
        dz = da @ layers[i]["dense.weight"]
    g_emb = {"embedding.weight": dz.T @ x, "embedding.bias": dz.sum(axis=0)}
    return g_emb, g_layers, g_read
