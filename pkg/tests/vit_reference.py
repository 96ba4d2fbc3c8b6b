"""Straight-line reference forward pass for the compact transformer.

Deliberately un-optimized and structured differently from the package code:
explicit per-patch slicing, per-head Python loops, math.erf for the GELU,
no shared helpers.  Operates on the same weight-name schema.
"""

from __future__ import annotations

import math

import numpy as np

_erf = np.vectorize(math.erf, otypes=[np.float64])


def _ln(x, weight, bias, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * weight + bias


def _gelu(x):
    return 0.5 * x * (1.0 + _erf(x / math.sqrt(2.0)))


def _softmax_rows(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def reference_forward(image_u8, tensors, *, input_size, patch_size=16, dim=384,
                      depth=5, heads=6, mlp_ratio=4.0, mean=None, std=None):
    """Returns (embedding, tokens) as float64 arrays."""
    mean = np.asarray(mean if mean is not None else [0.485, 0.456, 0.406], np.float64)
    std = np.asarray(std if std is not None else [0.229, 0.224, 0.225], np.float64)
    t = {k: np.asarray(v, np.float64) for k, v in tensors.items()}
    cls_token = t["cls_token"].reshape(dim)
    pos_embed = t["pos_embed"].reshape(-1, dim)

    img = np.asarray(image_u8, np.float64) / 255.0
    img = (img - mean) / std

    grid = input_size // patch_size
    proj_w = t["patch_embed.proj.weight"]  # (dim, 3, ps, ps)
    proj_b = t["patch_embed.proj.bias"]
    rows = []
    for py in range(grid):
        for px in range(grid):
            block = img[py * patch_size:(py + 1) * patch_size,
                        px * patch_size:(px + 1) * patch_size, :]
            flat = block.transpose(2, 0, 1).reshape(-1)  # channel, ky, kx
            rows.append(proj_w.reshape(dim, -1) @ flat + proj_b)
    z = np.vstack([cls_token[None, :], np.array(rows)])
    z = z + pos_embed

    head_dim = dim // heads
    scale = 1.0 / math.sqrt(head_dim)
    hidden = int(dim * mlp_ratio)
    for b in range(depth):
        pre = f"blocks.{b}."
        x = _ln(z, t[pre + "norm1.weight"], t[pre + "norm1.bias"])
        qkv = x @ t[pre + "attn.qkv.weight"].T + t[pre + "attn.qkv.bias"]
        q, kk, v = qkv[:, :dim], qkv[:, dim:2 * dim], qkv[:, 2 * dim:]
        ctx = np.zeros_like(x)
        for h in range(heads):
            sl = slice(h * head_dim, (h + 1) * head_dim)
            att = _softmax_rows((q[:, sl] @ kk[:, sl].T) * scale)
            ctx[:, sl] = att @ v[:, sl]
        z = z + ctx @ t[pre + "attn.proj.weight"].T + t[pre + "attn.proj.bias"]

        x = _ln(z, t[pre + "norm2.weight"], t[pre + "norm2.bias"])
        hid = _gelu(x @ t[pre + "mlp.fc1.weight"].T + t[pre + "mlp.fc1.bias"])
        assert hid.shape[-1] == hidden
        z = z + hid @ t[pre + "mlp.fc2.weight"].T + t[pre + "mlp.fc2.bias"]

    z = _ln(z, t["norm.weight"], t["norm.bias"])
    return z[0].copy(), z
