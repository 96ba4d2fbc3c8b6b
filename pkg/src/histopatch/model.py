"""Compact vision-transformer encoder in plain numpy.

Five pre-norm blocks, width 384, six heads, 16x16 patches, class-token
output.  Weights live in a named-tensor container serialized as a JSON
manifest plus a raw little-endian float32 blob, so any training stack can
export into it.  Also provides analytic parameter and FLOP accounting.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import erf

from .errors import ManifestMismatch, NonFiniteOutput, ShapeMismatch, TruncatedBlob

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 224
    patch_size: int = 16
    depth: int = 5
    dim: int = 384
    heads: int = 6
    mlp_ratio: int = 4
    ln_eps: float = 1e-6

    def __post_init__(self) -> None:
        if self.input_size % self.patch_size:
            raise ValueError("input_size must be divisible by patch_size")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.input_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def expected_shapes(c: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor-name schema; linear weights are (out, in)."""
    d, hidden = c.dim, c.dim * c.mlp_ratio
    shapes: dict[str, tuple[int, ...]] = {
        "cls_token": (1, 1, d),
        "pos_embed": (1, c.n_tokens, d),
        "patch_embed.proj.weight": (d, 3, c.patch_size, c.patch_size),
        "patch_embed.proj.bias": (d,),
    }
    for i in range(c.depth):
        p = f"blocks.{i}."
        shapes[p + "norm1.weight"] = (d,)
        shapes[p + "norm1.bias"] = (d,)
        shapes[p + "attn.qkv.weight"] = (3 * d, d)
        shapes[p + "attn.qkv.bias"] = (3 * d,)
        shapes[p + "attn.proj.weight"] = (d, d)
        shapes[p + "attn.proj.bias"] = (d,)
        shapes[p + "norm2.weight"] = (d,)
        shapes[p + "norm2.bias"] = (d,)
        shapes[p + "mlp.fc1.weight"] = (hidden, d)
        shapes[p + "mlp.fc1.bias"] = (hidden,)
        shapes[p + "mlp.fc2.weight"] = (d, hidden)
        shapes[p + "mlp.fc2.bias"] = (d,)
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    return shapes


@dataclass
class WeightContainer:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    _f64: dict | None = field(default=None, repr=False, compare=False)

    def as_f64(self) -> dict[str, np.ndarray]:
        """float64 views used by forward; built once, shared read-only."""
        if self._f64 is None:
            self._f64 = {k: v.astype(np.float64) for k, v in self.tensors.items()}
        return self._f64

    def __post_init__(self) -> None:
        want = expected_shapes(self.config)
        names = set(self.tensors)
        if names != set(want):
            missing = sorted(set(want) - names)
            extra = sorted(names - set(want))
            raise ManifestMismatch(f"missing={missing[:3]} extra={extra[:3]}")
        for name, shape in want.items():
            got = tuple(self.tensors[name].shape)
            if got != shape:
                raise ManifestMismatch(f"{name}: shape {got}, expected {shape}")


@dataclass
class ForwardTrace:
    """Forward-pass outputs: the class-token embedding, the full token
    matrix after the final norm, and (optionally) per-block attention of
    shape (depth, heads, n_tokens, n_tokens)."""

    embedding: np.ndarray
    tokens: np.ndarray
    attention: np.ndarray | None = None


def random_weights(c: ModelConfig, seed: int = 0) -> WeightContainer:
    """Small-normal initialization; useful for tests and smoke runs."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in expected_shapes(c).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("cls_token", "pos_embed"):
            t = rng.normal(0.0, 0.02, size=shape)
        elif leaf == "bias":
            t = np.zeros(shape)
        elif "norm" in name:
            t = np.ones(shape)
        else:
            t = rng.normal(0.0, 0.02, size=shape)
        tensors[name] = np.ascontiguousarray(t, dtype=np.float32)
    return WeightContainer(config=c, tensors=tensors)


def normalize_image(img: np.ndarray, w: WeightContainer) -> np.ndarray:
    """uint8 RGB -> float64 (H, W, 3): scale to [0,1] then per-channel
    mean/std from the container."""
    x = np.asarray(img, dtype=np.float64) / 255.0
    return (x - np.asarray(w.mean)) / np.asarray(w.std)


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def patchify(img: np.ndarray, c: ModelConfig) -> np.ndarray:
    """(H, W, 3) -> (n_patches, 3*ps*ps) rows ordered (channel, ky, kx),
    matching the flattened patch-projection weight."""
    ps, g = c.patch_size, c.grid
    x = img.reshape(g, ps, g, ps, 3)
    return x.transpose(0, 2, 4, 1, 3).reshape(g * g, 3 * ps * ps)


def forward(
    img: np.ndarray, w: WeightContainer, capture_attention: bool = False
) -> ForwardTrace:
    """Run the encoder on one image already sized to the config.

    img is (H, W, 3) uint8 (or float in [0,255]).  Per block:
    u = z + MSA(LN(z)); z' = u + MLP(LN(u)); MLP is Linear(d -> 4d), GELU,
    Linear(4d -> d); a final LN precedes readout of the class token.
    """
    c = w.config
    img = np.asarray(img)
    if img.shape != (c.input_size, c.input_size, 3):
        raise ShapeMismatch(
            f"input {img.shape}, expected {(c.input_size, c.input_size, 3)}"
        )
    t = w.as_f64()
    x = patchify(normalize_image(img, w), c)
    x = x @ t["patch_embed.proj.weight"].reshape(c.dim, -1).T + t["patch_embed.proj.bias"]
    z = np.vstack([t["cls_token"][0, 0][None, :], x]) + t["pos_embed"][0]

    n, d, nh, hd = c.n_tokens, c.dim, c.heads, c.head_dim
    scale = 1.0 / math.sqrt(hd)
    attn_maps = []
    for i in range(c.depth):
        p = f"blocks.{i}."
        y = _layer_norm(z, t[p + "norm1.weight"], t[p + "norm1.bias"], c.ln_eps)
        qkv = y @ t[p + "attn.qkv.weight"].T + t[p + "attn.qkv.bias"]
        q, k, v = qkv.reshape(n, 3, nh, hd).transpose(1, 2, 0, 3)
        attn = _softmax(q @ k.transpose(0, 2, 1) * scale)
        if capture_attention:
            attn_maps.append(attn)
        ctx = (attn @ v).transpose(1, 0, 2).reshape(n, d)
        z = z + ctx @ t[p + "attn.proj.weight"].T + t[p + "attn.proj.bias"]
        y = _layer_norm(z, t[p + "norm2.weight"], t[p + "norm2.bias"], c.ln_eps)
        y = _gelu(y @ t[p + "mlp.fc1.weight"].T + t[p + "mlp.fc1.bias"])
        z = z + y @ t[p + "mlp.fc2.weight"].T + t[p + "mlp.fc2.bias"]

    z = _layer_norm(z, t["norm.weight"], t["norm.bias"], c.ln_eps)
    embedding = z[0].copy()
    if not np.isfinite(embedding).all():
        raise NonFiniteOutput("embedding contains NaN or Inf")
    attention = np.stack(attn_maps) if capture_attention else None
    return ForwardTrace(embedding=embedding, tokens=z, attention=attention)


def count_parameters(c: ModelConfig) -> dict[str, int]:
    """Analytic parameter counts.

    weights_only covers the patch projection, the transformer blocks, and
    the final norm; total additionally counts the positional embedding and
    the class token.
    """
    d, hidden = c.dim, c.dim * c.mlp_ratio
    patch = d * 3 * c.patch_size * c.patch_size + d
    qkv = d * 3 * d + 3 * d
    proj = d * d + d
    mlp = hidden * d + hidden + d * hidden + d
    norms = 2 * (d + d)
    block = qkv + proj + mlp + norms
    weights_only = patch + c.depth * block + 2 * d
    total = weights_only + c.n_tokens * d + d
    return {"weights_only": weights_only, "total": total}


def estimate_flops(c: ModelConfig) -> int:
    """Fused multiply-add accounting of the forward pass.

    Counts one operation per multiply-accumulate in the patch projection
    and every linear layer, plus four arithmetic operations per element for
    each layer norm.  Attention score/context products, softmax, GELU, and
    residual adds are excluded from this convention.
    """
    d, hidden = c.dim, c.dim * c.mlp_ratio
    n_p, n = c.n_patches, c.n_tokens
    patch = n_p * (3 * c.patch_size * c.patch_size) * d
    per_block = n * d * 3 * d + n * d * d + 2 * n * d * hidden
    layer_norms = (2 * c.depth + 1) * 4 * n * d
    return patch + c.depth * per_block + layer_norms


def save_weights(w: WeightContainer, path: str | Path) -> None:
    """Write <path> (JSON manifest) and a sibling .bin payload."""
    path = Path(path)
    blob_name = path.stem + ".bin"
    offset = 0
    entries = []
    chunks = []
    for name in expected_shapes(w.config):
        arr = np.ascontiguousarray(w.tensors[name], dtype="<f4")
        raw = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": {
            "input_size": w.config.input_size,
            "patch_size": w.config.patch_size,
            "depth": w.config.depth,
            "dim": w.config.dim,
            "heads": w.config.heads,
            "mlp_ratio": w.config.mlp_ratio,
            "ln_eps": w.config.ln_eps,
        },
        "normalize": {"mean": list(w.mean), "std": list(w.std)},
        "blob": blob_name,
        "tensors": entries,
    }
    (path.parent / blob_name).write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def load_weights(path: str | Path) -> WeightContainer:
    """Load and validate a manifest + blob pair saved by save_weights."""
    path = Path(path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    cfg = ModelConfig(**manifest["config"])
    blob = (path.parent / manifest["blob"]).read_bytes()
    want = expected_shapes(cfg)
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if entry.get("dtype") != "f32":
            raise ManifestMismatch(f"{name}: dtype {entry.get('dtype')!r}")
        if name not in want:
            raise ManifestMismatch(f"unexpected tensor {name!r}")
        if shape != want[name]:
            raise ManifestMismatch(f"{name}: shape {shape}, expected {want[name]}")
        size = int(np.prod(shape)) * 4
        if entry["offset"] + size > len(blob):
            raise TruncatedBlob(
                f"{name} needs {entry['offset'] + size} bytes, blob has {len(blob)}"
            )
        arr = np.frombuffer(
            blob, dtype="<f4", count=int(np.prod(shape)), offset=entry["offset"]
        ).reshape(shape)
        tensors[name] = arr.astype(np.float32)
    norm = manifest.get("normalize", {})
    return WeightContainer(
        config=cfg,
        tensors=tensors,
        mean=tuple(norm.get("mean", IMAGENET_MEAN)),
        std=tuple(norm.get("std", IMAGENET_STD)),
    )


def adapt_input_size(w: WeightContainer, new_size: int) -> WeightContainer:
    """Re-target the container to another input side by bicubic interpolation
    of the positional-embedding grid; all other tensors are shared."""
    if new_size == w.config.input_size:
        return w
    new_cfg = replace(w.config, input_size=new_size)
    g_old, g_new = w.config.grid, new_cfg.grid
    pos = w.tensors["pos_embed"][0].astype(np.float64)
    cls_pos, grid_pos = pos[:1], pos[1:]
    grid_pos = grid_pos.reshape(g_old, g_old, w.config.dim)
    zoomed = ndimage.zoom(grid_pos, (g_new / g_old, g_new / g_old, 1.0), order=3)
    new_pos = np.vstack([cls_pos, zoomed.reshape(g_new * g_new, w.config.dim)])
    tensors = dict(w.tensors)
    tensors["pos_embed"] = new_pos[None].astype(np.float32)
    return WeightContainer(config=new_cfg, tensors=tensors, mean=w.mean, std=w.std)


def cls_attention_grid(trace: ForwardTrace, c: ModelConfig, block: int = -1) -> np.ndarray:
    """Class-token attention over patch tokens as (heads, grid, grid) maps."""
    if trace.attention is None:
        raise ValueError("forward was run without capture_attention")
    rows = trace.attention[block][:, 0, 1:]
    return rows.reshape(c.heads, c.grid, c.grid)
