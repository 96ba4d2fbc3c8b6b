"""Rotation-agnostic multi-crop augmentation.

Each view is produced by crop -> rotate -> crop -> resize.  The middle crop
keeps only the maximal axis-aligned square inscribed in the rotated content,
so outputs never contain synthetic fill pixels.  Right-angle rotations are
lossless pixel permutations; arbitrary angles resample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DegenerateOutput, ImageTooSmall

EXACT_ANGLES = (90, 180, 270, 360)

MIN_SOURCE_SIDE = 64
MIN_ROTATED_SIDE = 8

GLOBAL_SCALE = (0.4, 1.0)
LOCAL_SCALE = (0.05, 0.4)
GLOBAL_SIZE = 224
LOCAL_SIZE = 96

# sources at exactly this side get continuous global rotation in auto mode
CONTINUOUS_SOURCE_SIDE = 1024


@dataclass(frozen=True)
class RotationPolicy:
    """How an angle is chosen and how pixels are resampled."""

    mode: str = "continuous"  # continuous | discrete
    angles: tuple[int, ...] = EXACT_ANGLES
    interpolation: str = "bilinear"  # bilinear | nearest

    def draw(self, rng: np.random.Generator) -> float:
        if self.mode == "continuous":
            return float(rng.uniform(0.0, 360.0))
        return float(self.angles[rng.integers(0, len(self.angles))])


@dataclass(frozen=True)
class CropSpec:
    """Area-scale range and output size for one crop family."""

    kind: str  # global | local
    scale: tuple[float, float]
    out_size: int


@dataclass
class CropSet:
    """2 global + n local views of one source image, globals first."""

    source_id: str
    crops: list[np.ndarray]
    provenance: list[dict] = field(default_factory=list)
    seed: int = 0


def rotate_exact(img: np.ndarray, theta: int) -> np.ndarray:
    """Lossless rotation by a right angle, counterclockwise."""
    if theta not in EXACT_ANGLES:
        raise ValueError(f"theta {theta} not in {EXACT_ANGLES}")
    return np.ascontiguousarray(np.rot90(img, k=(theta // 90) % 4))


def inscribed_side(side: int, theta: float) -> int:
    """Side of the largest axis-aligned square inside a side x side image
    rotated by theta degrees: floor(side / (|sin t| + |cos t|)), t = theta
    folded into [0, 90)."""
    t = math.radians(theta % 90.0)
    return int(side / (abs(math.sin(t)) + abs(math.cos(t))))


def _inverse_coords(
    theta: float, side_in: int, side_out: int
) -> tuple[np.ndarray, np.ndarray]:
    """Source (row, col) for each output pixel of a counterclockwise rotation
    about the image center.  For side_out = inscribed_side(side_in, theta)
    every coordinate lands inside the source content."""
    t = math.radians(theta)
    cos_t, sin_t = math.cos(t), math.sin(t)
    c_out = (side_out - 1) / 2.0
    c_src = (side_in - 1) / 2.0
    rr, cc = np.meshgrid(
        np.arange(side_out, dtype=np.float64),
        np.arange(side_out, dtype=np.float64),
        indexing="ij",
    )
    dr = rr - c_out
    dc = cc - c_out
    src_r = c_src + cos_t * dr + sin_t * dc
    src_c = c_src - sin_t * dr + cos_t * dc
    return src_r, src_c


def rotate_continuous(
    img: np.ndarray, theta: float, interpolation: str = "bilinear"
) -> np.ndarray:
    """Rotate a square raster counterclockwise and keep the inscribed square.

    The output side is inscribed_side(side, theta), so the result contains
    only source pixels.  interpolation: bilinear or nearest.
    """
    img = np.asarray(img)
    if img.shape[0] != img.shape[1]:
        raise ValueError("rotate_continuous requires a square raster")
    side = img.shape[0]
    side_out = inscribed_side(side, theta)
    if side_out < MIN_ROTATED_SIDE:
        raise DegenerateOutput(f"inscribed side {side_out} below {MIN_ROTATED_SIDE}")
    src_r, src_c = _inverse_coords(theta, side, side_out)
    if interpolation == "nearest":
        ir = np.clip(np.rint(src_r).astype(np.int64), 0, side - 1)
        ic = np.clip(np.rint(src_c).astype(np.int64), 0, side - 1)
        return np.ascontiguousarray(img[ir, ic])
    if interpolation != "bilinear":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = src_r - r0
    fc = src_c - c0
    r0c = np.clip(r0, 0, side - 1)
    r1c = np.clip(r0 + 1, 0, side - 1)
    c0c = np.clip(c0, 0, side - 1)
    c1c = np.clip(c0 + 1, 0, side - 1)
    if img.ndim == 3:
        fr = fr[..., None]
        fc = fc[..., None]
    vals = (
        img[r0c, c0c] * (1 - fr) * (1 - fc)
        + img[r0c, c1c] * (1 - fr) * fc
        + img[r1c, c0c] * fr * (1 - fc)
        + img[r1c, c1c] * fr * fc
    )
    if np.issubdtype(img.dtype, np.integer):
        return np.rint(vals).clip(0, 255).astype(img.dtype)
    return vals.astype(img.dtype)


def _resize(img: np.ndarray, out_size: int, interpolation: str) -> np.ndarray:
    resample = Image.Resampling.NEAREST if interpolation == "nearest" else Image.Resampling.BILINEAR
    return np.asarray(Image.fromarray(img).resize((out_size, out_size), resample))


def _crop_side_bounds(side: int, scale: tuple[float, float]) -> tuple[int, int]:
    # integer sides whose squared area fraction stays inside [lo, hi]
    lo = math.ceil(side * math.sqrt(scale[0]))
    hi = math.floor(side * math.sqrt(scale[1]))
    return lo, min(hi, side)


def _one_crop(
    img: np.ndarray,
    spec: CropSpec,
    policy: RotationPolicy,
    rng: np.random.Generator,
) -> tuple[np.ndarray, dict]:
    side = img.shape[0]
    lo_side, hi_side = _crop_side_bounds(side, spec.scale)
    s = float(rng.uniform(spec.scale[0], spec.scale[1]))
    crop_side = int(np.clip(round(side * math.sqrt(s)), lo_side, hi_side))
    x0 = int(rng.integers(0, side - crop_side + 1))
    y0 = int(rng.integers(0, side - crop_side + 1))
    view = img[y0 : y0 + crop_side, x0 : x0 + crop_side]
    theta = policy.draw(rng)
    if policy.mode == "discrete":
        rotated = rotate_exact(view, int(theta))
    else:
        rotated = rotate_continuous(view, theta, policy.interpolation)
    out = _resize(rotated, spec.out_size, policy.interpolation)
    prov = {
        "kind": spec.kind,
        "theta": theta,
        "rotation_mode": policy.mode,
        "scale": (crop_side * crop_side) / (side * side),
        "crop_rect": [x0, y0, crop_side, crop_side],
        "out_size": spec.out_size,
    }
    return out, prov


def make_crop_set(
    img: np.ndarray,
    n_local: int = 8,
    seed: int = 0,
    mode: str = "auto",
    interpolation: str = "bilinear",
    source_id: str = "",
    global_spec: CropSpec | None = None,
    local_spec: CropSpec | None = None,
) -> CropSet:
    """Generate 2 global + n_local local views of a square source image.

    Global rotation is continuous for sources of side 1024 (or with
    mode="continuous") and drawn from the right-angle set otherwise; local
    rotation is always continuous.  mode: auto | continuous | discrete.
    Deterministic for a fixed (img, seed).
    """
    img = np.asarray(img)
    if img.shape[0] != img.shape[1]:
        raise ValueError("make_crop_set requires a square source image")
    if img.shape[0] < MIN_SOURCE_SIDE:
        raise ImageTooSmall(f"source side {img.shape[0]} below {MIN_SOURCE_SIDE}")
    if mode not in ("auto", "continuous", "discrete"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "auto":
        global_mode = "continuous" if img.shape[0] == CONTINUOUS_SOURCE_SIDE else "discrete"
    else:
        global_mode = mode
    g_spec = global_spec or CropSpec("global", GLOBAL_SCALE, GLOBAL_SIZE)
    l_spec = local_spec or CropSpec("local", LOCAL_SCALE, LOCAL_SIZE)
    g_policy = RotationPolicy(mode=global_mode, interpolation=interpolation)
    l_policy = RotationPolicy(mode="continuous", interpolation=interpolation)

    rng = np.random.default_rng(seed)
    crops: list[np.ndarray] = []
    provenance: list[dict] = []
    for _ in range(2):
        out, prov = _one_crop(img, g_spec, g_policy, rng)
        crops.append(out)
        provenance.append(prov)
    for _ in range(n_local):
        out, prov = _one_crop(img, l_spec, l_policy, rng)
        crops.append(out)
        provenance.append(prov)
    return CropSet(source_id=source_id, crops=crops, provenance=provenance, seed=seed)
