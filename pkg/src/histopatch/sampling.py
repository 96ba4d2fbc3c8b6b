"""Density-proportional patch selection.

Pipeline: candidate grid over tissue bounding boxes -> Gaussian KDE over the
candidates -> seeded sampling proportional to density under a minimum
pairwise distance -> mapping to full-resolution coordinates.  All geometry
here lives in mask (thumbnail) space until the final mapping step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateBandwidth,
    EmptyDensity,
    NoCandidates,
    NoTissue,
)
from .slide import SlideSource, map_to_slide
from .tissue import (
    DEFAULT_MIN_CONTOUR_AREA,
    ContourSet,
    TissueMask,
    find_contours,
    make_mask,
)


@dataclass
class CandidateSet:
    """Potential patch top-left corners in mask space.

    points is (N, 2) int64 (x, y); box_index maps each point to the contour
    bounding box it was generated from (first box wins for duplicates).
    """

    points: np.ndarray
    patch_dims: tuple[int, int]
    box_index: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class DensityModel:
    """KDE over a candidate set: raw density f and probabilities p."""

    candidates: CandidateSet
    bandwidth: float
    f: np.ndarray
    p: np.ndarray


@dataclass
class PatchPlan:
    """Selected patch locations for one slide.

    selected is (k, 2) int64 mask-space points; slide_coords the mapped
    full-resolution rects; f/p the density values at the selected points.
    short_plan marks plans cut off before reaching n_s.
    """

    slide_id: str
    selected: np.ndarray
    n_s: int
    e_min: float
    slide_coords: list[tuple[int, int, int, int]]
    seed: int
    level: int = 0
    short_plan: bool = False
    f: np.ndarray = field(default_factory=lambda: np.zeros(0))
    p: np.ndarray = field(default_factory=lambda: np.zeros(0))
    stats: dict = field(default_factory=dict)


def build_candidates(
    cs: ContourSet,
    patch_dims: tuple[int, int],
    stride: int,
    mask: TissueMask,
    coverage_min: float,
) -> CandidateSet:
    """Stride-grid patch corners inside each box, filtered by tissue coverage.

    For a box (X, Y, W, H) the grid spans x in [X, X+W-r_w] and
    y in [Y, Y+H-r_h]; boxes smaller than the patch are skipped.  A corner
    survives iff tissue covers at least coverage_min of its patch rect.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    r_w, r_h = patch_dims
    pts: list[np.ndarray] = []
    owners: list[np.ndarray] = []
    for bi, (bx, by, bw, bh) in enumerate(cs.boxes):
        if r_w > bw or r_h > bh:
            continue
        xs = np.arange(bx, bx + bw - r_w + 1, stride, dtype=np.int64)
        ys = np.arange(by, by + bh - r_h + 1, stride, dtype=np.int64)
        gx, gy = np.meshgrid(xs, ys)
        grid = np.column_stack([gx.ravel(), gy.ravel()])
        pts.append(grid)
        owners.append(np.full(len(grid), bi, dtype=np.int64))
    if not pts:
        raise NoCandidates("no bounding box fits the patch dimensions")
    points = np.concatenate(pts)
    box_index = np.concatenate(owners)
    # first occurrence wins so owners stay stable across overlapping boxes
    _, keep = np.unique(points, axis=0, return_index=True)
    keep.sort()
    points, box_index = points[keep], box_index[keep]

    if coverage_min > 0:
        area = r_w * r_h
        counts = np.array(
            [mask.count_in((int(x), int(y), r_w, r_h)) for x, y in points]
        )
        ok = counts >= coverage_min * area
        points, box_index = points[ok], box_index[ok]
    if len(points) == 0:
        raise NoCandidates("coverage filter removed every candidate")
    return CandidateSet(points=points, patch_dims=(r_w, r_h), box_index=box_index)


def estimate_density(
    c: CandidateSet, bandwidth: float | str = "scott"
) -> DensityModel:
    """Gaussian-kernel density at every candidate, from all candidates.

    f(x) = 1/(N h^2 2 pi) * sum_i exp(-|x - x_i|^2 / (2 h^2)), the bivariate
    product-Gaussian form; p = f / sum(f).  Scott bandwidth is
    N^(-1/6) times the mean of the per-axis standard deviations; a zero
    spread falls back to h = 1.
    """
    n = len(c)
    if n < 1:
        raise EmptyDensity("candidate set is empty")
    pts = c.points.astype(np.float64)
    if bandwidth == "scott":
        h = n ** (-1.0 / 6.0) * float(np.mean(pts.std(axis=0)))
        if h <= 0:
            h = 1.0
    else:
        h = float(bandwidth)
        if h <= 0:
            raise DegenerateBandwidth(f"bandwidth {h} must be positive")
    inv = -0.5 / (h * h)
    norm = 1.0 / (n * h * h * 2.0 * math.pi)
    f = np.empty(n)
    step = 1024  # blocked pairwise distances keep memory flat for big N
    for lo in range(0, n, step):
        chunk = pts[lo : lo + step]
        d2 = ((chunk[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        f[lo : lo + step] = np.exp(d2 * inv).sum(axis=1) * norm
    return DensityModel(candidates=c, bandwidth=h, f=f, p=f / f.sum())


def sample_plan(
    d: DensityModel,
    n_s: int,
    e_min: float,
    seed: int,
    slide_id: str = "",
    replace: bool = False,
) -> PatchPlan:
    """Draw up to n_s points with probability proportional to p.

    Draws are sequential; a draw closer than e_min to an accepted point is
    rejected.  Without replacement (default) every draw leaves the pool,
    accepted or not.  Sampling stops early, with short_plan set, after
    50 * n_s consecutive rejections or an exhausted pool.
    """
    n = len(d.candidates)
    if n == 0:
        raise EmptyDensity("nothing to sample from")
    if n_s < 1:
        raise ValueError("n_s must be >= 1")
    rng = np.random.default_rng(seed)
    pts = d.candidates.points.astype(np.float64)
    mass = d.p.astype(np.float64).copy()
    chosen: list[int] = []
    rejects = 0
    budget = 50 * n_s
    while len(chosen) < n_s and rejects < budget:
        total = mass.sum()
        if total <= 0:
            break
        j = int(rng.choice(n, p=mass / total))
        sel = pts[chosen]
        if len(sel) == 0 or bool(
            (np.hypot(sel[:, 0] - pts[j, 0], sel[:, 1] - pts[j, 1]) >= e_min).all()
        ):
            chosen.append(j)
            rejects = 0
        else:
            rejects += 1
        if not replace:
            mass[j] = 0.0
    idx = np.array(chosen, dtype=np.int64)
    return PatchPlan(
        slide_id=slide_id,
        selected=d.candidates.points[idx],
        n_s=n_s,
        e_min=float(e_min),
        slide_coords=[],
        seed=seed,
        short_plan=len(chosen) < n_s,
        f=d.f[idx],
        p=d.p[idx],
    )


@dataclass
class FpsConfig:
    """Knobs for the end-to-end selection run, all recorded in the plan."""

    n_patches: int = 40
    patch_size: int = 224
    coverage_min: float = 0.90
    e_min: float | str = "auto"
    stride: int | str = "auto"
    bandwidth: float | str = "scott"
    threshold: int | str = "otsu"
    min_contour_area: int = DEFAULT_MIN_CONTOUR_AREA
    seed: int = 7
    replace: bool = False


def run_fps(slide: SlideSource, config: FpsConfig) -> PatchPlan:
    """Mask -> contours -> candidates -> density -> sample -> slide coords.

    Raises NoTissue when the mask yields no usable contour; batch drivers
    count such slides as missed rather than failing the run.
    """
    thumb = slide.thumbnail
    mask = make_mask(thumb, threshold=config.threshold)
    contours = find_contours(mask, min_area=config.min_contour_area)
    if len(contours) == 0:
        raise NoTissue(f"{slide.slide_id}: no tissue contours found")

    sx = slide.width / mask.width
    sy = slide.height / mask.height
    r_w = max(1, round(config.patch_size / sx))
    r_h = max(1, round(config.patch_size / sy))
    stride = config.stride
    if stride == "auto":
        stride = max(1, round(r_w / 4))
    e_min = config.e_min
    if e_min == "auto":
        e_min = 0.5 * math.hypot(r_w, r_h)

    candidates = build_candidates(
        contours, (r_w, r_h), int(stride), mask, config.coverage_min
    )
    density = estimate_density(candidates, bandwidth=config.bandwidth)
    plan = sample_plan(
        density,
        n_s=config.n_patches,
        e_min=float(e_min),
        seed=config.seed,
        slide_id=slide.slide_id,
        replace=config.replace,
    )

    pw = min(config.patch_size, slide.width)
    ph = min(config.patch_size, slide.height)
    rects = []
    for x, y in plan.selected:
        sx0, sy0 = map_to_slide((int(x), int(y)), slide)
        sx0 = min(max(sx0, 0), slide.width - pw)
        sy0 = min(max(sy0, 0), slide.height - ph)
        rects.append((sx0, sy0, pw, ph))
    plan.slide_coords = rects
    plan.stats = {
        "threshold_used": mask.threshold_used,
        "n_contours": len(contours),
        "n_candidates": len(candidates),
        "n_selected": len(plan.selected),
        "bandwidth": density.bandwidth,
        "stride": int(stride),
        "e_min": float(e_min),
        "patch_dims_mask": [r_w, r_h],
        "short_plan": plan.short_plan,
    }
    return plan


def save_plan(plan: PatchPlan, path: str | Path) -> None:
    """JSON lines, one record per selected patch."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(plan.selected)):
            rec = {
                "slide_id": plan.slide_id,
                "mask_xy": [int(plan.selected[i, 0]), int(plan.selected[i, 1])],
                "slide_rect": list(plan.slide_coords[i]),
                "level": plan.level,
                "seed": plan.seed,
                "f": float(plan.f[i]),
                "p": float(plan.p[i]),
            }
            fh.write(json.dumps(rec) + "\n")


def load_plan_records(path: str | Path) -> list[dict]:
    """Read back the per-patch records written by save_plan."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
