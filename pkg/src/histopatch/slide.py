"""Slide loading, thumbnails, region reads, and coordinate mapping.

A slide is either a plain raster (PNG, single-image TIFF) or a multi-level
TIFF pyramid.  All pixel data is exposed as 8-bit RGB numpy arrays.  Mask
space is the thumbnail coordinate system; slide space is full resolution.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import CorruptImage, OutOfBounds, UnsupportedFormat

DEFAULT_THUMB_SIZE = 1024

_SUPPORTED_FORMATS = {"PNG", "TIFF"}

Image.MAX_IMAGE_PIXELS = None  # gigapixel slides trip PIL's decompression-bomb guard


@dataclass(frozen=True)
class LevelInfo:
    """One pyramid level: downsample factor relative to level 0 and its size."""

    downsample: float
    width: int
    height: int


@dataclass(frozen=True)
class RegionRequest:
    """Axis-aligned read request in the pixel grid of one level."""

    x: int
    y: int
    width: int
    height: int
    level: int = 0


@dataclass
class SlideSource:
    """Open slide handle.

    Immutable after open; level rasters are decoded lazily and cached, so
    concurrent read_region calls on one handle are safe.
    """

    slide_id: str
    path: Path
    width: int
    height: int
    levels: list[LevelInfo]
    thumb_level: int
    # synthetic thumbnail raster when the file has no page at thumbnail scale
    _synth_thumb: np.ndarray | None = field(default=None, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def thumbnail(self) -> np.ndarray:
        """Thumbnail raster (h, w, 3) uint8."""
        return self._level_raster(self.thumb_level)

    @property
    def thumb_size(self) -> tuple[int, int]:
        lvl = self.levels[self.thumb_level]
        return lvl.width, lvl.height

    def _level_raster(self, level: int) -> np.ndarray:
        if level < 0 or level >= len(self.levels):
            raise OutOfBounds(f"level {level} out of range for {self.slide_id}")
        cached = self._cache.get(level)
        if cached is not None:
            return cached
        with self._lock:
            cached = self._cache.get(level)
            if cached is not None:
                return cached
            if self._synth_thumb is not None and level == self.thumb_level:
                arr = self._synth_thumb
            else:
                arr = _decode_page(self.path, self._page_index(level))
            arr.setflags(write=False)
            self._cache[level] = arr
            return arr

    def _page_index(self, level: int) -> int:
        # file pages are the levels minus any synthetic thumbnail appended last
        return level


def open_slide(path: str | Path, thumb_size: int = DEFAULT_THUMB_SIZE) -> SlideSource:
    """Open a PNG or TIFF slide and pick (or synthesize) its thumbnail level.

    The thumbnail level is the existing level whose max dimension is nearest
    to ``thumb_size`` without exceeding 4x of it.  When no level qualifies, a
    synthetic level is appended, box-filtered down from the smallest level so
    that its max dimension equals ``thumb_size``.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            fmt = img.format
            if fmt not in _SUPPORTED_FORMATS:
                raise UnsupportedFormat(f"{path.name}: format {fmt!r} not supported")
            page_sizes = [img.size]
            n_frames = getattr(img, "n_frames", 1)
            for i in range(1, n_frames):
                img.seek(i)
                page_sizes.append(img.size)
    except UnidentifiedImageError as exc:
        raise CorruptImage(f"{path.name}: not a decodable image") from exc
    except OSError as exc:
        raise CorruptImage(f"{path.name}: {exc}") from exc

    # level 0 is the largest page; pages must be ordered big-to-small
    order = sorted(range(len(page_sizes)), key=lambda i: -page_sizes[i][0] * page_sizes[i][1])
    if order != sorted(order):
        raise CorruptImage(f"{path.name}: pyramid pages are not ordered largest first")
    width, height = page_sizes[0]
    if width == 0 or height == 0:
        raise CorruptImage(f"{path.name}: zero-sized image")
    levels = [
        LevelInfo(downsample=width / w, width=w, height=h) for (w, h) in page_sizes
    ]

    source = SlideSource(
        slide_id=path.stem,
        path=path,
        width=width,
        height=height,
        levels=levels,
        thumb_level=0,
    )

    eligible = [
        i for i, lvl in enumerate(levels) if max(lvl.width, lvl.height) < 4 * thumb_size
    ]
    if eligible:
        # nearest max dimension to the target; prefer the smaller level on ties
        source.thumb_level = min(
            eligible,
            key=lambda i: (abs(max(levels[i].width, levels[i].height) - thumb_size), -i),
        )
        return source

    # synthesize a thumbnail from the smallest available level
    base = len(levels) - 1
    base_raster = source._level_raster(base)
    ds = max(levels[base].width, levels[base].height) / thumb_size
    tw = max(1, round(levels[base].width / ds))
    th = max(1, round(levels[base].height / ds))
    thumb = np.asarray(
        Image.fromarray(base_raster).resize((tw, th), Image.Resampling.BOX)
    )
    source.levels = levels + [LevelInfo(downsample=width / tw, width=tw, height=th)]
    source.thumb_level = len(source.levels) - 1
    source._synth_thumb = thumb
    return source


def read_region(source: SlideSource, request: RegionRequest) -> np.ndarray:
    """Read exactly (height, width, 3) uint8 pixels from one level.

    Raises OutOfBounds when the request is not fully inside the level.
    """
    if request.level < 0 or request.level >= len(source.levels):
        raise OutOfBounds(f"level {request.level} does not exist")
    lvl = source.levels[request.level]
    if request.width <= 0 or request.height <= 0:
        raise OutOfBounds("region must have positive size")
    if (
        request.x < 0
        or request.y < 0
        or request.x + request.width > lvl.width
        or request.y + request.height > lvl.height
    ):
        raise OutOfBounds(
            f"region {request} exceeds level bounds {lvl.width}x{lvl.height}"
        )
    raster = source._level_raster(request.level)
    region = raster[
        request.y : request.y + request.height, request.x : request.x + request.width
    ]
    return np.ascontiguousarray(region)


def map_to_slide(point: tuple[int, int], source: SlideSource) -> tuple[int, int]:
    """Scale a mask-space point to slide space using the W/w and H/h ratios."""
    tw, th = source.thumb_size
    x = int(round(point[0] * source.width / tw))
    y = int(round(point[1] * source.height / th))
    return x, y


def mask_scale(source: SlideSource) -> tuple[float, float]:
    """(W/w, H/h): slide pixels per thumbnail pixel along each axis."""
    tw, th = source.thumb_size
    return source.width / tw, source.height / th


def patch_filename(slide_id: str, rect: tuple[int, int, int, int]) -> str:
    """Canonical patch file name, slide-space coordinates."""
    x, y, w, h = rect
    return f"{slide_id}_{x}_{y}_{w}x{h}.png"


_PATCH_NAME = re.compile(r"^(?P<sid>.+)_(?P<x>\d+)_(?P<y>\d+)_(?P<w>\d+)x(?P<h>\d+)\.png$")


def parse_patch_filename(name: str) -> tuple[str, tuple[int, int, int, int]]:
    """Invert patch_filename; raises ValueError on foreign names."""
    m = _PATCH_NAME.match(name)
    if m is None:
        raise ValueError(f"not a patch file name: {name}")
    return m.group("sid"), (
        int(m.group("x")),
        int(m.group("y")),
        int(m.group("w")),
        int(m.group("h")),
    )


def _decode_page(path: Path, page: int) -> np.ndarray:
    with Image.open(path) as img:
        if page:
            img.seek(page)
        return np.asarray(img.convert("RGB"))
