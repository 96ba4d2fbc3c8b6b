"""Tissue masking and contour extraction in thumbnail (mask) space.

The mask marks dark pixels (tissue on a bright glass background); contours
are outer borders of 8-connected tissue components, traced so downstream
code only ever consumes bounding boxes and coverage ratios.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import EmptyImage, OutOfBounds, ZeroArea

DEFAULT_MIN_CONTOUR_AREA = 32


@dataclass
class TissueMask:
    """Binary tissue grid plus the threshold that produced it.

    bits is (h, w) uint8 in {0,1}.  A summed-area table is built on
    construction so rectangle coverage queries are O(1).
    """

    bits: np.ndarray
    threshold_used: int
    _sat: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        bits.setflags(write=False)
        self.bits = bits
        sat = np.zeros((bits.shape[0] + 1, bits.shape[1] + 1), dtype=np.int64)
        np.cumsum(np.cumsum(bits, axis=0, dtype=np.int64), axis=1, out=sat[1:, 1:])
        self._sat = sat

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def count_in(self, rect: tuple[int, int, int, int]) -> int:
        """Tissue pixels inside rect = (x, y, w, h)."""
        x, y, w, h = rect
        s = self._sat
        return int(s[y + h, x + w] - s[y, x + w] - s[y + h, x] + s[y, x])


@dataclass
class ContourSet:
    """Outer borders of tissue components with tight bounding boxes.

    contours[i] is an ordered (k, 2) int array of (x, y) boundary points;
    boxes[i] = (x, y, w, h) spans exactly the component's extent.
    """

    contours: list[np.ndarray]
    boxes: list[tuple[int, int, int, int]]

    def __len__(self) -> int:
        return len(self.contours)


def luma(rgb: np.ndarray) -> np.ndarray:
    """Rounded BT.601 luma, uint8."""
    arr = np.asarray(rgb, dtype=np.float64)
    if arr.ndim == 3:
        y = arr[..., 0] * 0.299 + arr[..., 1] * 0.587 + arr[..., 2] * 0.114
    else:
        y = arr
    return np.rint(y).astype(np.uint8)


def otsu_threshold(gray: np.ndarray) -> int:
    """Threshold t in [1, 255] maximizing between-class variance.

    Classes are [0, t) and [t, 255]; ties resolve to the lowest t.
    """
    hist = np.bincount(gray.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    cum_n = np.cumsum(hist)
    cum_v = np.cumsum(hist * np.arange(256))
    # w0/mu0 over [0, t) for t = 1..255
    w0 = cum_n[:-1]
    w1 = total - w0
    mu0 = np.divide(cum_v[:-1], w0, out=np.zeros(255), where=w0 > 0)
    mu1 = np.divide(cum_v[-1] - cum_v[:-1], w1, out=np.zeros(255), where=w1 > 0)
    var_between = w0 * w1 * (mu0 - mu1) ** 2
    return int(np.argmax(var_between)) + 1


def make_mask(thumbnail: np.ndarray, threshold: int | str = "otsu") -> TissueMask:
    """Mark tissue = pixels with luma strictly below the threshold.

    threshold is "otsu" or a fixed integer in [0, 256].
    """
    arr = np.asarray(thumbnail)
    if arr.size == 0:
        raise EmptyImage("thumbnail has no pixels")
    gray = luma(arr)
    if threshold == "otsu":
        t = otsu_threshold(gray)
    else:
        t = int(threshold)
    return TissueMask(bits=(gray < t).astype(np.uint8), threshold_used=t)


def tissue_ratio(mask: TissueMask, rect: tuple[int, int, int, int]) -> float:
    """Fraction of rect covered by tissue; rect = (x, y, w, h) in mask space."""
    x, y, w, h = rect
    if w <= 0 or h <= 0:
        raise ZeroArea(f"rect {rect} has no area")
    if x < 0 or y < 0 or x + w > mask.width or y + h > mask.height:
        raise OutOfBounds(f"rect {rect} outside mask {mask.width}x{mask.height}")
    return mask.count_in(rect) / (w * h)


# Moore neighborhood, clockwise in image coordinates (row down, col right).
_DIRS = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))
_DIR_INDEX = {d: i for i, d in enumerate(_DIRS)}


def _trace_boundary(fg: np.ndarray, start: tuple[int, int]) -> list[tuple[int, int]]:
    """Clockwise Moore-neighbor walk of one component's outer border.

    fg is a padded bool array (border guaranteed background); start is the
    component's raster-first pixel, so its west neighbor is background.
    """
    contour = [start]
    cur = start
    back = (start[0], start[1] - 1)
    first_state = None
    limit = 4 * int(fg.sum()) + 8
    while True:
        bd = _DIR_INDEX[(back[0] - cur[0], back[1] - cur[1])]
        nxt = None
        for i in range(1, 9):
            d = (bd + i) % 8
            cand = (cur[0] + _DIRS[d][0], cur[1] + _DIRS[d][1])
            if fg[cand]:
                nxt = cand
                back = (cur[0] + _DIRS[(bd + i - 1) % 8][0],
                        cur[1] + _DIRS[(bd + i - 1) % 8][1])
                break
        if nxt is None:
            break  # isolated pixel
        if first_state is None:
            first_state = (nxt, back)
        elif (nxt, back) == first_state or len(contour) > limit:
            break
        cur = nxt
        contour.append(cur)
    if len(contour) > 1 and contour[-1] == contour[0]:
        contour.pop()
    return contour


def find_contours(mask: TissueMask, min_area: int = DEFAULT_MIN_CONTOUR_AREA) -> ContourSet:
    """Trace outer borders of 8-connected tissue components.

    Components with fewer than min_area pixels are dropped, as are contours
    of fewer than 4 points.  Boxes are (x, y, w, h), tight on the component.
    """
    labels, n = ndimage.label(mask.bits, structure=np.ones((3, 3), dtype=np.uint8))
    contours: list[np.ndarray] = []
    boxes: list[tuple[int, int, int, int]] = []
    if n == 0:
        return ContourSet(contours, boxes)
    areas = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    slices = ndimage.find_objects(labels)
    for idx, (area, sl) in enumerate(zip(areas, slices, strict=True), start=1):
        if area < min_area:
            continue
        # pad so the walk can probe outside the bbox without bounds checks
        fg = np.zeros((sl[0].stop - sl[0].start + 2, sl[1].stop - sl[1].start + 2), bool)
        fg[1:-1, 1:-1] = labels[sl] == idx
        rr, cc = np.nonzero(fg)
        start = (int(rr[0]), int(cc[0]))  # raster-first: west neighbor is background
        walk = _trace_boundary(fg, start)
        if len(walk) < 4:
            continue
        pts = np.array(
            [(c - 1 + sl[1].start, r - 1 + sl[0].start) for r, c in walk], dtype=np.int64
        )
        x0, y0 = pts.min(axis=0)
        x1, y1 = pts.max(axis=0)
        contours.append(pts)
        boxes.append((int(x0), int(y0), int(x1 - x0 + 1), int(y1 - y0 + 1)))
    return ContourSet(contours, boxes)


def save_pbm(mask: TissueMask, path: str | Path) -> None:
    """Write the mask as binary PBM (P4); tissue pixels are black."""
    header = f"P4\n{mask.width} {mask.height}\n".encode("ascii")
    packed = np.packbits(mask.bits, axis=1)
    Path(path).write_bytes(header + packed.tobytes())


def save_contours_jsonl(cs: ContourSet, slide_id: str, path: str | Path) -> None:
    """One JSON object per contour: slide_id, index, bbox, ordered points."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, (pts, box) in enumerate(zip(cs.contours, cs.boxes, strict=True)):
            rec = {
                "slide_id": slide_id,
                "contour_index": i,
                "bbox": list(box),
                "points": pts.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")
