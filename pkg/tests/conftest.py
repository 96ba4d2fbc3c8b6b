"""Shared fixtures: synthetic slides, pyramids, masks, and weight files."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from histopatch import model as hp_model


def make_blob_image(side: int, blobs, seed: int = 0, background: int = 245) -> np.ndarray:
    """White-ish canvas with textured dark disks.

    blobs: iterable of (cx, cy, radius, (r, g, b)) in pixel coords.
    """
    rng = np.random.default_rng(seed)
    img = np.full((side, side, 3), background, dtype=np.uint8)
    yy, xx = np.mgrid[0:side, 0:side]
    for cx, cy, radius, color in blobs:
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
        texture = rng.integers(-40, 40, size=(side, side, 3))
        base = np.asarray(color, dtype=np.int64)[None, None, :]
        painted = np.clip(base + texture, 0, 255).astype(np.uint8)
        img[inside] = painted[inside]
    return img


def write_png(path: Path, array: np.ndarray) -> Path:
    Image.fromarray(array).save(path)
    return path


def write_pyramid_tiff(path: Path, base: np.ndarray, downsamples) -> Path:
    """Multi-page TIFF, pages ordered largest first."""
    pages = []
    h, w = base.shape[:2]
    for ds in downsamples:
        if ds == 1:
            pages.append(Image.fromarray(base))
        else:
            pages.append(Image.fromarray(base).resize((w // ds, h // ds), Image.BOX))
    pages[0].save(path, save_all=True, append_images=pages[1:])
    return path


def random_mask_bits(rng: np.random.Generator, h: int, w: int, p: float = 0.4) -> np.ndarray:
    return (rng.random((h, w)) < p)


CLASS_STYLES = {
    "alpha": (150, 60, 160),
    "beta": (70, 150, 80),
}


def build_corpus(root: Path, n_per_class: int = 3, side: int = 1536,
                 with_blank: bool = False, seed: int = 11) -> dict:
    """Labeled slide corpus: textured disks whose hue encodes the class.

    Returns {"slides": dir, "labels": path, "ids": [...], "blank": id | None}.
    """
    slides = root / "slides"
    slides.mkdir(parents=True, exist_ok=True)
    labels = {}
    ids = []
    i = 0
    for label, color in CLASS_STYLES.items():
        for j in range(n_per_class):
            sid = f"{label}_{j}"
            rng = np.random.default_rng(seed + i)
            cx = side // 2 + int(rng.integers(-120, 121))
            cy = side // 2 + int(rng.integers(-120, 121))
            img = make_blob_image(side, [(cx, cy, side // 3, color)], seed=seed + i)
            write_png(slides / f"{sid}.png", img)
            labels[sid] = {"label": label, "patient_id": f"p{i:02d}"}
            ids.append(sid)
            i += 1
    blank = None
    if with_blank:
        blank = "blank_0"
        write_png(slides / f"{blank}.png", np.full((side, side, 3), 250, dtype=np.uint8))
        labels[blank] = {"label": "alpha", "patient_id": "p99"}
    labels_path = root / "labels.json"
    labels_path.write_text(json.dumps(labels, indent=1))
    return {"slides": slides, "labels": labels_path, "ids": ids, "blank": blank}


def save_random_weights(path: Path, config: hp_model.ModelConfig | None = None,
                        seed: int = 3) -> Path:
    config = config or hp_model.ModelConfig()
    container = hp_model.random_weights(config, seed=seed)
    hp_model.save_weights(container, path)
    return path


@pytest.fixture(scope="session")
def default_weights(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("weights") / "model.json"
    return save_random_weights(path)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory) -> dict:
    root = tmp_path_factory.mktemp("corpus")
    return build_corpus(root, with_blank=True)
