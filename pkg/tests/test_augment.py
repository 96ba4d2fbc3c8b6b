"""Rotations (exact and resampled) and the multi-crop generator."""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats

from histopatch import (
    CropSpec,
    inscribed_side,
    make_crop_set,
    rotate_continuous,
    rotate_exact,
)
from histopatch.augment import (
    CONTINUOUS_SOURCE_SIDE,
    EXACT_ANGLES,
    GLOBAL_SCALE,
    LOCAL_SCALE,
    _inverse_coords,
)
from histopatch.errors import DegenerateOutput, ImageTooSmall


def random_rgb(rng, side: int) -> np.ndarray:
    return rng.integers(0, 256, size=(side, side, 3)).astype(np.uint8)


# ---------------------------------------------------------- exact rotation

def test_rotate_exact_2x2():
    img = np.array([[1, 2], [3, 4]], dtype=np.uint8)
    np.testing.assert_array_equal(rotate_exact(img, 90),
                                  np.array([[2, 4], [1, 3]]))
    np.testing.assert_array_equal(rotate_exact(img, 180),
                                  np.array([[4, 3], [2, 1]]))
    np.testing.assert_array_equal(rotate_exact(img, 360), img)


def test_rotate_exact_group_laws():
    rng = np.random.default_rng(0)
    img = random_rgb(rng, 17)
    four = img
    for _ in range(4):
        four = rotate_exact(four, 90)
    np.testing.assert_array_equal(four, img)
    np.testing.assert_array_equal(
        rotate_exact(rotate_exact(img, 90), 270), img
    )
    np.testing.assert_array_equal(
        rotate_exact(rotate_exact(img, 180), 180), img
    )


def test_rotate_exact_rectangles_swap_dims():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(5, 9, 3)).astype(np.uint8)
    assert rotate_exact(img, 90).shape == (9, 5, 3)
    assert rotate_exact(img, 180).shape == (5, 9, 3)
    with pytest.raises(ValueError):
        rotate_exact(img, 45)
    with pytest.raises(ValueError):
        rotate_exact(img, 0)


# ----------------------------------------------------- continuous rotation

def test_inscribed_side_values():
    assert inscribed_side(224, 45) == 158  # 224 / sqrt(2) floored
    assert inscribed_side(224, 90) == 224
    assert inscribed_side(224, 0) == 224
    assert inscribed_side(100, 30) == int(100 / (0.5 + math.sqrt(3) / 2))
    # the fold makes theta and theta + 90 equivalent
    for theta in (13.7, 45.0, 61.2):
        assert inscribed_side(224, theta) == inscribed_side(224, theta + 90)


def test_continuous_right_angles_match_exact():
    rng = np.random.default_rng(2)
    img = random_rgb(rng, 33)
    for theta in EXACT_ANGLES:
        got = rotate_continuous(img, float(theta), interpolation="nearest")
        np.testing.assert_array_equal(got, rotate_exact(img, theta))
    np.testing.assert_array_equal(
        rotate_continuous(img, 0.0, interpolation="nearest"), img
    )
    # bilinear at a right angle hits pixel centers, so it is exact too
    np.testing.assert_array_equal(
        rotate_continuous(img, 90.0, interpolation="bilinear"),
        rotate_exact(img, 90),
    )


def test_output_side_is_inscribed():
    rng = np.random.default_rng(3)
    img = random_rgb(rng, 151)
    for theta in (10.0, 45.0, 88.3, 201.5):
        out = rotate_continuous(img, theta)
        assert out.shape[0] == out.shape[1] == inscribed_side(151, theta)


def test_constant_image_stays_constant():
    """Inscribed output means no synthetic fill: rotating a constant image
    must return exactly that constant everywhere."""
    img = np.full((96, 96, 3), (14, 200, 77), dtype=np.uint8)
    rng = np.random.default_rng(4)
    for _ in range(120):
        theta = float(rng.uniform(0, 360))
        for interp in ("bilinear", "nearest"):
            out = rotate_continuous(img, theta, interpolation=interp)
            assert (out == np.array([14, 200, 77], np.uint8)).all(), theta


def test_inverse_coords_stay_inside_source():
    rng = np.random.default_rng(5)
    for _ in range(200):
        side = int(rng.integers(12, 200))
        theta = float(rng.uniform(0, 360))
        side_out = inscribed_side(side, theta)
        src_r, src_c = _inverse_coords(theta, side, side_out)
        assert src_r.min() >= -0.5 and src_r.max() <= side - 0.5
        assert src_c.min() >= -0.5 and src_c.max() <= side - 0.5


def test_degenerate_rotation_raises():
    img = np.zeros((8, 8, 3), dtype=np.uint8)
    with pytest.raises(DegenerateOutput):
        rotate_continuous(img, 45.0)
    with pytest.raises(ValueError):
        rotate_continuous(np.zeros((8, 10, 3), np.uint8), 10.0)


def test_float_images_pass_through_unclipped():
    rng = np.random.default_rng(6)
    img = rng.normal(size=(64, 64)).astype(np.float64)
    out = rotate_continuous(img, 33.0)
    assert out.dtype == np.float64
    assert out.min() >= img.min() - 1e-9 and out.max() <= img.max() + 1e-9


# ----------------------------------------------------------------- crops

def test_crop_set_composition():
    rng = np.random.default_rng(7)
    img = random_rgb(rng, 224)
    cs = make_crop_set(img, n_local=8, seed=1, source_id="x")
    assert len(cs.crops) == 10
    assert cs.source_id == "x"
    for i, (crop, prov) in enumerate(zip(cs.crops, cs.provenance)):
        if i < 2:
            assert crop.shape == (224, 224, 3)
            assert prov["kind"] == "global"
        else:
            assert crop.shape == (96, 96, 3)
            assert prov["kind"] == "local"


def test_crop_scales_stay_in_range():
    rng = np.random.default_rng(8)
    img = random_rgb(rng, 160)
    for seed in range(40):
        cs = make_crop_set(img, n_local=6, seed=seed)
        for prov in cs.provenance:
            lo, hi = GLOBAL_SCALE if prov["kind"] == "global" else LOCAL_SCALE
            assert lo <= prov["scale"] <= hi
            x0, y0, side, side2 = prov["crop_rect"]
            assert side == side2
            assert 0 <= x0 and x0 + side <= 160
            assert 0 <= y0 and y0 + side <= 160


def test_global_rotation_mode_depends_on_source_side():
    rng = np.random.default_rng(9)
    small = random_rgb(rng, 256)
    cs = make_crop_set(small, n_local=2, seed=3)
    for prov in cs.provenance:
        if prov["kind"] == "global":
            assert prov["rotation_mode"] == "discrete"
            assert prov["theta"] in EXACT_ANGLES
        else:
            assert prov["rotation_mode"] == "continuous"

    big = random_rgb(rng, CONTINUOUS_SOURCE_SIDE)
    cs_big = make_crop_set(big, n_local=2, seed=3)
    assert all(p["rotation_mode"] == "continuous" for p in cs_big.provenance)

    forced = make_crop_set(small, n_local=0, seed=3, mode="continuous")
    assert all(p["rotation_mode"] == "continuous" for p in forced.provenance)


def test_crop_set_determinism():
    rng = np.random.default_rng(10)
    img = random_rgb(rng, 200)
    a = make_crop_set(img, n_local=4, seed=77)
    b = make_crop_set(img, n_local=4, seed=77)
    for ca, cb in zip(a.crops, b.crops):
        np.testing.assert_array_equal(ca, cb)
    assert a.provenance == b.provenance
    c = make_crop_set(img, n_local=4, seed=78)
    assert any(
        not np.array_equal(x, y) for x, y in zip(a.crops, c.crops)
    )


def test_local_thetas_uniform():
    rng = np.random.default_rng(11)
    img = random_rgb(rng, 64)
    thetas = []
    for seed in range(250):
        cs = make_crop_set(img, n_local=8, seed=seed)
        thetas.extend(
            p["theta"] for p in cs.provenance if p["kind"] == "local"
        )
    assert len(thetas) == 2000
    p = stats.kstest(np.array(thetas) / 360.0, "uniform").pvalue
    assert p > 0.01


def test_crop_spec_overrides():
    rng = np.random.default_rng(12)
    img = random_rgb(rng, 300)
    cs = make_crop_set(
        img,
        n_local=1,
        seed=5,
        global_spec=CropSpec("global", (0.5, 0.9), 128),
        local_spec=CropSpec("local", (0.1, 0.2), 48),
    )
    assert cs.crops[0].shape == (128, 128, 3)
    assert cs.crops[2].shape == (48, 48, 3)
    assert 0.5 <= cs.provenance[0]["scale"] <= 0.9
    assert 0.1 <= cs.provenance[2]["scale"] <= 0.2


def test_crop_set_input_validation():
    rng = np.random.default_rng(13)
    with pytest.raises(ImageTooSmall):
        make_crop_set(random_rgb(rng, 63))
    with pytest.raises(ValueError):
        make_crop_set(rng.integers(0, 255, (128, 130, 3)).astype(np.uint8))
    with pytest.raises(ValueError):
        make_crop_set(random_rgb(rng, 128), mode="sometimes")
