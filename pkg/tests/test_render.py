import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cueing.render import (
    COLORMAP,
    colorize,
    default_sigma,
    gaussian_blur,
    gaussian_kernel,
    normalize_max,
    overlay,
    upsample_points,
    write_colormap_doc,
)
from cueing.tokenizer import DimensionError, downsample_gaze


def test_default_sigma():
    assert default_sigma(1280) == 20.0


def test_zero_and_constant_points():
    assert not upsample_points(np.zeros(16), 16, 32, 48, sigma=3).any()
    m = upsample_points(np.full(16, 0.37), 16, 32, 48, sigma=3)
    assert np.max(np.abs(m - 0.37)) <= 1e-6


@pytest.mark.parametrize("kind", ["bilinear", "bicubic"])
def test_single_hot_point(kind):
    pts = np.zeros(64)
    pts[2 * 8 + 5] = 1.0
    m = upsample_points(pts, 64, 64, 128, sigma=2, kind=kind)
    # token (2, 5) covers rows 16..23 and cols 80..95; its centre is (19.5, 87.5)
    y, x = np.unravel_index(np.argmax(m), m.shape)
    assert y in (19, 20) and x in (87, 88)
    if kind == "bilinear":
        # cubic kernels ring, so only the bilinear map decays monotonically
        row = m[y, 88:]
        col = m[20:, x]
        assert np.all(np.diff(row) <= 1e-12) and np.all(np.diff(col) <= 1e-12)


@pytest.mark.parametrize("kind", ["bilinear", "bicubic"])
def test_anchored_at_token_centres(rng, kind):
    pts = rng.uniform(size=16)
    # 3 pixels per token: pixel 3r+1 sits exactly on a token centre
    m = upsample_points(pts, 16, 12, 12, sigma=0, kind=kind)
    assert np.allclose(m[1::3, 1::3].ravel(), pts, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_upsample_monotone_and_range(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=16)
    b = np.minimum(a + rng.uniform(0, 0.5, size=16), 1.5)
    ma = upsample_points(a, 16, 24, 24, sigma=2)
    mb = upsample_points(b, 16, 24, 24, sigma=2)
    assert np.all(mb >= ma - 1e-12)
    assert mb.min() >= 0 and mb.max() <= 1


def test_upsample_errors():
    with pytest.raises(DimensionError):
        upsample_points(np.zeros(15), 16, 32, 32)
    with pytest.raises(DimensionError):
        upsample_points(np.zeros(16), 16, 2, 32)
    with pytest.raises(ValueError):
        upsample_points(np.zeros(16), 16, 32, 32, kind="nearest")


def test_blur_delta_matches_closed_form():
    sigma = 2.5
    d = np.zeros((41, 41))
    d[20, 20] = 1.0
    out = gaussian_blur(d, sigma)
    r = math.ceil(3 * sigma)
    x = np.arange(-r, r + 1)
    k1 = np.exp(-(x**2) / (2 * sigma**2))
    k1 /= k1.sum()
    ref = np.zeros_like(d)
    ref[20 - r : 20 + r + 1, 20 - r : 20 + r + 1] = np.outer(k1, k1)
    assert np.max(np.abs(out - ref)) <= 1e-6
    assert np.allclose(gaussian_kernel(sigma), k1)


def test_blur_constant_and_mass(rng):
    c = np.full((13, 17), 0.42)
    assert np.max(np.abs(gaussian_blur(c, 3.0) - 0.42)) <= 1e-9
    g = np.zeros((60, 60))
    g[20:40, 20:40] = rng.uniform(size=(20, 20))
    assert gaussian_blur(g, 2.0).sum() == pytest.approx(g.sum(), rel=1e-9)


def test_blur_semigroup():
    d = np.zeros((81, 81))
    d[40, 40] = 1.0
    d[30, 50] = 0.5
    twice = gaussian_blur(gaussian_blur(d, 3.0), 3.0)
    once = gaussian_blur(d, 3.0 * math.sqrt(2))
    assert np.max(np.abs(twice - once)) <= 1e-3


def test_blur_rejects_bad_sigma():
    with pytest.raises(ValueError):
        gaussian_blur(np.zeros((3, 3)), 0)


def test_normalize_max():
    assert normalize_max(np.array([0.1, 0.2])).tolist() == [0.5, 1.0]
    assert not normalize_max(np.zeros(3)).any()


def test_overlay_examples(rng):
    img = rng.uniform(size=(3, 4, 5))
    g = rng.uniform(size=(4, 5))
    assert np.array_equal(overlay(img, g, 0.0), img)
    assert np.array_equal(overlay(img, g, 1.0), colorize(g))
    mid = colorize(np.full((1, 1), 0.5))[:, 0, 0]
    assert np.array_equal(mid, COLORMAP[128])
    with pytest.raises(DimensionError):
        overlay(img, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        overlay(img, g, 1.5)


def test_colormap_table(tmp_path):
    assert COLORMAP.shape == (256, 3)
    assert np.allclose(COLORMAP[0], [0, 0, 0.5], atol=0.01) and np.allclose(COLORMAP[255], [0.5, 0, 0], atol=0.01)
    doc = write_colormap_doc(tmp_path / "c.md").read_text()
    rows = [l for l in doc.splitlines() if l.startswith("| ") and l[2].isdigit()]
    assert len(rows) == 256
    i, r, g, b = (int(v) for v in rows[128].strip("| ").split(" | "))
    assert i == 128 and [r, g, b] == np.round(COLORMAP[128] * 255).astype(int).tolist()
