import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from conftest import _luma_crop
from qmattack.baseline import (Method, apply_method, baseline_sweep, clahe, gamma_correct, tile_mapping,
                               unsharp_mask)
from qmattack.errors import ConfigError, DatasetError, ShapeError
from qmattack.image import Dataset


@pytest.fixture(scope="module")
def crop():
    return _luma_crop("camera")[100:164, 150:214]


# --------------------------------------------------------------------------
# unsharp
# --------------------------------------------------------------------------

def test_unsharp_identities(crop):
    assert_array_equal(unsharp_mask(crop, 0.0), crop)
    flat = np.full((9, 7), 42.0)
    assert_allclose(unsharp_mask(flat, 3.0), flat, atol=1e-12)


def test_unsharp_overshoot():
    step = np.zeros((12, 12))
    step[:, 6:] = 100.0
    out = unsharp_mask(step, 1.0)
    assert out.max() > 100.0 and out.min() < 0.0
    assert out[:, 7].max() > 100.0 and out[:, 4].min() < 0.0


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 5), st.integers(0, 2 ** 31))
def test_unsharp_linear_in_amount(a, seed):
    img = np.random.default_rng(seed).uniform(0, 255, (8, 9))
    one = unsharp_mask(img, 1.0) - img
    assert_allclose(unsharp_mask(img, a) - img, a * one, rtol=1e-12, atol=1e-9)


def test_unsharp_errors():
    with pytest.raises(ShapeError):
        unsharp_mask(np.zeros((4, 9)), 1.0)
    with pytest.raises(ConfigError):
        unsharp_mask(np.zeros((9, 9)), -1.0)


# --------------------------------------------------------------------------
# gamma
# --------------------------------------------------------------------------

def test_gamma_examples(crop):
    assert_allclose(gamma_correct(crop, 1.0), crop)
    for g in (0.3, 1.0, 2.5):
        assert_allclose(gamma_correct(np.array([[0.0, 255.0]]), g), [[0.0, 255.0]])
    assert gamma_correct(np.array([[127.5]]), 2.0)[0, 0] == pytest.approx(63.75)
    with pytest.raises(ConfigError):
        gamma_correct(crop, 0.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 5), st.floats(0, 255), st.floats(0, 255))
def test_gamma_monotone(g, a, b):
    lo, hi = sorted((a, b))
    out = gamma_correct(np.array([[lo, hi]]), g)
    assert out[0, 0] <= out[0, 1]


# --------------------------------------------------------------------------
# CLAHE
# --------------------------------------------------------------------------

def _toy():
    img = np.full((16, 16), 180.0)
    img[:, :6] = 60.0
    return img


def test_clahe_two_region_hand_values():
    # left tiles: 48 pixels at 60, 16 at 180 -> cdf(60) = 0.75; right tiles: all 180
    out = clahe(_toy(), tiles=(2, 2), clip_limit=math.inf)
    want = np.full((16, 16), 255.0)
    want[:, :4] = 191.25
    want[:, 4] = 191.25 * (1 - 0.5 / 8)
    want[:, 5] = 191.25 * (1 - 1.5 / 8)
    assert_allclose(out, want, rtol=1e-12)


def _oracle_tile_map(tile, clip):
    hist = [0.0] * 256
    for v in tile.ravel():
        hist[int(math.floor(v + 0.5))] += 1
    limit = clip * tile.size / 256
    excess = sum(max(h - limit, 0.0) for h in hist)
    hist = [min(min(h, limit) + excess / 256, limit) for h in hist]
    total, cdf, out = sum(hist), 0.0, []
    for h in hist:
        cdf += h
        out.append(255 * cdf / total)
    return out


def _oracle_clahe(img, clip):
    maps = [[_oracle_tile_map(img[8 * i:8 * i + 8, 8 * j:8 * j + 8], clip) for j in range(2)] for i in range(2)]
    out = np.zeros_like(img)
    for y in range(16):
        for x in range(16):
            fy = min(max((y - 3.5) / 8, 0.0), 1.0)
            fx = min(max((x - 3.5) / 8, 0.0), 1.0)
            v = int(math.floor(img[y, x] + 0.5))
            out[y, x] = ((1 - fy) * ((1 - fx) * maps[0][0][v] + fx * maps[0][1][v])
                         + fy * ((1 - fx) * maps[1][0][v] + fx * maps[1][1][v]))
    return out


@pytest.mark.parametrize("clip", [1.0, 2.0, 40.0])
def test_clahe_matches_loop_oracle(clip, rng):
    img = np.round(rng.uniform(0, 255, (16, 16)))
    img[:, :6] = 60.0
    assert_allclose(clahe(img, tiles=(2, 2), clip_limit=clip), _oracle_clahe(img, clip), rtol=1e-12)


def test_unbounded_clip_is_histogram_equalization(rng):
    tile = np.round(rng.uniform(0, 255, (16, 16)))
    counts = np.bincount(tile.astype(int).ravel(), minlength=256)
    want = 255 * np.cumsum(counts) / tile.size
    assert_allclose(tile_mapping(tile, math.inf), want, rtol=1e-12)
    assert_allclose(clahe(tile, tiles=(1, 1), clip_limit=math.inf), want[tile.astype(int)], rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (8, 8), elements=st.floats(0, 255)), st.floats(1, 10))
def test_tile_map_monotone(tile, clip):
    m = tile_mapping(tile, clip)
    assert np.all(np.diff(m) >= -1e-12) and m[-1] == pytest.approx(255.0)


def test_clahe_range_and_errors(crop):
    out = clahe(crop, clip_limit=2.0)
    assert out.shape == crop.shape and out.min() >= 0 and out.max() <= 255 + 1e-9
    with pytest.raises(ConfigError):
        clahe(crop, clip_limit=0.5)
    with pytest.raises(ShapeError):
        clahe(np.zeros((4, 4)), tiles=(8, 8))


def test_apply_method_dispatch(crop):
    assert_array_equal(apply_method("gamma", crop, 1.5), gamma_correct(crop, 1.5))
    assert_array_equal(apply_method(Method.UNSHARP, crop, 0.5), unsharp_mask(crop, 0.5))
    assert_array_equal(apply_method("clahe", crop, 2.0), clahe(crop, clip_limit=2.0))


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

def test_sweep_rows(crop):
    data = Dataset((("a", crop), ("b", crop.T.copy())))
    sw = baseline_sweep(data, method="unsharp", param_grid=[0.0, 0.5, 1.0, 2.0], psnr_window=(30, 50))
    assert [r.param for r in sw.rows] == [0.0, 0.5, 1.0, 2.0]
    assert sw.rows[0].mean_psnr == math.inf and sw.rows[0].mean_gain == 0.0
    ps = [r.mean_psnr for r in sw.rows]
    assert all(b < a for a, b in zip(ps, ps[1:]))
    assert not sw.rows[0].in_window
    assert len(sw.per_image) == 8 and all(r.n_images == 2 for r in sw.rows)
    lines = sw.to_csv().splitlines()
    assert lines[0] == "method,param,mean_psnr,mean_gain,n_images" and len(lines) == 5


def test_sweep_errors(crop):
    with pytest.raises(DatasetError):
        baseline_sweep(Dataset(()))
    with pytest.raises(ConfigError):
        baseline_sweep(Dataset((("a", crop),)), param_grid=[])
