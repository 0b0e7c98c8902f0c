import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose
from scipy.ndimage import uniform_filter

import oracles
from conftest import _luma_crop
from qmattack import metrics as M
from qmattack.attack import epsilon_for_psnr
from qmattack.errors import ShapeError


@pytest.fixture(scope="module")
def crop64():
    return _luma_crop("camera")[100:164, 150:214]


# --------------------------------------------------------------------------
# MSE / PSNR
# --------------------------------------------------------------------------

def test_mse_identity_and_uniform():
    r = np.full((5, 7), 100.0)
    assert M.mse(r, r) == 0.0
    assert M.mse(r, r + 25.5) == 650.25


def test_mse_matches_hand_sum(rng):
    r, d = rng.uniform(0, 255, (4, 4)), rng.uniform(0, 255, (4, 4))
    total = 0.0
    for i in range(4):
        for j in range(4):
            total += (r[i, j] - d[i, j]) ** 2
    assert_allclose(M.mse(r, d), total / 16, rtol=1e-14)


def test_psnr_examples():
    r = np.zeros((3, 3))
    assert M.psnr(r, r + 25.5) == pytest.approx(20.0, abs=1e-12)
    assert M.psnr(r, r + 255.0) == pytest.approx(0.0, abs=1e-12)
    assert M.psnr(r, r) == math.inf


def test_psnr_of_epsilon_round_trip(rng):
    m, n = 24, 40
    d = rng.normal(size=(m, n))
    d *= epsilon_for_psnr(40.0, m, n) / np.linalg.norm(d)
    r = rng.uniform(0, 255, (m, n))
    assert M.psnr(r, r + d) == pytest.approx(40.0, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 5), elements=st.floats(-20, 20)).filter(lambda d: np.any(d != 0)),
       st.integers(0, 2 ** 31))
def test_psnr_depends_only_on_delta(delta, seed):
    rng = np.random.default_rng(seed)
    r1, r2 = rng.uniform(0, 255, (2, 6, 5))
    # compare through the same delta, so no reference-dependent rounding enters
    assert M.psnr(r1, r1 + delta) == pytest.approx(M.psnr(r2, r2 + delta), rel=1e-12)


def test_psnr_node_matches_float(rng):
    r = rng.uniform(0, 255, (8, 8))
    d = r + rng.normal(0, 4, (8, 8))
    from qmattack import autodiff as ad
    assert float(M.psnr_node(r, ad.constant(d)).value) == pytest.approx(M.psnr(r, d), rel=1e-13)


# --------------------------------------------------------------------------
# VIF
# --------------------------------------------------------------------------

def test_window_sizes():
    assert [M.vif_window_size(s) for s in range(4)] == [17, 9, 5, 3]
    assert [M.vif_min_size(s) for s in range(4)] == [17, 25, 33, 41]
    w = M.gaussian_window(17)
    assert w.shape == (17, 17) and w.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("s", range(4))
def test_vif_identity(crop64, s):
    assert M.vif_scale(crop64, crop64, s) == pytest.approx(1.0, abs=1e-6)


# oracle values: straight-line implementation in tests/oracles.py on the
# fixed 64x64 camera crop
BLUR_VIF = [0.4437649404301362, 0.9094156952565304, 0.9683691498276752, 0.9824019375468672]
CONTRAST_VIF = [1.1517014043216791, 1.1581228372974872, 1.1523414323856436, 1.1342961617495404]


@pytest.mark.parametrize("s", range(4))
def test_vif_blur_matches_oracle(crop64, s):
    blurred = uniform_filter(crop64, 3, mode="nearest")
    got = M.vif_scale(crop64, blurred, s)
    assert 0.0 < got < 1.0
    assert got == pytest.approx(BLUR_VIF[s], rel=1e-8)
    assert got == pytest.approx(oracles.vif_scale(crop64, blurred, s), rel=1e-8)


@pytest.mark.parametrize("s", range(4))
def test_vif_enhancement_exceeds_one(crop64, s):
    enhanced = crop64.mean() + 1.5 * (crop64 - crop64.mean())
    got = M.vif_scale(crop64, enhanced, s)
    assert got > 1.0
    assert got == pytest.approx(CONTRAST_VIF[s], rel=1e-8)


@pytest.mark.parametrize("s", range(4))
def test_vif_matches_oracle_on_noise(crop64, s, rng):
    d = np.clip(crop64 + rng.normal(0, 10, crop64.shape), 0, 255)
    assert M.vif_scale(crop64, d, s) == pytest.approx(oracles.vif_scale(crop64, d, s), rel=1e-8)


def test_vif_flat_reference_is_one():
    r = np.full((64, 64), 80.0)
    assert M.vif_scale(r, r + np.linspace(0, 1, 64), 0) == 1.0


def test_vif_too_small():
    with pytest.raises(ShapeError, match="33x33"):
        M.vif_scale(np.zeros((32, 32)), np.zeros((32, 32)), 2)


# --------------------------------------------------------------------------
# ADM
# --------------------------------------------------------------------------

def test_adm_identity_exact(crop64):
    assert M.adm(crop64, crop64) == 1.0


def test_adm_matches_oracle(crop64, rng):
    blurred = uniform_filter(crop64, 3, mode="nearest")
    assert M.adm(crop64, blurred) == pytest.approx(0.864726595646743, rel=1e-12)
    d = crop64 + rng.normal(0, 8, crop64.shape)
    assert M.adm(crop64, d) == pytest.approx(oracles.adm(crop64, d), rel=1e-12)


def test_adm_constant_distorted_near_zero(crop64):
    assert M.adm(crop64, np.full_like(crop64, crop64.mean())) < 1e-6


def test_adm_flat_pair_is_one():
    assert M.adm(np.full((32, 32), 7.0), np.full((32, 32), 90.0)) == 1.0


def test_adm_center_crop(rng):
    r = rng.uniform(0, 255, (40, 37))
    d = r + rng.normal(0, 5, r.shape)
    assert M.adm(r, d) == pytest.approx(oracles.adm(r, d), rel=1e-12)


def test_adm_too_small():
    with pytest.raises(ShapeError):
        M.adm(np.zeros((15, 40)), np.zeros((15, 40)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.5, 30))
def test_adm_never_exceeds_one(seed, noise):
    rng = np.random.default_rng(seed)
    r = rng.uniform(0, 255, (32, 32))
    assert M.adm(r, r + rng.normal(0, noise, r.shape)) <= 1.0 + 1e-12


# --------------------------------------------------------------------------
# motion and feature vector
# --------------------------------------------------------------------------

def test_motion_conventions(crop64):
    assert M.motion(None, crop64) == 0.0
    assert M.motion(crop64, crop64) == 0.0
    assert M.motion(crop64 + 2.0, crop64) == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(ShapeError):
        M.motion(crop64[:10], crop64)


def test_features_identity(crop64):
    f = M.extract_features(crop64, crop64)
    assert_allclose(f.as_array(), [1, 1, 1, 1, 1, 0], atol=1e-6)
    assert f.adm == 1.0 and f.motion == 0.0


def test_features_noise_finite(crop64, rng):
    f = M.extract_features(crop64, rng.uniform(0, 255, crop64.shape))
    assert np.all(np.isfinite(f.as_array()))


def test_features_blur_below_identity(crop64):
    ident = M.extract_features(crop64, crop64).as_array()
    blur = M.extract_features(crop64, uniform_filter(crop64, 3, mode="nearest")).as_array()
    assert np.all(blur[:4] <= ident[:4])


def test_metrics_bit_deterministic(crop64, rng):
    d = crop64 + rng.normal(0, 5, crop64.shape)
    a = M.extract_features(crop64, d).as_array()
    M._REF_CACHE.clear()
    b = M.extract_features(crop64, d).as_array()
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("name", ["astronaut", "camera", "chelsea", "coffee", "rocket"])
def test_identity_on_full_crops(corpus, name):
    r = dict(corpus.entries)[name]
    f = M.extract_features(r, r)
    for s in range(4):
        assert abs(getattr(f, f"vif{s}") - 1.0) <= 1e-6
    assert f.adm == 1.0
