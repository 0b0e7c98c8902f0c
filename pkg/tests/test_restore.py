import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import CORPUS, _luma_crop
from qmattack.errors import ConfigError, NumericError, ShapeError
from qmattack.metrics import mse, vif_scale
from qmattack.restore import (AdamState, RestoreConfig, StopMode, Target, adam_step, compressed_proxy,
                              default_threshold, init_noise, restore, restore_from_compressed)


@pytest.fixture(scope="module")
def small():
    return _luma_crop("camera")[100:164, 150:214]


def test_init_noise():
    a, b = init_noise(256, 256, 3), init_noise(256, 256, 3)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 255
    assert a.mean() == pytest.approx(127.5, abs=2)
    assert init_noise(3, 5).shape == (3, 5)
    assert not np.array_equal(init_noise(4, 4, 0), init_noise(4, 4, 1))
    with pytest.raises(ValueError):
        init_noise(0, 4)


def test_default_thresholds():
    assert default_threshold(Target.FUSED) == 100.0
    assert default_threshold(Target.VIF2) == 1.0 and default_threshold(Target.ADM) == 1.0
    assert math.isinf(default_threshold(Target.PSNR))
    assert RestoreConfig(target="adm", threshold=0.5).resolved_threshold == 0.5


@pytest.mark.parametrize("kw", [{"lr": 0.0}, {"beta1": 0.999, "beta2": 0.9}, {"max_steps": 0},
                                {"target": "ssim"}, {"stop_mode": "never"}])
def test_bad_config(kw):
    with pytest.raises((ConfigError, ValueError)):
        RestoreConfig(**kw)


def test_adam_first_step_is_lr():
    x = np.zeros(4)
    st = AdamState(np.zeros(4), np.zeros(4))
    g = np.array([3.0, -0.01, 200.0, -7.0])
    out = adam_step(x, st, g, lr=0.5)
    assert np.all(np.abs(out) <= 0.5 * (1 + 1e-6))
    assert_allclose(np.abs(out), 0.5, rtol=1e-5)
    assert_array_equal(np.sign(out), np.sign(g))
    assert st.t == 1


def test_adam_zero_gradient():
    st = AdamState(np.zeros(3), np.zeros(3))
    assert_array_equal(adam_step(np.ones(3), st, np.zeros(3), lr=1.0), np.ones(3))


def test_adam_errors():
    st = AdamState(np.zeros(2), np.zeros(2))
    with pytest.raises(NumericError):
        adam_step(np.zeros(2), st, np.array([np.inf, 0.0]), 0.1)
    with pytest.raises(ValueError):
        adam_step(np.zeros(2), st, np.zeros(3), 0.1)


def test_adam_quadratic_converges():
    # maximize -(x - 3.7)^2
    x = np.array([0.0])
    st = AdamState(np.zeros(1), np.zeros(1))
    for _ in range(2000):
        x = adam_step(x, st, -2.0 * (x - 3.7), lr=0.1)
    assert abs(x[0] - 3.7) < 1e-3


def test_psnr_target_recovers_reference(small):
    cfg = RestoreConfig(target="psnr", lr=1.0, max_steps=1500)
    out, trace = restore(small, init_noise(*small.shape, seed=2), cfg)
    assert mse(small, out) < 1.0
    assert trace.hit_max_steps and not trace.reached_threshold
    assert all(math.isfinite(s) for s in trace.scores)


def test_psnr_target_from_proxy(small):
    out, _ = restore_from_compressed(small, RestoreConfig(target="psnr", lr=1.0, max_steps=800))
    assert mse(small, out) < 1.0


def test_vif0_threshold_postcondition(small):
    out, trace = restore(small, init_noise(*small.shape, seed=0), RestoreConfig(target="vif0", max_steps=400))
    assert trace.reached_threshold
    assert 1.0 <= trace.scores[-1] <= 1.02
    assert trace.scores[-1] == pytest.approx(vif_scale(small, out, 0), rel=1e-12)
    assert trace.steps == list(range(len(trace)))


def test_max_steps_flag(small):
    _, trace = restore(small, init_noise(*small.shape), RestoreConfig(target="adm", max_steps=5))
    assert trace.hit_max_steps and not trace.reached_threshold
    assert len(trace) == 6   # initial score plus five updates
    assert trace.to_csv().splitlines()[0] == "step,score"


def test_convergence_mode_stops_on_flat_trace(small):
    # already at the optimum: the score never changes
    cfg = RestoreConfig(target="adm", stop_mode=StopMode.CONVERGENCE, conv_window=3, max_steps=100)
    _, trace = restore(small, small, cfg)
    assert len(trace) == 4 and not trace.hit_max_steps


def test_restore_is_deterministic(small):
    cfg = RestoreConfig(target="fused", max_steps=10)
    a, ta = restore(small, init_noise(*small.shape, 5), cfg)
    b, tb = restore(small, init_noise(*small.shape, 5), cfg)
    assert a.tobytes() == b.tobytes() and ta.scores == tb.scores


def test_shape_mismatch(small):
    with pytest.raises(ShapeError):
        restore(small, small[:-1])


@pytest.mark.parametrize("name", CORPUS)
def test_proxy_degrades_but_correlates(corpus, name):
    r = dict(corpus.entries)[name]
    p = compressed_proxy(r)
    assert p.shape == r.shape
    assert mse(r, p) > 0
    assert np.corrcoef(r.ravel(), p.ravel())[0, 1] > 0.8
    assert len(np.unique(p)) <= 16
