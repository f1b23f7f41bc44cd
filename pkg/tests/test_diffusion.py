import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from animsyn import diffusion as dfn


def brute_alpha_bar(T, lo, hi):
    # independent loop oracle for the cumulative product
    out = [1.0]
    acc = 1.0
    for i in range(T):
        beta = lo + (hi - lo) * i / (T - 1)
        acc *= 1.0 - beta
        out.append(acc)
    return np.array(out)


def fixed_schedule(values):
    ab = np.array([1.0] + list(values))
    return dfn.NoiseSchedule(T=len(values), alpha_bar=ab, zero_terminal_snr=ab[-1] == 0.0)


def test_zero_terminal_snr_is_exact():
    s = dfn.make_schedule(1000, 1e-4, 0.02, zero_terminal_snr=True)
    assert s.alpha_bar[1000] == 0.0
    assert dfn.snr(s, 1000) == 0.0
    base = dfn.make_schedule(1000, 1e-4, 0.02, zero_terminal_snr=False)
    assert math.isclose(math.sqrt(s.alpha_bar[1]), math.sqrt(base.alpha_bar[1]), rel_tol=1e-14)


def test_linear_schedule_matches_product_loop():
    s = dfn.make_schedule(1000, 1e-4, 0.02, zero_terminal_snr=False)
    np.testing.assert_allclose(s.alpha_bar, brute_alpha_bar(1000, 1e-4, 0.02), rtol=0, atol=1e-12)


def test_short_schedule_strictly_decreasing():
    s = dfn.make_schedule(10, 1e-3, 0.2, zero_terminal_snr=False)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[10] > 0


@pytest.mark.parametrize("T,zero", [(1, True), (1, False), (2, True), (50, True), (1000, False)])
def test_schedule_flag_matches_terminal_value(T, zero):
    s = dfn.make_schedule(T, zero_terminal_snr=zero)
    assert (s.alpha_bar[-1] == 0.0) == zero
    assert s.alpha_bar[0] == 1.0


def test_schedule_rejects_bad_inputs():
    with pytest.raises(ValueError):
        dfn.make_schedule(0)
    with pytest.raises(ValueError):
        dfn.make_schedule(10, 0.1, 0.01)
    with pytest.raises(ValueError):
        dfn.NoiseSchedule(T=2, alpha_bar=np.array([1.0, 0.5, 0.6]))
    with pytest.raises(ValueError):
        dfn.NoiseSchedule(T=2, alpha_bar=np.array([1.0, 0.5, 0.0]), zero_terminal_snr=False)


def test_schedule_json_round_trip():
    s = dfn.make_schedule(20)
    back = dfn.NoiseSchedule.from_json(s.to_json())
    assert back.T == 20 and back.zero_terminal_snr
    np.testing.assert_array_equal(back.alpha_bar, s.alpha_bar)
    assert set(json.loads(s.to_json())) >= {"T", "alpha_bar", "zero_terminal_snr"}


def test_snr_examples():
    s = fixed_schedule([0.9, 0.5, 0.0])
    assert dfn.snr(s, 1) == pytest.approx(9.0, abs=1e-12)
    assert dfn.snr(s, 2) == 1.0
    assert dfn.snr(s, 3) == 0.0
    with pytest.raises(ValueError):
        dfn.snr(s, 0)
    with pytest.raises(ValueError):
        dfn.snr(s, 4)


@pytest.mark.parametrize("value,expected", [(0.0, 0.0), (1.0, 0.5), (5.0, 5 / 6), (100.0, 5 / 101)])
def test_loss_weight_values(value, expected):
    assert abs(dfn.loss_weight(value) - expected) <= 1e-12


def test_loss_weight_rejects_negative():
    with pytest.raises(ValueError):
        dfn.loss_weight(-1.0)


def test_weight_table_is_finite_and_zero_at_terminal():
    w = dfn.weight_table(dfn.make_schedule(1000))
    assert np.all(np.isfinite(w))
    assert w[-1] == 0.0
    assert w[0] == pytest.approx(5.0 / (dfn.SNR_CAP + 1.0))


@given(st.floats(0.0, 1e9, allow_nan=False))
def test_weight_bounds(x):
    assert 0.0 <= dfn.loss_weight(x) < 1.0


@given(st.floats(0.0, 1e6), st.floats(0.0, 1e6))
def test_weight_monotone_on_each_side_of_gamma(a, b):
    lo, hi = sorted((a, b))
    if hi <= 5.0:
        assert dfn.loss_weight(lo) <= dfn.loss_weight(hi) + 1e-15
    if lo >= 5.0:
        assert dfn.loss_weight(lo) >= dfn.loss_weight(hi) - 1e-15


def test_forward_and_v_examples():
    s = fixed_schedule([0.25, 0.0])
    ones, zeros = np.ones((2, 4, 2, 2)), np.zeros((2, 4, 2, 2))
    np.testing.assert_allclose(dfn.add_noise(ones, zeros, s, 1), 0.5)
    np.testing.assert_array_equal(dfn.add_noise(ones, zeros + 3, s, 2), zeros + 3)
    np.testing.assert_array_equal(dfn.v_target(ones * 2, ones, s, 2), -2 * ones)
    half = fixed_schedule([0.5])
    np.testing.assert_allclose(dfn.v_target(ones, ones, half, 1), 0.0, atol=1e-15)
    with pytest.raises(ValueError):
        dfn.add_noise(ones, np.ones((2, 4, 2, 3)), s, 1)


def test_recovery_at_fixed_alpha(rng):
    s = fixed_schedule([0.3])
    x0, eps = rng.standard_normal((3, 4, 4, 4)), rng.standard_normal((3, 4, 4, 4))
    z, v = dfn.add_noise(x0, eps, s, 1), dfn.v_target(x0, eps, s, 1)
    assert np.abs(dfn.v_to_x0(v, z, s, 1) - x0).max() / np.abs(x0).max() < 1e-6
    assert np.abs(dfn.v_to_eps(v, z, s, 1) - eps).max() / np.abs(eps).max() < 1e-6


def test_recovery_double_precision(rng):
    s = dfn.make_schedule(1000)
    worst = 0.0
    for _ in range(200):
        t = int(rng.integers(1, 1001))
        x0, eps = rng.standard_normal(64), rng.standard_normal(64)
        z, v = dfn.add_noise(x0, eps, s, t), dfn.v_target(x0, eps, s, t)
        worst = max(worst, np.abs(dfn.v_to_x0(v, z, s, t) - x0).max() / np.abs(x0).max(),
                    np.abs(dfn.v_to_eps(v, z, s, t) - eps).max() / np.abs(eps).max())
    assert worst < 1e-12


def test_torch_inputs_keep_dtype():
    s = dfn.make_schedule(100)
    x = torch.ones(2, 4, 2, 2, dtype=torch.float32)
    assert dfn.add_noise(x, x, s, 10).dtype == torch.float32
    assert dfn.v_target(x, x, s, 10).dtype == torch.float32


def test_ddim_step_examples(rng):
    s = dfn.make_schedule(100, zero_terminal_snr=False)
    x0, eps = rng.standard_normal((2, 4, 2, 2)), rng.standard_normal((2, 4, 2, 2))
    z = dfn.add_noise(x0, eps, s, 40)
    np.testing.assert_allclose(dfn.ddim_step(z, eps, s, 40, 0), x0, atol=1e-12)
    z_prev = dfn.ddim_step(z, eps, s, 40, 20)
    np.testing.assert_allclose(z_prev, dfn.add_noise(x0, eps, s, 20), atol=1e-12)
    with pytest.raises(ValueError):
        dfn.ddim_step(z, eps, s, 20, 20)
    with pytest.raises(ValueError):
        dfn.ddim_step(z, eps, s, 101, 0)


def test_ddim_terminal_step_needs_v(rng):
    s = dfn.make_schedule(10)
    x0, eps = rng.standard_normal(8), rng.standard_normal(8)
    z = dfn.add_noise(x0, eps, s, 10)
    with pytest.raises(ValueError):
        dfn.ddim_step(z, eps, s, 10, 5)
    v = dfn.v_target(x0, eps, s, 10)
    out = dfn.ddim_step(z, eps, s, 10, 5, v_pred=v)
    np.testing.assert_allclose(out, dfn.add_noise(x0, eps, s, 5), atol=1e-12)


def test_timestep_grid():
    grid = dfn.ddim_timesteps(1000, 50)
    assert grid[0] == 1000 and grid[-1] == 0 and len(grid) == 51
    assert all(a > b for a, b in zip(grid, grid[1:]))
    assert dfn.ddim_timesteps(1000, 1) == [1000, 0]
    with pytest.raises(ValueError):
        dfn.ddim_timesteps(10, 11)


def test_oracle_sampler_recovers_planted_latent(rng):
    s = dfn.make_schedule(1000)
    x0 = rng.standard_normal((4, 4, 8, 8))
    z = rng.standard_normal(x0.shape)
    out = dfn.ddim_sample(z, dfn.oracle_v(x0, s), s, 50)
    assert np.abs(out - x0).max() < 1e-5
    again = dfn.ddim_sample(z, dfn.oracle_v(x0, s), s, 50)
    np.testing.assert_array_equal(out, again)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 1000), st.integers(0, 2**31 - 1))
def test_v_round_trip_single_precision(t, seed):
    s = dfn.make_schedule(1000)
    g = np.random.default_rng(seed)
    x0 = g.standard_normal(32).astype(np.float32)
    eps = g.standard_normal(32).astype(np.float32)
    z, v = dfn.add_noise(x0, eps, s, t), dfn.v_target(x0, eps, s, t)
    assert np.abs(dfn.v_to_x0(v, z, s, t) - x0).max() / np.abs(x0).max() < 1e-5
    assert np.abs(dfn.v_to_eps(v, z, s, t) - eps).max() / np.abs(eps).max() < 1e-5


def test_single_step_sampler_jumps_to_estimate(rng):
    s = dfn.make_schedule(1000)
    x0 = rng.standard_normal((2, 4, 2, 2))
    out = dfn.ddim_sample(rng.standard_normal(x0.shape), dfn.oracle_v(x0, s), s, 1)
    np.testing.assert_allclose(out, x0, atol=1e-12)
