import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dgad.schedule import (NoiseSchedule, add_noise, cfg_combine, make_linear_schedule, predict_x0,
                           sampler_step, sampling_timesteps)

f64 = torch.float64


def test_two_step_product():
    s = make_linear_schedule(2, 0.1, 0.1)
    assert np.allclose(s.alpha_bar, [0.9, 0.81], atol=1e-15, rtol=0)


def test_constant_beta():
    s = make_linear_schedule(7, 0.03, 0.03)
    assert np.all(s.beta == 0.03)


def test_default_alpha_bar_end_matches_product_oracle():
    s = make_linear_schedule(100, 1e-4, 0.02)
    prod = 1.0
    for i in range(100):
        prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 99)
    assert abs(s.alpha_bar[99] - prod) < 1e-12
    assert s.T == 100


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
def test_invalid_ranges(args):
    with pytest.raises(ValueError):
        make_linear_schedule(*args)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 400), st.floats(1e-6, 0.3), st.floats(0.0, 0.6))
def test_schedule_invariants(T, lo, extra):
    hi = min(lo + extra, 0.99)
    s = make_linear_schedule(T, lo, hi)
    assert np.all((s.beta > 0) & (s.beta < 1))
    assert np.all(np.diff(s.beta) >= 0)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.allclose(s.alpha, 1 - s.beta, atol=0, rtol=0)
    running = 1.0
    for t in range(T):
        running *= s.alpha[t]
        assert abs(s.alpha_bar[t] - running) < 1e-10


def _schedule(alpha_bar):
    ab = np.asarray(alpha_bar, dtype=np.float64)
    alpha = np.concatenate([[ab[0]], ab[1:] / ab[:-1]])
    return NoiseSchedule(1 - alpha, alpha, ab)


class TestAddNoise:
    def test_unit_weight_returns_target(self):
        s = _schedule([1.0, 0.5])
        x, e = torch.randn(3, 4, dtype=f64), torch.randn(3, 4, dtype=f64)
        assert torch.equal(add_noise(x, e, 0, s), x)

    def test_zero_weight_returns_noise(self):
        s = _schedule([0.5, 0.0])
        x, e = torch.randn(3, 4, dtype=f64), torch.randn(3, 4, dtype=f64)
        assert torch.equal(add_noise(x, e, 1, s), e)

    @pytest.mark.parametrize("t", [0, 37, 99])
    def test_variance_preserved(self, t):
        g = torch.Generator().manual_seed(t)
        x = torch.randn(100_000, generator=g, dtype=f64)
        e = torch.randn(100_000, generator=g, dtype=f64)
        out = add_noise(x, e, t, make_linear_schedule())
        assert abs(out.var().item() - 1.0) < 0.05

    def test_per_sample_timesteps_match_scalar(self):
        s = make_linear_schedule()
        x, e = torch.randn(3, 2, dtype=f64), torch.randn(3, 2, dtype=f64)
        t = torch.tensor([0, 50, 99])
        out = add_noise(x, e, t, s)
        for i in range(3):
            assert torch.allclose(out[i], add_noise(x[i], e[i], int(t[i]), s), atol=1e-15, rtol=0)

    def test_errors(self):
        s = make_linear_schedule()
        with pytest.raises(ValueError):
            add_noise(torch.zeros(2), torch.zeros(2), 100, s)
        with pytest.raises(ValueError):
            add_noise(torch.zeros(2), torch.zeros(2), torch.tensor([-1]), s)
        with pytest.raises(ValueError):
            add_noise(torch.zeros(2), torch.zeros(3), 0, s)


class TestCfg:
    def test_scale_one_is_conditional(self):
        u, c = torch.randn(5, dtype=f64), torch.randn(5, dtype=f64)
        assert torch.equal(cfg_combine(u, c, 1.0), c)

    def test_scale_zero_is_unconditional(self):
        u, c = torch.randn(5, dtype=f64), torch.randn(5, dtype=f64)
        assert torch.equal(cfg_combine(u, c, 0.0), u)

    def test_default_scale_value(self):
        assert cfg_combine(torch.zeros(1), torch.ones(1), 7.5).item() == 7.5

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-10, 10), st.floats(-10, 10), st.integers(0, 1000))
    def test_affine_in_scale(self, s1, s2, seed):
        g = torch.Generator().manual_seed(seed)
        u, c = torch.randn(6, generator=g, dtype=f64), torch.randn(6, generator=g, dtype=f64)
        lhs = cfg_combine(u, c, s1) + cfg_combine(u, c, s2)
        rhs = 2 * cfg_combine(u, c, (s1 + s2) / 2)
        assert torch.allclose(lhs, rhs, atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cfg_combine(torch.zeros(2), torch.zeros(3), 2.0)


class TestSampler:
    def test_ddpm_final_step_is_noise_free(self):
        s = make_linear_schedule()
        x, e = torch.randn(4, dtype=f64), torch.randn(4, dtype=f64)
        a = sampler_step(x, e, 0, s, "ddpm", torch.Generator().manual_seed(0))
        b = sampler_step(x, e, 0, s, "ddpm", torch.Generator().manual_seed(1))
        assert torch.equal(a, b)
        assert torch.allclose(a, predict_x0(x, e, 0, s), atol=1e-12, rtol=0)

    def test_ddim_chain_recovers_x0(self):
        s = make_linear_schedule()
        g = torch.Generator().manual_seed(0)
        x0 = torch.randn(64, generator=g, dtype=f64).clamp(-2.5, 2.5)
        eps = torch.randn(64, generator=g, dtype=f64)
        x = add_noise(x0, eps, 99, s)
        for t in range(99, -1, -1):
            x = sampler_step(x, eps, t, s, "ddim")
        assert (x - x0).abs().max().item() < 1e-5

    @pytest.mark.parametrize("t", [0, 1, 30, 99])
    def test_single_step_inversion(self, t):
        s = make_linear_schedule()
        x0 = torch.linspace(-2, 2, 9, dtype=f64)
        eps = torch.linspace(1, -1, 9, dtype=f64)
        out = sampler_step(add_noise(x0, eps, t, s), eps, t, s, "ddim", t_prev=-1)
        assert (out - x0).abs().max().item() < 1e-5

    def test_three_step_scalar_oracle(self):
        s = make_linear_schedule(3, 0.1, 0.3)
        ab = [0.9, 0.9 * 0.8, 0.9 * 0.8 * 0.7]
        x, eps_fn = 0.7, (lambda t: 0.1 * (t + 1))
        for t in (2, 1, 0):
            x0 = (x - math.sqrt(1 - ab[t]) * eps_fn(t)) / math.sqrt(ab[t])
            x0 = min(3.0, max(-3.0, x0))
            prev = ab[t - 1] if t > 0 else 1.0
            x = math.sqrt(prev) * x0 + math.sqrt(1 - prev) * eps_fn(t)
        y = torch.tensor([0.7], dtype=f64)
        for t in (2, 1, 0):
            y = sampler_step(y, torch.tensor([0.1 * (t + 1)], dtype=f64), t, s, "ddim")
        assert abs(y.item() - x) < 1e-10

    def test_ddim_strided_is_deterministic(self):
        s = make_linear_schedule()
        x = torch.randn(5, dtype=f64)
        e = torch.randn(5, dtype=f64)
        assert torch.equal(sampler_step(x, e, 50, s, t_prev=30), sampler_step(x, e, 50, s, t_prev=30))

    def test_x0_clipping(self):
        s = make_linear_schedule()
        x0 = predict_x0(torch.tensor([100.0], dtype=f64), torch.zeros(1, dtype=f64), 10, s)
        assert x0.item() == 3.0

    def test_range_errors(self):
        s = make_linear_schedule()
        with pytest.raises(ValueError):
            sampler_step(torch.zeros(1), torch.zeros(1), 100, s)
        with pytest.raises(ValueError):
            sampler_step(torch.zeros(1), torch.zeros(1), 5, s, t_prev=5)
        with pytest.raises(ValueError):
            sampler_step(torch.zeros(1), torch.zeros(1), 5, s, mode="euler")


def test_sampling_timesteps():
    ts = sampling_timesteps(100, 50)
    assert len(ts) == 50 and ts[0] == 99 and ts[-1] == 0
    assert all(a > b for a, b in zip(ts, ts[1:]))
    assert sampling_timesteps(10, 50) == list(range(9, -1, -1))
    with pytest.raises(ValueError):
        sampling_timesteps(10, 0)
