import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from facediff.diffusion import (DiffusionSchedule, SamplerConfig, ddim_step, forward_noise,
                                guided_x0, make_schedule, sample, uniform_substeps)


@pytest.mark.parametrize("kind", ["linear", "cosine"])
@pytest.mark.parametrize("N", [1, 2, 10, 50, 1000])
def test_schedule_invariants(kind, N):
    s = make_schedule(N, kind)
    assert s.alpha_bars[0] == 1.0
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert 0 < s.alpha_bars[-1] < 0.02
    assert s.steps == N


def test_linear_1000_ends_below_one_percent():
    s = make_schedule(1000)
    prod = 1.0
    for b in np.linspace(1e-4, 2e-2, 1000):
        prod *= 1 - b
    assert s.alpha_bars[-1] == pytest.approx(prod, rel=1e-9)
    assert s.alpha_bars[-1] < 0.01
    assert s.betas[0] == pytest.approx(1e-4) and s.betas[-1] == pytest.approx(2e-2)


def test_schedule_errors():
    with pytest.raises(ValueError):
        make_schedule(10, "quadratic")
    with pytest.raises(ValueError):
        make_schedule(0)
    with pytest.raises(ValueError):
        DiffusionSchedule(np.array([0.5]), np.array([1.0, 0.9]))  # inconsistent end value


def test_forward_noise_cases(rng):
    s = make_schedule(50)
    x0, eps = rng.standard_normal((4, 3, 3)), rng.standard_normal((4, 3, 3))
    assert np.array_equal(forward_noise(x0, 0, eps, s), x0)
    np.testing.assert_array_equal(forward_noise(np.zeros_like(x0), 7, eps, s),
                                  math.sqrt(1 - s.alpha_bars[7]) * eps)
    prod = 1.0
    for b in s.betas[:25]:
        prod *= 1 - b
    expected = math.sqrt(prod) * x0 + math.sqrt(1 - prod) * eps
    np.testing.assert_allclose(forward_noise(x0, 25, eps, s), expected, atol=1e-7)
    with pytest.raises(ValueError):
        forward_noise(x0, 51, eps, s)


def test_ddim_inverts_forward_noise(rng):
    s = make_schedule(50)
    x0, eps = rng.standard_normal((3, 2, 3)), rng.standard_normal((3, 2, 3))
    x_n = forward_noise(x0, 30, eps, s)
    np.testing.assert_allclose(ddim_step(x_n, x0, 30, 12, s), forward_noise(x0, 12, eps, s),
                               atol=1e-12)
    np.testing.assert_array_equal(ddim_step(x_n, x0, 30, 0, s), x0)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(2, 50), st.floats(0, 1),
       st.floats(-2, 2))
def test_ddim_scalar_oracle(xn, x0h, n, eta, z):
    s = make_schedule(50)
    n_prev = n // 2
    rng_value = np.array([[[z]]])

    class FixedRng:
        def standard_normal(self, shape):
            return rng_value.reshape(shape)

    got = ddim_step(np.array([[[xn]]]), np.array([[[x0h]]]), n, n_prev, s, eta, FixedRng())
    ref = oracles.ddim_scalar(xn, x0h, s.alpha_bars[n], s.alpha_bars[n_prev], eta, z)
    assert got.item() == pytest.approx(ref, abs=1e-7)


def test_ddim_errors():
    s = make_schedule(10)
    x = np.zeros((1, 1, 3))
    with pytest.raises(ValueError):
        ddim_step(x, x, 3, 3, s)
    with pytest.raises(ValueError):
        ddim_step(x, x, 11, 3, s)
    with pytest.raises(ValueError):
        ddim_step(x, x, 5, 2, s, eta=0.5)  # eta > 0 without rng


def test_guidance_mixing(rng):
    a, b = rng.standard_normal((2, 3, 3)), rng.standard_normal((2, 3, 3))
    assert np.array_equal(guided_x0(a, b, 0.0), a)
    np.testing.assert_allclose(guided_x0(a, a, 3.7), a, atol=1e-12)
    np.testing.assert_array_equal(guided_x0(a, b, 1.0), 2 * a - b)
    with pytest.raises(ValueError):
        guided_x0(a, b[:1], 1.0)


@given(st.integers(1, 200), st.data())
def test_substeps_strictly_decrease(N, data):
    S = data.draw(st.integers(1, N))
    steps = uniform_substeps(N, S)
    assert steps[0] == N and steps[-1] == 0 and len(steps) == S + 1
    assert all(a > b for a, b in zip(steps, steps[1:]))


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(step_count=0)
    with pytest.raises(ValueError):
        SamplerConfig(guidance_scale=-1)
    with pytest.raises(ValueError):
        SamplerConfig(step_count=2, substeps=(10, 10, 0))
    cfg = SamplerConfig(step_count=2, substeps=(10, 4, 0))
    assert cfg.schedule_for(10) == (10, 4, 0)
    with pytest.raises(ValueError):
        cfg.schedule_for(20)


class Recorder:
    """Oracle denoiser returning a fixed x0 and logging which branch ran."""

    vertex_count = 2

    def __init__(self, x0):
        self.x0, self.calls = x0, []

    def __call__(self, x, audio, style, n):
        self.calls.append(("uncond" if not np.any(audio) else "cond", n))
        return self.x0


@pytest.mark.parametrize("steps", [(50, 0), (50, 30, 10, 0), (50, 49, 2, 1, 0)])
def test_round_trip_any_substep_schedule(steps, rng):
    s = make_schedule(50)
    x0 = rng.standard_normal((4, 2, 3))
    cfg = SamplerConfig(step_count=len(steps) - 1, substeps=steps)
    out, passes = sample(Recorder(x0), np.ones((4, 3)), 0, cfg, s, rng)
    np.testing.assert_allclose(out.offsets, x0, atol=1e-5)


def test_single_step_oracle_is_exact(rng):
    x0 = rng.standard_normal((5, 2, 3))
    out, passes = sample(Recorder(x0), np.ones((5, 3)), 0, SamplerConfig(step_count=1),
                         make_schedule(50), rng)
    assert np.array_equal(out.offsets, x0) and passes == 1


@pytest.mark.parametrize("T", [25, 250])
def test_pass_count_ignores_length(T, rng):
    s = make_schedule(50)
    x0 = np.zeros((T, 2, 3))
    rec = Recorder(x0)
    _, p0 = sample(rec, np.ones((T, 3)), 0, SamplerConfig(10), s, rng)
    assert p0 == 10 and all(kind == "cond" for kind, _ in rec.calls)
    rec = Recorder(x0)
    _, p1 = sample(rec, np.ones((T, 3)), 0, SamplerConfig(10, guidance_scale=0.5), s, rng)
    assert p1 == 20
    assert [k for k, _ in rec.calls] == ["cond", "uncond"] * 10


def test_sampling_is_deterministic_for_a_seed():
    from facediff.denoiser import Denoiser, DenoiserConfig
    cfg = DenoiserConfig(hidden_dim=8, ff_dim=8, heads=2, vertex_count=3, feature_dim=4,
                         diffusion_steps=20)
    model = Denoiser(cfg, seed=1)
    audio = np.random.default_rng(0).standard_normal((12, 4))
    runs = [sample(model, audio, 1, SamplerConfig(5), make_schedule(20),
                   np.random.default_rng(9))[0].offsets for _ in range(2)]
    assert runs[0].tobytes() == runs[1].tobytes()


def test_noise_energy_grows_with_step():
    s = make_schedule(50)
    rng = np.random.default_rng(0)
    draws = 1000
    means = []
    for n in range(0, 51, 5):
        vals = [float(np.sum(forward_noise(np.zeros(3), n, rng.standard_normal(3), s) ** 2))
                for _ in range(draws)]
        means.append((np.mean(vals), np.std(vals) / math.sqrt(draws)))
    for (m0, e0), (m1, e1) in zip(means, means[1:]):
        assert m1 >= m0 - 3 * math.hypot(e0, e1)


def test_sample_rejects_empty_audio(rng):
    with pytest.raises(ValueError):
        sample(Recorder(np.zeros((0, 2, 3))), np.zeros((0, 3)), 0, SamplerConfig(),
               make_schedule(50), rng)
