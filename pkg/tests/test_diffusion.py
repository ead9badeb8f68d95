import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from posquery.diffusion import (NoiseSchedule, ddim_step, ddim_timesteps, ddpm_step, eps_to_x0, linear_schedule,
                                ode_euler_step, posterior_coefficients, posterior_params, q_sample, x0_to_eps,
                                check_timesteps)
from posquery.errors import InvalidRange, NonMonotonic, ShapeMismatch, TimestepOutOfRange

# mpmath, 30 digits
ABAR_1000 = 4.0358297653756833e-05
Q_EXAMPLE = 1.3776783996367751
COEF_X0 = 0.67763092717893843
COEF_XT = 0.31943828249996996
BETA_TILDE = 0.071428571428571429
DDIM_EXAMPLE = 1.2649110640673517

TWO = linear_schedule(2, 0.1, 0.2)
SCHED = linear_schedule(200, 1e-4, 0.02)


def scalar_coefficients(t, sched):
    """Posterior coefficients from Python floats, built up step by step."""
    betas = [float(b) for b in sched.betas]
    ab = 1.0
    ab_list = [1.0]
    for b in betas:
        ab *= 1.0 - b
        ab_list.append(ab)
    b, a = betas[t - 1], 1.0 - betas[t - 1]
    ab_t, ab_p = ab_list[t], ab_list[t - 1]
    return (math.sqrt(ab_p) * b / (1 - ab_t), math.sqrt(a) * (1 - ab_p) / (1 - ab_t), (1 - ab_p) / (1 - ab_t) * b)


# -- schedule ------------------------------------------------------------------

def test_single_step_schedule():
    s = linear_schedule(1, 0.5, 0.5)
    np.testing.assert_array_equal(s.alphas, [0.5])
    np.testing.assert_array_equal(s.alpha_bars, [1.0, 0.5])


def test_two_step_schedule():
    np.testing.assert_allclose(TWO.alpha_bars, [1.0, 0.9, 0.72], rtol=1e-15)


def test_thousand_step_schedule_against_high_precision():
    s = linear_schedule()
    assert s.alpha_bars[1] == pytest.approx(0.9999, rel=1e-15)
    assert s.alpha_bars[1000] == pytest.approx(ABAR_1000, rel=1e-10)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_validation(args):
    with pytest.raises(InvalidRange):
        linear_schedule(*args)


def test_schedule_arrays_are_read_only_float64():
    assert SCHED.alpha_bars.dtype == np.float64
    with pytest.raises(ValueError):
        SCHED.betas[0] = 0.5
    assert SCHED.to_dict() == {"schedule_kind": "linear", "T": 200, "beta_start": 1e-4, "beta_end": 0.02}
    with pytest.raises(InvalidRange):
        NoiseSchedule(10, 1e-4, 0.02, kind="cosine")


# -- forward process -----------------------------------------------------------

def test_q_sample_examples():
    assert q_sample(np.array([1.0]), 2, np.array([1.0]), TWO)[0] == pytest.approx(Q_EXAMPLE, rel=1e-15)
    z0 = np.array([0.3, -2.0])
    np.testing.assert_allclose(q_sample(z0, 2, np.zeros(2), TWO), math.sqrt(0.72) * z0, rtol=1e-15)
    e = np.array([0.7, 1.1])
    np.testing.assert_allclose(q_sample(np.zeros(2), 2, e, TWO), math.sqrt(0.28) * e, rtol=1e-15)


def test_q_sample_errors():
    with pytest.raises(ShapeMismatch):
        q_sample(np.zeros(3), 1, np.zeros(2), TWO)
    with pytest.raises(TimestepOutOfRange):
        q_sample(np.zeros(2), 3, np.zeros(2), TWO)
    with pytest.raises(TimestepOutOfRange):
        q_sample(np.zeros(2), 0, np.zeros(2), TWO)


def test_eps_to_x0_examples():
    assert eps_to_x0(np.array([Q_EXAMPLE]), np.array([1.0]), 2, TWO)[0] == pytest.approx(1.0, rel=1e-14)
    z = np.array([0.5, -1.5])
    np.testing.assert_allclose(eps_to_x0(z, np.zeros(2), 2, TWO), z / math.sqrt(0.72), rtol=1e-15)


def test_per_sample_timesteps(rng):
    z0 = rng.standard_normal((3, 4, 2))
    eps = rng.standard_normal((3, 4, 2))
    t = np.array([1, 50, 200])
    batched = q_sample(z0, t, eps, SCHED)
    for i, ti in enumerate(t):
        np.testing.assert_allclose(batched[i], q_sample(z0[i], int(ti), eps[i], SCHED), rtol=1e-15)


@given(st.integers(1, 200), st.integers(0, 2**32 - 1))
def test_round_trip(t, seed):
    r = np.random.default_rng(seed)
    z0, eps = r.standard_normal(16), r.standard_normal(16)
    z_t = q_sample(z0, t, eps, SCHED)
    np.testing.assert_allclose(eps_to_x0(z_t, eps, t, SCHED), z0, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(x0_to_eps(z_t, z0, t, SCHED), eps, rtol=1e-10, atol=1e-10)


# -- posterior -------------------------------------------------------------------

def test_posterior_example_against_high_precision():
    c0, ct, var = posterior_coefficients(2, TWO)
    assert c0 == pytest.approx(COEF_X0, rel=1e-14)
    assert ct == pytest.approx(COEF_XT, rel=1e-14)
    assert var == pytest.approx(BETA_TILDE, rel=1e-14)


def test_posterior_boundary_and_linearity():
    z0_hat = np.array([0.2, -0.4])
    mu, var = posterior_params(np.array([5.0, 5.0]), z0_hat, 1, SCHED)
    np.testing.assert_allclose(mu, z0_hat, rtol=1e-15)
    assert var == 0.0
    mu, _ = posterior_params(np.zeros(3), np.zeros(3), 100, SCHED)
    np.testing.assert_array_equal(mu, 0.0)


@pytest.mark.parametrize("t", [1, 2, 17, 100, 199, 200])
def test_posterior_coefficients_vs_scalar_oracle(t):
    got = posterior_coefficients(t, SCHED)
    for g, w in zip(got, scalar_coefficients(t, SCHED)):
        assert abs(g - w) <= 1e-12


def test_beta_tilde_bounds():
    for t in range(2, 201):
        var = posterior_coefficients(t, SCHED)[2]
        assert 0 < var <= SCHED.beta(t)
    assert posterior_coefficients(1, SCHED)[2] == 0.0


# -- reverse steps -----------------------------------------------------------------

def test_ddpm_is_deterministic_at_t1():
    z, e = np.array([0.3, 0.1]), np.array([0.5, -0.5])
    a = ddpm_step(z, e, 1, SCHED, np.random.default_rng(0))
    b = ddpm_step(z, e, 1, SCHED, np.random.default_rng(99))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a, eps_to_x0(z, e, 1, SCHED))


def test_ddpm_exact_noise_oracle_two_steps():
    z0, eps = np.array([0.8, -0.3]), np.array([1.2, 0.4])
    z2 = q_sample(z0, 2, eps, TWO)
    g = np.random.default_rng(5).standard_normal(2)
    out = ddpm_step(z2, eps, 2, TWO, np.random.default_rng(5))
    mu = COEF_X0 * z0 + COEF_XT * z2
    np.testing.assert_allclose(out, mu + math.sqrt(BETA_TILDE) * g, rtol=1e-13)


def test_ddim_examples():
    assert ddim_step(np.array([Q_EXAMPLE]), np.array([1.0]), 2, 1, TWO)[0] == pytest.approx(DDIM_EXAMPLE, rel=1e-12)


def test_ddim_rejects_bad_pairs():
    z = np.zeros(2)
    with pytest.raises(NonMonotonic):
        ddim_step(z, z, 5, 5, SCHED)
    with pytest.raises(NonMonotonic):
        ddim_step(z, z, 5, 6, SCHED)
    with pytest.raises(TimestepOutOfRange):
        ddim_step(z, z, 201, 0, SCHED)


@given(st.integers(1, 200), st.integers(0, 2**32 - 1))
def test_ddim_exact_noise_full_recovery(t, seed):
    r = np.random.default_rng(seed)
    z0, eps = r.standard_normal(8), r.standard_normal(8)
    out = ddim_step(q_sample(z0, t, eps, SCHED), eps, t, 0, SCHED)
    np.testing.assert_allclose(out, z0, rtol=0, atol=1e-9)


def test_ddim_trajectory_is_bit_identical(rng):
    z = rng.standard_normal(10)
    w = rng.standard_normal((10, 10)) * 0.1

    def run():
        y = z.copy()
        for t in range(SCHED.T, 0, -1):
            y = ddim_step(y, w @ y, t, t - 1, SCHED)
        return y

    assert np.array_equal(run(), run())


def test_euler_zero_step_and_degenerate_slice(rng):
    z, e = rng.standard_normal(5), rng.standard_normal(5)
    np.testing.assert_allclose(ode_euler_step(z, e, 50, 50, SCHED), z, rtol=1e-14)
    s = linear_schedule(4, 1e-4, 0.02)
    np.testing.assert_allclose(ode_euler_step(z, np.zeros(5), 1, 1, s), z, rtol=1e-15)


def test_euler_is_second_order_close_to_ddim(rng):
    z, e = rng.standard_normal(64), rng.standard_normal(64)
    t = 120
    errs, gaps = [], []
    for tp in (60, 90, 105, 113):
        errs.append(np.max(np.abs(ode_euler_step(z, e, t, tp, SCHED) - ddim_step(z, e, t, tp, SCHED))))
        gaps.append(SCHED.sigma(t) - SCHED.sigma(tp))
    c = max(err / gap**2 for err, gap in zip(errs, gaps))
    assert all(err <= c * gap**2 + 1e-15 for err, gap in zip(errs, gaps))
    assert errs == sorted(errs, reverse=True)


# -- step lists ------------------------------------------------------------------

def test_ddim_timesteps():
    assert ddim_timesteps(200, 20) == list(range(200, -1, -10))
    ts = ddim_timesteps(1000, 7)
    assert ts[0] == 1000 and ts[-1] == 0 and len(ts) == 8
    with pytest.raises(InvalidRange):
        ddim_timesteps(10, 11)


def test_check_timesteps():
    assert check_timesteps([10, 4, 0], 10) == [10, 4, 0]
    for bad in ([10, 10, 0], [10, 4], [11, 0], []):
        with pytest.raises(NonMonotonic):
            check_timesteps(bad, 10)
