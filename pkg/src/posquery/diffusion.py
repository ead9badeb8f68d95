"""Noise schedule and closed-form diffusion updates.

Timesteps are 1-based (``1..T``); index 0 is the clean state with
``alpha_bar[0] = 1``. Schedule arrays are float64 no matter what precision
the model runs in.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidRange, NonMonotonic, ShapeMismatch, TimestepOutOfRange


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    kind: str = "linear"
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alphas: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bars: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind != "linear":
            raise InvalidRange(f"unsupported schedule kind {self.kind!r}")
        if not (isinstance(self.T, (int, np.integer)) and self.T >= 1):
            raise InvalidRange(f"T must be an integer >= 1, got {self.T!r}")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise InvalidRange(f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}")
        betas = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        alphas = 1.0 - betas
        alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
        for name, arr in (("betas", betas), ("alphas", alphas), ("alpha_bars", alpha_bars)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def beta(self, t):
        return self.betas[t - 1]

    def alpha(self, t):
        return self.alphas[t - 1]

    def sigma(self, t):
        """Noise-to-signal ratio ``sqrt((1 - abar_t) / abar_t)``."""
        ab = self.alpha_bars[t]
        return np.sqrt((1.0 - ab) / ab)

    def to_dict(self):
        return {"schedule_kind": self.kind, "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def linear_schedule(T=1000, beta_start=1e-4, beta_end=0.02):
    return NoiseSchedule(int(T), float(beta_start), float(beta_end))


def _check_t(t, sched, lo=1):
    t_int = np.asarray(t)
    if t_int.dtype.kind not in "iu" or np.any(t_int < lo) or np.any(t_int > sched.T):
        raise TimestepOutOfRange(f"timestep {t} outside [{lo}, {sched.T}]")
    return t_int


def _bcast(coef, like):
    """Broadcast a per-sample coefficient (scalar or (B,)) over a (B, ...) array."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (np.ndim(like) - coef.ndim))


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatch(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")


def q_sample(z0, t, eps, sched):
    """Forward corruption ``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``.

    ``t`` may be a scalar or one timestep per leading batch element.
    """
    _same_shape(z0, eps)
    t = _check_t(t, sched)
    ab = _bcast(sched.alpha_bars[t], z0)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def eps_to_x0(z_t, eps_hat, t, sched):
    _same_shape(z_t, eps_hat)
    t = _check_t(t, sched)
    ab = _bcast(sched.alpha_bars[t], z_t)
    return (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def x0_to_eps(z_t, x0_hat, t, sched):
    _same_shape(z_t, x0_hat)
    t = _check_t(t, sched)
    ab = _bcast(sched.alpha_bars[t], z_t)
    return (z_t - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)


def posterior_coefficients(t, sched):
    """``(coef_x0, coef_xt, variance)`` of q(z_{t-1} | z_t, z_0)."""
    t = int(_check_t(t, sched))
    if t == 1:
        # abar_0 = 1 collapses the posterior onto z0_hat; avoid beta/(1-(1-beta)) rounding
        return 1.0, 0.0, 0.0
    ab_t = sched.alpha_bars[t]
    ab_prev = sched.alpha_bars[t - 1]
    beta = sched.betas[t - 1]
    alpha = sched.alphas[t - 1]
    coef_x0 = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
    coef_xt = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_t)
    var = (1.0 - ab_prev) / (1.0 - ab_t) * beta
    return coef_x0, coef_xt, var


def posterior_params(z_t, z0_hat, t, sched):
    _same_shape(z_t, z0_hat)
    c0, ct, var = posterior_coefficients(t, sched)
    return c0 * z0_hat + ct * z_t, float(var)


def ddpm_step_from_x0(z_t, z0_hat, t, sched, rng):
    mu, var = posterior_params(z_t, z0_hat, t, sched)
    if int(t) == 1:
        return mu
    return mu + np.sqrt(var) * rng.standard_normal(np.shape(z_t))


def ddpm_step(z_t, eps_hat, t, sched, rng):
    """Ancestral step; deterministic at ``t == 1`` where the variance is zero."""
    z0_hat = eps_to_x0(z_t, eps_hat, t, sched)
    return ddpm_step_from_x0(z_t, z0_hat, t, sched, rng)


def _check_pair(t, t_prev, sched):
    _check_t(t, sched)
    _check_t(t_prev, sched, lo=0)
    if int(t_prev) > int(t):
        raise NonMonotonic(f"t_prev={t_prev} must not exceed t={t}")


def ddim_step_from_x0(z0_hat, eps_hat, t_prev, sched):
    ab_prev = sched.alpha_bars[t_prev]
    return np.sqrt(ab_prev) * z0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def ddim_step(z_t, eps_hat, t, t_prev, sched):
    """Deterministic x0-form jump from ``t`` to ``t_prev``."""
    _check_pair(t, t_prev, sched)
    if int(t_prev) == int(t):
        raise NonMonotonic(f"t_prev={t_prev} must be < t={t}")
    z0_hat = eps_to_x0(z_t, eps_hat, t, sched)
    return ddim_step_from_x0(z0_hat, eps_hat, t_prev, sched)


def ode_euler_step(z_t, eps_hat, t, t_prev, sched):
    """One Euler step of the probability-flow ODE in the sigma variable.

    ``z_prev = sqrt(ab_prev) * (z_t / sqrt(ab_t)
    + 0.5 * (s_prev^2 - s_t^2) * eps_hat / s_t)`` with
    ``s = sqrt((1 - ab) / ab)``. ``t_prev == t`` is a zero step.
    """
    _same_shape(z_t, eps_hat)
    _check_pair(t, t_prev, sched)
    ab_t = sched.alpha_bars[t]
    ab_prev = sched.alpha_bars[t_prev]
    ratio_t = (1.0 - ab_t) / ab_t
    ratio_prev = (1.0 - ab_prev) / ab_prev
    return np.sqrt(ab_prev) * (
        z_t / np.sqrt(ab_t) + 0.5 * (ratio_prev - ratio_t) * np.sqrt(ab_t / (1.0 - ab_t)) * eps_hat
    )


def ddim_timesteps(T, steps):
    """Uniform stride list ``[T, ..., 0]`` with ``steps`` jumps."""
    if not (1 <= steps <= T):
        raise InvalidRange(f"steps must be in [1, {T}], got {steps}")
    ts = np.unique(np.round(np.linspace(0, T, steps + 1)).astype(int))[::-1]
    return [int(v) for v in ts]


def check_timesteps(ts, T):
    ts = [int(v) for v in ts]
    if not ts or ts[-1] != 0 or ts[0] > T or any(a <= b for a, b in zip(ts, ts[1:])):
        raise NonMonotonic(f"step list must be strictly decreasing, start <= {T} and end at 0: {ts}")
    return ts
