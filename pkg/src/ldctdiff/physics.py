"""CT noise model, shifted-Poisson degradation and the two diffusion schedules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PrelogProjection, Rng

__all__ = [
    "NoiseModelParams",
    "LambdaSchedule",
    "AlphaBarSchedule",
    "simulate_low_dose",
    "make_lambda_schedule",
    "shifted_poisson_degrade",
    "make_alpha_bar_schedule",
    "gaussian_forward",
]


@dataclass(frozen=True)
class NoiseModelParams:
    i0: float = 2.5e5
    sigma_e2: float = 10.0

    def __post_init__(self):
        if self.i0 <= 0:
            raise ValueError("i0 must be positive")
        if self.sigma_e2 < 0:
            raise ValueError("sigma_e2 must be non-negative")


def _unwrap(y):
    if isinstance(y, PrelogProjection):
        return np.asarray(y.data, dtype=np.float64), y
    return np.asarray(y, dtype=np.float64), None


def _rewrap(data, like, **meta):
    if like is None:
        return data
    return PrelogProjection(data, meta={**like.meta, **meta})


def simulate_low_dose(y0, dose_fraction: float, params: NoiseModelParams, rng: Rng):
    """Poisson + Gaussian measurement at ``dose_fraction * i0`` photons, renormalized.

    Electronic noise may push counts below zero; they are kept so the noise
    statistics stay exact. The log step clamps them later.
    """
    if not 0 < dose_fraction <= 1:
        raise ValueError(f"dose_fraction must lie in (0, 1], got {dose_fraction}")
    y, like = _unwrap(y0)
    if np.any(y < 0):
        raise ValueError("pre-log transmissions must be non-negative")
    i_ld = dose_fraction * params.i0
    counts = rng.poisson(i_ld * y)
    if params.sigma_e2 > 0:
        counts = counts + rng.normal(size=y.shape, scale=np.sqrt(params.sigma_e2))
    out = counts / i_ld
    if like is None:
        return PrelogProjection(out, meta={"i_ld": i_ld, "dose_fraction": dose_fraction})
    return _rewrap(out, like, i_ld=i_ld, dose_fraction=dose_fraction)


@dataclass(frozen=True, eq=False)
class LambdaSchedule:
    """Photon-count schedule ``values[t]`` for ``t = 0..tau``, strictly decreasing."""

    tau: int
    lambda_hi: float
    lambda_lo: float
    values: np.ndarray
    endpoint_at: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.tau + 1,):
            raise ValueError("values must have tau + 1 entries")
        if not np.all(np.diff(v) < 0):
            raise ValueError("lambda schedule must be strictly decreasing")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __getitem__(self, t: int) -> float:
        return float(self.values[t])


def make_lambda_schedule(tau: int = 10, lambda_hi: float = 3e5, lambda_lo: float = 2.5e4,
                         endpoint_at: int = 0) -> LambdaSchedule:
    """Harmonic interpolation: 1/lambda_t is affine in t.

    ``endpoint_at=0`` pins ``lambda_hi`` at t = 0, which reproduces
    ``l0*lt*tau / (lt*(tau - t) + l0*t)`` exactly. ``endpoint_at=1`` pins it
    at t = 1 instead; t = 0 is then the noiseless limit (+inf).
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if not lambda_hi > lambda_lo > 0:
        raise ValueError("need lambda_hi > lambda_lo > 0")
    t = np.arange(tau + 1, dtype=np.float64)
    if endpoint_at == 0:
        values = lambda_hi * lambda_lo * tau / (lambda_lo * (tau - t) + lambda_hi * t)
    elif endpoint_at == 1:
        if tau < 2:
            raise ValueError("endpoint_at=1 needs tau >= 2")
        inv = 1 / lambda_hi + (t - 1) / (tau - 1) * (1 / lambda_lo - 1 / lambda_hi)
        values = np.empty_like(t)
        values[0] = np.inf
        values[1:] = 1 / inv[1:]
    else:
        raise ValueError("endpoint_at must be 0 or 1")
    return LambdaSchedule(tau, lambda_hi, lambda_lo, values, endpoint_at)


def shifted_poisson_degrade(y0, t: int, sched: LambdaSchedule, sigma_e2: float, rng: Rng):
    """Draw Poisson(lambda_t * y0 + sigma_e2) / lambda_t per bin."""
    if not 1 <= t <= sched.tau:
        raise ValueError(f"t must lie in [1, {sched.tau}], got {t}")
    y, like = _unwrap(y0)
    lam = sched[t]
    rate = lam * y + sigma_e2
    assert np.all(rate >= 0), "negative Poisson rate"
    return _rewrap(rng.poisson(rate) / lam, like)


@dataclass(frozen=True, eq=False)
class AlphaBarSchedule:
    """``betas[t]`` and ``alpha_bars[t]`` for ``t = 0..T`` with ``betas[0] = 0``."""

    t_max: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        for name in ("betas", "alpha_bars"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.alpha_bars[0] != 1.0 or not np.all(np.diff(self.alpha_bars) < 0):
            raise ValueError("alpha_bar must start at 1 and decrease strictly")

    @property
    def noise_std(self) -> np.ndarray:
        """sqrt(1 - alpha_bar_t) for every t."""
        return np.sqrt(1.0 - self.alpha_bars)


def make_alpha_bar_schedule(t_max: int = 1000, beta_lo: float = 1e-4,
                            beta_hi: float = 0.02) -> AlphaBarSchedule:
    if not 0 < beta_lo <= beta_hi < 1:
        raise ValueError("need 0 < beta_lo <= beta_hi < 1")
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    betas = np.concatenate([[0.0], np.linspace(beta_lo, beta_hi, t_max)])
    return AlphaBarSchedule(t_max, betas, np.cumprod(1.0 - betas))


def gaussian_forward(x0, t: int, sched: AlphaBarSchedule, rng: Rng):
    """Return ``(x_t, eps)`` with x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    if not 1 <= t <= sched.t_max:
        raise ValueError(f"t must lie in [1, {sched.t_max}], got {t}")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = rng.normal(size=x0.shape)
    ab = sched.alpha_bars[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, eps
