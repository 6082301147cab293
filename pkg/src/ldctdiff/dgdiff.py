"""Doubly guided Gaussian diffusion for image-domain refinement.

All images here are unit-scaled: the [-1000, 1000] HU window mapped to [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .core import Rng
from .nn import TimeConditionedRegressor, TrainConfig, TrainResult, fit, local_mean, predict, random_crops
from .physics import AlphaBarSchedule, gaussian_forward

__all__ = [
    "DgdiffModel",
    "GuidanceState",
    "prior_batches",
    "train_image_prior",
    "estimate_x0",
    "s1_weight",
    "guide_noisy",
    "guide_denoised",
    "match_image_timestep",
    "dgdiff_refine",
    "sample_unconditional",
]


@dataclass(eq=False)
class DgdiffModel:
    """Noise estimator eps(x_t, t) over unit-scaled images.

    The network input is ``[x_t, (x_t - m) / sqrt(1 - ab_t)]`` with ``m`` the
    3x3 local mean, so the noise it must find arrives at unit scale.
    """

    net: TimeConditionedRegressor
    schedule: AlphaBarSchedule
    s2: float = 0.8

    def __post_init__(self):
        if not 0 <= self.s2 <= 1:
            raise ValueError("s2 must lie in [0, 1]")

    def features(self, x_t: np.ndarray, t) -> np.ndarray:
        std = self.schedule.noise_std[np.asarray(t)]
        std = std.reshape(std.shape + (1,) * (x_t.ndim - std.ndim)) if std.ndim else float(std)
        return np.stack([x_t, (x_t - local_mean(x_t)) / std], axis=-3)

    def eps(self, x_t, t: int) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=np.float64)
        return predict(self.net, self.features(x_t, t), t)


@dataclass(frozen=True, eq=False)
class GuidanceState:
    x_ld: np.ndarray
    x_hat0: np.ndarray
    sigma_ld: float
    s1: float

    @classmethod
    def from_images(cls, x_ld, x_hat0) -> "GuidanceState":
        x_ld = np.asarray(x_ld, dtype=np.float64)
        x_hat0 = np.asarray(x_hat0, dtype=np.float64)
        _same(x_ld, x_hat0)
        sigma = float(np.std(x_ld - x_hat0))
        return cls(x_ld, x_hat0, sigma, s1_weight(sigma))


def _same(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def prior_batches(dataset: Sequence, model: DgdiffModel, cfg: TrainConfig, rng: Rng,
                  t_focus: int = 0) -> Callable[[int], tuple]:
    """Batch sampler for epsilon prediction: ``it -> (features, t, eps)``.

    t is uniform on 1..T. With ``t_focus > 0`` half of each batch instead
    draws t uniformly from 1..t_focus, the low-noise steps refinement uses.
    """
    data = [np.asarray(x, dtype=np.float64) for x in dataset]
    if not data:
        raise ValueError("empty training set")
    T = model.schedule.t_max

    def sample_batch(_it):
        idx = rng.integers(0, len(data), size=cfg.batch_size)
        x0 = random_crops(data, idx, cfg.crop, rng, wrap_rows=False)
        ts = rng.integers(1, T + 1, size=cfg.batch_size)
        if t_focus > 0:
            half = cfg.batch_size // 2
            ts[:half] = rng.integers(1, min(t_focus, T) + 1, size=half)
        pairs = [gaussian_forward(x, int(t), model.schedule, rng) for x, t in zip(x0, ts)]
        x_t = np.stack([p[0] for p in pairs])
        eps = np.stack([p[1] for p in pairs])
        return (
            torch.from_numpy(model.features(x_t, ts).astype(np.float32)),
            torch.from_numpy(ts.astype(np.float32)),
            torch.from_numpy(eps[:, None].astype(np.float32)),
        )

    return sample_batch


def train_image_prior(dataset: Sequence, model: DgdiffModel, cfg: TrainConfig, rng: Rng,
                      t_focus: int = 0,
                      progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Standard epsilon-prediction training on unit-scaled normal-dose images."""
    return fit(model.net, prior_batches(dataset, model, cfg, rng, t_focus), cfg, progress)


def estimate_x0(x_t, t: int, model) -> np.ndarray:
    """Invert the forward marginal using the predicted noise."""
    sched = model.schedule
    if not 1 <= t <= sched.t_max:
        raise ValueError(f"t must lie in [1, {sched.t_max}], got {t}")
    x_t = np.asarray(x_t, dtype=np.float64)
    ab = sched.alpha_bars[t]
    return (x_t - math.sqrt(1.0 - ab) * model.eps(x_t, t)) / math.sqrt(ab)


def s1_weight(sigma_ld: float) -> float:
    """Noisy-sample weight: 0.7 e^(5000 s^2) / (10 + e^(5000 s^2)), in [0.7/11, 0.7)."""
    if sigma_ld < 0:
        raise ValueError("sigma_ld must be non-negative")
    z = 5000.0 * sigma_ld**2
    # 0.7 * e^z / (10 + e^z) rewritten to avoid overflow for large z
    return 0.7 / (1.0 + 10.0 * math.exp(-z))


def guide_noisy(x_t, x_ld, t: int, s1: float, sched: AlphaBarSchedule) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.float64)
    x_ld = np.asarray(x_ld, dtype=np.float64)
    _same(x_t, x_ld)
    if not 0 <= s1 <= 1:
        raise ValueError("s1 must lie in [0, 1]")
    return s1 * x_t + (1.0 - s1) * (math.sqrt(sched.alpha_bars[t]) * x_ld)


def guide_denoised(x_tilde0, x_hat0, s2: float) -> np.ndarray:
    x_tilde0 = np.asarray(x_tilde0, dtype=np.float64)
    x_hat0 = np.asarray(x_hat0, dtype=np.float64)
    _same(x_tilde0, x_hat0)
    if not 0 <= s2 <= 1:
        raise ValueError("s2 must lie in [0, 1]")
    return s2 * x_tilde0 + (1.0 - s2) * x_hat0


def match_image_timestep(x_ld, x_hat0, sched: AlphaBarSchedule) -> int:
    """Step whose noise std sqrt(1 - ab_t) is closest to std(x_ld - x_hat0)."""
    x_ld = np.asarray(x_ld, dtype=np.float64)
    x_hat0 = np.asarray(x_hat0, dtype=np.float64)
    _same(x_ld, x_hat0)
    return _closest_step(float(np.std(x_ld - x_hat0)), sched)


def _closest_step(sigma: float, sched: AlphaBarSchedule) -> int:
    return int(np.argmin(np.abs(sched.noise_std[1:] - sigma))) + 1


def dgdiff_refine(x_ld, x_hat0, model, rng: Rng) -> tuple[np.ndarray, int]:
    """Refine ``x_hat0`` over the last t* steps; returns ``(x0, t*)``.

    Each step guides the noisy sample towards the low-dose image, estimates
    x0, pulls that towards ``x_hat0`` and re-noises the result to t - 1.
    """
    g = GuidanceState.from_images(x_ld, x_hat0)
    sched = model.schedule
    t_star = _closest_step(g.sigma_ld, sched)
    x_t, _ = gaussian_forward(g.x_hat0, t_star, sched, rng)
    x0 = g.x_hat0
    for t in range(t_star, 0, -1):
        x_guided = guide_noisy(x_t, g.x_ld, t, g.s1, sched)
        x_tilde0 = estimate_x0(x_guided, t, model)
        x0 = guide_denoised(x_tilde0, g.x_hat0, model.s2)
        if t > 1:
            x_t, _ = gaussian_forward(x0, t - 1, sched, rng)
    return x0, t_star


def sample_unconditional(model: DgdiffModel, shape: tuple[int, int], rng: Rng) -> np.ndarray:
    """Ancestral DDPM sampling from pure noise (posterior variance beta-tilde)."""
    sched = model.schedule
    x = rng.normal(size=shape)
    for t in range(sched.t_max, 0, -1):
        ab, ab_prev, beta = sched.alpha_bars[t], sched.alpha_bars[t - 1], sched.betas[t]
        eps = model.eps(x, t)
        mean = (x - beta / math.sqrt(1 - ab) * eps) / math.sqrt(1 - beta)
        if t > 1:
            var = beta * (1 - ab_prev) / (1 - ab)
            x = mean + math.sqrt(var) * rng.normal(size=shape)
        else:
            x = mean
    return x
