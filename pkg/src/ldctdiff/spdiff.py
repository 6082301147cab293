"""Shifted-Poisson diffusion in the pre-log projection domain.

Training only ever sees normal-dose projections: the degradation operator
synthesises every noisy input. Inference starts at the schedule step whose
photon count best matches the scan and walks back to t = 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .core import PrelogProjection, Rng
from .nn import TimeConditionedRegressor, TrainConfig, TrainResult, fit, local_mean, predict, random_crops
from .physics import LambdaSchedule, shifted_poisson_degrade

__all__ = [
    "SpdiffModel",
    "spdiff_batches",
    "train_spdiff",
    "spdiff_sample_step",
    "match_projection_timestep",
    "spdiff_denoise",
]


@dataclass(eq=False)
class SpdiffModel:
    """Restoration network R(y_t, t) ~ y0 with its photon schedule.

    The network sees ``[y_t, (y_t - m) / s]`` where ``m`` is the 3x3 local
    mean and ``s = sqrt(m / lambda_t)`` the shifted-Poisson noise std it
    implies, and predicts the correction ``(y0 - y_t) / s``.
    """

    net: TimeConditionedRegressor
    schedule: LambdaSchedule
    sigma_e2: float = 10.0

    def noise_scale(self, y_t: np.ndarray, t) -> np.ndarray:
        lam = self._lam(t, y_t.ndim)
        m = np.maximum(local_mean(y_t), 1.0 / lam)
        return np.sqrt(m / lam)

    def _lam(self, t, ndim: int):
        lam = self.schedule.values[np.asarray(t)]
        return lam.reshape(lam.shape + (1,) * (ndim - lam.ndim)) if lam.ndim else float(lam)

    def features(self, y_t: np.ndarray, scale: np.ndarray) -> np.ndarray:
        hp = (y_t - local_mean(y_t)) / scale
        return np.stack([y_t, hp], axis=-3)

    def restore(self, y_t, t: int) -> np.ndarray:
        y_t = np.asarray(y_t, dtype=np.float64)
        s = self.noise_scale(y_t, t)
        return y_t + s * predict(self.net, self.features(y_t, s), t)


def spdiff_batches(dataset: Sequence, model: SpdiffModel, cfg: TrainConfig, rng: Rng) -> Callable[[int], tuple]:
    """Batch sampler for restoration training: ``it -> (features, t, target, weight)``.

    ``dataset`` holds clean normal-dose pre-log projections. Crops wrap
    around in the view direction, which is periodic over a full scan. Target
    and weight are chosen so the weighted MSE equals ``|y0 - R(y_t, t)|^2``.
    """
    data = [np.asarray(getattr(y, "data", y), dtype=np.float64) for y in dataset]
    if not data:
        raise ValueError("empty training set")
    if any(np.any(y < 0) for y in data):
        raise ValueError("training projections must be non-negative")
    tau = model.schedule.tau

    def sample_batch(_it):
        idx = rng.integers(0, len(data), size=cfg.batch_size)
        y0 = random_crops(data, idx, cfg.crop, rng, wrap_rows=True)
        ts = rng.integers(1, tau + 1, size=cfg.batch_size)
        y_t = np.stack([
            shifted_poisson_degrade(y, int(t), model.schedule, model.sigma_e2, rng) for y, t in zip(y0, ts)
        ])
        s = model.noise_scale(y_t, ts)
        return (
            torch.from_numpy(model.features(y_t, s).astype(np.float32)),
            torch.from_numpy(ts.astype(np.float32)),
            torch.from_numpy(((y0 - y_t) / s)[:, None].astype(np.float32)),
            torch.from_numpy((s * s)[:, None].astype(np.float32)),
        )

    return sample_batch


def train_spdiff(dataset: Sequence, model: SpdiffModel, cfg: TrainConfig, rng: Rng,
                 progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Fit R to recover y0 from ``shifted_poisson_degrade(y0, t)``, t uniform in 1..tau."""
    return fit(model.net, spdiff_batches(dataset, model, cfg, rng), cfg, progress)


def spdiff_sample_step(y_t, t: int, model, rng: Rng) -> np.ndarray:
    """One reverse step: keep the current photons, add fresh ones from the estimate.

    ``y_{t-1} = (l_t y_t + Poisson((l_{t-1} - l_t) y0_est)) / l_{t-1}``; by
    Poisson superposition this is marginally exact when y0_est = y0.
    """
    sched = model.schedule
    if not 2 <= t <= sched.tau:
        raise ValueError(f"t must lie in [2, {sched.tau}], got {t}")
    lam_t, lam_prev = sched[t], sched[t - 1]
    if lam_prev < lam_t:
        raise ValueError("schedule must be non-increasing")
    y_t = np.asarray(y_t, dtype=np.float64)
    y0_est = np.maximum(model.restore(y_t, t), 0.0)
    rate = (lam_prev - lam_t) * y0_est
    assert np.all(rate >= 0), "negative Poisson rate"
    return (lam_t * y_t + rng.poisson(rate)) / lam_prev


def match_projection_timestep(i_ld: float, sched: LambdaSchedule) -> int:
    """Step in 1..tau whose photon count is closest to ``i_ld``; ties go to smaller t."""
    if i_ld <= 0:
        raise ValueError("i_ld must be positive")
    lam = sched.values[1:]
    return int(np.argmin(np.abs(lam - i_ld))) + 1


def spdiff_denoise(y_ld, i_ld: float, model, rng: Rng, clamp: bool = True):
    """Denoise a low-dose projection; returns ``(y0_hat, steps)`` with steps = t*."""
    data = np.asarray(getattr(y_ld, "data", y_ld), dtype=np.float64)
    t_star = match_projection_timestep(i_ld, model.schedule)
    y = data
    for t in range(t_star, 1, -1):
        y = spdiff_sample_step(y, t, model, rng)
    y0 = model.restore(y, 1)
    if clamp:
        y0 = np.maximum(y0, 0.0)
    if isinstance(y_ld, PrelogProjection):
        y0 = PrelogProjection(y0, meta={**y_ld.meta, "denoised": "spdiff", "t_prj": t_star})
    return y0, t_star
