"""Ellipse phantoms: classic Shepp-Logan and a randomised head-like corpus."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import MU_WATER, AttenuationImage, Rng

__all__ = ["Ellipse", "PhantomSpec", "Corpus", "shepp_logan_spec", "make_phantom", "make_corpus"]


@dataclass(frozen=True)
class Ellipse:
    """Ellipse in normalised coordinates ([-1, 1] spans the grid half-width).

    ``a`` is the semi-axis along x before rotation by ``angle`` degrees
    (counter-clockwise), ``delta`` the attenuation added inside (mm^-1).
    """

    cx: float
    cy: float
    a: float
    b: float
    angle: float
    delta: float


@dataclass(frozen=True)
class PhantomSpec:
    ellipses: tuple[Ellipse, ...] = ()
    width: int = 128
    height: int = 128
    pixel_size: float = 2.0
    seed: int | None = None
    supersample: int = 4


# (cx, cy, a, b, angle, delta / mu_water)
_SHEPP_LOGAN = [
    (0.0, 0.0, 0.69, 0.92, 0.0, 2.0),
    (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.98),
    (0.22, 0.0, 0.11, 0.31, -18.0, -0.02),
    (-0.22, 0.0, 0.16, 0.41, 18.0, -0.02),
    (0.0, 0.35, 0.21, 0.25, 0.0, 0.01),
    (0.0, 0.1, 0.046, 0.046, 0.0, 0.01),
    (0.0, -0.1, 0.046, 0.046, 0.0, 0.01),
    (-0.08, -0.605, 0.046, 0.023, 0.0, 0.01),
    (0.0, -0.605, 0.023, 0.023, 0.0, 0.01),
    (0.06, -0.605, 0.023, 0.046, 0.0, 0.01),
]

# same layout, soft-tissue contrasts raised so structure survives a 2000 HU window
_HEAD_CONTRASTS = [1.8, -0.78, -0.12, -0.12, 0.06, 0.08, 0.08, 0.1, 0.1, 0.1]


def shepp_logan_spec(width: int = 128, height: int | None = None, pixel_size: float = 2.0,
                     mu_water: float = MU_WATER, contrasts=None) -> PhantomSpec:
    rows = _SHEPP_LOGAN
    if contrasts is not None:
        rows = [r[:5] + (c,) for r, c in zip(rows, contrasts)]
    ellipses = tuple(Ellipse(cx, cy, a, b, ang, d * mu_water) for cx, cy, a, b, ang, d in rows)
    return PhantomSpec(ellipses, width, height or width, pixel_size)


def make_phantom(spec: PhantomSpec) -> AttenuationImage:
    """Rasterise by averaging an ``supersample x supersample`` subgrid per pixel."""
    W, H, k = spec.width, spec.height, spec.supersample
    half = 0.5 * W  # normalised unit in pixels
    sub = (np.arange(k) + 0.5) / k - 0.5
    xs = ((np.arange(W)[:, None] + sub[None, :]).ravel() - (W - 1) / 2) / half
    ys = (((H - 1) / 2 - np.arange(H))[:, None] - sub[None, :]).ravel() / half
    X, Y = np.meshgrid(xs, ys)
    fine = np.zeros_like(X)
    for e in spec.ellipses:
        th = math.radians(e.angle)
        c, s = math.cos(th), math.sin(th)
        dx, dy = X - e.cx, Y - e.cy
        u = c * dx + s * dy
        v = -s * dx + c * dy
        fine[(u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0] += e.delta
    img = fine.reshape(H, k, W, k).mean(axis=(1, 3))
    if img.min() < -1e-9:
        raise ValueError("phantom spec produces negative attenuation")
    return AttenuationImage(np.maximum(img, 0.0), pixel_size=spec.pixel_size)


def _random_head(rng: Rng, width: int, height: int, pixel_size: float, mu_water: float) -> PhantomSpec:
    scale = rng.uniform(0.78, 0.95)
    aspect = rng.uniform(0.9, 1.1)
    rot = rng.uniform(-30.0, 30.0)
    cr, sr = math.cos(math.radians(rot)), math.sin(math.radians(rot))
    out = []
    for i, ((cx, cy, a, b, ang, _), d) in enumerate(zip(_SHEPP_LOGAN, _HEAD_CONTRASTS)):
        if i >= 2:  # inner structures: jitter position, size and contrast
            cx += rng.uniform(-0.04, 0.04)
            cy += rng.uniform(-0.04, 0.04)
            a *= rng.uniform(0.85, 1.15)
            b *= rng.uniform(0.85, 1.15)
            ang += rng.uniform(-10, 10)
            d *= rng.uniform(0.7, 1.3)
        cx, cy = cx * scale * aspect, cy * scale
        out.append(Ellipse(cr * cx - sr * cy, sr * cx + cr * cy, a * scale * aspect, b * scale,
                           ang + rot, d * mu_water))
    for _ in range(int(rng.integers(2, 6))):
        r = rng.uniform(0.0, 0.45)
        phi = rng.uniform(0, 2 * math.pi)
        rad = rng.uniform(0.02, 0.08) * scale
        sign = 1.0 if rng.uniform() < 0.6 else -1.0
        d = sign * rng.uniform(0.04, 0.12)
        out.append(Ellipse(r * scale * math.cos(phi), r * scale * math.sin(phi),
                           rad * rng.uniform(0.7, 1.3), rad, rng.uniform(0, 180), d * mu_water))
    return PhantomSpec(tuple(out), width, height, pixel_size, seed=rng.seed)


@dataclass
class Corpus:
    train: list[AttenuationImage] = field(default_factory=list)
    test: list[AttenuationImage] = field(default_factory=list)
    specs: list[PhantomSpec] = field(default_factory=list)


def make_corpus(n: int, seed: int, n_test: int = 0, width: int = 128, height: int | None = None,
                pixel_size: float = 2.0, mu_water: float = MU_WATER) -> Corpus:
    """``n`` randomised head phantoms; the last ``n_test`` form the held-out split."""
    if not 0 <= n_test <= n:
        raise ValueError("n_test must lie in [0, n]")
    root = Rng(seed)
    corpus = Corpus()
    for i in range(n):
        spec = _random_head(root.fork(i), width, height or width, pixel_size, mu_water)
        spec = replace(spec, seed=seed)
        corpus.specs.append(spec)
        img = make_phantom(spec)
        (corpus.test if i >= n - n_test else corpus.train).append(img)
    return corpus
