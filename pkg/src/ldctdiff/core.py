"""Containers, unit conversions, image-quality metrics, RNG and on-disk formats."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

MU_WATER = 0.0192  # mm^-1, ~70 keV

__all__ = [
    "MU_WATER",
    "AttenuationImage",
    "HUWindow",
    "PrelogProjection",
    "Rng",
    "WeightsFile",
    "mu_to_hu",
    "hu_to_mu",
    "window_normalize",
    "window_denormalize",
    "psnr",
    "ssim",
    "rmse_hu",
    "save_array",
    "load_array",
    "write_csv",
]


def _as_f32_grid(data, shape: tuple[int, int] | None = None) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
    if shape is not None:
        arr = arr.reshape(shape)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("grid contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class AttenuationImage:
    """2-D map of linear attenuation coefficients in mm^-1.

    ``data`` is stored row-major with shape ``(height, width)``; row 0 is the
    top of the image (largest y).
    """

    data: np.ndarray
    pixel_size: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "data", _as_f32_grid(self.data))
        if self.pixel_size <= 0:
            raise ValueError("pixel_size must be positive")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def has_negative(self) -> bool:
        """True when noise pushed some reconstructed values below zero."""
        return bool((self.data < 0).any())


@dataclass(frozen=True, eq=False)
class PrelogProjection:
    """Normalized pre-log sinogram of transmissions, shape ``(n_views, n_bins)``.

    ``meta`` carries acquisition facts such as the incident photon count
    ``i_ld`` used to generate a noisy realisation.
    """

    data: np.ndarray
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "data", _as_f32_grid(self.data))
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def n_views(self) -> int:
        return self.data.shape[0]

    @property
    def n_bins(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class HUWindow:
    lo: float = -1000.0
    hi: float = 1000.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"invalid HU window [{self.lo}, {self.hi}]")

    @property
    def span(self) -> float:
        return self.hi - self.lo


def _values(img) -> np.ndarray:
    if isinstance(img, (AttenuationImage, PrelogProjection)):
        return img.data
    return np.asarray(img)


def mu_to_hu(img, mu_water: float = MU_WATER) -> np.ndarray:
    if mu_water <= 0:
        raise ValueError("mu_water must be positive")
    mu = np.asarray(_values(img), dtype=np.float64)
    if not np.all(np.isfinite(mu)):
        raise ValueError("non-finite attenuation values")
    return 1000.0 * (mu - mu_water) / mu_water


def hu_to_mu(hu, mu_water: float = MU_WATER) -> np.ndarray:
    if mu_water <= 0:
        raise ValueError("mu_water must be positive")
    return mu_water * (1.0 + np.asarray(hu, dtype=np.float64) / 1000.0)


def window_normalize(hu, w: HUWindow = HUWindow()) -> np.ndarray:
    """Clip to the window and map it affinely onto [0, 1]."""
    hu = np.asarray(hu, dtype=np.float64)
    return (np.clip(hu, w.lo, w.hi) - w.lo) / w.span


def window_denormalize(unit, w: HUWindow = HUWindow()) -> np.ndarray:
    return w.lo + np.asarray(unit, dtype=np.float64) * w.span


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(a, b) -> float:
    """PSNR in dB for unit-scaled images (peak 1). Identical inputs give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation with a symmetric kernel
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=1) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=0) @ g


def ssim(a, b, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03,
         win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM with a Gaussian window, evaluated on fully covered pixels only."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    if a.ndim != 2 or min(a.shape) < win_size:
        raise ValueError(f"images must be 2-D and at least {win_size}x{win_size}")
    g = _gaussian_window(win_size, sigma)
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def rmse_hu(a, b, w: HUWindow | None = HUWindow(), mask=None) -> float:
    """RMSE between two HU images after clipping both to ``w`` (if given)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    if w is not None:
        a = np.clip(a, w.lo, w.hi)
        b = np.clip(b, w.lo, w.hi)
    d = a - b
    if mask is not None:
        d = d[np.asarray(mask, dtype=bool)]
    return float(np.sqrt(np.mean(d**2)))


class Rng:
    """Seeded, splittable generator backed by numpy's counter-based Philox.

    Instances are single-owner. Use :meth:`fork` to derive independent
    per-task generators instead of sharing one.
    """

    algorithm = "philox4x64-numpy"

    def __init__(self, seed: int, spawn_key: Sequence[int] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.spawn_key = tuple(int(k) for k in spawn_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def fork(self, *key: int) -> "Rng":
        """Derive an independent generator; same (seed, key) -> same stream."""
        return Rng(self.seed, self.spawn_key + tuple(key))

    def poisson(self, lam) -> np.ndarray:
        lam = np.asarray(lam, dtype=np.float64)
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValueError("Poisson rate must be finite and non-negative")
        return self._gen.poisson(lam).astype(np.float64)

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def torch_seed(self) -> int:
        """A 63-bit seed for torch generators, drawn from this stream."""
        return int(self._gen.integers(0, 2**63 - 1))


# --- persistence -------------------------------------------------------------

def _stem(path) -> Path:
    p = Path(path)
    if p.suffix in (".f32raw", ".json"):
        p = p.with_suffix("")
    return p


def save_array(path, obj) -> Path:
    """Write an image or projection as raw little-endian f32 plus a JSON sidecar."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(obj, AttenuationImage):
        meta = {"kind": "image", "pixel_size": obj.pixel_size}
    elif isinstance(obj, PrelogProjection):
        meta = {"kind": "prelog", "meta": dict(obj.meta)}
    else:
        raise TypeError(f"cannot save {type(obj).__name__}")
    meta["shape"] = list(obj.data.shape)
    meta["dtype"] = "<f4"
    stem.with_suffix(".f32raw").write_bytes(obj.data.astype("<f4").tobytes())
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return stem.with_suffix(".f32raw")


def load_array(path):
    stem = _stem(path)
    meta = json.loads(stem.with_suffix(".json").read_text())
    data = np.frombuffer(stem.with_suffix(".f32raw").read_bytes(), dtype="<f4")
    data = data.reshape(meta["shape"]).astype(np.float32)
    if meta["kind"] == "image":
        return AttenuationImage(data, pixel_size=meta["pixel_size"])
    if meta["kind"] == "prelog":
        return PrelogProjection(data, meta=meta.get("meta", {}))
    raise ValueError(f"unknown array kind {meta['kind']!r}")


_WTS_MAGIC = b"LDWT"
WTS_VERSION = 1


@dataclass
class WeightsFile:
    """Named f32 parameter arrays plus free-form metadata.

    On disk: 4-byte magic, u32 little-endian manifest length, the UTF-8 JSON
    manifest, then one flat little-endian f32 blob in manifest order.
    """

    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        return {
            "format_version": WTS_VERSION,
            "dtype": "float32-le",
            "params": [{"name": k, "shape": list(v.shape)} for k, v in self.params.items()],
            "meta": self.meta,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        head = json.dumps(self.manifest(), sort_keys=True).encode("utf-8")
        blob = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in self.params.values())
        path.write_bytes(_WTS_MAGIC + struct.pack("<I", len(head)) + head + blob)
        return path

    @classmethod
    def load(cls, path) -> "WeightsFile":
        raw = Path(path).read_bytes()
        if raw[:4] != _WTS_MAGIC:
            raise ValueError(f"{path}: not a weights file")
        (n,) = struct.unpack("<I", raw[4:8])
        manifest = json.loads(raw[8 : 8 + n].decode("utf-8"))
        if manifest.get("format_version") != WTS_VERSION:
            raise ValueError(f"unsupported weights format {manifest.get('format_version')}")
        blob = np.frombuffer(raw[8 + n :], dtype="<f4")
        expected = sum(int(np.prod(p["shape"])) for p in manifest["params"])
        if blob.size != expected:
            raise ValueError(f"payload has {blob.size} floats, manifest expects {expected}")
        params, off = {}, 0
        for p in manifest["params"]:
            size = int(np.prod(p["shape"]))
            params[p["name"]] = blob[off : off + size].reshape(p["shape"]).astype(np.float32)
            off += size
        return cls(params=params, meta=manifest.get("meta", {}))


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(_fmt(v) for v in row)
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if math.isnan(v) else repr(v)
    if isinstance(v, np.integer):
        return int(v)
    return v
