"""Fan-beam forward projection (Joseph) and filtered backprojection, flat detector.

Coordinates: image x to the right, y up, origin at the grid centre. At view
angle ``beta`` the source sits at ``sid * (cos beta, sin beta)`` and the
detector centre at ``-did * (cos beta, sin beta)``; detector coordinate ``u``
runs along ``(-sin beta, cos beta)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .core import AttenuationImage

__all__ = [
    "FanBeamGeometry",
    "PRESETS",
    "preset",
    "forward_project",
    "backproject",
    "fbp",
    "ramp_kernel",
]

# above this many nonzeros the system matrix is streamed per view, not cached
_MAX_CACHED_NNZ = 40_000_000


@dataclass(frozen=True)
class FanBeamGeometry:
    n_views: int
    n_bins: int
    bin_spacing: float  # mm, at the detector
    sid: float  # source to isocentre, mm
    did: float  # detector to isocentre, mm
    width: int
    height: int
    pixel_size: float  # mm

    def __post_init__(self):
        if min(self.sid, self.did, self.bin_spacing, self.pixel_size) <= 0:
            raise ValueError("sid, did, bin_spacing and pixel_size must be positive")
        if min(self.n_views, self.n_bins, self.width, self.height) < 1:
            raise ValueError("counts must be >= 1")
        if 0.5 * math.hypot(self.width, self.height) * self.pixel_size >= self.sid:
            raise ValueError("image grid reaches the source")
        # scan field of view: the circle inscribed in the image grid
        r = 0.5 * min(self.width, self.height) * self.pixel_size
        need = self.sdd * math.tan(math.asin(r / self.sid))
        if need > self.detector_half_width:
            warnings.warn(
                f"detector half-width {self.detector_half_width:.1f} mm does not cover "
                f"the scan field of view ({need:.1f} mm needed)",
                stacklevel=3,
            )

    @property
    def sdd(self) -> float:
        return self.sid + self.did

    @property
    def detector_half_width(self) -> float:
        return 0.5 * self.n_bins * self.bin_spacing

    @property
    def angles(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.n_views) / self.n_views

    @property
    def bin_centers(self) -> np.ndarray:
        return (np.arange(self.n_bins) - (self.n_bins - 1) / 2) * self.bin_spacing

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.n_views, self.n_bins)

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def with_grid(self, width: int, height: int, pixel_size: float) -> "FanBeamGeometry":
        return replace(self, width=width, height=height, pixel_size=pixel_size)


PRESETS = {
    # Table-1 acquisition; 512^2 grid over a 340 mm field of view
    "mayo2016_sim": dict(n_views=672, n_bins=672, bin_spacing=2.72, sid=746.02, did=615.18,
                         width=512, height=512, pixel_size=0.6641),
    # 256 mm field of view; distances scaled by 256/340
    "desk128": dict(n_views=180, n_bins=256, bin_spacing=2.0, sid=561.7, did=463.2,
                    width=128, height=128, pixel_size=2.0),
}


def preset(name: str, **overrides) -> FanBeamGeometry:
    try:
        params = dict(PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown geometry preset {name!r}; choose from {sorted(PRESETS)}") from None
    params.update(overrides)
    return FanBeamGeometry(**params)


def _view_weights(geo: FanBeamGeometry, view: int):
    """Joseph interpolation weights for one view: (bin, flat pixel index, weight)."""
    beta = geo.angles[view]
    c, s = math.cos(beta), math.sin(beta)
    u = geo.bin_centers
    src = np.array([geo.sid * c, geo.sid * s])
    det_x = -geo.did * c - u * s
    det_y = -geo.did * s + u * c
    dx = det_x - src[0]
    dy = det_y - src[1]
    norm = np.hypot(dx, dy)
    ps = geo.pixel_size
    W, H = geo.width, geo.height
    out_b, out_p, out_w = [], [], []

    x_major = np.abs(dx) >= np.abs(dy)
    # march along columns, interpolate between rows
    for major, n_step, n_interp in ((True, W, H), (False, H, W)):
        sel = np.nonzero(x_major == major)[0]
        if sel.size == 0:
            continue
        a = dx[sel] if major else dy[sel]  # marching component
        b = dy[sel] if major else dx[sel]
        a0 = src[0] if major else src[1]
        b0 = src[1] if major else src[0]
        step_len = ps * norm[sel] / np.abs(a)
        k = np.arange(n_step)
        if major:
            coord = (k - (W - 1) / 2) * ps  # column x centres
        else:
            coord = ((H - 1) / 2 - k) * ps  # row y centres
        param = (coord[None, :] - a0) / a[:, None]
        other = b0 + param * b[:, None]
        if major:
            frac = (H - 1) / 2 - other / ps  # fractional row index
        else:
            frac = other / ps + (W - 1) / 2  # fractional column index
        lo = np.floor(frac).astype(np.int64)
        f = frac - lo
        for idx, wgt in ((lo, 1.0 - f), (lo + 1, f)):
            ok = (idx >= 0) & (idx < n_interp) & (wgt > 0)
            rr, kk = np.nonzero(ok)
            if major:
                pix = idx[rr, kk] * W + kk
            else:
                pix = kk * W + idx[rr, kk]
            out_b.append(sel[rr])
            out_p.append(pix)
            out_w.append(wgt[rr, kk] * step_len[rr])
    return np.concatenate(out_b), np.concatenate(out_p), np.concatenate(out_w)


@lru_cache(maxsize=4)
def _system_matrix(geo: FanBeamGeometry) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for v in range(geo.n_views):
        b, p, w = _view_weights(geo, v)
        rows.append(b + v * geo.n_bins)
        cols.append(p)
        vals.append(w)
    n_rays = geo.n_views * geo.n_bins
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_rays, geo.width * geo.height),
    )


def _cacheable(geo: FanBeamGeometry) -> bool:
    return 2 * geo.n_views * geo.n_bins * max(geo.width, geo.height) <= _MAX_CACHED_NNZ


def _grid(img) -> np.ndarray:
    return img.data if isinstance(img, AttenuationImage) else np.asarray(img)


def forward_project(img, geo: FanBeamGeometry) -> np.ndarray:
    """Line integrals of attenuation along every ray, shape ``(n_views, n_bins)``."""
    x = np.asarray(_grid(img), dtype=np.float64)
    if x.shape != geo.image_shape:
        raise ValueError(f"image shape {x.shape} does not match geometry {geo.image_shape}")
    flat = x.ravel()
    if _cacheable(geo):
        out = _system_matrix(geo) @ flat
        return out.reshape(geo.sino_shape).astype(np.float32)
    out = np.empty(geo.sino_shape)
    for v in range(geo.n_views):
        b, p, w = _view_weights(geo, v)
        out[v] = np.bincount(b, weights=w * flat[p], minlength=geo.n_bins)
    return out.astype(np.float32)


def backproject(sino, geo: FanBeamGeometry) -> np.ndarray:
    """Exact adjoint of :func:`forward_project` (unweighted, unfiltered)."""
    s = np.asarray(sino, dtype=np.float64)
    if s.shape != geo.sino_shape:
        raise ValueError(f"sinogram shape {s.shape} does not match geometry {geo.sino_shape}")
    if _cacheable(geo):
        return (_system_matrix(geo).T @ s.ravel()).reshape(geo.image_shape)
    out = np.zeros(geo.width * geo.height)
    for v in range(geo.n_views):
        b, p, w = _view_weights(geo, v)
        out += np.bincount(p, weights=w * s[v, b], minlength=out.size)
    return out.reshape(geo.image_shape)


def ramp_kernel(n_bins: int, spacing: float, window: str = "ram-lak") -> np.ndarray:
    """Frequency response of the band-limited ramp for an FFT of length >= 2*n_bins.

    Built from the spatial Ram-Lak kernel so the DC term is exact.
    """
    n_fft = 1 << int(math.ceil(math.log2(2 * n_bins)))
    n = np.concatenate([np.arange(0, n_fft // 2 + 1), np.arange(-n_fft // 2 + 1, 0)])
    h = np.zeros(n_fft)
    h[0] = 1.0 / (4 * spacing**2)
    odd = (n % 2) == 1
    h[odd] = -1.0 / (np.pi * n[odd] * spacing) ** 2
    H = np.real(np.fft.fft(h)) * spacing
    if window == "cosine":
        freq = np.abs(np.fft.fftfreq(n_fft))
        H *= np.cos(np.pi * freq)
    elif window != "ram-lak":
        raise ValueError(f"unknown ramp window {window!r}")
    return H


def fbp(sino, geo: FanBeamGeometry, window: str = "ram-lak") -> AttenuationImage:
    """Equidistant-detector fan-beam FBP over a full 2*pi scan."""
    p = np.asarray(sino, dtype=np.float64)
    if p.shape != geo.sino_shape:
        raise ValueError(f"sinogram shape {p.shape} does not match geometry {geo.sino_shape}")
    D = geo.sid
    mag = geo.sid / geo.sdd
    ds = geo.bin_spacing * mag  # bin spacing on the virtual detector at isocentre
    s_bins = geo.bin_centers * mag
    weighted = p * (D / np.sqrt(D**2 + s_bins**2))[None, :]

    H = ramp_kernel(geo.n_bins, ds, window)
    n_fft = H.size
    padded = np.zeros((geo.n_views, n_fft))
    padded[:, : geo.n_bins] = weighted
    q = np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * H[None, :], axis=1))[:, : geo.n_bins]
    q *= 0.5

    ps = geo.pixel_size
    xs = (np.arange(geo.width) - (geo.width - 1) / 2) * ps
    ys = ((geo.height - 1) / 2 - np.arange(geo.height)) * ps
    X, Y = np.meshgrid(xs, ys)
    out = np.zeros(geo.image_shape)
    centre = (geo.n_bins - 1) / 2
    idx = np.arange(geo.n_bins, dtype=np.float64)
    for v, beta in enumerate(geo.angles):
        c, s = math.cos(beta), math.sin(beta)
        L = D - (X * c + Y * s)  # source-to-pixel distance along the central ray
        s_pix = D * (-X * s + Y * c) / L
        b = s_pix / ds + centre
        vals = np.interp(b.ravel(), idx, q[v], left=0.0, right=0.0).reshape(b.shape)
        out += vals * (D / L) ** 2
    out *= 2 * np.pi / geo.n_views
    return AttenuationImage(out.astype(np.float32), pixel_size=ps)
