"""Small time-conditioned encoder-decoder regressor, gradients and Adam.

The same network class plays both the projection-domain restoration network
and the image-domain noise estimator. Parameters are handled as one flat f32
vector so that the optimizer and the weights file share a single layout.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.ndimage import uniform_filter
import torch.nn.functional as F
from torch import Tensor, nn

from .core import WeightsFile

__all__ = [
    "ArchSpec",
    "TimeConditionedRegressor",
    "TrainConfig",
    "AdamState",
    "build_regressor",
    "predict",
    "local_mean",
    "get_flat",
    "set_flat",
    "grad",
    "adam_step",
    "batch_loss",
    "fit",
    "random_crops",
    "save_regressor",
    "load_regressor",
]


@dataclass(frozen=True)
class ArchSpec:
    in_channels: int = 1
    out_channels: int = 1
    width: int = 16
    levels: int = 2
    emb_dim: int = 32
    zero_init_output: bool = True


def timestep_embedding(t: Tensor, dim: int) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    arg = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=1)


class _Block(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = F.silu(self.conv1(x))
        h = h + self.emb(emb)[:, :, None, None]
        return F.silu(self.conv2(h))


class TimeConditionedRegressor(nn.Module):
    """U-Net-style map ``(x, t) -> same-shape output``.

    Each resolution level halves the grid with average pooling; the decoder
    upsamples and concatenates the matching encoder features. A sinusoidal
    timestep embedding is injected into every block.
    """

    def __init__(self, spec: ArchSpec = ArchSpec()):
        super().__init__()
        self.spec = spec
        w, e = spec.width, spec.emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        widths = [w * 2**k for k in range(spec.levels + 1)]
        self.down = nn.ModuleList()
        c_prev = spec.in_channels
        for c in widths:
            self.down.append(_Block(c_prev, c, e))
            c_prev = c
        self.up = nn.ModuleList()
        for c in reversed(widths[:-1]):
            self.up.append(_Block(c_prev + c, c, e))
            c_prev = c
        self.out = nn.Conv2d(w, spec.out_channels, 3, padding=1)
        if spec.zero_init_output:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x: Tensor, t: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected (N, {self.spec.in_channels}, H, W) input, got {tuple(x.shape)}")
        H, W = x.shape[-2:]
        m = 2**self.spec.levels
        ph, pw = (-H) % m, (-W) % m
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        emb = self.time_mlp(timestep_embedding(t.reshape(-1), self.spec.emb_dim).to(x.dtype))
        skips = []
        h = x
        for k, block in enumerate(self.down):
            if k:
                h = F.avg_pool2d(h, 2)
            h = block(h, emb)
            skips.append(h)
        skips.pop()
        for block in self.up:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
        return self.out(h)[..., :H, :W]


def build_regressor(spec: ArchSpec = ArchSpec(), seed: int = 0) -> TimeConditionedRegressor:
    """Construct a regressor with a deterministic, seed-dependent initialisation."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = TimeConditionedRegressor(spec)
    return net.float()


def _batch_t(t, n: int) -> Tensor:
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    return t.expand(n) if t.numel() == 1 else t


@torch.no_grad()
def predict(net: TimeConditionedRegressor, x, t) -> np.ndarray:
    """Evaluate on ``(H, W)`` (single channel), ``(C, H, W)`` or ``(N, C, H, W)``.

    Returns float64 numpy of the first output channel, ``(H, W)`` or ``(N, H, W)``.
    """
    arr = np.asarray(x, dtype=np.float32)
    single = arr.ndim < 4
    if arr.ndim == 2:
        arr = arr[None]
    if single:
        arr = arr[None]
    batch = torch.from_numpy(np.ascontiguousarray(arr))
    out = net(batch, _batch_t(t, batch.shape[0])).numpy().astype(np.float64)
    return out[0, 0] if single else out[:, 0]


def local_mean(x: np.ndarray, size: int = 3) -> np.ndarray:
    """Box mean over the last two axes with edge replication."""
    x = np.asarray(x, dtype=np.float64)
    sizes = (1,) * (x.ndim - 2) + (size, size)
    return uniform_filter(x, size=sizes, mode="nearest")


def get_flat(net: nn.Module) -> Tensor:
    return torch.nn.utils.parameters_to_vector(net.parameters()).detach().clone()


def set_flat(net: nn.Module, flat: Tensor) -> None:
    with torch.no_grad():
        dtype = next(net.parameters()).dtype
        torch.nn.utils.vector_to_parameters(flat.to(dtype), net.parameters())


def grad(net: nn.Module, loss_fn: Callable[[nn.Module], Tensor]) -> Tensor:
    """Reverse-mode gradient of the scalar ``loss_fn(net)`` in flat-parameter layout."""
    params = list(net.parameters())
    loss = loss_fn(net)
    if not isinstance(loss, Tensor) or loss.numel() != 1:
        raise ValueError("loss must be a scalar tensor")
    if not loss.requires_grad:
        return torch.zeros(sum(p.numel() for p in params))
    gs = torch.autograd.grad(loss, params, allow_unused=True)
    return torch.cat([
        (g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(gs, params)
    ]).detach()


@dataclass
class AdamState:
    m: Tensor
    v: Tensor
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Tensor) -> "AdamState":
        return cls(torch.zeros_like(params), torch.zeros_like(params))


def adam_step(params: Tensor, grads: Tensor, state: AdamState, lr: float) -> tuple[Tensor, AdamState]:
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("params, grads and optimizer state must share a shape")
    b1, b2 = state.beta1, state.beta2
    step = state.step + 1
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads * grads
    m_hat = m / (1 - b1**step)
    v_hat = v / (1 - b2**step)
    new = params - lr * m_hat / (torch.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, step, b1, b2, state.eps)


def random_crops(arrays: Sequence[np.ndarray], idx, crop: int, rng, wrap_rows: bool) -> np.ndarray:
    """Stack one random ``crop x crop`` patch from each ``arrays[i]``; crop 0 keeps whole grids."""
    out = []
    for i in idx:
        a = arrays[i]
        if crop <= 0:
            out.append(a)
            continue
        H, W = a.shape
        c0 = int(rng.integers(0, W - crop + 1))
        if wrap_rows:
            r0 = int(rng.integers(0, H))
            rows = np.arange(r0, r0 + crop) % H
        else:
            r0 = int(rng.integers(0, H - crop + 1))
            rows = np.arange(r0, r0 + crop)
        out.append(a[rows, c0 : c0 + crop])
    return np.stack(out)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 8
    iterations: int = 2000
    seed: int = 0
    loss: str = "restoration"  # or "epsilon"
    crop: int = 64  # square training patch edge, 0 = whole grid
    lr_schedule: str = "constant"  # or "cosine": decay to zero over the run

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")
        if self.loss not in ("restoration", "epsilon"):
            raise ValueError(f"unknown loss kind {self.loss!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def lr_at(self, it: int) -> float:
        if self.lr_schedule == "cosine":
            return self.learning_rate * 0.5 * (1 + math.cos(math.pi * it / self.iterations))
        return self.learning_rate


@dataclass
class TrainResult:
    history: list[float] = field(default_factory=list)
    state: AdamState | None = None


def batch_loss(net: nn.Module, batch: tuple) -> Tensor:
    """Mean (optionally weighted) squared error of ``net`` on one sampled batch."""
    inputs, t, target, *rest = batch
    sq = (net(inputs, t) - target) ** 2
    return (sq * rest[0]).mean() if rest else sq.mean()


def fit(net: nn.Module, sample_batch: Callable[[int], tuple], cfg: TrainConfig,
        progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Minimise (optionally weighted) mean squared error with Adam.

    ``sample_batch(iteration)`` returns ``(inputs, t, targets)`` or
    ``(inputs, t, targets, weights)``; all randomness must come from the
    caller's generator for reproducibility.
    """
    torch.use_deterministic_algorithms(True)
    params = get_flat(net)
    state = AdamState.zeros_like(params)
    result = TrainResult()
    for it in range(cfg.iterations):
        batch = sample_batch(it)
        loss_box = {}

        def loss_fn(m):
            loss = batch_loss(m, batch)
            loss_box["v"] = float(loss.detach())
            return loss

        g = grad(net, loss_fn)
        loss = loss_box["v"]
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss} at iteration {it}")
        params, state = adam_step(params, g, state, cfg.lr_at(it))
        set_flat(net, params)
        result.history.append(loss)
        if progress is not None:
            progress(it, loss)
    result.state = state
    return result


def save_regressor(net: TimeConditionedRegressor, path, **meta) -> None:
    params = {k: v.detach().numpy().astype(np.float32) for k, v in net.state_dict().items()}
    WeightsFile(params, {"arch": asdict(net.spec), **meta}).save(path)


def load_regressor(path) -> tuple[TimeConditionedRegressor, dict]:
    wf = WeightsFile.load(path)
    spec = ArchSpec(**wf.meta["arch"])
    net = TimeConditionedRegressor(spec)
    net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in wf.params.items()})
    meta = {k: v for k, v in wf.meta.items() if k != "arch"}
    return net.float().eval(), meta
