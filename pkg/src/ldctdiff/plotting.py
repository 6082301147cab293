"""Report figures written next to the CSV output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_psnr_vs_dose", "plot_panel"]

# fixed metadata keeps PNG bytes reproducible across runs
_META = {"Software": None}


def plot_psnr_vs_dose(summary, path) -> Path:
    """Median PSNR against dose, one line per method."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    methods = list(dict.fromkeys(r["method"] for r in summary))
    for m in methods:
        rows = sorted((r for r in summary if r["method"] == m), key=lambda r: r["dose"])
        d = np.array([r["dose"] for r in rows]) * 100
        ax.errorbar(d, [r["psnr_median"] for r in rows], yerr=[r["psnr_std"] for r in rows],
                    marker="o", capsize=3, label=m)
    ax.set_xlabel("dose (%)")
    ax.set_ylabel("PSNR (dB)")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def plot_panel(images: dict, path, vmin: float = 0.0, vmax: float = 1.0) -> Path:
    """Side-by-side grayscale panel of unit-scaled images keyed by title."""
    path = Path(path)
    n = len(images)
    fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.8), dpi=100, squeeze=False)
    for ax, (title, img) in zip(axes[0], images.items()):
        ax.imshow(np.asarray(img), cmap="gray", vmin=vmin, vmax=vmax)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path
