"""Figure output for the report paths of the CLI.

Colour ramps are fixed so maps from different runs compare directly:
richness uses ``viridis``, uncertainty ``magma``, geo encoding layers and
anything else ``gray``. Masked (NaN) cells render white.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RAMPS = {"richness": "viridis", "uncertainty": "magma", "geo": "gray"}


def ramp_for(band: str) -> str:
    for key, cmap in RAMPS.items():
        if band.startswith(key):
            return cmap
    return "gray"


def _setup(width=5.0, height=4.0):
    plt.rcParams.update({"font.size": 9, "axes.titlesize": 10, "savefig.dpi": 120})
    return plt.subplots(figsize=(width, height))


def save_raster_png(grid, path, title=None, cmap=None, vmin=None, vmax=None):
    fig, ax = _setup()
    w, s, e, n = grid.bbox
    cm = plt.get_cmap(cmap or ramp_for(grid.band)).copy()
    cm.set_bad("white")
    im = ax.imshow(np.ma.masked_invalid(grid.values), cmap=cm, extent=(w, e, s, n), vmin=vmin, vmax=vmax,
                   interpolation="nearest", aspect="auto")
    fig.colorbar(im, ax=ax, label=grid.band)
    ax.set_xlabel("longitude (deg)")
    ax.set_ylabel("latitude (deg)")
    ax.set_title(title or (f"{grid.band} {grid.tag}".strip()))
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_geo_layers_png(grids, path, ncols=4):
    """Panel of encoding layers, one subplot per grid."""
    nrows = int(np.ceil(len(grids) / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.4 * ncols, 2.0 * nrows), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for ax, g in zip(axes.flat, grids):
        w, s, e, n = g.bbox
        ax.imshow(g.values, cmap="gray", extent=(w, e, s, n), vmin=-2, vmax=2, aspect="auto")
        ax.set_title(g.band, fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_training_curve_png(history, path, title="training"):
    fig, ax = _setup(5, 3.5)
    ep = [h["epoch"] for h in history]
    ax.semilogy(ep, [h["train_loss"] for h in history], label="train loss")
    val = [h["val_mse"] for h in history]
    if np.isfinite(val).any():
        ax.semilogy(ep, val, label="validation MSE")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_ablation_png(rows, path):
    """``rows`` is [(chip size, MetricsReport)]; plots r and RMSE against input size."""
    sizes = [s for s, _ in rows]
    fig, ax = _setup(5, 3.5)
    ax.plot(sizes, [m.r for _, m in rows], "o-", color="C0")
    ax.set_xlabel("input size (pixels per side)")
    ax.set_ylabel("r", color="C0")
    ax.set_xticks(sizes)
    ax2 = ax.twinx()
    ax2.plot(sizes, [m.rmse for _, m in rows], "s--", color="C3")
    ax2.set_ylabel("RMSE", color="C3")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
