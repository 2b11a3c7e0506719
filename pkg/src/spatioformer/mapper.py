"""Sliding-window raster inference and cross-year aggregation."""

from __future__ import annotations

import warnings

import numpy as np

from .data import ChipBatch
from .errors import ConfigError, DataError
from .model import predict_batch
from .raster import RasterGrid, RasterStack
from .uncert import UncertaintyConfig, coefficient_of_variation, mc_predictions


def _scene_windows(scene: RasterStack, chip_size: int):
    """Filled, edge-padded window view (H, W, S, S, B) and the (H, W) mask."""
    if len(scene) == 0:
        raise DataError("empty scene")
    if chip_size % 2 == 0 or chip_size < 1:
        raise ConfigError(f"chip_size must be odd, got {chip_size}")
    cube = scene.array()  # (B, H, W)
    mask = np.any(~np.isfinite(cube), axis=0)
    if mask.all():
        return None, mask
    filled = cube.copy()
    means = np.array([band[~mask].mean() for band in cube])
    for b in range(cube.shape[0]):
        filled[b][mask] = means[b]
    half = chip_size // 2
    padded = np.pad(filled, ((0, 0), (half, half), (half, half)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (chip_size, chip_size), axis=(1, 2))
    return win.transpose(1, 2, 3, 4, 0), mask


def _tiles(height, tile_rows):
    for r0 in range(0, height, tile_rows):
        yield r0, min(height, r0 + tile_rows)


def _check_scene(cfg, scene: RasterStack, chip_size):
    if len(scene) != cfg.bands:
        raise DataError(f"scene has {len(scene)} bands, model expects {cfg.bands}")
    if chip_size != cfg.chip_size:
        raise ConfigError(f"chip_size {chip_size} does not match the model's {cfg.chip_size}")


def _cell_batch(windows, grid: RasterGrid, rows, cols) -> ChipBatch:
    lon, lat = grid.cell_centers()
    n = len(rows)
    return ChipBatch(
        np.ascontiguousarray(windows[rows, cols]),
        lon[rows, cols],
        lat[rows, cols],
        np.full(n, grid.cell),
    )


def predict_map(params, cfg, scene: RasterStack, chip_size: int | None = None, *, year=None, tile_rows: int = 16) -> RasterGrid:
    """Richness for every unmasked scene cell from the chip centred on it.

    Windows past the scene edge clamp to the edge value; masked neighbours
    inside a window take the band-wise scene mean.
    """
    chip_size = cfg.chip_size if chip_size is None else chip_size
    _check_scene(cfg, scene, chip_size)
    ref = scene[0]
    out = np.full((ref.height, ref.width), np.nan)
    windows, mask = _scene_windows(scene, chip_size)
    if windows is not None:
        for r0, r1 in _tiles(ref.height, tile_rows):
            rows, cols = np.nonzero(~mask[r0:r1])
            rows = rows + r0
            if rows.size:
                out[rows, cols] = predict_batch(params, cfg, _cell_batch(windows, ref, rows, cols)).values
    return ref.with_values(out, band="richness", tag="" if year is None else str(year))


def uncertainty_map(params, cfg, scene: RasterStack, ucfg: UncertaintyConfig = UncertaintyConfig(),
                    chip_size: int | None = None, *, year=None, tile_rows: int = 16) -> RasterGrid:
    """Per-cell MC dropout coefficient of variation; cells with a zero MC mean are masked."""
    chip_size = cfg.chip_size if chip_size is None else chip_size
    _check_scene(cfg, scene, chip_size)
    ref = scene[0]
    out = np.full((ref.height, ref.width), np.nan)
    windows, mask = _scene_windows(scene, chip_size)
    if windows is not None:
        for r0, r1 in _tiles(ref.height, tile_rows):
            rows, cols = np.nonzero(~mask[r0:r1])
            rows = rows + r0
            if rows.size:
                _, reps = mc_predictions(params, cfg, _cell_batch(windows, ref, rows, cols), ucfg)
                out[rows, cols] = [coefficient_of_variation(r)[1] for r in reps]
    return ref.with_values(out, band="uncertainty", tag="" if year is None else str(year))


def aggregate(stack: RasterStack, stat: str) -> RasterGrid:
    """Per-cell mean or sample std (n-1) across grids, skipping masked entries."""
    if not isinstance(stack, RasterStack):
        stack = RasterStack(list(stack))
    if stat not in ("mean", "std"):
        raise ConfigError(f"stat must be 'mean' or 'std', got {stat!r}")
    if len(stack) < (2 if stat == "std" else 1):
        raise DataError(f"aggregate {stat} needs at least {2 if stat == 'std' else 1} grids")
    # sorting along the year axis makes the result independent of input order; NaN sorts last
    cube = np.sort(stack.array(), axis=0)
    count = np.isfinite(cube).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.nansum(cube, axis=0) / count
        if stat == "mean":
            res = np.where(count > 0, mean, np.nan)
        else:
            res = np.where(count > 1, np.sqrt(np.nansum((cube - mean) ** 2, axis=0) / (count - 1)), np.nan)
    if stat == "std" and np.any(count == 1):
        warnings.warn("cells with a single valid year have no std and are masked", stacklevel=2)
    return stack[0].with_values(res, band=f"{stack[0].band}_{stat}", tag=stat)
