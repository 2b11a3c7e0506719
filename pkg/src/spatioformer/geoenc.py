"""Multi-scale sinusoidal geolocation encoder.

A (lon, lat) pair in degrees maps to a d-vector whose element j (1-based) is

    sin(lon / w_j) + sin(lat / v_j)   for even j
    cos(lon / w_j) + cos(lat / v_j)   for odd j

with wavelengths w_j = a * c**(j/d) and v_j = a * c**((d - j)/d). Low j
oscillate quickly along longitude, high j quickly along latitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .raster import RasterGrid


@dataclass(frozen=True)
class GeoEncoderConfig:
    d: int = 16
    a: float = 1.0
    c: float = 100.0
    # optional affine pre-transform applied to raw degrees before encoding
    lon_scale: float = 1.0
    lon_offset: float = 0.0
    lat_scale: float = 1.0
    lat_offset: float = 0.0

    def __post_init__(self):
        if self.d < 2 or self.d % 2:
            raise ConfigError(f"geo token dimension must be even and >= 2, got {self.d}")
        if not self.a > 0:
            raise ConfigError(f"a must be positive, got {self.a}")
        if not self.c > 1:
            raise ConfigError(f"c must exceed 1, got {self.c}")

    def wavelengths(self) -> tuple[np.ndarray, np.ndarray]:
        j = np.arange(1, self.d + 1)
        w = self.a * self.c ** (j / self.d)
        v = self.a * self.c ** ((self.d - j) / self.d)
        return w, v

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def encode_many(cfg: GeoEncoderConfig, lon, lat) -> np.ndarray:
    """Vectorised encoder: arrays of lon/lat (any common shape) -> shape + (d,)."""
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    if not (np.all(np.isfinite(lon)) and np.all(np.isfinite(lat))):
        raise DataError("geolocation coordinates must be finite")
    x = (lon * cfg.lon_scale + cfg.lon_offset)[..., None]
    y = (lat * cfg.lat_scale + cfg.lat_offset)[..., None]
    w, v = cfg.wavelengths()
    even = (np.arange(1, cfg.d + 1) % 2) == 0
    return np.where(even, np.sin(x / w) + np.sin(y / v), np.cos(x / w) + np.cos(y / v))


def encode_layer(cfg: GeoEncoderConfig, j: int, lon, lat) -> np.ndarray:
    """Element ``j`` (1-based) of the token only, for arrays of coordinates."""
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    if not (np.all(np.isfinite(lon)) and np.all(np.isfinite(lat))):
        raise DataError("geolocation coordinates must be finite")
    w, v = cfg.wavelengths()
    x = lon * cfg.lon_scale + cfg.lon_offset
    y = lat * cfg.lat_scale + cfg.lat_offset
    if j % 2 == 0:
        return np.sin(x / w[j - 1]) + np.sin(y / v[j - 1])
    return np.cos(x / w[j - 1]) + np.cos(y / v[j - 1])


def encode(cfg: GeoEncoderConfig, lon: float, lat: float) -> np.ndarray:
    return encode_many(cfg, lon, lat)


def render_layer(cfg: GeoEncoderConfig, j: int, bbox, resolution: float) -> RasterGrid:
    """Sample layer ``j`` (1-based) on cell centres of ``bbox`` = (west, south, east, north)."""
    if not 1 <= j <= cfg.d:
        raise ConfigError(f"layer index must be in 1..{cfg.d}, got {j}")
    west, south, east, north = map(float, bbox)
    if not (east > west and north > south):
        raise ConfigError(f"degenerate bbox {bbox}")
    if not resolution > 0:
        raise ConfigError("resolution must be positive")
    width = max(1, int(round((east - west) / resolution)))
    height = max(1, int(round((north - south) / resolution)))
    grid = RasterGrid(np.zeros((height, width)), west, north, resolution, band=f"g{j}", tag="geo")
    lon, lat = grid.cell_centers()
    grid.values = encode_layer(cfg, j, lon, lat)
    return grid


def distinctiveness(cfg: GeoEncoderConfig, points, min_separation: float = 0.0) -> float:
    """Smallest Euclidean distance between the tokens of any two points.

    Pairs whose coordinates lie closer than ``min_separation`` degrees
    (Euclidean in lon/lat) are skipped.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 2:
        raise DataError("distinctiveness needs at least two (lon, lat) points")
    tok = encode_many(cfg, pts[:, 0], pts[:, 1])
    best = np.inf
    for i in range(len(pts) - 1):
        geo = np.hypot(*(pts[i + 1 :] - pts[i]).T)
        dist = np.sqrt(((tok[i + 1 :] - tok[i]) ** 2).sum(axis=1))
        dist = dist[geo >= min_separation]
        if dist.size:
            best = min(best, float(dist.min()))
    return best
