"""Samples, image chips, block-based splitting and the synthetic dataset.

Chip file layout: ``CHIP0001``; size and bands as little-endian int64;
center_lon, center_lat and pixel_pitch as little-endian float64; then the
reflectance payload as float64, band-major (bands, size, size), row 0 north.
"""

from __future__ import annotations

import csv
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .numerics import RngStream

BANDS = ("blue", "green", "red", "nir", "swir1", "swir2")
RED, NIR = 2, 3
METERS_PER_DEGREE = 111_320.0
PIXEL_PITCH_DEG = 30.0 / METERS_PER_DEGREE
CHIP_MAGIC = b"CHIP0001"
_CHIP_HEAD = struct.Struct("<8sqqddd")


@dataclass
class SampleRecord:
    id: str
    lon: float
    lat: float
    year: int
    richness: float
    chip_path: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.lon) and math.isfinite(self.lat)):
            raise DataError(f"sample {self.id}: non-finite coordinates")
        if not (self.richness >= 0):
            raise DataError(f"sample {self.id}: richness must be >= 0, got {self.richness}")


@dataclass
class ImageChip:
    reflectance: np.ndarray  # (size, size, bands)
    center_lon: float
    center_lat: float
    pixel_pitch: float = PIXEL_PITCH_DEG

    def __post_init__(self):
        r = np.asarray(self.reflectance, dtype=np.float64)
        if r.ndim != 3 or r.shape[0] != r.shape[1]:
            raise DataError(f"chip reflectance must be (size, size, bands), got {r.shape}")
        if not np.all(np.isfinite(r)):
            raise DataError("chip reflectance contains NaN or inf")
        if r.min() < 0.0 or r.max() > 1.0:
            raise DataError(f"chip reflectance outside [0, 1]: range {r.min()}..{r.max()}")
        self.reflectance = r

    @property
    def size(self) -> int:
        return self.reflectance.shape[0]

    @property
    def bands(self) -> int:
        return self.reflectance.shape[2]

    def pixel_coords(self) -> tuple[np.ndarray, np.ndarray]:
        return pixel_coords(self.center_lon, self.center_lat, self.pixel_pitch, self.size)

    def crop(self, size: int) -> "ImageChip":
        """Centre crop to ``size`` pixels per side."""
        if size % 2 == 0 or size > self.size:
            raise ConfigError(f"crop size must be odd and <= {self.size}, got {size}")
        o = (self.size - size) // 2
        return ImageChip(self.reflectance[o : o + size, o : o + size], self.center_lon, self.center_lat, self.pixel_pitch)


def pixel_coords(center_lon, center_lat, pitch, size):
    """Per-pixel centre coordinates, shaped (..., size, size) for array inputs."""
    off = (np.arange(size) - size // 2) * 1.0
    center_lon = np.asarray(center_lon, dtype=np.float64)[..., None, None]
    center_lat = np.asarray(center_lat, dtype=np.float64)[..., None, None]
    pitch = np.asarray(pitch, dtype=np.float64)[..., None, None]
    lon = center_lon + off[None, :] * pitch
    lat = center_lat - off[:, None] * pitch
    return tuple(np.broadcast_arrays(lon, lat))


@dataclass
class ChipBatch:
    """Stacked chips: reflectance (N, S, S, B) plus per-chip centre and pitch."""

    reflectance: np.ndarray
    center_lon: np.ndarray
    center_lat: np.ndarray
    pixel_pitch: np.ndarray

    def __len__(self):
        return self.reflectance.shape[0]

    @property
    def size(self) -> int:
        return self.reflectance.shape[1]

    @classmethod
    def from_chips(cls, chips) -> "ChipBatch":
        chips = list(chips)
        return cls(
            np.stack([c.reflectance for c in chips]),
            np.array([c.center_lon for c in chips], dtype=np.float64),
            np.array([c.center_lat for c in chips], dtype=np.float64),
            np.array([c.pixel_pitch for c in chips], dtype=np.float64),
        )

    def subset(self, idx) -> "ChipBatch":
        return ChipBatch(self.reflectance[idx], self.center_lon[idx], self.center_lat[idx], self.pixel_pitch[idx])

    def crop(self, size: int) -> "ChipBatch":
        if size % 2 == 0 or size > self.size:
            raise ConfigError(f"crop size must be odd and <= {self.size}, got {size}")
        o = (self.size - size) // 2
        return ChipBatch(self.reflectance[:, o : o + size, o : o + size], self.center_lon, self.center_lat, self.pixel_pitch)

    def pixel_coords(self):
        return pixel_coords(self.center_lon, self.center_lat, self.pixel_pitch, self.size)


# --------------------------------------------------------------------------
# chip and sample I/O


def write_chip(chip: ImageChip, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_CHIP_HEAD.pack(CHIP_MAGIC, chip.size, chip.bands, chip.center_lon, chip.center_lat, chip.pixel_pitch))
        fh.write(np.ascontiguousarray(chip.reflectance.transpose(2, 0, 1), dtype="<f8").tobytes())


def read_chip(path) -> ImageChip:
    raw = Path(path).read_bytes()
    if len(raw) < _CHIP_HEAD.size:
        raise DataError(f"{path}: truncated chip header ({len(raw)} bytes)")
    magic, size, bands, lon, lat, pitch = _CHIP_HEAD.unpack_from(raw)
    if magic != CHIP_MAGIC:
        bad = next(i for i in range(8) if magic[i] != CHIP_MAGIC[i])
        raise DataError(f"{path}: bad chip magic at offset {bad}")
    if size < 1 or bands < 1:
        raise DataError(f"{path}: invalid chip dimensions size={size} bands={bands} at offset 8")
    need = size * size * bands * 8
    have = len(raw) - _CHIP_HEAD.size
    if have != need:
        raise DataError(f"{path}: payload at offset {_CHIP_HEAD.size} has {have} bytes, expected {need}")
    data = np.frombuffer(raw, dtype="<f8", offset=_CHIP_HEAD.size).reshape(bands, size, size)
    return ImageChip(data.transpose(1, 2, 0).astype(np.float64), lon, lat, pitch)


SAMPLE_FIELDS = ("id", "lon", "lat", "year", "richness", "chip_path")


def write_samples(samples, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SAMPLE_FIELDS)
        for s in samples:
            w.writerow([s.id, repr(float(s.lon)), repr(float(s.lat)), int(s.year), repr(float(s.richness)), s.chip_path])


def read_samples(path) -> list[SampleRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(SAMPLE_FIELDS) - set(reader.fieldnames):
            raise DataError(f"{path}: sample CSV needs columns {', '.join(SAMPLE_FIELDS)}")
        out = []
        for line, row in enumerate(reader, start=2):
            try:
                out.append(
                    SampleRecord(row["id"], float(row["lon"]), float(row["lat"]), int(row["year"]), float(row["richness"]), row["chip_path"])
                )
            except ValueError as exc:
                raise DataError(f"{path}:{line}: {exc}") from exc
    return out


def load_chips(samples, base_dir) -> list[ImageChip]:
    base = Path(base_dir)
    return [read_chip(base / s.chip_path) for s in samples]


# --------------------------------------------------------------------------
# tiling and block split


@dataclass(frozen=True)
class TileGrid:
    """Fixed-degree tiling; 0.9 degrees of latitude is roughly 100 km."""

    tile_lon: float = 0.9
    tile_lat: float = 0.9
    origin_lon: float = -180.0
    origin_lat: float = -90.0

    def tile_of(self, lon: float, lat: float) -> tuple[int, int]:
        return (int(math.floor((lon - self.origin_lon) / self.tile_lon)), int(math.floor((lat - self.origin_lat) / self.tile_lat)))


SPLITS = ("train", "val", "test")


@dataclass
class SplitAssignment:
    tiles: dict  # (i, j) -> split name
    fractions: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    grid: TileGrid = field(default_factory=TileGrid)

    def split_of(self, sample) -> str:
        return self.tiles[self.grid.tile_of(sample.lon, sample.lat)]

    def counts(self) -> dict:
        return {s: sum(1 for v in self.tiles.values() if v == s) for s in SPLITS}

    def partition(self, samples) -> dict:
        """Indices of ``samples`` per split."""
        out = {s: [] for s in SPLITS}
        for i, s in enumerate(samples):
            out[self.split_of(s)].append(i)
        return out


def split_by_tiles(samples, grid: TileGrid = TileGrid(), fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitAssignment:
    samples = list(samples)
    if not samples:
        raise DataError("cannot split an empty sample set")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    tiles = sorted({grid.tile_of(s.lon, s.lat) for s in samples})
    order = RngStream(seed, 0x5B117).permutation(len(tiles))
    n = len(tiles)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    names = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    assign = {tiles[k]: names[pos] for pos, k in enumerate(order)}
    counts = {s: names.count(s) for s in SPLITS}
    empty = [s for s in SPLITS if counts[s] == 0 and fractions[SPLITS.index(s)] > 0]
    if empty:
        warnings.warn(f"block split over {n} tile(s) leaves {', '.join(empty)} empty", stacklevel=2)
    return SplitAssignment(assign, tuple(fractions), seed, grid)


def check_no_leakage(grid: TileGrid, **groups) -> None:
    """Raise if any tile contributes samples to more than one named group."""
    owner = {}
    for name, samples in groups.items():
        for s in samples:
            t = grid.tile_of(s.lon, s.lat)
            prev = owner.setdefault(t, name)
            if prev != name:
                raise DataError(f"tile {t} leaks samples into both {prev!r} and {name!r}")


def write_split(assign: SplitAssignment, samples, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "tile_i", "tile_j", "split"])
        for s in samples:
            t = assign.grid.tile_of(s.lon, s.lat)
            w.writerow([s.id, t[0], t[1], assign.tiles[t]])


def read_split(path) -> dict:
    """Sample id -> split name."""
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["id"]: row["split"] for row in csv.DictReader(fh)}


# --------------------------------------------------------------------------
# synthetic location-dependent data


@dataclass
class SynthConfig:
    """Generator for richness whose spectral response flips between regions.

    The bbox is cut into an ``nx`` by ``ny`` grid of latent regions. In
    region r, richness = max(slopes[r] * s + intercepts[r] + noise, 0) where
    s is the NIR - red contrast of the centre pixel (``signal="center"``) or
    a scaled 3x3 NIR standard deviation (``signal="variance"``).
    """

    bbox: tuple = (112.0, -44.0, 154.0, -10.0)
    regions: int = 4
    slopes: tuple | None = None
    intercepts: tuple | None = None
    slope: float = 40.0
    intercept: float = 30.0
    intercept_delta: float = 5.0
    noise: float = 2.0
    signal: str = "center"
    refl_low: float = 0.2
    refl_high: float = 0.6
    chip_size: int = 9
    pixel_pitch: float = PIXEL_PITCH_DEG
    years: tuple = (2015, 2023)
    variance_gain: float = 8.0

    def __post_init__(self):
        w, s, e, n = self.bbox
        if not (e > w and n > s):
            raise ConfigError(f"invalid synthetic bbox {self.bbox}")
        if self.regions < 1:
            raise ConfigError("need at least one region")
        if self.signal not in ("center", "variance"):
            raise ConfigError(f"unknown synthetic signal {self.signal!r}")
        if self.chip_size % 2 == 0 or self.chip_size < 1:
            raise ConfigError("chip_size must be odd")
        if self.signal == "variance" and self.chip_size < 3:
            raise ConfigError("variance signal needs chips of at least 3x3")
        if not 0.0 <= self.refl_low < self.refl_high <= 1.0:
            raise ConfigError("need 0 <= refl_low < refl_high <= 1")
        self.nx = math.ceil(math.sqrt(self.regions))
        self.ny = math.ceil(self.regions / self.nx)
        if self.slopes is None:
            self.slopes = tuple(self.slope * (1 if (r % self.nx + r // self.nx) % 2 == 0 else -1) for r in range(self.regions))
        if self.intercepts is None:
            self.intercepts = tuple(
                self.intercept + self.intercept_delta * (1 if r % self.nx % 2 else -1) for r in range(self.regions)
            )
        if len(self.slopes) != self.regions or len(self.intercepts) != self.regions:
            raise ConfigError("slopes and intercepts need one entry per region")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["slopes"], d["intercepts"] = list(self.slopes), list(self.intercepts)
        return d

    @classmethod
    def from_dict(cls, d) -> "SynthConfig":
        d = dict(d)
        for k in ("bbox", "slopes", "intercepts", "years"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    def region_of(self, lon, lat):
        w, s, e, n = self.bbox
        ix = np.clip(np.floor((np.asarray(lon) - w) / (e - w) * self.nx), 0, self.nx - 1).astype(int)
        iy = np.clip(np.floor((np.asarray(lat) - s) / (n - s) * self.ny), 0, self.ny - 1).astype(int)
        return np.minimum(iy * self.nx + ix, self.regions - 1)

    def region_weights(self) -> np.ndarray:
        """Area share of each region under uniform placement."""
        cells = np.zeros(self.regions)
        for iy in range(self.ny):
            for ix in range(self.nx):
                cells[min(iy * self.nx + ix, self.regions - 1)] += 1
        return cells / cells.sum()

    def spectral_signal(self, reflectance) -> np.ndarray:
        """The statistic s for reflectance stacks shaped (..., size, size, bands)."""
        r = np.asarray(reflectance)
        c = r.shape[-2] // 2
        if self.signal == "center":
            return r[..., c, c, NIR] - r[..., c, c, RED]
        win = r[..., c - 1 : c + 2, c - 1 : c + 2, NIR]
        win = win.reshape(win.shape[:-2] + (9,))
        return self.variance_gain * (win.std(axis=-1, ddof=1) - self._mean_window_std())

    def _mean_window_std(self) -> float:
        # expected 3x3 sample std of iid uniforms, pinned once from a fixed-seed draw
        span = self.refl_high - self.refl_low
        draw = RngStream(7, 7).uniform(0.0, 1.0, (200_000, 9))
        return span * float(draw.std(axis=1, ddof=1).mean())

    def signal_moments(self) -> tuple[float, float]:
        """E[s] and E[s^2] of the spectral statistic under the generator."""
        if self.signal != "center":
            raise ConfigError("closed-form moments exist only for the centre-pixel signal")
        span = self.refl_high - self.refl_low
        # difference of two iid uniforms: mean 0, variance 2 * span^2 / 12
        return 0.0, span * span / 6.0

    def oracle_predict(self, lon, lat, reflectance) -> np.ndarray:
        """Noise-free richness: the location-aware Bayes predictor (ignoring the zero clamp)."""
        r = self.region_of(lon, lat)
        s = self.spectral_signal(reflectance)
        return np.maximum(np.asarray(self.slopes)[r] * s + np.asarray(self.intercepts)[r], 0.0)

    def geo_blind_bayes_risk(self) -> float:
        """Minimum expected squared error of any predictor that sees chips but not location.

        Chips are drawn independently of location, so the best geo-blind
        predictor is the region-weighted mean response and the risk is the
        between-region variance of the response at fixed s, plus noise.
        """
        p = self.region_weights()
        b = np.asarray(self.slopes, dtype=np.float64)
        g = np.asarray(self.intercepts, dtype=np.float64)
        m1, m2 = self.signal_moments()
        db = b - p @ b
        dg = g - p @ g
        return float(p @ (db * db * m2 + 2 * db * dg * m1 + dg * dg) + self.noise**2)


def synth_generate(cfg: SynthConfig, n: int, rng: RngStream):
    """Draw ``n`` samples and their chips. Returns (samples, chips)."""
    if n < 1:
        raise ConfigError("need n >= 1 synthetic samples")
    w, s, e, nn = cfg.bbox
    lon = rng.uniform(w, e, n)
    lat = rng.uniform(s, nn, n)
    year = cfg.years[0] + (rng.random(n) * (cfg.years[1] - cfg.years[0] + 1)).astype(int)
    refl = rng.uniform(cfg.refl_low, cfg.refl_high, (n, cfg.chip_size, cfg.chip_size, len(BANDS)))
    noise = rng.normal(0.0, 1.0, n) * cfg.noise
    region = cfg.region_of(lon, lat)
    y = np.asarray(cfg.slopes)[region] * cfg.spectral_signal(refl) + np.asarray(cfg.intercepts)[region] + noise
    y = np.maximum(y, 0.0)
    width = len(str(n - 1))
    samples, chips = [], []
    for i in range(n):
        sid = f"s{i:0{width}d}"
        samples.append(SampleRecord(sid, float(lon[i]), float(lat[i]), int(year[i]), float(y[i]), f"chips/{sid}.chip"))
        chips.append(ImageChip(refl[i], float(lon[i]), float(lat[i]), cfg.pixel_pitch))
    return samples, chips


def synth_scene(cfg: SynthConfig, size: int, rng: RngStream, center=None):
    """A ``size`` x ``size`` six-band scene at native pixel pitch, as a RasterStack."""
    from .raster import RasterGrid, RasterStack

    w, s, e, n = cfg.bbox
    clon, clat = center if center is not None else ((w + e) / 2, (s + n) / 2)
    west = clon - size * cfg.pixel_pitch / 2
    north = clat + size * cfg.pixel_pitch / 2
    refl = rng.uniform(cfg.refl_low, cfg.refl_high, (len(BANDS), size, size))
    return RasterStack([RasterGrid(refl[b], west, north, cfg.pixel_pitch, band=BANDS[b], tag="scene") for b in range(len(BANDS))])
