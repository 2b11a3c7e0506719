"""Georeferenced float grids and their binary file format.

File layout: ``RAST0001``, a little-endian u64 header length, a UTF-8 JSON
header (geometry, band labels, tag), then ``bands * height * width``
little-endian float64 values, band-major then row-major. NaN marks masked
cells. Row 0 is the northern edge.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"RAST0001"


@dataclass
class RasterGrid:
    values: np.ndarray  # (height, width)
    west: float
    north: float
    cell: float
    band: str = "value"
    tag: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"raster values must be 2-D, got shape {self.values.shape}")
        if not self.cell > 0:
            raise DataError("raster cell size must be positive")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        """(west, south, east, north)."""
        return (self.west, self.north - self.height * self.cell, self.west + self.width * self.cell, self.north)

    def geometry(self) -> tuple:
        return (self.height, self.width, self.west, self.north, self.cell)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Longitude and latitude of every cell centre, each shaped (height, width)."""
        lon = self.west + (np.arange(self.width) + 0.5) * self.cell
        lat = self.north - (np.arange(self.height) + 0.5) * self.cell
        return np.meshgrid(lon, lat)

    def with_values(self, values, band=None, tag=None) -> "RasterGrid":
        return RasterGrid(values, self.west, self.north, self.cell, band or self.band, self.tag if tag is None else tag)


@dataclass
class RasterStack:
    """Grids sharing one geometry: the bands of a scene, or the years of a map series."""

    grids: list = field(default_factory=list)

    def __post_init__(self):
        if self.grids:
            g0 = self.grids[0].geometry()
            for g in self.grids[1:]:
                if g.geometry() != g0:
                    raise DataError(f"raster geometry mismatch: {g.geometry()} vs {g0}")

    def __len__(self):
        return len(self.grids)

    def __iter__(self):
        return iter(self.grids)

    def __getitem__(self, i):
        return self.grids[i]

    def array(self) -> np.ndarray:
        return np.stack([g.values for g in self.grids])


def write_raster(path, grids) -> None:
    """Write one grid or a stack of same-geometry grids to ``path``."""
    if isinstance(grids, RasterGrid):
        grids = [grids]
    stack = RasterStack(list(grids))
    g0 = stack[0]
    header = {
        "height": g0.height,
        "width": g0.width,
        "west": g0.west,
        "north": g0.north,
        "cell": g0.cell,
        "bands": [g.band for g in stack],
        "tags": [g.tag for g in stack],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(np.ascontiguousarray(stack.array(), dtype="<f8").tobytes())


def read_raster(path) -> RasterStack:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: bad raster magic at offset 0: {raw[:8]!r}")
    if len(raw) < 16:
        raise DataError(f"{path}: truncated raster header at offset 8")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        h = json.loads(raw[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable raster header at offset 16") from exc
    nb, height, width = len(h["bands"]), h["height"], h["width"]
    need = nb * height * width * 8
    if len(raw) - 16 - n != need:
        raise DataError(f"{path}: payload at offset {16 + n} has {len(raw) - 16 - n} bytes, expected {need}")
    data = np.frombuffer(raw, dtype="<f8", offset=16 + n).reshape(nb, height, width).astype(np.float64)
    return RasterStack(
        [RasterGrid(data[i].copy(), h["west"], h["north"], h["cell"], h["bands"][i], h["tags"][i]) for i in range(nb)]
    )


def read_grid(path) -> RasterGrid:
    stack = read_raster(path)
    if len(stack) != 1:
        raise DataError(f"{path}: expected a single-band raster, found {len(stack)} bands")
    return stack[0]
