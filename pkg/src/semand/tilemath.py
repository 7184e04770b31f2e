"""Spherical-Mercator zoom-q tile arithmetic (XYZ "slippy" convention).

Tiles are indexed with the origin at the top-left corner: x grows east,
y grows south. A point exactly on a shared tile edge belongs to the tile
with the larger index; at the global east/south boundary indices clamp
inward so the tiling stays gap-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DomainError

# Latitude at which the square Mercator map is cut off.
MAX_MERCATOR_LAT = 85.05112878


@dataclass(frozen=True)
class TileKey:
    """Address of one cell of the 2^zoom x 2^zoom Mercator raster."""

    zoom: int
    x: int
    y: int

    def __post_init__(self) -> None:
        if self.zoom < 0:
            raise DomainError(f"zoom must be >= 0, got {self.zoom}")
        n = 1 << self.zoom
        if not (0 <= self.x < n and 0 <= self.y < n):
            raise DomainError(
                f"tile indices ({self.x}, {self.y}) out of range for zoom {self.zoom}"
            )

    def as_string(self) -> str:
        return f"{self.zoom}/{self.x}/{self.y}"

    @classmethod
    def from_string(cls, s: str) -> "TileKey":
        parts = s.split("/")
        if len(parts) != 3:
            raise DomainError(f"tile key must be 'z/x/y', got {s!r}")
        try:
            z, x, y = (int(p) for p in parts)
        except ValueError as exc:
            raise DomainError(f"tile key must be 'z/x/y', got {s!r}") from exc
        return cls(z, x, y)


@dataclass(frozen=True)
class PixelGrid:
    """The size x size raster lattice of one tile (256 x 256 by default).

    With size=256 each pixel covers exactly one zoom-(tile.zoom+8) subtile.
    """

    tile: TileKey
    size: int = 256

    def __post_init__(self) -> None:
        if self.size < 1:
            raise DomainError(f"grid size must be >= 1, got {self.size}")


def _mercator_fractions(lon: float, lat: float) -> tuple[float, float]:
    """Map (lon, lat) to fractional map coordinates in [0, 1]^2.

    Shared by tile and pixel indexing so that the two stay consistent:
    scaling a fraction by a power of two is exact in binary floating point.
    """
    if not -180.0 <= lon <= 180.0:
        raise DomainError(f"longitude {lon} outside [-180, 180]")
    if not abs(lat) <= MAX_MERCATOR_LAT:
        raise DomainError(f"latitude {lat} outside Mercator limit +-{MAX_MERCATOR_LAT}")
    fx = (lon + 180.0) / 360.0
    lat_rad = math.radians(lat)
    fy = (1.0 - math.log(math.tan(lat_rad) + 1.0 / math.cos(lat_rad)) / math.pi) / 2.0
    return fx, fy


def lonlat_to_tile(lon: float, lat: float, zoom: int) -> TileKey:
    """Return the tile containing the point at the given zoom."""
    if zoom < 0:
        raise DomainError(f"zoom must be >= 0, got {zoom}")
    fx, fy = _mercator_fractions(lon, lat)
    n = 1 << zoom
    x = min(n - 1, max(0, int(math.floor(fx * n))))
    y = min(n - 1, max(0, int(math.floor(fy * n))))
    return TileKey(zoom, x, y)


def tile_bounds(t: TileKey) -> tuple[float, float, float, float]:
    """Geographic bounds of a tile as (lon_min, lat_min, lon_max, lat_max)."""
    n = 1 << t.zoom
    lon_min = t.x / n * 360.0 - 180.0
    lon_max = (t.x + 1) / n * 360.0 - 180.0
    lat_max = _tile_edge_lat(t.y, n)
    lat_min = _tile_edge_lat(t.y + 1, n)
    return lon_min, lat_min, lon_max, lat_max


def _tile_edge_lat(y: int, n: int) -> float:
    return math.degrees(math.atan(math.sinh(math.pi * (1.0 - 2.0 * y / n))))


def lonlat_to_pixel(grid: PixelGrid, lon: float, lat: float) -> tuple[int, int] | None:
    """Pixel (row, col) of the point within the grid, or None if outside.

    Row/col indexing matches the tile convention: row 0 is the grid's
    north edge, col 0 its west edge. Consistent with lonlat_to_tile at
    zoom tile.zoom+8 when size=256.
    """
    fx, fy = _mercator_fractions(lon, lat)
    n = 1 << grid.tile.zoom
    # Fractional tile coordinates at the grid tile's zoom.
    tx = fx * n
    ty = fy * n
    col_f = tx - grid.tile.x
    row_f = ty - grid.tile.y
    if not (0.0 <= col_f < 1.0 and 0.0 <= row_f < 1.0):
        # Global east/south boundary clamps inward, mirroring lonlat_to_tile.
        at_east = grid.tile.x == n - 1 and col_f == 1.0
        at_south = grid.tile.y == n - 1 and row_f == 1.0
        if not ((0.0 <= col_f < 1.0 or at_east) and (0.0 <= row_f < 1.0 or at_south)):
            return None
    row = min(grid.size - 1, int(math.floor(row_f * grid.size)))
    col = min(grid.size - 1, int(math.floor(col_f * grid.size)))
    return row, col
