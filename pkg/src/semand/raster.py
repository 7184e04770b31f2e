"""Per-modality rasterization onto a tile's pixel grid, and channel fusion.

Boundary conventions (declared, since "at least one present" leaves them
open): segment presence uses closed pixel boxes, so any overlap --
including a segment lying exactly on a shared pixel edge -- marks every
touched pixel. Polygon presence uses 4x4 subsampling per pixel: a pixel
is set if any subsample point lies inside the polygon.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import AlignmentError, DataError, DomainError
from .geometry import Point, Polygon, Trajectory
from .tilemath import PixelGrid, TileKey, _mercator_fractions, lonlat_to_pixel

CHANNEL_ORDER = ("SAT_R", "SAT_G", "SAT_B", "WCRM", "DCRM", "RNP", "RCPP")
_CRM_CHANNELS = ("WCRM", "DCRM")


@dataclass(frozen=True)
class Channel:
    """One modality raster on a pixel grid (float32, row-major)."""

    name: str
    grid: PixelGrid
    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.shape != (self.grid.size, self.grid.size):
            raise AlignmentError(
                f"channel {self.name}: shape {arr.shape} does not match grid "
                f"size {self.grid.size}"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class FusedTile:
    """Pixel-aligned channels of one tile, in canonical order."""

    grid: PixelGrid
    channels: tuple[Channel, ...]

    @property
    def tile(self) -> TileKey:
        return self.grid.tile

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(ch.name for ch in self.channels)

    def tensor(self) -> np.ndarray:
        """Stacked (C, H, W) float32 view of the channels."""
        return np.stack([ch.data for ch in self.channels], axis=0)

    def channel(self, name: str) -> Channel:
        for ch in self.channels:
            if ch.name == name:
                return ch
        raise KeyError(name)


def _to_pixel_coords(points: Sequence[Point], grid: PixelGrid) -> np.ndarray:
    """(lon, lat) points -> fractional (col, row) pixel coordinates.

    Uses the same Mercator fraction helper as lonlat_to_pixel, so
    flooring these coordinates reproduces its integer indices exactly
    and all channels stay pixel-aligned by construction.
    """
    n = 1 << grid.tile.zoom
    out = np.empty((len(points), 2), dtype=np.float64)
    for i, (lon, lat) in enumerate(points):
        fx, fy = _mercator_fractions(lon, lat)
        out[i, 0] = (fx * n - grid.tile.x) * grid.size
        out[i, 1] = (fy * n - grid.tile.y) * grid.size
    return out


def rasterize_crm(
    trajs: Iterable[Trajectory], mode: str, grid: PixelGrid
) -> Channel:
    """Count GPS records of one motion mode per pixel."""
    if mode not in ("walk", "drive"):
        raise DomainError(f"unknown motion mode {mode!r}")
    counts = np.zeros((grid.size, grid.size), dtype=np.float64)
    for tr in trajs:
        for rec in tr.records:
            if rec.mode != mode:
                continue
            px = lonlat_to_pixel(grid, rec.lon, rec.lat)
            if px is not None:
                counts[px] += 1.0
    name = "WCRM" if mode == "walk" else "DCRM"
    return Channel(name, grid, counts)


def _segment_pixels(
    p0: np.ndarray, p1: np.ndarray, size: int, mask: np.ndarray
) -> None:
    """Mark every pixel whose closed box a segment touches (row scan)."""
    x0, y0 = float(p0[0]), float(p0[1])
    x1, y1 = float(p1[0]), float(p1[1])
    dy = y1 - y0
    dx = x1 - x0
    ymin, ymax = (y0, y1) if y0 <= y1 else (y1, y0)
    row_lo = max(0, math.ceil(ymin) - 1)
    row_hi = min(size - 1, math.floor(ymax))
    for row in range(row_lo, row_hi + 1):
        if dy == 0.0:
            tlo, thi = 0.0, 1.0
        else:
            ta = (row - y0) / dy
            tb = (row + 1 - y0) / dy
            if ta > tb:
                ta, tb = tb, ta
            tlo = max(0.0, ta)
            thi = min(1.0, tb)
            if tlo > thi:
                continue
        xa = x0 + dx * tlo
        xb = x0 + dx * thi
        if xa > xb:
            xa, xb = xb, xa
        col_lo = max(0, math.ceil(xa) - 1)
        col_hi = min(size - 1, math.floor(xb))
        if col_lo <= col_hi:
            mask[row, col_lo : col_hi + 1] = True


def rasterize_segments(
    segments: Iterable[tuple[Point, Point]], grid: PixelGrid, name: str = "RNP"
) -> Channel:
    """Binary road-network-presence channel from centerline segments."""
    mask = np.zeros((grid.size, grid.size), dtype=bool)
    for a, b in segments:
        pts = _to_pixel_coords([a, b], grid)
        _segment_pixels(pts[0], pts[1], grid.size, mask)
    return Channel(name, grid, mask.astype(np.float64))


_SUBSAMPLES = 4


def _points_in_ring(px: np.ndarray, py: np.ndarray, ring: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test, vectorized over query points."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(ring) - 1
    for k in range(n):
        xa, ya = ring[k]
        xb, yb = ring[k + 1]
        crosses = (ya > py) != (yb > py)
        if not crosses.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = xa + (py - ya) * (xb - xa) / (yb - ya)
        hit = crosses & (px < xint)
        inside ^= hit
    return inside


def rasterize_polygons(
    polys: Iterable[Polygon], grid: PixelGrid, name: str = "RCPP"
) -> Channel:
    """Binary polygon-presence channel via 4x4 subsample coverage."""
    size = grid.size
    mask = np.zeros((size, size), dtype=bool)
    offs = (np.arange(_SUBSAMPLES) + 0.5) / _SUBSAMPLES
    for poly in polys:
        ring = _to_pixel_coords(poly.ring, grid)
        col_lo = max(0, math.floor(ring[:, 0].min()))
        col_hi = min(size - 1, math.ceil(ring[:, 0].max()) - 1)
        row_lo = max(0, math.floor(ring[:, 1].min()))
        row_hi = min(size - 1, math.ceil(ring[:, 1].max()) - 1)
        if col_lo > col_hi or row_lo > row_hi:
            continue
        cols = np.arange(col_lo, col_hi + 1)
        rows = np.arange(row_lo, row_hi + 1)
        # Subsample lattice over the polygon's pixel bounding box.
        sx = (cols[:, None] + offs[None, :]).reshape(-1)
        sy = (rows[:, None] + offs[None, :]).reshape(-1)
        px = np.broadcast_to(sx[None, :], (sy.size, sx.size))
        py = np.broadcast_to(sy[:, None], (sy.size, sx.size))
        inside = _points_in_ring(px.reshape(-1), py.reshape(-1), ring)
        inside = inside.reshape(sy.size, sx.size)
        covered = inside.reshape(
            len(rows), _SUBSAMPLES, len(cols), _SUBSAMPLES
        ).any(axis=(1, 3))
        mask[row_lo : row_hi + 1, col_lo : col_hi + 1] |= covered
    return Channel(name, grid, mask.astype(np.float64))


def rasterize_presence(geoms: Sequence, grid: PixelGrid, name: str | None = None) -> Channel:
    """Dispatch presence rasterization on geometry kind."""
    geoms = list(geoms)
    if not geoms:
        return Channel(name or "RNP", grid, np.zeros((grid.size, grid.size)))
    if isinstance(geoms[0], Polygon):
        return rasterize_polygons(geoms, grid, name=name or "RCPP")
    return rasterize_segments(geoms, grid, name=name or "RNP")


def normalize(ch: Channel) -> Channel:
    """Normalize a raw channel to [0, 1].

    CRM channels are log-normalized (v -> ln(1+v)) then divided by their
    per-tile max; every other channel is divided by max(channel max, 1).
    """
    data = ch.data.astype(np.float64)
    if np.isnan(data).any():
        raise DataError(f"channel {ch.name}: NaN values")
    if (data < 0).any():
        raise DataError(f"channel {ch.name}: negative values")
    if ch.name in _CRM_CHANNELS:
        data = np.log1p(data)
        peak = data.max()
        if peak > 0:
            data = data / peak
    else:
        data = data / max(float(data.max()), 1.0)
    return Channel(ch.name, ch.grid, data)


def fuse(channels: Iterable[Channel]) -> FusedTile:
    """Concatenate normalized channels into one multimodal tile.

    Any subset of the canonical modalities is allowed; channels are
    arranged in canonical order regardless of input order.
    """
    chans = list(channels)
    if not chans:
        raise AlignmentError("cannot fuse zero channels")
    grid = chans[0].grid
    by_name: dict[str, Channel] = {}
    for ch in chans:
        if ch.name not in CHANNEL_ORDER:
            raise AlignmentError(f"unknown channel name {ch.name!r}")
        if ch.name in by_name:
            raise AlignmentError(f"duplicate channel {ch.name!r}")
        if ch.grid != grid:
            raise AlignmentError(
                f"channel {ch.name} is on grid {ch.grid.tile.as_string()} "
                f"but expected {grid.tile.as_string()}"
            )
        if float(ch.data.min()) < 0.0 or float(ch.data.max()) > 1.0:
            raise DataError(f"channel {ch.name}: not normalized to [0, 1]")
        by_name[ch.name] = ch
    ordered = tuple(by_name[name] for name in CHANNEL_ORDER if name in by_name)
    return FusedTile(grid, ordered)


# SMND container: magic "SMND", version u16=1, height u16, width u16,
# channel_count u16, channel_count null-terminated ASCII names, then the
# channels in order as row-major float32. Little-endian throughout.

_SMND_MAGIC = b"SMND"
_SMND_VERSION = 1


def write_smnd(path: str | Path, names: Sequence[str], data: np.ndarray) -> None:
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim != 3 or arr.shape[0] != len(names):
        raise DataError(f"expected (C, H, W) array with C={len(names)}")
    with open(path, "wb") as fh:
        fh.write(_SMND_MAGIC)
        fh.write(struct.pack("<HHHH", _SMND_VERSION, arr.shape[1], arr.shape[2], len(names)))
        for name in names:
            fh.write(name.encode("ascii") + b"\x00")
        fh.write(arr.tobytes())


def read_smnd(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _SMND_MAGIC:
        raise DataError(f"{path}: bad magic")
    version, height, width, count = struct.unpack_from("<HHHH", blob, 4)
    if version != _SMND_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    pos = 12
    names = []
    for _ in range(count):
        end = blob.index(b"\x00", pos)
        names.append(blob[pos:end].decode("ascii"))
        pos = end + 1
    expected = count * height * width * 4
    payload = blob[pos:]
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes, want {expected}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(count, height, width)
    return names, arr.copy()


def write_fused_tile(path: str | Path, fused: FusedTile) -> None:
    write_smnd(path, fused.names, fused.tensor())


def read_fused_tile(path: str | Path, tile: TileKey) -> FusedTile:
    names, arr = read_smnd(path)
    grid = PixelGrid(tile, size=arr.shape[1])
    chans = tuple(Channel(n, grid, arr[i]) for i, n in enumerate(names))
    return FusedTile(grid, chans)


def load_rgb(path: str | Path, grid: PixelGrid) -> list[Channel]:
    """Load externally supplied RGB imagery for one tile.

    Accepts a .npy array of shape (3, size, size) or an SMND container
    holding the three SAT channels. Values are normalized to [0, 1].
    """
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
    else:
        names, arr = read_smnd(path)
        order = [names.index(n) for n in ("SAT_R", "SAT_G", "SAT_B") if n in names]
        if len(order) != 3:
            raise DataError(f"{path}: expected SAT_R/SAT_G/SAT_B channels")
        arr = arr[order]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataError(f"{path}: expected (3, H, W) imagery, got {arr.shape}")
    if arr.shape[1] != grid.size or arr.shape[2] != grid.size:
        raise AlignmentError(
            f"{path}: imagery is {arr.shape[1]}x{arr.shape[2]}, grid wants {grid.size}"
        )
    out = []
    for i, name in enumerate(("SAT_R", "SAT_G", "SAT_B")):
        out.append(normalize(Channel(name, grid, np.asarray(arr[i], dtype=np.float64))))
    return out


# Manifest: JSON Lines, one row per tile artifact.


@dataclass
class ManifestRow:
    tile: str  # "z/x/y"
    path: str
    label: str  # "normal" | "augmented"
    posedness: float | None
    channels: list[str]
    strategy: str | None = None
    geometry: str | None = None
    action_log: str | None = None

    def tile_key(self) -> TileKey:
        return TileKey.from_string(self.tile)


def write_manifest(path: str | Path, rows: Iterable[ManifestRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            obj = {
                "tile": row.tile,
                "path": row.path,
                "label": row.label,
                "posedness": row.posedness,
                "channels": row.channels,
            }
            if row.strategy is not None:
                obj["strategy"] = row.strategy
            if row.geometry is not None:
                obj["geometry"] = row.geometry
            if row.action_log is not None:
                obj["action_log"] = row.action_log
            fh.write(json.dumps(obj) + "\n")


def read_manifest(path: str | Path) -> list[ManifestRow]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            rows.append(
                ManifestRow(
                    tile=obj["tile"],
                    path=obj["path"],
                    label=obj["label"],
                    posedness=obj.get("posedness"),
                    channels=list(obj.get("channels", [])),
                    strategy=obj.get("strategy"),
                    geometry=obj.get("geometry"),
                    action_log=obj.get("action_log"),
                )
            )
    return rows
