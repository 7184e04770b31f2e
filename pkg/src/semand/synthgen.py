"""Procedural synthetic world: matched roads, casements, trajectories,
and stylized imagery for fully reproducible experiments.

Roads are laid out as a jittered grid plus occasional diagonals;
casement polygons buffer each centerline by half the road width; drive
trajectories follow centerlines with Gaussian GPS noise and walk
trajectories follow sidewalk offset lines with occasional crossings.
Imagery is a flat textured background with darker strips under the
casements. All modalities are geometrically consistent by construction,
and every tile is generated independently from (seed, tile).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .augment import (
    AugmentParams,
    PolygonLog,
    RASTER_STRATEGIES,
    augment_with_posedness,
    baseline_augment_with_posedness,
    replay_action_log,
)
from .errors import ConfigError
from .geometry import Point, Polygon, RoadGraph, Trajectory, TrajectoryRecord
from .raster import (
    CHANNEL_ORDER,
    Channel,
    FusedTile,
    fuse,
    normalize,
    rasterize_polygons,
    rasterize_segments,
    rasterize_crm,
)
from .tilemath import PixelGrid, TileKey, lonlat_to_tile, tile_bounds

_M_PER_DEG_LAT = 111_320.0

MODALITY_CHANNELS = {
    "SI": ("SAT_R", "SAT_G", "SAT_B"),
    "M": ("WCRM", "DCRM"),
    "RNP": ("RNP",),
}


def channels_for_modalities(modalities: Sequence[str]) -> tuple[str, ...]:
    """Reference-channel names for a modality subset, plus RCPP.

    The augmentable RCPP channel is always present; `modalities` selects
    the reference channels fused alongside it.
    """
    names: list[str] = []
    for m in modalities:
        if m not in MODALITY_CHANNELS:
            raise ConfigError(f"unknown modality {m!r} (choose from RNP, M, SI)")
        names.extend(MODALITY_CHANNELS[m])
    names.append("RCPP")
    return tuple(n for n in CHANNEL_ORDER if n in names)


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    zoom: int = 18
    center_lon: float = 12.30
    center_lat: float = 45.20
    tiles_x: int = 4
    tiles_y: int = 4
    grid_size: int = 256
    roads_per_axis: tuple[int, int] = (1, 3)  # min/max parallel roads per axis
    diagonal_prob: float = 0.5
    road_width_m: tuple[float, float] = (6.0, 13.0)
    trajectories_per_tile: int = 8
    records_per_trajectory: int = 45
    walk_fraction: float = 0.4
    gps_noise_m: float = 1.5
    sidewalk_offset_m: float = 3.0
    # Fraction of roads absent from the network graph (stale/incomplete
    # map data): the casement, imagery, and traffic still exist, the
    # centerline does not. At least one edge per tile is always kept.
    rnp_missing_prob: float = 0.3
    background_rgb: tuple[float, float, float] = (0.55, 0.58, 0.50)
    road_rgb: tuple[float, float, float] = (0.30, 0.30, 0.33)
    imagery_noise: float = 0.02
    # Canopy-like occlusion blobs drawn over everything, roads included;
    # they make imagery an imperfect witness, as real tree cover does.
    canopy_blobs: tuple[int, int] = (0, 0)  # min/max blobs per tile
    canopy_radius_frac: tuple[float, float] = (0.05, 0.14)
    canopy_rgb: tuple[float, float, float] = (0.20, 0.33, 0.16)

    def __post_init__(self) -> None:
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise ConfigError("world region must contain at least one tile")
        if self.road_width_m[0] <= 0 or self.road_width_m[1] < self.road_width_m[0]:
            raise ConfigError("road widths must be positive and ordered")
        if self.gps_noise_m < 0:
            raise ConfigError("GPS noise must be >= 0")
        if self.grid_size < 8:
            raise ConfigError("grid size too small")
        if self.roads_per_axis[0] < 1:
            raise ConfigError("need at least one road per tile")
        if not 0.0 <= self.rnp_missing_prob < 1.0:
            raise ConfigError("rnp_missing_prob must be in [0, 1)")

    def tile_keys(self) -> list[TileKey]:
        center = lonlat_to_tile(self.center_lon, self.center_lat, self.zoom)
        keys = []
        for dy in range(self.tiles_y):
            for dx in range(self.tiles_x):
                keys.append(
                    TileKey(self.zoom, center.x - self.tiles_x // 2 + dx,
                            center.y - self.tiles_y // 2 + dy)
                )
        return keys


@dataclass
class TileData:
    """All synthetic modalities of one tile, vector and raster."""

    tile: TileKey
    graph: RoadGraph
    casements: list[Polygon]
    trajectories: list[Trajectory]
    imagery: np.ndarray  # (3, H, W) float32 in [0, 1]
    grid: PixelGrid


def split_tiles(
    keys: Sequence[TileKey], n_eval: int, seed: int = 0
) -> tuple[list[TileKey], list[TileKey]]:
    """Disjoint (train, eval) tile keys; deterministic in the seed."""
    keys = sorted(keys, key=lambda t: (t.zoom, t.x, t.y))
    if not 0 <= n_eval < len(keys):
        raise ConfigError(f"cannot hold out {n_eval} of {len(keys)} tiles")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(7,)))
    order = rng.permutation(len(keys))
    eval_keys = [keys[i] for i in order[:n_eval]]
    train_keys = [keys[i] for i in order[n_eval:]]
    return train_keys, eval_keys


@dataclass
class World:
    config: WorldConfig
    tiles: dict[TileKey, TileData]

    def split(self, n_eval: int, seed: int = 0) -> tuple[list[TileKey], list[TileKey]]:
        return split_tiles(list(self.tiles), n_eval, seed=seed)


def _deg_per_m(lat: float) -> tuple[float, float]:
    return 1.0 / (_M_PER_DEG_LAT * math.cos(math.radians(lat))), 1.0 / _M_PER_DEG_LAT


def _tile_rng(cfg: WorldConfig, tile: TileKey, stream: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(tile.x, tile.y, stream))
    )


def _buffer_segment(pid: str, a: Point, b: Point, half_width_deg: tuple[float, float]) -> Polygon:
    """Rectangle casement around one centerline segment."""
    hx, hy = half_width_deg
    dx = b[0] - a[0]
    dy = b[1] - a[1]
    # Perpendicular in meter space, expressed back in degrees.
    mx = dx / hx if hx > 0 else dx
    my = dy / hy if hy > 0 else dy
    norm = math.hypot(mx, my)
    px = -my / norm * hx
    py = mx / norm * hy
    ring = (
        (a[0] + px, a[1] + py),
        (b[0] + px, b[1] + py),
        (b[0] - px, b[1] - py),
        (a[0] - px, a[1] - py),
        (a[0] + px, a[1] + py),
    )
    return Polygon(pid, ring)


def _generate_tile(cfg: WorldConfig, tile: TileKey) -> TileData:
    lon_min, lat_min, lon_max, lat_max = tile_bounds(tile)
    span_x = lon_max - lon_min
    span_y = lat_max - lat_min
    margin = 0.08
    lat_c = 0.5 * (lat_min + lat_max)
    deg_x, deg_y = _deg_per_m(lat_c)

    rng = _tile_rng(cfg, tile, 0)
    lo, hi = cfg.roads_per_axis
    n_h = int(rng.integers(lo, hi + 1))
    n_v = int(rng.integers(lo, hi + 1))

    roads: list[tuple[Point, Point, float]] = []  # (a, b, width_m)

    def add_road(a: Point, b: Point, width: float) -> None:
        roads.append((a, b, width))

    for _ in range(n_h):
        fy = rng.uniform(0.12, 0.88)
        y = lat_min + fy * span_y
        width = rng.uniform(*cfg.road_width_m)
        add_road(
            (lon_min - margin * span_x, y), (lon_max + margin * span_x, y), width
        )
    for _ in range(n_v):
        fx = rng.uniform(0.12, 0.88)
        x = lon_min + fx * span_x
        width = rng.uniform(*cfg.road_width_m)
        add_road(
            (x, lat_min - margin * span_y), (x, lat_max + margin * span_y), width
        )
    if rng.random() < cfg.diagonal_prob:
        width = rng.uniform(*cfg.road_width_m)
        if rng.random() < 0.5:
            a = (lon_min - margin * span_x, lat_min + rng.uniform(0.0, 0.3) * span_y)
            b = (lon_max + margin * span_x, lat_max - rng.uniform(0.0, 0.3) * span_y)
        else:
            a = (lon_min + rng.uniform(0.0, 0.3) * span_x, lat_max + margin * span_y)
            b = (lon_max - rng.uniform(0.0, 0.3) * span_x, lat_min - margin * span_y)
        add_road(a, b, width)

    # Incomplete network data: some roads never make it into the graph,
    # though their casement, imagery footprint, and traffic all exist.
    mapped = [rng.random() >= cfg.rnp_missing_prob for _ in roads]
    if not any(mapped):
        mapped[0] = True
    vertices: list[Point] = []
    edges: list[tuple[int, int, bool]] = []
    for (a, b, _), keep in zip(roads, mapped):
        if keep:
            vertices.append(a)
            vertices.append(b)
            edges.append((len(vertices) - 2, len(vertices) - 1, True))
    graph = RoadGraph(tuple(vertices), tuple(edges))
    casements = [
        _buffer_segment(
            f"{tile.as_string()}/rcp-{i}",
            a,
            b,
            (0.5 * w * deg_x, 0.5 * w * deg_y),
        )
        for i, (a, b, w) in enumerate(roads)
    ]

    trajectories = _generate_trajectories(cfg, tile, roads, deg_x, deg_y)

    grid = PixelGrid(tile, cfg.grid_size)
    imagery = _render_imagery(cfg, tile, casements, grid)
    return TileData(tile, graph, casements, trajectories, imagery, grid)


def _generate_trajectories(
    cfg: WorldConfig,
    tile: TileKey,
    roads: list[tuple[Point, Point, float]],
    deg_x: float,
    deg_y: float,
) -> list[Trajectory]:
    rng = _tile_rng(cfg, tile, 1)
    out: list[Trajectory] = []
    n_walk = int(round(cfg.trajectories_per_tile * cfg.walk_fraction))
    for ti in range(cfg.trajectories_per_tile):
        mode = "walk" if ti < n_walk else "drive"
        a, b, width = roads[int(rng.integers(len(roads)))]
        dx, dy = b[0] - a[0], b[1] - a[1]
        length_m = math.hypot(dx / deg_x, dy / deg_y)
        speed = rng.uniform(1.0, 2.0) if mode == "walk" else rng.uniform(6.0, 14.0)
        if mode == "walk":
            # Sidewalk: offset from the centerline past the casement edge.
            side = 1.0 if rng.random() < 0.5 else -1.0
            off_m = side * (0.5 * width + cfg.sidewalk_offset_m)
            mxn = (dx / deg_x, dy / deg_y)
            norm = math.hypot(*mxn)
            off = (-mxn[1] / norm * off_m * deg_x, mxn[0] / norm * off_m * deg_y)
        else:
            off = (0.0, 0.0)
        start_f = rng.uniform(0.0, 0.75)
        direction = 1.0 if rng.random() < 0.5 else -1.0
        t0 = float(rng.integers(0, 86_400))
        recs = []
        f = start_f
        step_f = speed / max(length_m, 1.0)
        for k in range(cfg.records_per_trajectory):
            f_k = min(max(f + direction * step_f * k, 0.0), 1.0)
            lon = a[0] + f_k * dx + off[0]
            lat = a[1] + f_k * dy + off[1]
            if cfg.gps_noise_m > 0:
                lon += rng.normal(0.0, cfg.gps_noise_m) * deg_x
                lat += rng.normal(0.0, cfg.gps_noise_m) * deg_y
            recs.append(TrajectoryRecord(lon, lat, t0 + float(k), mode))
        out.append(Trajectory(f"{tile.as_string()}/traj-{ti}", tuple(recs)))
    return out


def _render_imagery(
    cfg: WorldConfig, tile: TileKey, casements: list[Polygon], grid: PixelGrid
) -> np.ndarray:
    rng = _tile_rng(cfg, tile, 2)
    road_mask = rasterize_polygons(casements, grid).data.astype(np.float64)
    tint = rng.uniform(-0.04, 0.04, size=3)
    img = np.empty((3, grid.size, grid.size), dtype=np.float64)
    for c in range(3):
        base = cfg.background_rgb[c] + tint[c]
        img[c] = base + (cfg.road_rgb[c] - base) * road_mask
    lo, hi = cfg.canopy_blobs
    if hi > 0:
        n_blobs = int(rng.integers(lo, hi + 1))
        size = grid.size
        yy, xx = np.mgrid[0:size, 0:size]
        for _ in range(n_blobs):
            cy, cx = rng.uniform(0, size, size=2)
            ry = rng.uniform(*cfg.canopy_radius_frac) * size
            rx = rng.uniform(*cfg.canopy_radius_frac) * size
            blob = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            shade = rng.uniform(0.85, 1.1)
            for c in range(3):
                img[c][blob] = cfg.canopy_rgb[c] * shade
    img += rng.normal(0.0, cfg.imagery_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_tile(cfg: WorldConfig, tile: TileKey) -> TileData:
    """Generate one tile; independent and pure given (cfg, tile)."""
    return _generate_tile(cfg, tile)


def generate_world(cfg: WorldConfig) -> World:
    tiles = {key: _generate_tile(cfg, key) for key in cfg.tile_keys()}
    return World(cfg, tiles)


def reference_channels(td: TileData, modalities: Sequence[str]) -> list[Channel]:
    """Normalized reference channels of one tile for a modality subset."""
    chans: list[Channel] = []
    names = set()
    for m in modalities:
        names.update(MODALITY_CHANNELS[m])
    if "SAT_R" in names:
        for i, nm in enumerate(("SAT_R", "SAT_G", "SAT_B")):
            chans.append(normalize(Channel(nm, td.grid, td.imagery[i])))
    if "WCRM" in names:
        chans.append(normalize(rasterize_crm(td.trajectories, "walk", td.grid)))
        chans.append(normalize(rasterize_crm(td.trajectories, "drive", td.grid)))
    if "RNP" in names:
        chans.append(normalize(rasterize_segments(td.graph.segments(), td.grid)))
    return chans


def fused_normal(td: TileData, modalities: Sequence[str]) -> FusedTile:
    """Normal multimodal instance of one tile."""
    chans = reference_channels(td, modalities)
    chans.append(normalize(rasterize_polygons(td.casements, td.grid)))
    return fuse(chans)


def _derive_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=key).generate_state(1)[0])


class WorldPairProvider:
    """Training pairs from a world: fresh augmentation every epoch.

    Reference channels are rasterized once per tile; only the augmented
    casement channel is redrawn per (epoch, index) from counter-derived
    sub-seeds.
    """

    def __init__(
        self,
        world: World,
        tile_keys: Sequence[TileKey],
        params: AugmentParams,
        seed: int,
        modalities: Sequence[str] = ("RNP", "M", "SI"),
        strategy: str = "rpa",
    ) -> None:
        if strategy != "rpa" and strategy not in RASTER_STRATEGIES:
            raise ConfigError(f"unknown augmentation strategy {strategy!r}")
        self.world = world
        self.keys = list(tile_keys)
        self.params = params
        self.seed = seed
        self.strategy = strategy
        self._ref: list[np.ndarray] = []
        self._normal_rcpp: list[Channel] = []
        for key in self.keys:
            td = world.tiles[key]
            ref = reference_channels(td, modalities)
            self._ref.append(
                np.stack([c.data for c in ref]) if ref else
                np.zeros((0, td.grid.size, td.grid.size), dtype=np.float32)
            )
            self._normal_rcpp.append(rasterize_polygons(td.casements, td.grid))

    def __len__(self) -> int:
        return len(self.keys)

    def get_pair(self, epoch: int, index: int) -> tuple[np.ndarray, np.ndarray]:
        td = self.world.tiles[self.keys[index]]
        ref = self._ref[index]
        normal = self._normal_rcpp[index]
        sub_seed = _derive_seed(self.seed, epoch, index)
        if self.strategy == "rpa":
            rec = augment_with_posedness(
                td.casements, td.tile, self.params, sub_seed, grid=td.grid
            )
            aug = rec.augmented_rcpp
        else:
            aug, _, _ = baseline_augment_with_posedness(
                normal, self.strategy, self.params, sub_seed
            )
        xn = np.concatenate([ref, normalize(normal).data[None]], axis=0)
        xa = np.concatenate([ref, normalize(aug).data[None]], axis=0)
        return xn, xa


@dataclass
class EvalItem:
    tile: TileKey
    label: str  # "normal" | "anomalous"
    strategy: str | None
    tensor: np.ndarray  # (C, H, W)
    posedness: float | None = None


@dataclass
class EvalSplit:
    items: list[EvalItem]

    def by_strategy(self, strategy: str) -> tuple[list[EvalItem], list[EvalItem]]:
        normals = [i for i in self.items if i.label == "normal"]
        anomalies = [i for i in self.items if i.strategy == strategy]
        return normals, anomalies


def make_eval_split(
    world: World,
    eval_keys: Sequence[TileKey],
    rho: float,
    strategies: Sequence[str],
    seed: int,
    modalities: Sequence[str] = ("RNP", "M", "SI"),
    params: AugmentParams | None = None,
) -> EvalSplit:
    """Held-out normal tiles plus per-strategy anomalous counterparts."""
    if not eval_keys:
        raise ConfigError("eval split needs at least one tile")
    if params is None:
        params = AugmentParams()
    params = replace(params, rho=rho)
    items: list[EvalItem] = []
    for idx, key in enumerate(eval_keys):
        td = world.tiles[key]
        ref = reference_channels(td, modalities)
        ref_stack = (
            np.stack([c.data for c in ref]) if ref else
            np.zeros((0, td.grid.size, td.grid.size), dtype=np.float32)
        )
        normal = rasterize_polygons(td.casements, td.grid)
        xn = np.concatenate([ref_stack, normalize(normal).data[None]], axis=0)
        items.append(EvalItem(key, "normal", None, xn))
        for s_idx, strategy in enumerate(strategies):
            sub_seed = _derive_seed(seed, idx, s_idx)
            if strategy == "rpa":
                rec = augment_with_posedness(td.casements, key, params, sub_seed, grid=td.grid)
                aug, rho_val = rec.augmented_rcpp, rec.posedness
            else:
                aug, rho_val, _ = baseline_augment_with_posedness(
                    normal, strategy, params, sub_seed
                )
            xa = np.concatenate([ref_stack, normalize(aug).data[None]], axis=0)
            items.append(EvalItem(key, "anomalous", strategy, xa, posedness=rho_val))
    return EvalSplit(items)


def single_defect_tile(
    td: TileData,
    params: AugmentParams,
    seed: int,
    modalities: Sequence[str] = ("RNP", "M", "SI"),
) -> tuple[np.ndarray, np.ndarray] | None:
    """A tile with exactly one translated polygon, plus its change mask.

    Returns (input tensor, boolean changed-pixel mask), or None when the
    shift leaves the raster unchanged (shift below pixel resolution).
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(3,)))
    pick = int(rng.integers(len(td.casements)))
    sign_x = 1.0 if rng.random() < 0.5 else -1.0
    sign_y = 1.0 if rng.random() < 0.5 else -1.0
    dx = sign_x * rng.uniform(params.delta0, params.delta1)
    dy = sign_y * rng.uniform(params.delta0, params.delta1)
    log = tuple(
        PolygonLog(
            p.id,
            selected=(i == pick),
            actions=({"kind": "translate", "dx": dx, "dy": dy},) if i == pick else (),
        )
        for i, p in enumerate(td.casements)
    )
    aug_polys = replay_action_log(td.casements, td.tile, log)
    normal = rasterize_polygons(td.casements, td.grid)
    augmented = rasterize_polygons(aug_polys, td.grid)
    changed = normal.data != augmented.data
    if not changed.any():
        return None
    ref = reference_channels(td, modalities)
    ref_stack = (
        np.stack([c.data for c in ref]) if ref else
        np.zeros((0, td.grid.size, td.grid.size), dtype=np.float32)
    )
    xa = np.concatenate([ref_stack, normalize(augmented).data[None]], axis=0)
    return xa, changed
