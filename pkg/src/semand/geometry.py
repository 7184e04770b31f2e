"""Vector-domain primitives: polygons, road graphs, trajectories.

Affine transforms treat decimal degrees as planar coordinates within a
tile (a zoom-18 tile spans ~150 m, so projection distortion is
immaterial at that scale) and operate about the polygon centroid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

from .errors import DomainError, GeometryError
from .tilemath import TileKey, tile_bounds

Point = tuple[float, float]

_DEGENERATE_AREA = 1e-30


@dataclass(frozen=True)
class Polygon:
    """Simple closed ring of (lon, lat) points, first point repeated last."""

    id: str
    ring: tuple[Point, ...]

    def __post_init__(self) -> None:
        ring = tuple((float(x), float(y)) for x, y in self.ring)
        object.__setattr__(self, "ring", ring)
        if len(ring) < 4:
            raise GeometryError(f"polygon {self.id!r}: ring needs >= 4 points")
        if ring[0] != ring[-1]:
            raise GeometryError(f"polygon {self.id!r}: ring is not closed")
        if abs(ring_area(ring)) <= _DEGENERATE_AREA:
            raise GeometryError(f"polygon {self.id!r}: zero area")

    @property
    def vertices(self) -> tuple[Point, ...]:
        """Ring without the repeated closing point."""
        return self.ring[:-1]


@dataclass(frozen=True)
class RoadGraph:
    """Road centerline topology: vertices plus navigable edges."""

    vertices: tuple[Point, ...]
    edges: tuple[tuple[int, int, bool], ...]  # (a, b, navigable)

    def __post_init__(self) -> None:
        n = len(self.vertices)
        for a, b, _ in self.edges:
            if not (0 <= a < n and 0 <= b < n):
                raise GeometryError(f"edge ({a}, {b}) references missing vertex")
            if self.vertices[a] == self.vertices[b]:
                raise GeometryError(f"edge ({a}, {b}) has zero length")

    def segments(self, navigable_only: bool = True) -> list[tuple[Point, Point]]:
        out = []
        for a, b, nav in self.edges:
            if nav or not navigable_only:
                out.append((self.vertices[a], self.vertices[b]))
        return out


@dataclass(frozen=True)
class TrajectoryRecord:
    lon: float
    lat: float
    t: float
    mode: str  # "walk" | "drive"


@dataclass(frozen=True)
class Trajectory:
    """Chronological GPS records of one moving object."""

    id: str
    records: tuple[TrajectoryRecord, ...]

    def __post_init__(self) -> None:
        times = [r.t for r in self.records]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise GeometryError(f"trajectory {self.id!r}: timestamps not increasing")


# Affine actions. `delete` lives in the augment module; these three are
# the geometric ones apply_affine understands.


@dataclass(frozen=True)
class Rotate:
    theta: float  # radians, counterclockwise


@dataclass(frozen=True)
class Translate:
    dx: float  # decimal degrees east
    dy: float  # decimal degrees north


@dataclass(frozen=True)
class Scale:
    bx: float
    by: float


AffineAction = Union[Rotate, Translate, Scale]


def ring_area(ring: Sequence[Point]) -> float:
    """Signed shoelace area of a closed ring (planar degrees^2)."""
    a = 0.0
    for (x0, y0), (x1, y1) in zip(ring, ring[1:]):
        a += x0 * y1 - x1 * y0
    return 0.5 * a


def centroid(p: Polygon) -> Point:
    """Area-weighted centroid of the ring in the local planar frame."""
    a = ring_area(p.ring)
    if abs(a) <= _DEGENERATE_AREA:
        raise GeometryError(f"polygon {p.id!r}: degenerate, centroid undefined")
    cx = 0.0
    cy = 0.0
    for (x0, y0), (x1, y1) in zip(p.ring, p.ring[1:]):
        cross = x0 * y1 - x1 * y0
        cx += (x0 + x1) * cross
        cy += (y0 + y1) * cross
    return cx / (6.0 * a), cy / (6.0 * a)


def apply_affine(p: Polygon, action: AffineAction) -> Polygon:
    """Apply one affine action about the polygon centroid.

    The centroid is a fixed point of Rotate and Scale; Translate shifts
    every vertex by (dx, dy).
    """
    if isinstance(action, Translate):
        if not (math.isfinite(action.dx) and math.isfinite(action.dy)):
            raise GeometryError("translation offsets must be finite")
        ring = tuple((x + action.dx, y + action.dy) for x, y in p.ring)
        return Polygon(p.id, ring)
    cx, cy = centroid(p)
    if isinstance(action, Rotate):
        if not math.isfinite(action.theta):
            raise GeometryError("rotation angle must be finite")
        c, s = math.cos(action.theta), math.sin(action.theta)
        ring = tuple(
            (cx + c * (x - cx) - s * (y - cy), cy + s * (x - cx) + c * (y - cy))
            for x, y in p.ring
        )
        return Polygon(p.id, ring)
    if isinstance(action, Scale):
        if action.bx == 0.0 or action.by == 0.0:
            raise GeometryError("scale factors must be nonzero")
        if not (math.isfinite(action.bx) and math.isfinite(action.by)):
            raise GeometryError("scale factors must be finite")
        ring = tuple(
            (cx + action.bx * (x - cx), cy + action.by * (y - cy)) for x, y in p.ring
        )
        return Polygon(p.id, ring)
    raise GeometryError(f"unknown affine action {action!r}")


def _clip_halfplane(
    ring: list[Point], axis: int, bound: float, keep_leq: bool
) -> list[Point]:
    """Sutherland-Hodgman step against one axis-aligned half-plane."""
    if not ring:
        return []

    def inside(pt: Point) -> bool:
        v = pt[axis]
        return v <= bound if keep_leq else v >= bound

    def intersect(a: Point, b: Point) -> Point:
        t = (bound - a[axis]) / (b[axis] - a[axis])
        if axis == 0:
            return bound, a[1] + t * (b[1] - a[1])
        return a[0] + t * (b[0] - a[0]), bound

    out: list[Point] = []
    prev = ring[-1]
    for cur in ring:
        if inside(cur):
            if not inside(prev):
                out.append(intersect(prev, cur))
            out.append(cur)
        elif inside(prev):
            out.append(intersect(prev, cur))
        prev = cur
    return out


def _dedupe_ring(ring: list[Point]) -> list[Point]:
    out: list[Point] = []
    for pt in ring:
        if not out or out[-1] != pt:
            out.append(pt)
    if len(out) > 1 and out[0] == out[-1]:
        out.pop()
    return out


def _insert_touch_points(ring: list[Point]) -> list[Point]:
    """Insert ring vertices that lie strictly inside another edge.

    Box-clipping a concave polygon can leave lobes joined by edges that
    double back along the clip boundary; inserting the touch points
    turns every such join into a repeated vertex that _split_bridges
    can cut at. Collinearity is exact, which suffices here because the
    doubled-back edges lie exactly on a clip bound.
    """
    vertices = set(ring)
    out: list[Point] = []
    for a, b in zip(ring, ring[1:] + ring[:1]):
        out.append(a)
        on_edge = []
        for v in vertices:
            if v == a or v == b:
                continue
            cross = (b[0] - a[0]) * (v[1] - a[1]) - (b[1] - a[1]) * (v[0] - a[0])
            if cross != 0.0:
                continue
            if min(a[0], b[0]) <= v[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= v[
                1
            ] <= max(a[1], b[1]):
                on_edge.append(v)
        on_edge.sort(key=lambda v: (v[0] - a[0]) ** 2 + (v[1] - a[1]) ** 2)
        out.extend(on_edge)
    return out


def _split_bridges(ring: list[Point]) -> list[list[Point]]:
    """Split a weakly simple ring at repeated vertices.

    The join left by a doubled-back clip edge shows up as a repeated
    vertex after touch-point insertion.
    """
    seen: dict[Point, int] = {}
    for idx, pt in enumerate(ring):
        if pt in seen:
            first = seen[pt]
            loop_a = ring[first:idx]
            loop_b = ring[:first] + ring[idx:]
            return _split_bridges(loop_a) + _split_bridges(loop_b)
        seen[pt] = idx
    return [ring]


def clip_to_box(
    p: Polygon, box: tuple[float, float, float, float]
) -> list[Polygon]:
    """Intersect a polygon with an axis-aligned box.

    Returns zero or more simple polygons; degenerate slivers are dropped.
    """
    xmin, ymin, xmax, ymax = box
    ring = list(p.vertices)
    ring = _clip_halfplane(ring, 0, xmin, keep_leq=False)
    ring = _clip_halfplane(ring, 0, xmax, keep_leq=True)
    ring = _clip_halfplane(ring, 1, ymin, keep_leq=False)
    ring = _clip_halfplane(ring, 1, ymax, keep_leq=True)
    ring = _dedupe_ring(ring)
    if len(ring) < 3:
        return []
    pieces = []
    for loop in _split_bridges(_insert_touch_points(ring)):
        loop = _dedupe_ring(loop)
        if len(loop) < 3:
            continue
        closed = tuple(loop) + (loop[0],)
        if abs(ring_area(closed)) <= _DEGENERATE_AREA:
            continue
        pieces.append(Polygon(p.id, closed))
    return pieces


def clip_to_tile(p: Polygon, t: TileKey) -> list[Polygon]:
    """Intersect a polygon with a tile's geographic extent."""
    lon_min, lat_min, lon_max, lat_max = tile_bounds(t)
    return clip_to_box(p, (lon_min, lat_min, lon_max, lat_max))


def is_simple(p: Polygon) -> bool:
    """True if no two non-adjacent edges of the ring intersect."""
    edges = list(zip(p.ring, p.ring[1:]))
    n = len(edges)
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(edges[i], edges[j]):
                return False
    return True


def _segments_cross(e1: tuple[Point, Point], e2: tuple[Point, Point]) -> bool:
    (ax, ay), (bx, by) = e1
    (cx, cy), (dx, dy) = e2

    def orient(px, py, qx, qy, rx, ry):
        v = (qx - px) * (ry - py) - (qy - py) * (rx - px)
        return 0 if v == 0 else (1 if v > 0 else -1)

    o1 = orient(ax, ay, bx, by, cx, cy)
    o2 = orient(ax, ay, bx, by, dx, dy)
    o3 = orient(cx, cy, dx, dy, ax, ay)
    o4 = orient(cx, cy, dx, dy, bx, by)
    return o1 != o2 and o3 != o4


# Geometry files are JSON Lines; one object per line:
# {"id", "kind": "rcp" | "road_edge" | "trajectory",
#  "coords": [[lon, lat], ...], optional "times": [...], optional "mode"}

GeometryObject = Union[Polygon, Trajectory, tuple[Point, Point]]


@dataclass
class GeometrySet:
    """Contents of one geometry JSONL file, grouped by kind."""

    polygons: list[Polygon] = field(default_factory=list)
    road_edges: list[tuple[Point, Point]] = field(default_factory=list)
    trajectories: list[Trajectory] = field(default_factory=list)


def load_geometry_jsonl(path: str | Path) -> GeometrySet:
    out = GeometrySet()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DomainError(f"{path}:{lineno}: invalid JSON") from exc
            kind = obj.get("kind")
            coords = [(float(c[0]), float(c[1])) for c in obj.get("coords", [])]
            if kind == "rcp":
                out.polygons.append(Polygon(str(obj["id"]), tuple(coords)))
            elif kind == "road_edge":
                if len(coords) < 2:
                    raise DomainError(f"{path}:{lineno}: road_edge needs 2+ coords")
                for a, b in zip(coords, coords[1:]):
                    out.road_edges.append((a, b))
            elif kind == "trajectory":
                times = obj.get("times")
                mode = obj.get("mode", "drive")
                if times is None or len(times) != len(coords):
                    raise DomainError(f"{path}:{lineno}: trajectory needs times")
                recs = tuple(
                    TrajectoryRecord(lon, lat, float(t), str(mode))
                    for (lon, lat), t in zip(coords, times)
                )
                out.trajectories.append(Trajectory(str(obj["id"]), recs))
            else:
                raise DomainError(f"{path}:{lineno}: unknown kind {kind!r}")
    return out


def write_geometry_jsonl(
    path: str | Path,
    polygons: Iterable[Polygon] = (),
    road_edges: Iterable[tuple[Point, Point]] = (),
    trajectories: Iterable[Trajectory] = (),
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in polygons:
            fh.write(
                json.dumps(
                    {"id": p.id, "kind": "rcp", "coords": [list(pt) for pt in p.ring]}
                )
                + "\n"
            )
        for idx, (a, b) in enumerate(road_edges):
            fh.write(
                json.dumps(
                    {"id": f"edge-{idx}", "kind": "road_edge", "coords": [list(a), list(b)]}
                )
                + "\n"
            )
        for tr in trajectories:
            modes = {r.mode for r in tr.records}
            if len(modes) > 1:
                raise DomainError(f"trajectory {tr.id!r}: mixed modes in one line")
            fh.write(
                json.dumps(
                    {
                        "id": tr.id,
                        "kind": "trajectory",
                        "coords": [[r.lon, r.lat] for r in tr.records],
                        "times": [r.t for r in tr.records],
                        "mode": next(iter(modes)) if modes else "drive",
                    }
                )
                + "\n"
            )
