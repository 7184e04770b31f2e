import math

import numpy as np
import pytest

from semand.errors import AlignmentError, DataError
from semand.geometry import Polygon, Trajectory, TrajectoryRecord
from semand.raster import (
    CHANNEL_ORDER,
    Channel,
    ManifestRow,
    _to_pixel_coords,
    fuse,
    normalize,
    rasterize_crm,
    rasterize_polygons,
    rasterize_presence,
    rasterize_segments,
    read_fused_tile,
    read_manifest,
    read_smnd,
    write_fused_tile,
    write_manifest,
    write_smnd,
)
from semand.tilemath import PixelGrid, TileKey, lonlat_to_pixel, lonlat_to_tile, tile_bounds

TILE = lonlat_to_tile(12.30, 45.20, 18)
GRID = PixelGrid(TILE, 64)
BOUNDS = tile_bounds(TILE)


def tile_point(fx: float, fy: float) -> tuple[float, float]:
    """Point at fractional position (fx east, fy south) within TILE."""
    lon_min, lat_min, lon_max, lat_max = BOUNDS
    return lon_min + fx * (lon_max - lon_min), lat_max - fy * (lat_max - lat_min)


def traj(points, mode="drive", pid="t"):
    recs = tuple(
        TrajectoryRecord(lon, lat, float(i), mode) for i, (lon, lat) in enumerate(points)
    )
    return Trajectory(pid, recs)


def segment_box_hits(x0, y0, x1, y1, size):
    """Brute-force oracle: Liang-Barsky closed-box test for every pixel."""
    hits = np.zeros((size, size), dtype=bool)
    dx, dy = x1 - x0, y1 - y0
    for i in range(size):
        for j in range(size):
            t0, t1 = 0.0, 1.0
            ok = True
            for p, q in (
                (-dx, x0 - j),
                (dx, (j + 1) - x0),
                (-dy, y0 - i),
                (dy, (i + 1) - y0),
            ):
                if p == 0.0:
                    if q < 0.0:
                        ok = False
                        break
                else:
                    r = q / p
                    if p < 0:
                        t0 = max(t0, r)
                    else:
                        t1 = min(t1, r)
            if ok and t0 <= t1:
                hits[i, j] = True
    return hits


def test_crm_empty():
    ch = rasterize_crm([], "drive", GRID)
    assert ch.name == "DCRM"
    assert not ch.data.any()


def test_crm_single_record_single_pixel():
    lon, lat = tile_point(0.3, 0.7)
    ch = rasterize_crm([traj([(lon, lat)])], "drive", GRID)
    assert ch.data.sum() == 1.0
    px = lonlat_to_pixel(GRID, lon, lat)
    assert ch.data[px] == 1.0


def test_crm_counts_are_additive():
    lon, lat = tile_point(0.5, 0.5)
    trajs = [traj([(lon, lat)] * 3, pid="a"), traj([(lon, lat)] * 3, pid="b")]
    ch = rasterize_crm(trajs, "drive", GRID)
    px = lonlat_to_pixel(GRID, lon, lat)
    assert ch.data[px] == 6.0
    assert ch.data.sum() == 6.0


def test_crm_mode_filter_and_mass_conservation():
    rng = np.random.default_rng(2)
    lon_min, lat_min, lon_max, lat_max = BOUNDS
    span_x, span_y = lon_max - lon_min, lat_max - lat_min
    trajs = []
    for k in range(20):
        pts = [
            (
                lon_min + float(rng.uniform(-0.5, 1.5)) * span_x,
                lat_min + float(rng.uniform(-0.5, 1.5)) * span_y,
            )
            for _ in range(15)
        ]
        trajs.append(traj(pts, mode="walk" if k % 2 else "drive", pid=f"t{k}"))
    for mode in ("walk", "drive"):
        ch = rasterize_crm(trajs, mode, GRID)
        in_tile = sum(
            1
            for t in trajs
            for r in t.records
            if r.mode == mode and lonlat_to_pixel(GRID, r.lon, r.lat) is not None
        )
        assert ch.data.sum() == in_tile


def test_presence_empty_geometry():
    assert not rasterize_presence([], GRID).data.any()


def test_presence_full_cover_polygon():
    lon_min, lat_min, lon_max, lat_max = BOUNDS
    pad_x = (lon_max - lon_min) * 0.2
    pad_y = (lat_max - lat_min) * 0.2
    p = Polygon(
        "big",
        (
            (lon_min - pad_x, lat_min - pad_y),
            (lon_max + pad_x, lat_min - pad_y),
            (lon_max + pad_x, lat_max + pad_y),
            (lon_min - pad_x, lat_max + pad_y),
            (lon_min - pad_x, lat_min - pad_y),
        ),
    )
    ch = rasterize_polygons([p], GRID)
    assert ch.data.all()


def test_horizontal_segment_interior_row():
    # Segment across the full tile through the middle of pixel row 10.
    lon_min, _, lon_max, _ = BOUNDS
    frac = (10 + 0.5) / GRID.size
    lon_a, lat = tile_point(-0.1, frac)
    lon_b, _ = tile_point(1.1, frac)
    ch = rasterize_segments([((lon_a, lat), (lon_b, lat))], GRID)
    expected = np.zeros((GRID.size, GRID.size))
    expected[10, :] = 1.0
    # The mercator row coordinate is not exactly at the pixel center, but
    # must stay strictly inside row 10.
    assert np.array_equal(ch.data, expected)


def test_segment_on_pixel_boundary_marks_both_rows():
    # A segment lying exactly on the boundary between rows touches the
    # closed boxes of both adjacent rows.
    pts = _to_pixel_coords([tile_point(0.2, 0.5), tile_point(0.8, 0.5)], GRID)
    y = round(pts[0][1])
    mask = np.zeros((GRID.size, GRID.size), dtype=bool)
    from semand.raster import _segment_pixels

    _segment_pixels(np.array([10.0, float(y)]), np.array([50.0, float(y)]), GRID.size, mask)
    # Endpoints on column boundaries touch the closed boxes of columns
    # 9 through 50 inclusive, in both adjacent rows.
    assert mask[y - 1, 9:51].all()
    assert mask[y, 9:51].all()
    assert mask.sum() == 2 * 42


def test_segments_match_bruteforce_oracle():
    rng = np.random.default_rng(7)
    size = 24
    grid = PixelGrid(TILE, size)
    for _ in range(300):
        x0, y0, x1, y1 = rng.uniform(-4, size + 4, size=4)
        mask = np.zeros((size, size), dtype=bool)
        from semand.raster import _segment_pixels

        _segment_pixels(np.array([x0, y0]), np.array([x1, y1]), size, mask)
        oracle = segment_box_hits(x0, y0, x1, y1, size)
        assert np.array_equal(mask, oracle), (x0, y0, x1, y1)


def test_polygon_coverage_matches_independent_pip():
    from matplotlib.path import Path

    rng = np.random.default_rng(5)
    size = 16
    grid = PixelGrid(TILE, size)
    lon_min, lat_min, lon_max, lat_max = BOUNDS
    span_x, span_y = lon_max - lon_min, lat_max - lat_min
    offs = (np.arange(4) + 0.5) / 4
    for _ in range(50):
        cx = lon_min + rng.uniform(0.1, 0.9) * span_x
        cy = lat_min + rng.uniform(0.1, 0.9) * span_y
        r = rng.uniform(0.05, 0.4)
        angles = np.sort(rng.uniform(0, 2 * math.pi, size=6))
        ring = tuple(
            (cx + r * span_x * math.cos(a), cy + r * span_y * math.sin(a)) for a in angles
        )
        poly = Polygon("p", ring + (ring[0],))
        ch = rasterize_polygons([poly], grid)
        ring_px = _to_pixel_coords(poly.ring, grid)
        path = Path(ring_px)
        expected = np.zeros((size, size), dtype=bool)
        for i in range(size):
            for j in range(size):
                pts = [(j + ox, i + oy) for ox in offs for oy in offs]
                expected[i, j] = path.contains_points(pts).any()
        assert np.array_equal(ch.data.astype(bool), expected)


def test_normalize_all_zero_crm():
    ch = Channel("WCRM", GRID, np.zeros((GRID.size, GRID.size)))
    out = normalize(ch)
    assert not out.data.any()


def test_normalize_binary_unchanged():
    rng = np.random.default_rng(3)
    data = (rng.random((GRID.size, GRID.size)) < 0.3).astype(float)
    out = normalize(Channel("RNP", GRID, data))
    assert np.array_equal(out.data, data.astype(np.float32))


def test_normalize_log_linear():
    data = np.zeros((GRID.size, GRID.size))
    data[0, 0] = math.e - 1.0
    data[0, 1] = math.e**2 - 1.0
    out = normalize(Channel("DCRM", GRID, data))
    # Oracle: ln(1+v) / ln(e^2) gives {0, 1/2, 1}.
    assert out.data[0, 0] == pytest.approx(0.5, abs=1e-6)
    assert out.data[0, 1] == pytest.approx(1.0, abs=1e-6)
    assert out.data[1, 1] == 0.0


def test_normalize_rejects_bad_values():
    bad = np.zeros((GRID.size, GRID.size))
    bad[0, 0] = -1.0
    with pytest.raises(DataError):
        normalize(Channel("WCRM", GRID, bad))
    bad[0, 0] = np.nan
    with pytest.raises(DataError):
        normalize(Channel("WCRM", GRID, bad))


def _unit_channels(names, grid=GRID):
    rng = np.random.default_rng(11)
    return [Channel(n, grid, rng.random((grid.size, grid.size))) for n in names]


def test_fuse_seven_channels_canonical_order():
    shuffled = _unit_channels(("RCPP", "SAT_G", "WCRM", "SAT_R", "RNP", "DCRM", "SAT_B"))
    fused = fuse(shuffled)
    assert fused.names == CHANNEL_ORDER
    assert fused.tensor().shape == (7, GRID.size, GRID.size)


def test_fuse_single_channel():
    fused = fuse(_unit_channels(("RNP",)))
    assert fused.names == ("RNP",)
    assert fused.tensor().shape == (1, GRID.size, GRID.size)


def test_fuse_mixed_grids_rejected():
    other = PixelGrid(TileKey(TILE.zoom, TILE.x + 1, TILE.y), GRID.size)
    a = _unit_channels(("RNP",))[0]
    b = _unit_channels(("RCPP",), grid=other)[0]
    with pytest.raises(AlignmentError):
        fuse([a, b])


def test_fuse_rejects_unnormalized():
    data = np.full((GRID.size, GRID.size), 3.0)
    with pytest.raises(DataError):
        fuse([Channel("WCRM", GRID, data)])


def test_pixel_mapping_shared_across_channels():
    # The fractional coordinates used by segment/polygon rasterization
    # floor to exactly the indices lonlat_to_pixel produces.
    rng = np.random.default_rng(23)
    lon_min, lat_min, lon_max, lat_max = BOUNDS
    for _ in range(10_000):
        lon = lon_min + float(rng.random()) * (lon_max - lon_min)
        lat = lat_min + float(rng.random()) * (lat_max - lat_min)
        px = lonlat_to_pixel(GRID, lon, lat)
        frac = _to_pixel_coords([(lon, lat)], GRID)[0]
        assert px == (int(math.floor(frac[1])), int(math.floor(frac[0])))


def test_rasterization_deterministic():
    rng = np.random.default_rng(4)
    lon_min, lat_min, lon_max, lat_max = BOUNDS
    ring = []
    for a in np.linspace(0, 2 * math.pi, 7)[:-1]:
        ring.append(
            (
                (lon_min + lon_max) / 2 + 0.3 * (lon_max - lon_min) * math.cos(a),
                (lat_min + lat_max) / 2 + 0.3 * (lat_max - lat_min) * math.sin(a),
            )
        )
    poly = Polygon("p", tuple(ring) + (ring[0],))
    a = rasterize_polygons([poly], GRID).data
    b = rasterize_polygons([poly], GRID).data
    assert a.tobytes() == b.tobytes()


def test_smnd_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    arr = rng.random((3, 32, 32)).astype(np.float32)
    path = tmp_path / "tile.smnd"
    write_smnd(path, ["SAT_R", "SAT_G", "SAT_B"], arr)
    names, back = read_smnd(path)
    assert names == ["SAT_R", "SAT_G", "SAT_B"]
    assert back.tobytes() == arr.tobytes()
    # Header layout: magic, version, h, w, count.
    blob = path.read_bytes()
    assert blob[:4] == b"SMND"
    import struct

    version, h, w, c = struct.unpack_from("<HHHH", blob, 4)
    assert (version, h, w, c) == (1, 32, 32, 3)


def test_smnd_rejects_corruption(tmp_path):
    path = tmp_path / "bad.smnd"
    arr = np.zeros((1, 8, 8), dtype=np.float32)
    write_smnd(path, ["RNP"], arr)
    blob = path.read_bytes()
    path.write_bytes(blob[:-7])
    with pytest.raises(DataError):
        read_smnd(path)
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(DataError):
        read_smnd(path)


def test_fused_tile_file_round_trip(tmp_path):
    chans = _unit_channels(CHANNEL_ORDER)
    fused = fuse(chans)
    path = tmp_path / "fused.smnd"
    write_fused_tile(path, fused)
    back = read_fused_tile(path, TILE)
    assert back.names == fused.names
    assert back.tensor().tobytes() == fused.tensor().tobytes()
    assert back.tile == TILE


def test_manifest_round_trip(tmp_path):
    rows = [
        ManifestRow(
            tile=TILE.as_string(),
            path="tiles/a.smnd",
            label="normal",
            posedness=None,
            channels=list(CHANNEL_ORDER),
        ),
        ManifestRow(
            tile=TILE.as_string(),
            path="tiles/b.smnd",
            label="augmented",
            posedness=0.2,
            channels=list(CHANNEL_ORDER),
            strategy="rpa",
            action_log="logs/b.json",
        ),
    ]
    path = tmp_path / "manifest.jsonl"
    write_manifest(path, rows)
    back = read_manifest(path)
    assert back == rows
    assert back[1].tile_key() == TILE
