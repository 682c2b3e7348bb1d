"""Worldfile parsing, affine transforms, tiling, and windowed raster reads."""

import numpy as np
import pytest

from orthopipe.georaster import (
    GeoTransform,
    IoFailure,
    MalformedWorldfile,
    OutOfBounds,
    PnmRaster,
    SingularTransform,
    TileWindow,
    TilingConfig,
    axis_starts,
    find_worldfile,
    format_worldfile,
    load_worldfile,
    open_raster,
    parse_worldfile,
    pixel_to_world,
    tile_windows,
    world_to_pixel,
    write_raster,
)
from orthopipe.errors import ConfigError

GSD6CM = "0.06\n0\n0\n-0.06\n600000\n9950000\n"


# ---------------------------------------------------------------- worldfiles


def test_parse_worldfile_identity():
    t = parse_worldfile("1\n0\n0\n-1\n0\n0")
    assert t == GeoTransform(a=1.0, d=0.0, b=0.0, e=-1.0, c=0.0, f=0.0)


def test_parse_worldfile_6cm():
    t = parse_worldfile(GSD6CM)
    assert t.a == 0.06 and t.e == -0.06
    assert t.c == 600000.0 and t.f == 9950000.0


def test_parse_worldfile_rejects_singular():
    with pytest.raises(SingularTransform):
        parse_worldfile("1\n0\n0\n0\n0\n0")


def test_parse_worldfile_rejects_wrong_line_count():
    with pytest.raises(MalformedWorldfile):
        parse_worldfile("1\n0\n0\n-1\n0")
    with pytest.raises(MalformedWorldfile):
        parse_worldfile("1\n0\n0\n-1\n0\n0\n7")


def test_parse_worldfile_rejects_junk():
    with pytest.raises(MalformedWorldfile):
        parse_worldfile("1\n0\nzero\n-1\n0\n0")


def test_worldfile_format_parse_roundtrip():
    rng = np.random.default_rng(11)
    for _ in range(20):
        a, b, d, e = rng.uniform(-3, 3, size=4)
        if a * e - b * d == 0.0:
            continue
        t = GeoTransform(a=a, d=d, b=b, e=e, c=float(rng.uniform(-1e6, 1e6)),
                         f=float(rng.uniform(-1e6, 1e6)))
        assert parse_worldfile(format_worldfile(t)) == t


def test_load_worldfile_missing(tmp_path):
    with pytest.raises(MalformedWorldfile):
        load_worldfile(tmp_path / "nope.pgw")


def test_find_worldfile_sidecar(tmp_path):
    img = tmp_path / "a.png"
    img.write_bytes(b"")
    assert find_worldfile(img) is None
    side = tmp_path / "a.pgw"
    side.write_text(GSD6CM)
    assert find_worldfile(img) == side


# ----------------------------------------------------------------- transforms


def test_pixel_to_world_identity_origin():
    t = GeoTransform.identity()
    assert pixel_to_world(t, 0.0, 0.0) == (0.0, 0.0)


def test_pixel_to_world_6cm_hand_value():
    t = parse_worldfile(GSD6CM)
    assert pixel_to_world(t, 100.0, 200.0) == (600006.0, 9949988.0)


def test_world_to_pixel_identity_sign_flip():
    t = GeoTransform.identity()
    assert world_to_pixel(t, 5.5, -3.25) == (5.5, 3.25)


def test_world_to_pixel_6cm_origin():
    t = parse_worldfile(GSD6CM)
    px, py = world_to_pixel(t, 600000.0, 9950000.0)
    assert px == 0.0 and py == 0.0


def test_world_to_pixel_singular_raises():
    t = GeoTransform(a=1.0, d=0.0, b=0.0, e=0.0, c=0.0, f=0.0)
    with pytest.raises(SingularTransform):
        world_to_pixel(t, 1.0, 1.0)


def test_affine_roundtrip_random():
    rng = np.random.default_rng(7)
    for _ in range(200):
        th1, th2 = rng.uniform(0, 2 * np.pi, size=2)
        sx, sy = rng.uniform(0.5, 5.0, size=2)
        r1 = np.array([[np.cos(th1), -np.sin(th1)], [np.sin(th1), np.cos(th1)]])
        r2 = np.array([[np.cos(th2), -np.sin(th2)], [np.sin(th2), np.cos(th2)]])
        m = r1 @ np.diag([sx, -sy]) @ r2
        t = GeoTransform(a=m[0, 0], b=m[0, 1], d=m[1, 0], e=m[1, 1],
                         c=float(rng.uniform(-1e5, 1e5)),
                         f=float(rng.uniform(-1e5, 1e5)))
        px, py = rng.uniform(-4000, 4000, size=2)
        x, y = pixel_to_world(t, px, py)
        qx, qy = world_to_pixel(t, x, y)
        assert abs(qx - px) < 1e-9 and abs(qy - py) < 1e-9
        # and the other direction
        x2, y2 = pixel_to_world(t, *world_to_pixel(t, x, y))
        assert abs(x2 - x) < 1e-6 and abs(y2 - y) < 1e-6


# -------------------------------------------------------------------- tiling


def test_tiling_config_validation():
    TilingConfig(tile=800, stride=800)  # stride == tile is fine
    with pytest.raises(ConfigError):
        TilingConfig(tile=800, stride=0)
    with pytest.raises(ConfigError):
        TilingConfig(tile=800, stride=801)


def test_axis_starts_hand_cases():
    assert axis_starts(2000, 800, 400) == [0, 400, 800, 1200]
    assert axis_starts(1000, 800, 400) == [0, 200]
    assert axis_starts(700, 800, 400) == [0]
    assert axis_starts(800, 800, 400) == [0]
    assert axis_starts(801, 800, 400) == [0, 1]


def test_tile_windows_single():
    wins = tile_windows(800, 800, TilingConfig(800, 400))
    assert wins == [TileWindow(x0=0, y0=0, w=800, h=800, index=0)]


def test_tile_windows_shifted_not_shrunk():
    wins = tile_windows(1200, 800, TilingConfig(800, 400))
    assert [w.x0 for w in wins] == [0, 400]
    assert all(w.w == 800 and w.h == 800 for w in wins)


def test_tile_windows_9x9_grid():
    wins = tile_windows(4000, 4000, TilingConfig(800, 400))
    assert len(wins) == 81
    assert wins[-1].x0 == 3200 and wins[-1].y0 == 3200
    # row-major indexing
    assert [w.index for w in wins] == list(range(81))
    assert wins[9].x0 == 0 and wins[9].y0 == 400


def test_tile_windows_small_raster_clipped():
    wins = tile_windows(500, 300, TilingConfig(800, 400))
    assert wins == [TileWindow(x0=0, y0=0, w=500, h=300, index=0)]


def test_tiling_coverage_random():
    rng = np.random.default_rng(3)
    for _ in range(300):
        size = int(rng.integers(1, 2001))
        tile = int(rng.integers(1, 1000))
        stride = int(rng.integers(1, tile + 1))
        starts = axis_starts(size, tile, stride)
        assert starts[0] == 0
        assert all(b > a for a, b in zip(starts, starts[1:]))
        # consecutive windows overlap or touch: no uncovered gap
        assert all(b - a <= stride for a, b in zip(starts, starts[1:]))
        if size <= tile:
            assert starts == [0]
        else:
            assert all(s + tile <= size for s in starts)
            assert starts[-1] + tile == size


# ------------------------------------------------------------- raster reads


def _checker(h, w, bands):
    base = (np.indices((h, w)).sum(axis=0) % 7 * 36).astype(np.uint8)
    if bands == 1:
        return base
    return np.stack([base, base // 2, 255 - base], axis=2)


def test_pnm_roundtrip_rgb(tmp_path):
    arr = _checker(40, 60, 3)
    path = tmp_path / "img.ppm"
    write_raster(path, arr)
    r = open_raster(path)
    assert (r.width, r.height, r.bands) == (60, 40, 3)
    full = r.read_window(TileWindow(0, 0, 60, 40, 0))
    assert np.array_equal(full, arr)


def test_pnm_roundtrip_gray(tmp_path):
    arr = _checker(25, 31, 1)
    path = tmp_path / "img.pgm"
    write_raster(path, arr)
    r = open_raster(path)
    assert (r.width, r.height, r.bands) == (31, 25, 1)
    full = r.read_window(TileWindow(0, 0, 31, 25, 0))
    assert np.array_equal(full[:, :, 0], arr)


def test_png_matches_pnm(tmp_path):
    arr = _checker(33, 47, 3)
    write_raster(tmp_path / "a.ppm", arr)
    write_raster(tmp_path / "a.png", arr)
    pa = open_raster(tmp_path / "a.ppm").read_window(TileWindow(0, 0, 47, 33, 0))
    pb = open_raster(tmp_path / "a.png").read_window(TileWindow(0, 0, 47, 33, 0))
    assert np.array_equal(pa, pb)


def test_read_window_single_pixel(tmp_path):
    arr = _checker(10, 10, 3)
    path = tmp_path / "img.ppm"
    write_raster(path, arr)
    r = open_raster(path)
    px = r.read_window(TileWindow(0, 0, 1, 1, 0))
    assert px.shape == (1, 1, 3)
    assert np.array_equal(px[0, 0], arr[0, 0])


def test_read_window_overlap_agrees(tmp_path):
    arr = _checker(64, 64, 3)
    path = tmp_path / "img.ppm"
    write_raster(path, arr)
    r = open_raster(path)
    a = r.read_window(TileWindow(0, 0, 48, 48, 0))
    b = r.read_window(TileWindow(16, 16, 48, 48, 1))
    assert np.array_equal(a[16:, 16:], b[:32, :32])


def test_read_window_clips_overhang(tmp_path):
    arr = _checker(20, 20, 1)
    path = tmp_path / "img.pgm"
    write_raster(path, arr)
    r = open_raster(path)
    out = r.read_window(TileWindow(12, 15, 16, 16, 0))
    assert out.shape == (5, 8, 1)
    assert np.array_equal(out[:, :, 0], arr[15:, 12:])


def test_read_window_outside_raises(tmp_path):
    arr = _checker(20, 20, 1)
    path = tmp_path / "img.pgm"
    write_raster(path, arr)
    r = open_raster(path)
    with pytest.raises(OutOfBounds):
        r.read_window(TileWindow(20, 0, 8, 8, 0))


def test_pnm_header_comment(tmp_path):
    arr = np.full((3, 4), 9, dtype=np.uint8)
    path = tmp_path / "c.pgm"
    with open(path, "wb") as fh:
        fh.write(b"P5\n# a comment line\n4 3\n255\n")
        fh.write(arr.tobytes())
    r = PnmRaster(path)
    assert (r.width, r.height) == (4, 3)
    assert np.array_equal(r.read_window(TileWindow(0, 0, 4, 3, 0))[:, :, 0], arr)


def test_pnm_rejects_truncated(tmp_path):
    path = tmp_path / "t.pgm"
    with open(path, "wb") as fh:
        fh.write(b"P5\n100 100\n255\n")
        fh.write(b"\x00" * 50)  # far too short
    with pytest.raises(IoFailure):
        PnmRaster(path)


def test_pnm_rejects_16bit(tmp_path):
    path = tmp_path / "w.pgm"
    with open(path, "wb") as fh:
        fh.write(b"P5\n2 2\n65535\n" + b"\x00" * 8)
    with pytest.raises(IoFailure):
        PnmRaster(path)


def test_open_raster_sidecar_discovery(tmp_path):
    arr = _checker(8, 8, 1)
    write_raster(tmp_path / "s.pgm", arr)
    (tmp_path / "s.pgw").write_text(GSD6CM)
    r = open_raster(tmp_path / "s.pgm")
    assert r.transform is not None and r.transform.a == 0.06


def test_open_raster_explicit_worldfile_wins(tmp_path):
    arr = _checker(8, 8, 1)
    write_raster(tmp_path / "s.pgm", arr)
    (tmp_path / "s.pgw").write_text(GSD6CM)
    other = tmp_path / "other.tfw"
    other.write_text("1\n0\n0\n-1\n10\n20\n")
    r = open_raster(tmp_path / "s.pgm", worldfile=other)
    assert r.transform.a == 1.0 and r.transform.c == 10.0


def test_open_raster_require_transform(tmp_path):
    arr = _checker(8, 8, 1)
    write_raster(tmp_path / "bare.pgm", arr)
    with pytest.raises(MalformedWorldfile):
        open_raster(tmp_path / "bare.pgm", require_transform=True)


def test_open_raster_missing_file(tmp_path):
    with pytest.raises(IoFailure):
        open_raster(tmp_path / "absent.png")


def test_write_raster_rejects_odd_bands(tmp_path):
    with pytest.raises(IoFailure):
        write_raster(tmp_path / "bad.ppm", np.zeros((4, 4, 2), dtype=np.uint8))
