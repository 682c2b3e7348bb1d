"""Georeferenced raster model: world-file affine transforms, tiling, windowed reads.

Coordinate conventions used throughout the package:

* Pixel coordinate ``(0.0, 0.0)`` is the CENTER of the top-left pixel
  (standard world-file semantics). Integer pixel indices used for array
  slicing refer to whole pixels.
* World coordinates are projected meters (e.g. one UTM zone). No geodetic
  reprojection is performed anywhere.

Supported raster formats are 8-bit PNG and binary PPM/PGM (P6/P5) with a
6-line world-file sidecar (``.tfw``/``.pgw``). PPM/PGM rasters are read
through a memory map, so windows never pull the whole image into memory;
the PNG adapter decodes once on first access and serves windows from the
decoded array (PNG has no random access). Use PPM for very large mosaics.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError


class MalformedWorldfile(DataError):
    pass


class SingularTransform(DataError):
    pass


class OutOfBounds(DataError):
    pass


class IoFailure(DataError):
    pass


WORLDFILE_SUFFIXES = (".tfw", ".pgw")


@dataclass(frozen=True)
class GeoTransform:
    """Affine pixel->world mapping in world-file parameter order.

    ``x = c + a*px + b*py`` and ``y = f + d*px + e*py`` where ``(px, py)``
    is a pixel coordinate with the pixel-center origin convention.
    """

    a: float  # meters per pixel in x
    d: float  # row rotation term
    b: float  # column rotation term
    e: float  # meters per pixel in y (negative for north-up)
    c: float  # world x of the center of pixel (0, 0)
    f: float  # world y of the center of pixel (0, 0)

    def det(self) -> float:
        return self.a * self.e - self.b * self.d

    @staticmethod
    def identity() -> "GeoTransform":
        """Unit-scale north-up transform: 1 m/px, origin at (0, 0)."""
        return GeoTransform(a=1.0, d=0.0, b=0.0, e=-1.0, c=0.0, f=0.0)


def parse_worldfile(text: str) -> GeoTransform:
    """Parse 6-line world-file text (order a, d, b, e, c, f)."""
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) != 6:
        raise MalformedWorldfile(f"expected 6 lines, got {len(lines)}")
    try:
        vals = [float(ln) for ln in lines]
    except ValueError as exc:
        raise MalformedWorldfile(f"unparseable number: {exc}") from exc
    t = GeoTransform(a=vals[0], d=vals[1], b=vals[2], e=vals[3], c=vals[4], f=vals[5])
    if t.det() == 0.0:
        raise SingularTransform("zero determinant in world file")
    return t


def load_worldfile(path: str | Path) -> GeoTransform:
    path = Path(path)
    if not path.is_file():
        raise MalformedWorldfile(f"world file not found: {path}")
    return parse_worldfile(path.read_text())


def find_worldfile(raster_path: str | Path) -> Path | None:
    """Locate a ``.tfw``/``.pgw`` sidecar next to a raster, if present."""
    raster_path = Path(raster_path)
    for suffix in WORLDFILE_SUFFIXES:
        candidate = raster_path.with_suffix(suffix)
        if candidate.is_file():
            return candidate
    return None


def format_worldfile(t: GeoTransform) -> str:
    return "\n".join(repr(float(v)) for v in (t.a, t.d, t.b, t.e, t.c, t.f)) + "\n"


def pixel_to_world(t: GeoTransform, px: float, py: float) -> tuple[float, float]:
    return (t.c + t.a * px + t.b * py, t.f + t.d * px + t.e * py)


def world_to_pixel(t: GeoTransform, x: float, y: float) -> tuple[float, float]:
    """Exact inverse of :func:`pixel_to_world` via 2x2 inversion."""
    det = t.det()
    if det == 0.0:
        raise SingularTransform("transform is not invertible")
    dx = x - t.c
    dy = y - t.f
    px = (t.e * dx - t.b * dy) / det
    py = (t.a * dy - t.d * dx) / det
    return (px, py)


@dataclass(frozen=True)
class TilingConfig:
    tile: int = 800
    stride: int = 400

    def __post_init__(self):
        if not (1 <= self.stride <= self.tile):
            raise ConfigError(
                f"require 1 <= stride <= tile, got stride={self.stride} tile={self.tile}"
            )


@dataclass(frozen=True)
class TileWindow:
    x0: int
    y0: int
    w: int
    h: int
    index: int


def axis_starts(size: int, tile: int, stride: int) -> list[int]:
    """Window start offsets along one axis.

    Guarantees full coverage: the last start is clamped so the final window
    ends exactly at ``size``. A raster smaller than the tile yields the
    single start 0 (clipped window).
    """
    if size <= tile:
        return [0]
    last = size - tile
    starts = list(range(0, last + 1, stride))
    if starts[-1] != last:
        starts.append(last)
    return starts


def tile_windows(width: int, height: int, cfg: TilingConfig) -> list[TileWindow]:
    """Row-major tile windows covering every pixel of a width x height raster.

    Edge windows are shifted (not shrunk) to keep a constant tile size; only
    a raster smaller than the tile produces a clipped window.
    """
    xs = axis_starts(width, cfg.tile, cfg.stride)
    ys = axis_starts(height, cfg.tile, cfg.stride)
    windows = []
    index = 0
    for y0 in ys:
        h = min(cfg.tile, height - y0)
        for x0 in xs:
            w = min(cfg.tile, width - x0)
            windows.append(TileWindow(x0=x0, y0=y0, w=w, h=h, index=index))
            index += 1
    return windows


def tile_iter(raster: "RasterSource", cfg: TilingConfig) -> Iterator[TileWindow]:
    yield from tile_windows(raster.width, raster.height, cfg)


class RasterSource:
    """Windowed read access to an 8-bit raster; read-only after open.

    ``read_window`` is safe to call concurrently from multiple workers.
    """

    width: int
    height: int
    bands: int
    transform: GeoTransform | None
    path: Path | None

    def read_window(self, win: TileWindow) -> np.ndarray:
        """Return the window's pixels as a (h, w, bands) uint8 array.

        Windows overhanging the raster are clipped; the returned array covers
        exactly the clipped extent. A window entirely outside raises
        :class:`OutOfBounds`.
        """
        x0 = max(0, win.x0)
        y0 = max(0, win.y0)
        x1 = min(self.width, win.x0 + win.w)
        y1 = min(self.height, win.y0 + win.h)
        if x0 >= x1 or y0 >= y1:
            raise OutOfBounds(
                f"window ({win.x0},{win.y0},{win.w},{win.h}) does not intersect "
                f"{self.width}x{self.height} raster"
            )
        return self._read_rect(x0, y0, x1, y1)

    def _read_rect(self, x0: int, y0: int, x1: int, y1: int) -> np.ndarray:
        raise NotImplementedError


class PnmRaster(RasterSource):
    """Binary PPM (P6, 3-band) / PGM (P5, 1-band) raster read via memory map."""

    def __init__(self, path: str | Path, transform: GeoTransform | None = None):
        self.path = Path(path)
        try:
            with open(self.path, "rb") as fh:
                magic, (w, h, maxval), offset = _parse_pnm_header(fh)
        except OSError as exc:
            raise IoFailure(f"cannot open raster {self.path}: {exc}") from exc
        if maxval != 255:
            raise IoFailure(f"only 8-bit PNM supported, got maxval {maxval}")
        self.width = w
        self.height = h
        self.bands = 3 if magic == b"P6" else 1
        self.transform = transform
        try:
            self._mmap = np.memmap(
                self.path,
                dtype=np.uint8,
                mode="r",
                offset=offset,
                shape=(self.height, self.width, self.bands),
            )
        except ValueError as exc:
            raise IoFailure(f"truncated PNM data in {self.path}: {exc}") from exc

    def _read_rect(self, x0, y0, x1, y1):
        return np.array(self._mmap[y0:y1, x0:x1, :], dtype=np.uint8)


class ImageRaster(RasterSource):
    """PNG (or any Pillow-readable) raster; decoded once on first window read."""

    def __init__(self, path: str | Path, transform: GeoTransform | None = None):
        from PIL import Image

        self.path = Path(path)
        try:
            with Image.open(self.path) as img:
                self.width, self.height = img.size
                self.bands = 1 if img.mode in ("L", "I;16", "1") else 3
        except OSError as exc:
            raise IoFailure(f"cannot open raster {self.path}: {exc}") from exc
        self.transform = transform
        self._array: np.ndarray | None = None
        self._lock = threading.Lock()

    def _load(self) -> np.ndarray:
        from PIL import Image

        with self._lock:
            if self._array is None:
                with Image.open(self.path) as img:
                    img = img.convert("L" if self.bands == 1 else "RGB")
                    arr = np.asarray(img, dtype=np.uint8)
                if arr.ndim == 2:
                    arr = arr[:, :, np.newaxis]
                self._array = arr
        return self._array

    def _read_rect(self, x0, y0, x1, y1):
        arr = self._array if self._array is not None else self._load()
        return np.array(arr[y0:y1, x0:x1, :], dtype=np.uint8)


def open_raster(
    path: str | Path,
    worldfile: str | Path | None = None,
    require_transform: bool = False,
) -> RasterSource:
    """Open a PNG/PPM/PGM raster, attaching its world-file transform if found.

    An explicit ``worldfile`` path wins over sidecar discovery. With
    ``require_transform`` a missing world file raises
    :class:`MalformedWorldfile`.
    """
    path = Path(path)
    if not path.is_file():
        raise IoFailure(f"raster not found: {path}")
    transform = None
    if worldfile is not None:
        transform = load_worldfile(worldfile)
    else:
        sidecar = find_worldfile(path)
        if sidecar is not None:
            transform = load_worldfile(sidecar)
        elif require_transform:
            raise MalformedWorldfile(
                f"no world file given and no {'/'.join(WORLDFILE_SUFFIXES)} sidecar next to {path}"
            )
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        return PnmRaster(path, transform)
    return ImageRaster(path, transform)


def write_raster(path: str | Path, pixels: np.ndarray) -> None:
    """Write a (h, w) or (h, w, bands) uint8 array as PNG or PPM/PGM by suffix."""
    path = Path(path)
    arr = np.asarray(pixels, dtype=np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    try:
        if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
            _write_pnm(path, arr)
        else:
            from PIL import Image

            Image.fromarray(arr).save(path)
    except OSError as exc:
        raise IoFailure(f"cannot write raster {path}: {exc}") from exc


def _write_pnm(path: Path, arr: np.ndarray) -> None:
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
        h, w = arr.shape[:2]
    elif arr.ndim == 2:
        magic = b"P5"
        h, w = arr.shape
    else:
        raise IoFailure(f"PNM needs 1 or 3 bands, got array shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(arr.tobytes())


def _parse_pnm_header(fh) -> tuple[bytes, tuple[int, int, int], int]:
    """Parse a P5/P6 header, returning (magic, (w, h, maxval), data offset)."""
    magic = fh.read(2)
    if magic not in (b"P5", b"P6"):
        raise IoFailure(f"not a binary PGM/PPM file (magic {magic!r})")

    fields: list[int] = []
    current = b""
    while len(fields) < 3:
        ch = fh.read(1)
        if ch == b"":
            raise IoFailure("truncated PNM header")
        if ch == b"#":  # comment runs to end of line
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if current:
                fields.append(int(current))
                current = b""
            continue
        if not ch.isdigit():
            raise IoFailure(f"bad PNM header byte {ch!r}")
        current += ch
    return magic, (fields[0], fields[1], fields[2]), fh.tell()
