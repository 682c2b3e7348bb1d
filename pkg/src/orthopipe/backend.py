"""Detection backends and the worker wire protocol.

Two backend families implement the same two-method contract (``detect`` on a
tile, ``segment`` on a list of prompt boxes):

* :class:`OracleBackend` replays planted ground truth with configurable,
  fully deterministic noise.  Every stochastic decision is keyed on stable
  integers (run seed, decision tag, object id or tile index), never on call
  order, so an object shared by several overlapping tiles is dropped,
  jittered and scored identically in each of them.
* :class:`ExternalBackend` drives a worker subprocess over newline-delimited
  JSON on stdin/stdout.  Tiles are handed over as raw PPM/PGM files on local
  disk; requests and responses are correlated by an integer ``id``.

Boxes are ``(x1, y1, x2, y2)`` floats in tile-local pixel coordinates.
Masks travel as row-major run-length encodings that always start with a
background run (``counts[0]`` may be 0).
"""

from __future__ import annotations

import json
import queue
import shlex
import shutil
import subprocess
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BackendError, ConfigError, DataError
from .georaster import TileWindow, write_raster

Box = tuple[float, float, float, float]

# seed-stream tags keeping per-object decisions independent of one another
_TAG_DROP = 1
_TAG_JITTER = 2
_TAG_SCORE = 3
_TAG_SPURIOUS = 4


class BackendUnavailable(BackendError):
    """The worker process could not be started or died mid-run."""


class BackendTimeout(BackendError):
    """The worker did not answer within the configured deadline."""


class ProtocolViolation(BackendError):
    """The worker sent something that is not a valid protocol message."""


class BackendFailure(BackendError):
    """The worker answered with an explicit error payload."""


class MalformedRLE(DataError):
    """Run-length counts that cannot describe a mask of the stated size."""


@dataclass(frozen=True)
class Detection:
    """One detected box in tile-local pixel coordinates."""

    bbox: Box
    score: float


@dataclass(frozen=True)
class TilePrediction:
    """All detections reported for one tile window."""

    window: TileWindow
    detections: tuple[Detection, ...]


@dataclass(frozen=True)
class MaskRLE:
    """Row-major run-length mask, runs alternating starting with background.

    ``counts[0]`` is the leading background run and may be zero when the
    mask starts with foreground; the counts always sum to ``w * h``.
    """

    w: int
    h: int
    counts: tuple[int, ...]


def iou_xyxy(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two ``(x1, y1, x2, y2)`` boxes."""
    ix1 = max(a[0], b[0])
    iy1 = max(a[1], b[1])
    ix2 = min(a[2], b[2])
    iy2 = min(a[3], b[3])
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def rle_encode(mask: np.ndarray) -> MaskRLE:
    """Encode a 2-D boolean mask as row-major run lengths.

    Args:
        mask: array of shape ``(h, w)``; nonzero means foreground.

    Returns:
        The encoded mask.  An all-background mask encodes as a single run.
    """
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise MalformedRLE(f"mask must be 2-D, got shape {arr.shape}")
    h, w = arr.shape
    flat = arr.ravel().astype(bool)
    if flat.size == 0:
        return MaskRLE(w=w, h=h, counts=(0,))
    edges = np.flatnonzero(np.diff(flat))
    bounds = np.concatenate(([0], edges + 1, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return MaskRLE(w=w, h=h, counts=tuple(int(r) for r in runs))


def rle_decode(rle: MaskRLE) -> np.ndarray:
    """Decode run lengths back to a ``(h, w)`` boolean mask."""
    if rle.w < 0 or rle.h < 0:
        raise MalformedRLE(f"negative mask size {rle.w}x{rle.h}")
    counts = list(rle.counts)
    if any(not isinstance(c, (int, np.integer)) or c < 0 for c in counts):
        raise MalformedRLE("run lengths must be non-negative integers")
    total = sum(counts)
    if total != rle.w * rle.h:
        raise MalformedRLE(
            f"run lengths sum to {total}, expected {rle.w * rle.h}"
        )
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return flat.reshape(rle.h, rle.w)


def inscribed_ellipse_mask(w: int, h: int) -> np.ndarray:
    """Boolean mask of the axis-aligned ellipse inscribed in a ``w x h`` box.

    A pixel belongs to the ellipse when its center lies inside or on the
    ellipse with semi-axes ``w / 2`` and ``h / 2``.
    """
    if w <= 0 or h <= 0:
        raise ConfigError(f"mask size must be positive, got {w}x{h}")
    cx = np.arange(w, dtype=np.float64) + 0.5 - w / 2.0
    cy = np.arange(h, dtype=np.float64) + 0.5 - h / 2.0
    nx = cx / (w / 2.0)
    ny = cy / (h / 2.0)
    return (ny[:, None] ** 2 + nx[None, :] ** 2) <= 1.0


@dataclass(frozen=True)
class OracleNoise:
    """Degradation knobs for the planted-truth oracle.

    Attributes:
        drop_rate: probability an object is omitted everywhere it appears.
        spurious_rate: Poisson mean of fabricated boxes per tile.
        center_sigma: stddev in pixels of the translation applied per object.
        score_sigma: stddev of additive score noise.
        score_bias: additive score offset applied before clamping.
        spurious_size: box side range for fabricated boxes.
        spurious_score: score range for fabricated boxes.
    """

    drop_rate: float = 0.0
    spurious_rate: float = 0.0
    center_sigma: float = 0.0
    score_sigma: float = 0.0
    score_bias: float = 0.0
    spurious_size: tuple[float, float] = (16.0, 32.0)
    spurious_score: tuple[float, float] = (0.05, 0.15)

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ConfigError(f"drop_rate must be in [0, 1], got {self.drop_rate}")
        if self.spurious_rate < 0.0:
            raise ConfigError(f"spurious_rate must be >= 0, got {self.spurious_rate}")
        if self.center_sigma < 0.0 or self.score_sigma < 0.0:
            raise ConfigError("noise sigmas must be >= 0")
        if self.spurious_size[0] <= 0.0 or self.spurious_size[1] < self.spurious_size[0]:
            raise ConfigError(f"bad spurious_size range {self.spurious_size}")


def object_dropped(seed: int, obj_id: int, drop_rate: float) -> bool:
    """Deterministic drop decision for one object, identical in every tile."""
    if drop_rate <= 0.0:
        return False
    rng = np.random.default_rng([seed, _TAG_DROP, obj_id])
    return bool(rng.random() < drop_rate)


def object_jitter(seed: int, obj_id: int, center_sigma: float) -> tuple[float, float]:
    """Deterministic translation applied to one object's box."""
    if center_sigma <= 0.0:
        return (0.0, 0.0)
    rng = np.random.default_rng([seed, _TAG_JITTER, obj_id])
    dx, dy = rng.normal(0.0, center_sigma, size=2)
    return (float(dx), float(dy))


def object_score(seed: int, obj_id: int, iou: float, noise: OracleNoise) -> float:
    """Score an emitted object: IoU against its truth box, biased and noised."""
    value = iou + noise.score_bias
    if noise.score_sigma > 0.0:
        rng = np.random.default_rng([seed, _TAG_SCORE, obj_id])
        value += float(rng.normal(0.0, noise.score_sigma))
    return float(min(1.0, max(0.0, value)))


def spurious_for_window(
    seed: int, window: TileWindow, noise: OracleNoise
) -> list[Detection]:
    """Fabricated boxes for one tile, keyed on the tile index alone."""
    if noise.spurious_rate <= 0.0:
        return []
    rng = np.random.default_rng([seed, _TAG_SPURIOUS, window.index])
    count = int(rng.poisson(noise.spurious_rate))
    out: list[Detection] = []
    for _ in range(count):
        side = float(rng.uniform(*noise.spurious_size))
        half = side / 2.0
        cx = float(rng.uniform(half, max(half, window.w - half)))
        cy = float(rng.uniform(half, max(half, window.h - half)))
        score = float(rng.uniform(*noise.spurious_score))
        out.append(
            Detection(bbox=(cx - half, cy - half, cx + half, cy + half), score=score)
        )
    return out


def assign_objects(
    windows: Sequence[TileWindow],
    boxes: np.ndarray,
    width: int,
    height: int,
) -> list[list[tuple[int, Box]]]:
    """Decide which tiles report which truth objects.

    An object goes to every window that fully contains its raster-clipped
    box, so overlapped tiles report exact duplicates for fusion to collapse.
    An object too large to fit in any window goes to exactly one window,
    the first in row-major order that contains its center, clipped to it.

    Args:
        windows: tile windows covering the raster.
        boxes: ``(n, 4)`` truth boxes in global pixel coordinates.
        width: raster width in pixels.
        height: raster height in pixels.

    Returns:
        Per-window lists of ``(object_id, global_box)`` pairs.
    """
    arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out: list[list[tuple[int, Box]]] = [[] for _ in windows]
    for obj_id in range(arr.shape[0]):
        x1 = max(0.0, float(arr[obj_id, 0]))
        y1 = max(0.0, float(arr[obj_id, 1]))
        x2 = min(float(width), float(arr[obj_id, 2]))
        y2 = min(float(height), float(arr[obj_id, 3]))
        if x2 <= x1 or y2 <= y1:
            continue
        containing = [
            win
            for win in windows
            if win.x0 <= x1 and x2 <= win.x0 + win.w
            and win.y0 <= y1 and y2 <= win.y0 + win.h
        ]
        if containing:
            for win in containing:
                out[win.index].append((obj_id, (x1, y1, x2, y2)))
            continue
        cx = (x1 + x2) / 2.0
        cy = (y1 + y2) / 2.0
        for win in windows:
            if win.x0 <= cx < win.x0 + win.w and win.y0 <= cy < win.y0 + win.h:
                clipped = (
                    max(x1, float(win.x0)),
                    max(y1, float(win.y0)),
                    min(x2, float(win.x0 + win.w)),
                    min(y2, float(win.y0 + win.h)),
                )
                out[win.index].append((obj_id, clipped))
                break
    return out


def oracle_detections(
    window: TileWindow,
    assigned: Sequence[tuple[int, Box]],
    noise: OracleNoise,
    seed: int,
) -> list[Detection]:
    """Emit one tile's detections from its assigned truth objects."""
    out: list[Detection] = []
    for obj_id, box in assigned:
        if object_dropped(seed, obj_id, noise.drop_rate):
            continue
        dx, dy = object_jitter(seed, obj_id, noise.center_sigma)
        moved = (box[0] + dx, box[1] + dy, box[2] + dx, box[3] + dy)
        score = object_score(seed, obj_id, iou_xyxy(moved, box), noise)
        local = (
            moved[0] - window.x0,
            moved[1] - window.y0,
            moved[2] - window.x0,
            moved[3] - window.y0,
        )
        out.append(Detection(bbox=local, score=score))
    out.extend(spurious_for_window(seed, window, noise))
    return out


class OracleBackend:
    """Replays planted truth boxes with deterministic noise.

    Args:
        truth: ``(n, 4)`` array of truth boxes in global pixel coordinates.
        noise: degradation configuration; defaults to noiseless.
        seed: run seed for every stochastic decision.
    """

    name = "oracle"

    def __init__(
        self,
        truth: np.ndarray | Sequence[Sequence[float]] | None = None,
        noise: OracleNoise | None = None,
        seed: int = 0,
    ) -> None:
        if truth is None:
            truth = np.zeros((0, 4), dtype=np.float64)
        self.truth = np.asarray(truth, dtype=np.float64).reshape(-1, 4)
        self.noise = noise if noise is not None else OracleNoise()
        self.seed = int(seed)
        self._by_window: list[list[tuple[int, Box]]] | None = None

    def prepare(self, windows: Sequence[TileWindow], width: int, height: int) -> None:
        self._by_window = assign_objects(windows, self.truth, width, height)

    def detect(self, pixels: np.ndarray | None, window: TileWindow) -> list[Detection]:
        if self._by_window is None or window.index >= len(self._by_window):
            raise BackendError("oracle backend used before prepare()")
        assigned = self._by_window[window.index]
        return oracle_detections(window, assigned, self.noise, self.seed)

    def segment(self, pixels: np.ndarray | None, boxes: Sequence[Box]) -> list[MaskRLE]:
        out = []
        for box in boxes:
            w = max(1, int(round(box[2] - box[0])))
            h = max(1, int(round(box[3] - box[1])))
            out.append(rle_encode(inscribed_ellipse_mask(w, h)))
        return out

    def close(self) -> None:
        pass

    def __enter__(self) -> "OracleBackend":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def _require(cond: bool, what: str) -> None:
    if not cond:
        raise ProtocolViolation(what)


class ExternalBackend:
    """Client for a detection worker speaking NDJSON over stdin/stdout.

    One request per line, one response per line, correlated by ``id``:

    * ``{"id": N, "op": "detect", "image": PATH, "w": W, "h": H}`` answered
      by ``{"id": N, "detections": [{"bbox": [x1, y1, x2, y2], "score": S}]}``.
    * ``{"id": N, "op": "segment", "image": PATH, "w": W, "h": H,
      "boxes": [[x1, y1, x2, y2], ...]}`` answered by ``{"id": N, "masks":
      [{"w": W, "h": H, "counts": [...]}, ...]}``, one mask per box.
    * Any request may be answered by ``{"id": N, "error": "message"}``.

    Tiles are written as binary PPM (3-band) or PGM (1-band) files under a
    private temp directory; the worker reads them by path.

    Args:
        command: worker command line, split with shell quoting rules.
        timeout: seconds to wait for each response line.
    """

    def __init__(self, command: str, timeout: float = 120.0) -> None:
        argv = shlex.split(command)
        if not argv:
            raise ConfigError("backend command is empty")
        if timeout <= 0.0:
            raise ConfigError(f"backend timeout must be positive, got {timeout}")
        self.command = command
        self.timeout = float(timeout)
        try:
            self._proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
            )
        except OSError as exc:
            raise BackendUnavailable(f"could not start backend {argv[0]!r}: {exc}") from exc
        self._tmpdir = Path(tempfile.mkdtemp(prefix="orthopipe-tiles-"))
        self._next_id = 0
        self._lines: queue.Queue[str | None] = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()
        self._closed = False

    @property
    def name(self) -> str:
        return self.command

    def _pump(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _roundtrip(self, payload: dict) -> dict:
        rid = self._next_id
        self._next_id += 1
        payload = dict(payload, id=rid)
        assert self._proc.stdin is not None
        try:
            self._proc.stdin.write(json.dumps(payload) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise BackendUnavailable(f"backend pipe closed: {exc}") from exc
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            raise BackendTimeout(
                f"backend gave no response within {self.timeout:.0f}s"
            ) from None
        if line is None:
            code = self._proc.poll()
            raise BackendUnavailable(f"backend exited (code {code}) mid-conversation")
        try:
            resp = json.loads(line)
        except ValueError as exc:
            raise ProtocolViolation(f"response is not valid JSON: {line[:200]!r}") from exc
        _require(isinstance(resp, dict), "response is not a JSON object")
        _require(resp.get("id") == rid, f"response id {resp.get('id')!r} != request id {rid}")
        if "error" in resp:
            raise BackendFailure(str(resp["error"]))
        return resp

    def _write_tile(self, pixels: np.ndarray, rid_hint: int) -> Path:
        path = self._tmpdir / f"tile_{rid_hint}.ppm"
        if pixels.ndim == 3 and pixels.shape[2] == 1:
            pixels = pixels[:, :, 0]
        write_raster(path, pixels)
        return path

    def detect(self, pixels: np.ndarray, window: TileWindow) -> list[Detection]:
        if pixels is None:
            raise BackendError("external backend needs tile pixels")
        path = self._write_tile(pixels, self._next_id)
        try:
            resp = self._roundtrip(
                {
                    "op": "detect",
                    "image": str(path),
                    "w": int(pixels.shape[1]),
                    "h": int(pixels.shape[0]),
                }
            )
        finally:
            path.unlink(missing_ok=True)
        raw = resp.get("detections")
        _require(isinstance(raw, list), "detect response lacks a detections list")
        out: list[Detection] = []
        for item in raw:
            _require(isinstance(item, dict), "detection entry is not an object")
            bbox = item.get("bbox")
            score = item.get("score")
            _require(
                isinstance(bbox, list) and len(bbox) == 4
                and all(isinstance(v, (int, float)) for v in bbox),
                f"bad bbox {bbox!r}",
            )
            _require(isinstance(score, (int, float)), f"bad score {score!r}")
            out.append(Detection(bbox=tuple(float(v) for v in bbox), score=float(score)))
        return out

    def segment(self, pixels: np.ndarray, boxes: Sequence[Box]) -> list[MaskRLE]:
        if pixels is None:
            raise BackendError("external backend needs tile pixels")
        path = self._write_tile(pixels, self._next_id)
        try:
            resp = self._roundtrip(
                {
                    "op": "segment",
                    "image": str(path),
                    "w": int(pixels.shape[1]),
                    "h": int(pixels.shape[0]),
                    "boxes": [[float(v) for v in box] for box in boxes],
                }
            )
        finally:
            path.unlink(missing_ok=True)
        raw = resp.get("masks")
        _require(isinstance(raw, list), "segment response lacks a masks list")
        _require(len(raw) == len(boxes), f"{len(raw)} masks for {len(boxes)} boxes")
        out: list[MaskRLE] = []
        for item in raw:
            _require(isinstance(item, dict), "mask entry is not an object")
            try:
                rle = MaskRLE(
                    w=int(item["w"]),
                    h=int(item["h"]),
                    counts=tuple(int(c) for c in item["counts"]),
                )
                rle_decode(rle)
            except (KeyError, TypeError, ValueError, MalformedRLE) as exc:
                raise ProtocolViolation(f"bad mask payload: {exc}") from exc
            out.append(rle)
        return out

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            if self._proc.stdin is not None:
                self._proc.stdin.close()
            self._proc.wait(timeout=5.0)
        except (OSError, subprocess.TimeoutExpired):
            self._proc.kill()
            self._proc.wait(timeout=5.0)
        shutil.rmtree(self._tmpdir, ignore_errors=True)

    def __enter__(self) -> "ExternalBackend":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def make_backend(
    spec: str,
    truth: np.ndarray | None = None,
    noise: OracleNoise | None = None,
    seed: int = 0,
    timeout: float = 120.0,
):
    """Build a backend from its command-line spelling.

    ``"oracle"`` selects the planted-truth backend; anything else is run
    as a worker command line.
    """
    if spec.strip() == "oracle":
        return OracleBackend(truth=truth, noise=noise, seed=seed)
    return ExternalBackend(spec, timeout=timeout)
