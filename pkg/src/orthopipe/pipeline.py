"""End-to-end runs: tile, detect, fuse, calibrate, threshold, write.

A run walks the tile grid, collects per-tile detections from a backend,
shifts them into the global frame, deduplicates with NMS, optionally
applies a calibration model and a raw-score threshold, and writes the
surviving centers as GeoJSON next to a JSON run manifest with counts and
stage timings.

Worker parallelism is thread-per-backend: each worker thread owns one
external backend subprocess (the deterministic oracle is shared, it is
stateless per call).  Results are keyed by tile index and fused in one
deterministic pass, so worker count never changes the output.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backend import (
    Box,
    MaskRLE,
    OracleBackend,
    OracleNoise,
    TilePrediction,
    make_backend,
)
from .calibration import (
    CalibrationModel,
    pair_with_iou,
    read_model,
    write_pairs_csv,
)
from .errors import ConfigError, DataError
from .fusion import GlobalDetection, center_world, nms, to_global
from .georaster import (
    RasterSource,
    TileWindow,
    TilingConfig,
    open_raster,
    tile_windows,
)
from .synth import SceneTruth, read_truth_csv

RASTER_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm", ".jpg", ".jpeg", ".tif", ".tiff")


@dataclass
class DetectOptions:
    """Everything a detection or segmentation run needs."""

    raster: Path
    out_dir: Path
    worldfile: Path | None = None
    tile: int = 800
    stride: int = 400
    nms_iou: float = 0.5
    backend: str = "oracle"
    workers: int = 1
    calib: Path | None = None
    threshold: float | None = None
    truth: Path | None = None
    seed: int = 0
    noise: OracleNoise = field(default_factory=OracleNoise)
    emit_pairs: bool = False
    timeout: float = 120.0

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")


def _mean_std(samples: Sequence[float]) -> dict:
    arr = np.asarray(samples, dtype=np.float64)
    if arr.size == 0:
        return {"mean_s": 0.0, "std_s": 0.0, "n": 0}
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean_s": float(arr.mean()), "std_s": std, "n": int(arr.size)}


class _TileRunner:
    """Fans tile windows out to worker threads, one backend per thread."""

    def __init__(
        self,
        raster: RasterSource,
        windows: Sequence[TileWindow],
        opts: DetectOptions,
        truth_boxes: np.ndarray,
    ) -> None:
        self.raster = raster
        self.windows = windows
        self.opts = opts
        self.truth_boxes = truth_boxes
        self.predictions: list[TilePrediction | None] = [None] * len(windows)
        self.read_s: list[float] = [0.0] * len(windows)
        self.infer_s: list[float] = [0.0] * len(windows)
        self.errors: list[tuple[int, BaseException]] = []
        self._lock = threading.Lock()

    def _make_backend(self):
        return make_backend(
            self.opts.backend,
            truth=self.truth_boxes,
            noise=self.opts.noise,
            seed=self.opts.seed,
            timeout=self.opts.timeout,
        )

    def _work(self, indices: Sequence[int], backend) -> None:
        try:
            for idx in indices:
                win = self.windows[idx]
                t0 = time.perf_counter()
                pixels = self.raster.read_window(win)
                t1 = time.perf_counter()
                dets = backend.detect(pixels, win)
                t2 = time.perf_counter()
                self.predictions[idx] = TilePrediction(
                    window=win, detections=tuple(dets)
                )
                self.read_s[idx] = t1 - t0
                self.infer_s[idx] = t2 - t1
        except BaseException as exc:
            with self._lock:
                self.errors.append((indices[0] if indices else -1, exc))

    def run(self) -> None:
        n = len(self.windows)
        if n == 0:
            return
        workers = min(self.opts.workers, n)
        shared_oracle = self.opts.backend.strip() == "oracle"
        backends = []
        if shared_oracle:
            oracle = self._make_backend()
            oracle.prepare(self.windows, self.raster.width, self.raster.height)
            backends = [oracle] * workers
        else:
            backends = [self._make_backend() for _ in range(workers)]
        try:
            if workers == 1:
                self._work(range(n), backends[0])
            else:
                chunks = [list(range(w, n, workers)) for w in range(workers)]
                threads = [
                    threading.Thread(target=self._work, args=(chunk, backends[i]))
                    for i, chunk in enumerate(chunks)
                ]
                for t in threads:
                    t.start()
                for t in threads:
                    t.join()
        finally:
            seen = set()
            for b in backends:
                if id(b) not in seen:
                    seen.add(id(b))
                    b.close()
        if self.errors:
            self.errors.sort(key=lambda e: e[0])
            raise self.errors[0][1]


def _load_truth(opts: DetectOptions) -> SceneTruth | None:
    if opts.truth is None:
        return None
    return read_truth_csv(opts.truth)


def _resolve_threshold(
    opts: DetectOptions, model: CalibrationModel | None
) -> float | None:
    if opts.threshold is not None:
        return float(opts.threshold)
    if model is not None:
        stored = model.params.get("threshold")
        if stored is not None:
            return float(stored)
    return None


def _write_centers_geojson(
    path: Path,
    kept: Sequence[GlobalDetection],
    calibrated: Sequence[float] | None,
    transform,
) -> None:
    feats = []
    for i, det in enumerate(kept):
        x, y = center_world(transform, det.bbox)
        props = {
            "score": det.score,
            "bbox_px": [float(v) for v in det.bbox],
        }
        if calibrated is not None:
            props["calibrated"] = float(calibrated[i])
        feats.append(
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [x, y]},
                "properties": props,
            }
        )
    with open(path, "w") as fh:
        json.dump({"type": "FeatureCollection", "features": feats}, fh)
        fh.write("\n")


def run_detect(opts: DetectOptions) -> dict:
    """Run the full detection pipeline and write outputs to ``out_dir``.

    Returns:
        The run manifest that was also written as ``run.json``.
    """
    total_t0 = time.perf_counter()
    out_dir = Path(opts.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raster = open_raster(opts.raster, opts.worldfile, require_transform=True)
    cfg = TilingConfig(tile=opts.tile, stride=opts.stride)
    windows = tile_windows(raster.width, raster.height, cfg)
    truth = _load_truth(opts)
    if opts.backend.strip() == "oracle" and truth is None:
        raise ConfigError("the oracle backend needs --truth with planted objects")
    truth_boxes = truth.boxes() if truth is not None else np.zeros((0, 4))

    runner = _TileRunner(raster, windows, opts, truth_boxes)
    runner.run()
    predictions = [p for p in runner.predictions if p is not None]

    fuse_t0 = time.perf_counter()
    all_global: list[GlobalDetection] = []
    for pred in predictions:
        all_global.extend(to_global(pred))
    fused = nms(all_global, opts.nms_iou)
    fuse_s = time.perf_counter() - fuse_t0

    model = read_model(opts.calib) if opts.calib else None
    threshold = _resolve_threshold(opts, model)
    if threshold is None:
        kept = list(fused)
    else:
        kept = [d for d in fused if d.score >= threshold]
    calibrated = None
    if model is not None:
        calibrated = model.apply([d.score for d in kept]) if kept else []

    centers_path = out_dir / "centers.geojson"
    _write_centers_geojson(centers_path, kept, calibrated, raster.transform)

    pairs_path = None
    if truth is not None and opts.emit_pairs:
        pairs = pair_with_iou(
            [d.bbox for d in fused], [d.score for d in fused], truth_boxes
        )
        pairs_path = out_dir / "pairs.csv"
        write_pairs_csv(pairs_path, pairs)

    manifest = {
        "raster": str(opts.raster),
        "width": raster.width,
        "height": raster.height,
        "tile": opts.tile,
        "stride": opts.stride,
        "tiles": len(windows),
        "backend": opts.backend,
        "workers": opts.workers,
        "nms_iou": opts.nms_iou,
        "seed": opts.seed,
        "threshold": threshold,
        "calibration": model.kind if model is not None else None,
        "counts": {
            "raw": len(all_global),
            "fused": len(fused),
            "kept": len(kept),
        },
        "timings": {
            "read": _mean_std(runner.read_s),
            "detect": _mean_std(runner.infer_s),
            "fuse_s": fuse_s,
            "total_s": time.perf_counter() - total_t0,
        },
        "outputs": {
            "centers": centers_path.name,
            "pairs": pairs_path.name if pairs_path else None,
        },
    }
    with open(out_dir / "run.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest


def _owner_window(windows: Sequence[TileWindow], box: Box) -> TileWindow | None:
    """First window fully containing the box, else the one with its center."""
    for win in windows:
        if (
            win.x0 <= box[0]
            and box[2] <= win.x0 + win.w
            and win.y0 <= box[1]
            and box[3] <= win.y0 + win.h
        ):
            return win
    cx = (box[0] + box[2]) / 2.0
    cy = (box[1] + box[3]) / 2.0
    for win in windows:
        if win.x0 <= cx < win.x0 + win.w and win.y0 <= cy < win.y0 + win.h:
            return win
    return None


def run_segment(opts: DetectOptions) -> dict:
    """Detect, fuse, then prompt the backend for a mask per kept box.

    Each box is segmented in the tile that contains it (the tile holding
    its center when no tile contains it whole), with the prompt clipped
    to that tile.  Masks are written as NDJSON, one object per line.
    """
    manifest = run_detect(opts)
    out_dir = Path(opts.out_dir)
    raster = open_raster(opts.raster, opts.worldfile, require_transform=True)
    cfg = TilingConfig(tile=opts.tile, stride=opts.stride)
    windows = tile_windows(raster.width, raster.height, cfg)

    with open(out_dir / "centers.geojson") as fh:
        centers = json.load(fh)
    boxes: list[Box] = []
    feats = centers["features"]
    for feat in feats:
        bb = feat["properties"]["bbox_px"]
        boxes.append((float(bb[0]), float(bb[1]), float(bb[2]), float(bb[3])))

    by_window: dict[int, list[int]] = {}
    for i, box in enumerate(boxes):
        clipped = (
            max(0.0, box[0]),
            max(0.0, box[1]),
            min(float(raster.width), box[2]),
            min(float(raster.height), box[3]),
        )
        if clipped[2] <= clipped[0] or clipped[3] <= clipped[1]:
            continue
        win = _owner_window(windows, clipped)
        if win is not None:
            by_window.setdefault(win.index, []).append(i)

    truth = _load_truth(opts)
    truth_boxes = truth.boxes() if truth is not None else np.zeros((0, 4))
    backend = make_backend(
        opts.backend,
        truth=truth_boxes,
        noise=opts.noise,
        seed=opts.seed,
        timeout=opts.timeout,
    )
    if isinstance(backend, OracleBackend):
        backend.prepare(windows, raster.width, raster.height)

    seg_t0 = time.perf_counter()
    masks: list[MaskRLE | None] = [None] * len(boxes)
    try:
        for win_idx in sorted(by_window):
            win = windows[win_idx]
            pixels = raster.read_window(win)
            local = []
            for i in by_window[win_idx]:
                b = boxes[i]
                local.append(
                    (
                        max(0.0, b[0] - win.x0),
                        max(0.0, b[1] - win.y0),
                        min(float(win.w), b[2] - win.x0),
                        min(float(win.h), b[3] - win.y0),
                    )
                )
            for i, rle in zip(by_window[win_idx], backend.segment(pixels, local)):
                masks[i] = rle
    finally:
        backend.close()
    seg_s = time.perf_counter() - seg_t0

    masks_path = out_dir / "masks.ndjson"
    written = 0
    with open(masks_path, "w") as fh:
        for feat, box, rle in zip(feats, boxes, masks):
            if rle is None:
                continue
            record = {
                "center": feat["geometry"]["coordinates"],
                "score": feat["properties"]["score"],
                "bbox_px": list(box),
                "mask": {"w": rle.w, "h": rle.h, "counts": list(rle.counts)},
            }
            fh.write(json.dumps(record) + "\n")
            written += 1

    manifest["outputs"]["masks"] = masks_path.name
    manifest["counts"]["masks"] = written
    manifest["timings"]["segment_s"] = seg_s
    with open(out_dir / "run.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest


def list_rasters(images_dir: str | Path) -> list[Path]:
    root = Path(images_dir)
    if not root.is_dir():
        raise DataError(f"{images_dir} is not a directory")
    out = sorted(
        p for p in root.iterdir() if p.suffix.lower() in RASTER_SUFFIXES
    )
    if not out:
        raise DataError(f"no raster images under {images_dir}")
    return out


def run_bench(
    images_dir: str | Path,
    backend_spec: str,
    n: int = 20,
    tile: int = 800,
    stride: int = 400,
    timeout: float = 120.0,
    out_dir: str | Path | None = None,
) -> dict:
    """Time the read and detect stages over the first ``n`` tiles found.

    Tiles are taken in file-name order, row-major within each image.
    Reported statistics are mean and sample standard deviation in seconds.
    """
    if n < 1:
        raise ConfigError(f"bench needs n >= 1, got {n}")
    cfg = TilingConfig(tile=tile, stride=stride)
    backend = make_backend(backend_spec, timeout=timeout)
    read_s: list[float] = []
    detect_s: list[float] = []
    used = []
    try:
        for path in list_rasters(images_dir):
            raster = open_raster(path)
            windows = tile_windows(raster.width, raster.height, cfg)
            if isinstance(backend, OracleBackend):
                backend.prepare(windows, raster.width, raster.height)
            for win in windows:
                t0 = time.perf_counter()
                pixels = raster.read_window(win)
                t1 = time.perf_counter()
                backend.detect(pixels, win)
                t2 = time.perf_counter()
                read_s.append(t1 - t0)
                detect_s.append(t2 - t1)
                used.append({"image": path.name, "tile": win.index})
                if len(read_s) >= n:
                    break
            if len(read_s) >= n:
                break
    finally:
        backend.close()
    result = {
        "backend": backend_spec,
        "n": len(read_s),
        "stages": {
            "read": {**_mean_std(read_s), "samples_s": read_s},
            "detect": {**_mean_std(detect_s), "samples_s": detect_s},
        },
        "tiles": used,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bench.json", "w") as fh:
            json.dump(result, fh, indent=2)
            fh.write("\n")
    return result


def format_bench_table(result: dict) -> str:
    """Render bench stats as ``mean±std`` seconds per stage."""
    lines = [f"stage    time (s) over {result['n']} tiles"]
    lines.append("-" * len(lines[0]))
    for stage in ("read", "detect"):
        st = result["stages"][stage]
        lines.append(f"{stage:<8} {st['mean_s']:.2f}±{st['std_s']:.2f}")
    return "\n".join(lines)
