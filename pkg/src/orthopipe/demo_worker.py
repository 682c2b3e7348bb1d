"""Reference detection worker for the NDJSON wire protocol.

Run as ``python -m orthopipe.demo_worker``.  Reads one JSON request per
stdin line, answers one JSON response per stdout line.  Detection finds
bright connected blobs; segmentation thresholds inside each prompt box.
Useful as an end-to-end stand-in for a real model server and as the
counterpart for client tests.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Any

import numpy as np
from PIL import Image
from scipy import ndimage


def _load_luminance(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float64)


def detect_blobs(
    lum: np.ndarray, min_brightness: float, min_area: int
) -> list[dict[str, Any]]:
    """Find bright 8-connected components and box them.

    Returns protocol-shaped dicts: ``{"bbox": [x1, y1, x2, y2], "score": s}``
    with the score taken from the blob's mean brightness.
    """
    mask = lum >= min_brightness
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    out: list[dict[str, Any]] = []
    for idx, sl in enumerate(ndimage.find_objects(labels, n), start=1):
        if sl is None:
            continue
        component = labels[sl] == idx
        area = int(component.sum())
        if area < min_area:
            continue
        score = float(lum[sl][component].mean() / 255.0)
        out.append(
            {
                "bbox": [
                    float(sl[1].start),
                    float(sl[0].start),
                    float(sl[1].stop),
                    float(sl[0].stop),
                ],
                "score": min(1.0, max(0.0, score)),
            }
        )
    return out


def segment_box(
    lum: np.ndarray, box: list[float], min_brightness: float
) -> dict[str, Any]:
    """Threshold the pixels under one prompt box into an RLE mask."""
    h, w = lum.shape
    x1 = max(0, min(w, int(round(box[0]))))
    y1 = max(0, min(h, int(round(box[1]))))
    x2 = max(x1, min(w, int(round(box[2]))))
    y2 = max(y1, min(h, int(round(box[3]))))
    crop = lum[y1:y2, x1:x2] >= min_brightness
    flat = crop.ravel()
    counts: list[int] = []
    if flat.size == 0:
        counts = [0]
    else:
        edges = np.flatnonzero(np.diff(flat))
        bounds = np.concatenate(([0], edges + 1, [flat.size]))
        counts = [int(c) for c in np.diff(bounds)]
        if flat[0]:
            counts.insert(0, 0)
    return {"w": x2 - x1, "h": y2 - y1, "counts": counts}


def handle(req: dict, args: argparse.Namespace) -> dict:
    op = req.get("op")
    rid = req.get("id", -1)
    if op == "detect":
        lum = _load_luminance(req["image"])
        dets = detect_blobs(lum, args.min_brightness, args.min_area)
        return {"id": rid, "detections": dets}
    if op == "segment":
        lum = _load_luminance(req["image"])
        masks = [segment_box(lum, box, args.min_brightness) for box in req["boxes"]]
        return {"id": rid, "masks": masks}
    raise ValueError(f"unknown op {op!r}")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="orthopipe.demo_worker",
        description="brightness-blob detection worker (NDJSON on stdio)",
    )
    parser.add_argument(
        "--min-brightness",
        type=float,
        default=135.0,
        help="luminance threshold separating objects from background",
    )
    parser.add_argument(
        "--min-area",
        type=int,
        default=20,
        help="discard components smaller than this many pixels",
    )
    args = parser.parse_args(argv)

    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            req = json.loads(line)
        except ValueError:
            print(json.dumps({"id": -1, "error": "request is not valid JSON"}), flush=True)
            continue
        if not isinstance(req, dict):
            print(json.dumps({"id": -1, "error": "request is not an object"}), flush=True)
            continue
        try:
            resp = handle(req, args)
        except Exception as exc:  # worker must answer, not die
            resp = {"id": req.get("id", -1), "error": f"{type(exc).__name__}: {exc}"}
        print(json.dumps(resp), flush=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
