"""Fusing per-tile detections into one global inventory.

Tile-local boxes are shifted into global pixel coordinates, deduplicated
with greedy non-maximum suppression, and reduced to georeferenced center
points.  The NMS pass is order-independent: candidates are visited in a
total order (score descending, then coordinates ascending), so shuffling
the input never changes the surviving set, and running it twice is a
no-op.  A uniform grid over box extents keeps the overlap search near
linear without changing any decision a brute-force scan would make.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .backend import Box, TilePrediction, iou_xyxy
from .errors import ConfigError
from .georaster import GeoTransform, pixel_to_world


@dataclass(frozen=True)
class GlobalDetection:
    """A detection in global pixel coordinates."""

    bbox: Box
    score: float


@dataclass(frozen=True)
class GeoCenter:
    """A detection center in world coordinates."""

    x: float
    y: float
    score: float


def to_global(pred: TilePrediction) -> list[GlobalDetection]:
    """Shift one tile's detections by the tile origin."""
    x0 = float(pred.window.x0)
    y0 = float(pred.window.y0)
    return [
        GlobalDetection(
            bbox=(d.bbox[0] + x0, d.bbox[1] + y0, d.bbox[2] + x0, d.bbox[3] + y0),
            score=d.score,
        )
        for d in pred.detections
    ]


def _nms_key(det: GlobalDetection) -> tuple:
    return (-det.score, det.bbox[0], det.bbox[1], det.bbox[2], det.bbox[3])


class _BoxGrid:
    """Uniform hash grid mapping cells to indices of inserted boxes."""

    def __init__(self, cell: float) -> None:
        self.cell = max(cell, 1e-9)
        self._cells: dict[tuple[int, int], list[int]] = {}

    def _span(self, box: Box) -> tuple[int, int, int, int]:
        c = self.cell
        return (
            int(box[0] // c),
            int(box[1] // c),
            int(box[2] // c),
            int(box[3] // c),
        )

    def insert(self, idx: int, box: Box) -> None:
        gx1, gy1, gx2, gy2 = self._span(box)
        for gy in range(gy1, gy2 + 1):
            for gx in range(gx1, gx2 + 1):
                self._cells.setdefault((gx, gy), []).append(idx)

    def query(self, box: Box) -> set[int]:
        gx1, gy1, gx2, gy2 = self._span(box)
        found: set[int] = set()
        for gy in range(gy1, gy2 + 1):
            for gx in range(gx1, gx2 + 1):
                bucket = self._cells.get((gx, gy))
                if bucket:
                    found.update(bucket)
        return found


def nms(
    detections: Iterable[GlobalDetection], iou_threshold: float
) -> list[GlobalDetection]:
    """Greedy non-maximum suppression with a deterministic total order.

    Candidates are ranked by score descending with coordinate ascending
    tie-breaks; a candidate is discarded when its IoU with an already kept
    box strictly exceeds ``iou_threshold``.

    Args:
        detections: boxes in one shared coordinate frame.
        iou_threshold: overlap above which the lower-ranked box dies.

    Returns:
        Surviving detections in rank order.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ConfigError(f"iou threshold must be in [0, 1], got {iou_threshold}")
    order = sorted(detections, key=_nms_key)
    if not order:
        return []
    cell = max(
        max(d.bbox[2] - d.bbox[0] for d in order),
        max(d.bbox[3] - d.bbox[1] for d in order),
        1e-9,
    )
    grid = _BoxGrid(cell)
    kept: list[GlobalDetection] = []
    for det in order:
        suppressed = False
        for idx in grid.query(det.bbox):
            if iou_xyxy(det.bbox, kept[idx].bbox) > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            grid.insert(len(kept), det.bbox)
            kept.append(det)
    return kept


def box_center(box: Box) -> tuple[float, float]:
    return ((box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0)


def center_world(transform: GeoTransform, box: Box) -> tuple[float, float]:
    """World coordinates of a box center.

    Box coordinates are continuous pixels where ``(0.5, 0.5)`` is the
    center of the top-left pixel, so the half-pixel offset is removed
    before applying the center-anchored affine.
    """
    cx, cy = box_center(box)
    return pixel_to_world(transform, cx - 0.5, cy - 0.5)


def centers_to_geo(
    detections: Sequence[GlobalDetection], transform: GeoTransform
) -> list[GeoCenter]:
    """Reduce fused detections to georeferenced center points."""
    out = []
    for det in detections:
        x, y = center_world(transform, det.bbox)
        out.append(GeoCenter(x=x, y=y, score=det.score))
    return out
