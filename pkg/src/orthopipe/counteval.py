"""Bidirectional counting evaluation for georeferenced center points.

Predicted centers and reference centers are matched one-to-one by greedy
nearest-pair assignment within a fixed radius (boundary inclusive), once
in each direction: the precision-like direction asks how many predictions
found a reference object, the recall-like direction asks how many
reference objects were found.  Each direction reports the matched ratio
and the median shift of its matched pairs in meters, plus the full shift
distribution for cumulative curves.

A uniform grid accelerates the radius queries; it returns exactly the
pairs a brute-force scan would, so matching results never depend on the
index structure.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

DEFAULT_MATCH_DIST = 5.0
SHIFT_PERCENTILE = 90.0


@dataclass(frozen=True)
class DirectionResult:
    """Greedy one-to-one matching outcome for one direction.

    Attributes:
        total: number of source points.
        matched: how many of them found a partner within the radius.
        distances: matched shifts in ascending order, meters.
        pairs: ``(src_idx, dst_idx)`` per match, in claim order.
    """

    total: int
    matched: int
    distances: tuple[float, ...]
    pairs: tuple[tuple[int, int], ...]

    @property
    def ratio(self) -> float:
        if self.total == 0:
            return math.nan
        return self.matched / self.total

    @property
    def median(self) -> float:
        if not self.distances:
            return math.nan
        return float(np.median(self.distances))


@dataclass(frozen=True)
class MatchReport:
    """Both matching directions for one site."""

    n_pred: int
    n_gt: int
    max_dist: float
    pred2gt: DirectionResult
    gt2pred: DirectionResult


class _PointGrid:
    """Uniform hash grid over 2-D points for exact radius queries."""

    def __init__(self, points: np.ndarray, cell: float) -> None:
        self.points = points
        self.cell = max(cell, 1e-9)
        self._cells: dict[tuple[int, int], list[int]] = {}
        for idx in range(points.shape[0]):
            key = (
                int(points[idx, 0] // self.cell),
                int(points[idx, 1] // self.cell),
            )
            self._cells.setdefault(key, []).append(idx)

    def within(self, x: float, y: float, radius: float) -> list[tuple[float, int]]:
        """All points with Euclidean distance <= radius, as (dist, idx)."""
        if radius > self.cell:
            raise ConfigError("grid cell smaller than query radius")
        cx = int(x // self.cell)
        cy = int(y // self.cell)
        out = []
        for gy in (cy - 1, cy, cy + 1):
            for gx in (cx - 1, cx, cx + 1):
                for idx in self._cells.get((gx, gy), ()):
                    d = math.hypot(self.points[idx, 0] - x, self.points[idx, 1] - y)
                    if d <= radius:
                        out.append((d, idx))
        return out


def _as_points(arr: Sequence[Sequence[float]] | np.ndarray) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.size == 0:
        return out.reshape(0, 2)
    if out.ndim != 2 or out.shape[1] != 2:
        raise ConfigError(f"points must be (n, 2), got shape {out.shape}")
    return out


def match_directional(
    src: Sequence[Sequence[float]] | np.ndarray,
    dst: Sequence[Sequence[float]] | np.ndarray,
    max_dist: float = DEFAULT_MATCH_DIST,
    allow_many_to_one: bool = False,
) -> DirectionResult:
    """Match source points to destination points within ``max_dist``.

    Candidate pairs are taken in ascending distance order, ties broken by
    source index then destination index.  Each source matches at most
    once; destinations are also consumed unless ``allow_many_to_one``.

    Args:
        src: ``(n, 2)`` source coordinates in meters.
        dst: ``(m, 2)`` destination coordinates in meters.
        max_dist: inclusive matching radius in meters.
        allow_many_to_one: let several sources share one destination.

    Returns:
        The matching outcome for this direction.
    """
    if max_dist <= 0.0:
        raise ConfigError(f"match distance must be positive, got {max_dist}")
    s = _as_points(src)
    d = _as_points(dst)
    if s.shape[0] == 0 or d.shape[0] == 0:
        return DirectionResult(
            total=int(s.shape[0]), matched=0, distances=(), pairs=()
        )
    grid = _PointGrid(d, cell=max_dist)
    candidates: list[tuple[float, int, int]] = []
    for si in range(s.shape[0]):
        for dist, di in grid.within(s[si, 0], s[si, 1], max_dist):
            candidates.append((dist, si, di))
    candidates.sort()
    src_used = np.zeros(s.shape[0], dtype=bool)
    dst_used = np.zeros(d.shape[0], dtype=bool)
    dists: list[float] = []
    pairs: list[tuple[int, int]] = []
    for dist, si, di in candidates:
        if src_used[si]:
            continue
        if dst_used[di] and not allow_many_to_one:
            continue
        src_used[si] = True
        dst_used[di] = True
        dists.append(dist)
        pairs.append((si, di))
    return DirectionResult(
        total=int(s.shape[0]),
        matched=len(pairs),
        distances=tuple(dists),
        pairs=tuple(pairs),
    )


def evaluate(
    pred: Sequence[Sequence[float]] | np.ndarray,
    gt: Sequence[Sequence[float]] | np.ndarray,
    max_dist: float = DEFAULT_MATCH_DIST,
    allow_many_to_one: bool = False,
) -> MatchReport:
    """Run both matching directions between predictions and references."""
    p = _as_points(pred)
    g = _as_points(gt)
    return MatchReport(
        n_pred=int(p.shape[0]),
        n_gt=int(g.shape[0]),
        max_dist=float(max_dist),
        pred2gt=match_directional(p, g, max_dist, allow_many_to_one),
        gt2pred=match_directional(g, p, max_dist, allow_many_to_one),
    )


def cumulative_curve(result: DirectionResult) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative fraction of source points matched within each shift.

    Returns:
        ``(distances, fractions)`` where fractions are cumulative counts
        divided by the source total, ending at the matched ratio.
    """
    d = np.asarray(result.distances, dtype=np.float64)
    if result.total == 0 or d.size == 0:
        return np.zeros(0), np.zeros(0)
    frac = np.arange(1, d.size + 1, dtype=np.float64) / result.total
    return d, frac


def shift_percentile(result: DirectionResult, q: float = SHIFT_PERCENTILE) -> float:
    """Percentile of the matched shift distribution, nan when empty."""
    if not result.distances:
        return math.nan
    return float(np.percentile(np.asarray(result.distances), q))


def read_points_csv(path: str | Path) -> np.ndarray:
    """Read ``x,y`` world coordinates from a headered CSV, extras ignored."""
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"x", "y"} <= set(reader.fieldnames):
                raise DataError(f"{path}: expected columns x,y")
            rows = []
            for row in reader:
                try:
                    rows.append((float(row["x"]), float(row["y"])))
                except (TypeError, ValueError) as exc:
                    raise DataError(f"{path}: bad row {row!r}") from exc
    except OSError as exc:
        raise DataError(f"cannot read points file {path}: {exc}") from exc
    return np.asarray(rows, dtype=np.float64).reshape(-1, 2)


def read_points_geojson(path: str | Path) -> np.ndarray:
    """Read Point features from a GeoJSON FeatureCollection."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read points file {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc
    feats = data.get("features") if isinstance(data, dict) else None
    if not isinstance(feats, list):
        raise DataError(f"{path}: expected a GeoJSON FeatureCollection")
    rows = []
    for feat in feats:
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Point":
            continue
        coords = geom.get("coordinates")
        if not isinstance(coords, (list, tuple)) or len(coords) < 2:
            raise DataError(f"{path}: bad Point coordinates {coords!r}")
        rows.append((float(coords[0]), float(coords[1])))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 2)


def read_points(path: str | Path) -> np.ndarray:
    """Read points from CSV or GeoJSON, picked by file suffix."""
    suffix = Path(path).suffix.lower()
    if suffix in (".geojson", ".json"):
        return read_points_geojson(path)
    return read_points_csv(path)


REPORT_COLUMNS = (
    "Site",
    "Area (ha)",
    "Counts",
    "Pred2GT Ratio",
    "Pred2GT Median (m)",
    "GT2Pred Ratio",
    "GT2Pred Median (m)",
)


def _fmt(value: float, digits: int) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    return f"{value:.{digits}f}"


def report_row(report: MatchReport, site: str, area_ha: float | None) -> list[str]:
    return [
        site,
        _fmt(area_ha, 2) if area_ha is not None else "-",
        str(report.n_gt),
        _fmt(report.pred2gt.ratio, 4),
        _fmt(report.pred2gt.median, 2),
        _fmt(report.gt2pred.ratio, 4),
        _fmt(report.gt2pred.median, 2),
    ]


def format_report_table(rows: Sequence[Sequence[str]]) -> str:
    """Align the report columns for terminal output."""
    table = [list(REPORT_COLUMNS)] + [list(r) for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(REPORT_COLUMNS))]
    lines = []
    for idx, row in enumerate(table):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
        if idx == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_report_csv(
    path: str | Path, rows: Sequence[Sequence[str]]
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow(row)


def write_curve_csv(path: str | Path, result: DirectionResult) -> None:
    dist, frac = cumulative_curve(result)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["distance_m", "cumulative_fraction"])
        for d, f in zip(dist, frac):
            writer.writerow([f"{d:.6f}", f"{f:.6f}"])


def write_curves_svg(path: str | Path, report: MatchReport) -> None:
    """Plot both cumulative shift curves with dashed percentile markers."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for result, label, color in (
        (report.pred2gt, "Pred2GT", "tab:blue"),
        (report.gt2pred, "GT2Pred", "tab:orange"),
    ):
        dist, frac = cumulative_curve(result)
        if dist.size == 0:
            continue
        ax.step(dist, frac, where="post", label=label, color=color)
        marker = shift_percentile(result)
        if not math.isnan(marker):
            ax.axvline(marker, linestyle="--", linewidth=0.8, color=color)
    ax.set_xlabel("center shift (m)")
    ax.set_ylabel("cumulative fraction matched")
    ax.set_xlim(left=0.0)
    ax.set_ylim(0.0, 1.0)
    ax.legend(loc="lower right")
    ax.grid(True, linewidth=0.3, alpha=0.5)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
