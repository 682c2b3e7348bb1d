"""Localization-aware confidence calibration.

Detection scores are remapped so that a reported confidence approximates
the IoU the box achieves against ground truth (zero for false positives),
rather than a probability of class correctness.  Training data is a list
of ``(score, iou)`` pairs produced by greedily matching predictions to
truth boxes.  Four fitters are provided, all operating on the logit of
the raw score:

* ``linear``: least squares line, output clipped to [0, 1].
* ``isotonic``: monotone step fit via pool-adjacent-violators.
* ``platt``: two-parameter sigmoid fit by damped Gauss-Newton.
* ``temperature``: single-parameter logit rescaling fit by scalar search.

Quality is summarized by binned (``laece0``) and unbinned (``laace0``)
mean absolute gaps between confidence and IoU.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backend import iou_xyxy
from .errors import ConfigError, DataError

LOGIT_EPS = 1e-6
TEMPERATURE_RANGE = (0.05, 20.0)
TEMPERATURE_TOL = 1e-6
MODEL_KINDS = ("identity", "linear", "isotonic", "platt", "temperature")


class DegenerateFit(ConfigError):
    """The training pairs cannot identify the requested model."""


class NonConvergence(ConfigError):
    """An iterative fitter ran out of iterations."""


@dataclass(frozen=True)
class CalibrationPair:
    """One prediction's raw score and the IoU it earned (0 if unmatched)."""

    score: float
    iou: float


@dataclass(frozen=True)
class BinStat:
    """One reliability bin over the confidence axis."""

    lo: float
    hi: float
    count: int
    mean_score: float
    mean_iou: float


def logit(p: np.ndarray | float) -> np.ndarray | float:
    """Log-odds with scores clamped away from 0 and 1."""
    arr = np.clip(np.asarray(p, dtype=np.float64), LOGIT_EPS, 1.0 - LOGIT_EPS)
    out = np.log(arr / (1.0 - arr))
    return float(out) if np.isscalar(p) else out


def sigmoid(z: np.ndarray | float) -> np.ndarray | float:
    arr = np.asarray(z, dtype=np.float64)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ez = np.exp(arr[~pos])
    out[~pos] = ez / (1.0 + ez)
    return float(out) if np.isscalar(z) else out


def pair_with_iou(
    pred_boxes: Sequence[Sequence[float]],
    pred_scores: Sequence[float],
    gt_boxes: Sequence[Sequence[float]],
) -> list[CalibrationPair]:
    """Greedily match predictions to truth and record the achieved IoU.

    Predictions are visited by score descending (input order breaks ties)
    and claim the unconsumed truth box of highest IoU; a prediction with
    no positive-IoU candidate stays unmatched and records IoU 0.

    Returns:
        One pair per prediction, in the input prediction order.
    """
    n = len(pred_boxes)
    if len(pred_scores) != n:
        raise ConfigError(f"{n} boxes but {len(pred_scores)} scores")
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    order = sorted(range(n), key=lambda i: (-float(pred_scores[i]), i))
    taken = np.zeros(gts.shape[0], dtype=bool)
    ious = np.zeros(n, dtype=np.float64)
    for i in order:
        if gts.shape[0] == 0:
            break
        box = pred_boxes[i]
        cand = np.array(
            [0.0 if taken[j] else iou_xyxy(box, gts[j]) for j in range(gts.shape[0])]
        )
        j = int(np.argmax(cand))
        if cand[j] > 0.0:
            taken[j] = True
            ious[i] = cand[j]
    return [
        CalibrationPair(score=float(pred_scores[i]), iou=float(ious[i]))
        for i in range(n)
    ]


def _split(pairs: Sequence[CalibrationPair]) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([p.score for p in pairs], dtype=np.float64)
    ious = np.array([p.iou for p in pairs], dtype=np.float64)
    return scores, ious


@dataclass(frozen=True)
class CalibrationModel:
    """A fitted score-to-confidence map, serializable to JSON."""

    kind: str
    params: dict

    def apply(self, scores: np.ndarray | Sequence[float] | float) -> np.ndarray:
        """Map raw scores to calibrated confidences in [0, 1]."""
        s = np.atleast_1d(np.asarray(scores, dtype=np.float64))
        if self.kind == "identity":
            out = np.clip(s, 0.0, 1.0)
        elif self.kind == "linear":
            z = logit(s)
            out = np.clip(self.params["a"] * z + self.params["b"], 0.0, 1.0)
        elif self.kind == "isotonic":
            xs = np.asarray(self.params["x"], dtype=np.float64)
            ys = np.asarray(self.params["y"], dtype=np.float64)
            out = np.interp(s, xs, ys)
        elif self.kind == "platt":
            out = sigmoid(self.params["a"] * logit(s) + self.params["b"])
        elif self.kind == "temperature":
            out = sigmoid(logit(s) / self.params["t"])
        else:
            raise ConfigError(f"unknown calibration kind {self.kind!r}")
        return out

    def apply_one(self, score: float) -> float:
        return float(self.apply([score])[0])

    def to_json(self) -> dict:
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_json(cls, data: dict) -> "CalibrationModel":
        if not isinstance(data, dict) or "kind" not in data:
            raise DataError("calibration model JSON lacks a kind")
        kind = data["kind"]
        if kind not in MODEL_KINDS:
            raise DataError(f"unknown calibration kind {kind!r}")
        params = {k: v for k, v in data.items() if k != "kind"}
        return cls(kind=kind, params=params)


def identity_model() -> CalibrationModel:
    return CalibrationModel(kind="identity", params={})


def pava(values: Sequence[float], weights: Sequence[float] | None = None) -> np.ndarray:
    """Weighted least-squares projection onto the non-decreasing cone.

    Pool-adjacent-violators: walk left to right, merging each new point
    into the preceding block while the block means decrease.

    Args:
        values: target sequence.
        weights: positive weights, all ones when omitted.

    Returns:
        The fitted non-decreasing sequence, same length as ``values``.
    """
    y = np.asarray(values, dtype=np.float64)
    if weights is None:
        w = np.ones_like(y)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != y.shape or np.any(w <= 0.0):
            raise ConfigError("weights must be positive and match values")
    # blocks as (weight sum, weighted value sum, span)
    blocks: list[list[float]] = []
    for yi, wi in zip(y, w):
        blocks.append([wi, wi * yi, 1])
        while len(blocks) >= 2:
            wa, sa, na = blocks[-2]
            wb, sb, nb = blocks[-1]
            if sa / wa > sb / wb:
                blocks[-2:] = [[wa + wb, sa + sb, na + nb]]
            else:
                break
    out = np.empty_like(y)
    pos = 0
    for wsum, ssum, span in blocks:
        out[pos : pos + span] = ssum / wsum
        pos += span
    return out


def fit_linear(pairs: Sequence[CalibrationPair]) -> CalibrationModel:
    """Least squares of IoU on the score logit."""
    scores, ious = _split(pairs)
    if scores.size < 2:
        raise DegenerateFit(f"need at least 2 pairs, got {scores.size}")
    z = logit(scores)
    if float(np.ptp(z)) == 0.0:
        raise DegenerateFit("all scores identical, slope is unidentifiable")
    design = np.stack([z, np.ones_like(z)], axis=1)
    coef, *_ = np.linalg.lstsq(design, ious, rcond=None)
    return CalibrationModel(
        kind="linear", params={"a": float(coef[0]), "b": float(coef[1])}
    )


def fit_isotonic(pairs: Sequence[CalibrationPair]) -> CalibrationModel:
    """Non-decreasing map from score to IoU via pool-adjacent-violators.

    Tied scores are pooled into one weighted point before the projection.
    The fitted step function is stored as interpolation knots; queries
    between knots interpolate linearly and clamp outside the score range.
    """
    scores, ious = _split(pairs)
    if scores.size == 0:
        raise DegenerateFit("no pairs to fit")
    order = np.argsort(scores, kind="stable")
    xs = scores[order]
    ys = ious[order]
    ux, start = np.unique(xs, return_index=True)
    sums = np.add.reduceat(ys, start)
    counts = np.diff(np.append(start, ys.size)).astype(np.float64)
    fitted = pava(sums / counts, counts)
    # keep only run endpoints; interpolation reproduces the full fit
    keep = np.zeros(ux.size, dtype=bool)
    keep[0] = keep[-1] = True
    keep[1:] |= fitted[1:] != fitted[:-1]
    keep[:-1] |= fitted[:-1] != fitted[1:]
    return CalibrationModel(
        kind="isotonic",
        params={"x": ux[keep].tolist(), "y": fitted[keep].tolist()},
    )


def fit_platt(
    pairs: Sequence[CalibrationPair], max_iter: int = 200, tol: float = 1e-10
) -> CalibrationModel:
    """Sigmoid ``1 / (1 + exp(-(a z + b)))`` fit by damped Gauss-Newton."""
    scores, ious = _split(pairs)
    if scores.size < 2:
        raise DegenerateFit(f"need at least 2 pairs, got {scores.size}")
    z = logit(scores)
    if float(np.ptp(z)) == 0.0:
        raise DegenerateFit("all scores identical, slope is unidentifiable")
    a, b = 1.0, 0.0

    def loss(av: float, bv: float) -> float:
        return float(np.sum((sigmoid(av * z + bv) - ious) ** 2))

    current = loss(a, b)
    for _ in range(max_iter):
        p = sigmoid(a * z + b)
        r = p - ious
        g = p * (1.0 - p)
        jac = np.stack([g * z, g], axis=1)
        jtj = jac.T @ jac + 1e-12 * np.eye(2)
        jtr = jac.T @ r
        try:
            step = np.linalg.solve(jtj, jtr)
        except np.linalg.LinAlgError as exc:
            raise DegenerateFit(f"normal equations singular: {exc}") from exc
        scale = 1.0
        for _ in range(40):
            trial = loss(a - scale * step[0], b - scale * step[1])
            if trial <= current:
                break
            scale *= 0.5
        else:
            return CalibrationModel(
                kind="platt", params={"a": float(a), "b": float(b)}
            )
        a -= scale * step[0]
        b -= scale * step[1]
        moved = float(np.hypot(scale * step[0], scale * step[1]))
        improved = current - trial
        current = trial
        if moved < tol or improved < tol * (1.0 + current):
            return CalibrationModel(
                kind="platt", params={"a": float(a), "b": float(b)}
            )
    raise NonConvergence(f"no convergence after {max_iter} iterations")


def fit_temperature(pairs: Sequence[CalibrationPair]) -> CalibrationModel:
    """Single temperature ``sigmoid(logit(s) / T)`` by bounded scalar search.

    A coarse log-spaced scan brackets the best squared error, then golden
    section narrows the bracket below ``TEMPERATURE_TOL``.
    """
    scores, ious = _split(pairs)
    if scores.size == 0:
        raise DegenerateFit("no pairs to fit")
    z = logit(scores)

    def loss(t: float) -> float:
        return float(np.sum((sigmoid(z / t) - ious) ** 2))

    lo, hi = TEMPERATURE_RANGE
    grid = np.geomspace(lo, hi, 512)
    values = [loss(t) for t in grid]
    best = int(np.argmin(values))
    a = grid[max(0, best - 1)]
    b = grid[min(grid.size - 1, best + 1)]

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = loss(c), loss(d)
    while b - a > TEMPERATURE_TOL:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = loss(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = loss(d)
    t = (a + b) / 2.0
    return CalibrationModel(kind="temperature", params={"t": float(t)})


_FITTERS = {
    "linear": fit_linear,
    "isotonic": fit_isotonic,
    "platt": fit_platt,
    "temperature": fit_temperature,
}


def fit(method: str, pairs: Sequence[CalibrationPair]) -> CalibrationModel:
    """Fit one of the named calibration methods."""
    if method not in _FITTERS:
        raise ConfigError(
            f"unknown calibration method {method!r}, choose from {sorted(_FITTERS)}"
        )
    return _FITTERS[method](pairs)


def bin_index(p: np.ndarray, bins: int) -> np.ndarray:
    """Equal-width bin of each confidence, the top edge closed at 1."""
    idx = np.floor(np.asarray(p, dtype=np.float64) * bins).astype(int)
    return np.clip(idx, 0, bins - 1)


def reliability_bins(
    scores: Sequence[float], ious: Sequence[float], bins: int = 25
) -> list[BinStat]:
    """Per-bin confidence and IoU means over the confidence axis."""
    if bins < 1:
        raise ConfigError(f"bins must be >= 1, got {bins}")
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(ious, dtype=np.float64)
    idx = bin_index(s, bins) if s.size else np.zeros(0, dtype=int)
    out = []
    for j in range(bins):
        sel = idx == j
        count = int(sel.sum())
        out.append(
            BinStat(
                lo=j / bins,
                hi=(j + 1) / bins,
                count=count,
                mean_score=float(s[sel].mean()) if count else 0.0,
                mean_iou=float(t[sel].mean()) if count else 0.0,
            )
        )
    return out


def laece0(
    scores: Sequence[float], ious: Sequence[float], bins: int = 25
) -> float:
    """Binned localization-aware calibration error.

    Detections are bucketed by confidence into ``bins`` equal-width bins;
    each bin contributes its share of detections times the absolute gap
    between its mean confidence and its mean IoU.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        return 0.0
    stats = reliability_bins(scores, ious, bins)
    total = 0.0
    for st in stats:
        if st.count:
            total += st.count * abs(st.mean_score - st.mean_iou)
    return total / s.size


def laace0(scores: Sequence[float], ious: Sequence[float]) -> float:
    """Unbinned mean absolute gap between confidence and IoU."""
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(ious, dtype=np.float64)
    if s.size == 0:
        return 0.0
    return float(np.mean(np.abs(s - t)))


def select_threshold(
    pairs: Sequence[CalibrationPair],
    n_gt: int,
    iou_match: float = 0.5,
) -> tuple[float, float]:
    """Pick the score cut maximizing F1 over the observed scores.

    A prediction counts as a true positive when its recorded IoU is at
    least ``iou_match``.  Ties in F1 resolve toward the higher threshold.

    Returns:
        ``(threshold, f1)``.
    """
    if not pairs:
        raise DegenerateFit("no pairs to sweep")
    if n_gt < 0:
        raise ConfigError(f"n_gt must be >= 0, got {n_gt}")
    scores, ious = _split(pairs)
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    hit_sorted = (ious[order] >= iou_match).astype(np.int64)
    tp_cum = np.cumsum(hit_sorted)
    best_t, best_f1 = float(s_sorted[0]), -1.0
    k = 0
    n = s_sorted.size
    while k < n:
        # advance over the tie group so "score >= t" keeps all of it
        t = s_sorted[k]
        while k + 1 < n and s_sorted[k + 1] == t:
            k += 1
        tp = int(tp_cum[k])
        kept = k + 1
        fp = kept - tp
        fn = n_gt - tp
        denom = 2 * tp + fp + fn
        f1 = (2.0 * tp / denom) if denom > 0 else 0.0
        if f1 > best_f1:
            best_f1 = f1
            best_t = float(t)
        k += 1
    return best_t, best_f1


def write_pairs_csv(path: str | Path, pairs: Sequence[CalibrationPair]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["score", "iou"])
        for p in pairs:
            writer.writerow([f"{p.score:.10g}", f"{p.iou:.10g}"])


def read_pairs_csv(path: str | Path) -> list[CalibrationPair]:
    """Read ``(score, iou)`` pairs from a headered CSV."""
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"score", "iou"} <= set(
                reader.fieldnames
            ):
                raise DataError(f"{path}: expected columns score,iou")
            out = []
            for row in reader:
                try:
                    out.append(
                        CalibrationPair(
                            score=float(row["score"]), iou=float(row["iou"])
                        )
                    )
                except (TypeError, ValueError) as exc:
                    raise DataError(f"{path}: bad row {row!r}") from exc
            return out
    except OSError as exc:
        raise DataError(f"cannot read pairs file {path}: {exc}") from exc


def write_model(path: str | Path, model: CalibrationModel, **extra) -> None:
    data = model.to_json()
    data.update(extra)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")


def read_model(path: str | Path) -> CalibrationModel:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"model file {path} is not valid JSON: {exc}") from exc
    return CalibrationModel.from_json(data)
