"""Score calibration: fits, error metrics, threshold sweep, persistence."""

import numpy as np
import pytest

import oracles
from orthopipe.calibration import (
    CalibrationModel,
    CalibrationPair,
    DegenerateFit,
    bin_index,
    fit,
    fit_isotonic,
    fit_linear,
    fit_platt,
    fit_temperature,
    identity_model,
    laace0,
    laece0,
    logit,
    pair_with_iou,
    pava,
    read_model,
    read_pairs_csv,
    reliability_bins,
    select_threshold,
    sigmoid,
    write_model,
    write_pairs_csv,
)
from orthopipe.errors import ConfigError, DataError


def _pairs(scores, ious):
    return [CalibrationPair(score=s, iou=t) for s, t in zip(scores, ious)]


# -------------------------------------------------------- logit/sigmoid


def test_logit_sigmoid_inverse():
    p = np.linspace(0.01, 0.99, 50)
    assert np.allclose(sigmoid(logit(p)), p, atol=1e-12)


def test_logit_clips_extremes():
    assert np.isfinite(logit(0.0)) and np.isfinite(logit(1.0))
    assert logit(0.0) < -10 and logit(1.0) > 10


def test_sigmoid_scalar_stays_scalar():
    assert isinstance(sigmoid(0.0), float)
    assert sigmoid(0.0) == 0.5


# ------------------------------------------------------- pairing with GT


def test_pair_with_iou_higher_score_claims():
    gt = [(0.0, 0.0, 10.0, 10.0)]
    preds = [(0.0, 0.0, 10.0, 8.0), (0.0, 0.0, 10.0, 10.0)]
    out = pair_with_iou(preds, [0.5, 0.9], gt)
    # output order follows input order; the 0.9 prediction took the box
    assert out[1].iou == 1.0 and out[1].score == 0.9
    assert out[0].iou == 0.0 and out[0].score == 0.5


def test_pair_with_iou_no_overlap_stays_zero():
    out = pair_with_iou([(0.0, 0.0, 1.0, 1.0)], [0.8], [(5.0, 5.0, 6.0, 6.0)])
    assert out == [CalibrationPair(score=0.8, iou=0.0)]


def test_pair_with_iou_each_gt_claimed_once():
    gt = [(0.0, 0.0, 4.0, 4.0), (10.0, 0.0, 14.0, 4.0)]
    preds = [(0.0, 0.0, 4.0, 4.0), (1.0, 0.0, 5.0, 4.0), (10.0, 0.0, 14.0, 4.0)]
    out = pair_with_iou(preds, [0.9, 0.8, 0.7], gt)
    assert [p.iou for p in out] == [1.0, 0.0, 1.0]


def test_pair_with_iou_empty_gt_and_validation():
    assert pair_with_iou([(0.0, 0.0, 1.0, 1.0)], [0.4], []) == [
        CalibrationPair(score=0.4, iou=0.0)
    ]
    with pytest.raises(ConfigError):
        pair_with_iou([(0.0, 0.0, 1.0, 1.0)], [0.4, 0.5], [])


# ------------------------------------------------------------------ PAVA


def test_pava_hand_examples():
    assert pava([3.0, 1.0, 2.0]).tolist() == [2.0, 2.0, 2.0]
    assert pava([1.0, 3.0, 2.0]).tolist() == [1.0, 2.5, 2.5]
    assert pava([1.0, 2.0, 3.0]).tolist() == [1.0, 2.0, 3.0]
    assert pava([5.0]).tolist() == [5.0]


def test_pava_matches_bruteforce_projection():
    rng = np.random.default_rng(61)
    for _ in range(100):
        n = int(rng.integers(1, 9))
        y = rng.uniform(-5, 5, n)
        got = pava(y)
        want = oracles.brute_project_monotone(y.tolist())
        assert np.allclose(got, want, atol=1e-9)
        assert np.all(np.diff(got) >= -1e-12)


def test_pava_weighted_equals_expanded():
    rng = np.random.default_rng(67)
    for _ in range(50):
        n = int(rng.integers(1, 6))
        y = rng.uniform(0, 1, n)
        w = rng.integers(1, 4, n)
        weighted = pava(y, w.astype(float))
        expanded = pava(np.repeat(y, w))
        starts = np.concatenate([[0], np.cumsum(w)[:-1]])
        assert np.allclose(weighted, expanded[starts], atol=1e-12)


def test_pava_rejects_bad_weights():
    with pytest.raises(ConfigError):
        pava([1.0, 2.0], [1.0])
    with pytest.raises(ConfigError):
        pava([1.0, 2.0], [1.0, 0.0])


# ------------------------------------------------------------------ fits


def test_fit_linear_recovers_two_points():
    model = fit_linear(_pairs([0.2, 0.8], [0.2, 0.8]))
    out = model.apply([0.2, 0.8])
    assert np.allclose(out, [0.2, 0.8], atol=1e-9)


def test_fit_linear_degenerate():
    with pytest.raises(DegenerateFit):
        fit_linear(_pairs([0.5], [0.5]))
    with pytest.raises(DegenerateFit):
        fit_linear(_pairs([0.5, 0.5, 0.5], [0.1, 0.2, 0.3]))


def test_fit_isotonic_equals_pava_at_knots():
    rng = np.random.default_rng(71)
    scores = rng.uniform(0.05, 0.95, 40)
    ious = np.clip(scores + rng.normal(0, 0.2, 40), 0, 1)
    model = fit_isotonic(_pairs(scores, ious))
    order = np.argsort(scores, kind="stable")
    full = pava(ious[order])
    assert np.allclose(model.apply(scores[order]), full, atol=1e-9)


def test_fit_isotonic_pools_ties():
    # two pairs share score 0.5; the fitted value there is their mean
    model = fit_isotonic(_pairs([0.2, 0.5, 0.5, 0.8], [0.1, 0.2, 0.6, 0.9]))
    assert model.apply_one(0.5) == pytest.approx(0.4)


def test_fit_isotonic_never_worse_than_identity():
    rng = np.random.default_rng(73)
    scores = rng.uniform(0.02, 0.98, 200)
    ious = np.clip(scores**2 + rng.normal(0, 0.1, 200), 0, 1)
    model = fit_isotonic(_pairs(scores, ious))
    sse_fit = float(np.sum((model.apply(scores) - ious) ** 2))
    sse_id = float(np.sum((scores - ious) ** 2))
    assert sse_fit <= sse_id + 1e-9


def test_fit_isotonic_clamps_outside_range():
    model = fit_isotonic(_pairs([0.4, 0.6], [0.3, 0.7]))
    assert model.apply_one(0.0) == pytest.approx(0.3)
    assert model.apply_one(1.0) == pytest.approx(0.7)


def test_fit_platt_recovers_sigmoid():
    rng = np.random.default_rng(79)
    scores = rng.uniform(0.02, 0.98, 400)
    ious = sigmoid(1.5 * logit(scores) - 0.3)
    model = fit_platt(_pairs(scores, ious))
    assert abs(model.params["a"] - 1.5) < 1e-3
    assert abs(model.params["b"] + 0.3) < 1e-3


def test_fit_platt_identity_and_constant():
    rng = np.random.default_rng(83)
    scores = rng.uniform(0.05, 0.95, 200)
    ident = fit_platt(_pairs(scores, scores))
    assert abs(ident.params["a"] - 1.0) < 1e-3
    assert abs(ident.params["b"]) < 1e-3
    flat = fit_platt(_pairs(scores, np.full(200, 0.5)))
    assert abs(flat.params["a"]) < 1e-3
    assert abs(flat.params["b"]) < 1e-3


def test_fit_temperature_recovers_t():
    rng = np.random.default_rng(89)
    scores = rng.uniform(0.02, 0.98, 300)
    model = fit_temperature(_pairs(scores, sigmoid(logit(scores) / 2.0)))
    assert abs(model.params["t"] - 2.0) < 1e-3
    ident = fit_temperature(_pairs(scores, scores))
    assert abs(ident.params["t"] - 1.0) < 1e-3


def test_fit_temperature_overconfident_heats_up():
    rng = np.random.default_rng(97)
    scores = rng.uniform(0.5, 0.98, 300)
    model = fit_temperature(_pairs(scores, sigmoid(logit(scores) / 3.0)))
    assert model.params["t"] > 1.0
    assert abs(model.params["t"] - 3.0) < 1e-3


def test_temperature_one_is_identity():
    model = CalibrationModel(kind="temperature", params={"t": 1.0})
    p = np.linspace(0.01, 0.99, 99)
    assert np.max(np.abs(model.apply(p) - p)) < 1e-12


def test_fit_dispatcher():
    pairs = _pairs([0.2, 0.8], [0.3, 0.7])
    assert fit("linear", pairs).kind == "linear"
    with pytest.raises(ConfigError):
        fit("histogram", pairs)


def test_apply_stays_in_unit_interval():
    rng = np.random.default_rng(101)
    scores = rng.uniform(0.02, 0.98, 100)
    ious = np.clip(scores + rng.normal(0, 0.3, 100), 0, 1)
    pairs = _pairs(scores, ious)
    grid = np.concatenate([[0.0, 1.0], np.linspace(0, 1, 201)])
    models = [identity_model()] + [
        fit(m, pairs) for m in ("linear", "isotonic", "platt", "temperature")
    ]
    for model in models:
        out = model.apply(grid)
        assert np.all(out >= 0.0) and np.all(out <= 1.0), model.kind


# --------------------------------------------------------------- metrics


def test_laece0_hand_values():
    assert laece0([0.25, 0.75], [0.5, 0.5], bins=2) == pytest.approx(0.25)
    assert laece0([0.25, 0.75], [0.5, 0.5], bins=1) == pytest.approx(0.0)
    for bins in (1, 5, 25):
        assert laece0([0.8] * 4, [0.6] * 4, bins=bins) == pytest.approx(0.2)
    assert laece0([], [], bins=25) == 0.0


def test_laece0_single_bin_is_mean_gap():
    rng = np.random.default_rng(103)
    s = rng.uniform(0, 1, 50)
    t = rng.uniform(0, 1, 50)
    assert laece0(s, t, bins=1) == pytest.approx(abs(s.mean() - t.mean()))


def test_laece0_matches_reference():
    rng = np.random.default_rng(107)
    for _ in range(50):
        n = int(rng.integers(1, 80))
        s = rng.uniform(0, 1, n)
        t = rng.uniform(0, 1, n)
        bins = int(rng.integers(1, 30))
        assert laece0(s, t, bins=bins) == pytest.approx(
            oracles.laece_reference(s.tolist(), t.tolist(), bins)
        )


def test_laace0_hand_values():
    assert laace0([1.0], [0.0]) == 1.0
    assert laace0([0.9, 0.5], [0.7, 0.6]) == pytest.approx(0.15)
    assert laace0([0.3, 0.6], [0.3, 0.6]) == 0.0
    assert laace0([], []) == 0.0


def test_laace0_matches_reference():
    rng = np.random.default_rng(109)
    s = rng.uniform(0, 1, 200)
    t = rng.uniform(0, 1, 200)
    assert laace0(s, t) == pytest.approx(oracles.laace_reference(s.tolist(), t.tolist()))


def test_bin_index_top_edge_closed():
    idx = bin_index(np.array([0.0, 0.5, 0.9999, 1.0]), 25)
    assert idx.tolist() == [0, 12, 24, 24]


def test_reliability_bins_structure():
    stats = reliability_bins([0.1, 0.12, 0.9], [0.2, 0.3, 0.8], bins=10)
    assert len(stats) == 10
    assert sum(st.count for st in stats) == 3
    assert stats[1].count == 2
    assert stats[1].mean_score == pytest.approx(0.11)
    assert stats[1].mean_iou == pytest.approx(0.25)
    assert (stats[0].lo, stats[0].hi) == (0.0, 0.1)
    with pytest.raises(ConfigError):
        reliability_bins([0.5], [0.5], bins=0)


# ----------------------------------------------------- threshold selection


def test_select_threshold_hand_case():
    pairs = _pairs([0.9, 0.7, 0.5], [0.8, 0.3, 0.6])
    t, f1 = select_threshold(pairs, n_gt=2)
    assert (t, f1) == (0.5, pytest.approx(0.8))


def test_select_threshold_tie_takes_higher():
    pairs = _pairs([0.9, 0.5, 0.3, 0.1], [0.9, 0.0, 0.0, 0.9])
    t, f1 = select_threshold(pairs, n_gt=2)
    assert t == 0.9
    assert f1 == pytest.approx(2.0 / 3.0)


def test_select_threshold_rejects_spurious_floor():
    pairs = _pairs([0.95, 0.9, 0.85, 0.01, 0.01, 0.01], [1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
    t, f1 = select_threshold(pairs, n_gt=3)
    assert t > 0.01
    assert f1 == pytest.approx(1.0)


def test_select_threshold_uniform_quality_keeps_all():
    pairs = _pairs([0.9, 0.6, 0.3], [1.0, 1.0, 1.0])
    t, f1 = select_threshold(pairs, n_gt=3)
    assert t == 0.3
    assert f1 == pytest.approx(1.0)


def test_select_threshold_matches_bruteforce():
    rng = np.random.default_rng(113)
    for _ in range(100):
        n = int(rng.integers(1, 40))
        scores = np.round(rng.uniform(0, 1, n), 2)  # force score ties
        ious = np.where(rng.random(n) < 0.6, rng.uniform(0.5, 1.0, n), 0.0)
        n_gt = int(rng.integers(0, n + 5))
        pairs = _pairs(scores, ious)
        got = select_threshold(pairs, n_gt=n_gt)
        want = oracles.brute_f1_sweep(
            [(float(s), float(t)) for s, t in zip(scores, ious)], n_gt
        )
        assert got[0] == want[0]
        assert got[1] == pytest.approx(want[1])


def test_select_threshold_errors():
    with pytest.raises(DegenerateFit):
        select_threshold([], n_gt=3)
    with pytest.raises(ConfigError):
        select_threshold(_pairs([0.5], [0.5]), n_gt=-1)


# ------------------------------------------------------------ persistence


def test_pairs_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(127)
    pairs = _pairs(rng.uniform(0, 1, 30), rng.uniform(0, 1, 30))
    path = tmp_path / "pairs.csv"
    write_pairs_csv(path, pairs)
    back = read_pairs_csv(path)
    assert len(back) == 30
    for a, b in zip(pairs, back):
        assert a.score == pytest.approx(b.score, abs=1e-9)
        assert a.iou == pytest.approx(b.iou, abs=1e-9)


def test_pairs_csv_extra_columns_tolerated(tmp_path):
    path = tmp_path / "pairs.csv"
    path.write_text("score,iou,site\n0.5,0.4,alpha\n")
    assert read_pairs_csv(path) == [CalibrationPair(score=0.5, iou=0.4)]


def test_pairs_csv_errors(tmp_path):
    missing = tmp_path / "nope.csv"
    with pytest.raises(DataError):
        read_pairs_csv(missing)
    bad_cols = tmp_path / "cols.csv"
    bad_cols.write_text("a,b\n1,2\n")
    with pytest.raises(DataError):
        read_pairs_csv(bad_cols)
    bad_row = tmp_path / "row.csv"
    bad_row.write_text("score,iou\n0.5,high\n")
    with pytest.raises(DataError):
        read_pairs_csv(bad_row)


def test_model_json_roundtrip(tmp_path):
    model = CalibrationModel(kind="platt", params={"a": 1.25, "b": -0.5})
    path = tmp_path / "model.json"
    write_model(path, model, threshold=0.35, f1=0.9)
    back = read_model(path)
    assert back.kind == "platt"
    assert back.params["a"] == 1.25
    assert back.params["threshold"] == 0.35  # extras ride along in params
    assert back.apply_one(0.7) == pytest.approx(model.apply_one(0.7))


def test_model_json_errors(tmp_path):
    with pytest.raises(DataError):
        read_model(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(DataError):
        read_model(bad)
    nokind = tmp_path / "nokind.json"
    nokind.write_text('{"a": 1.0}')
    with pytest.raises(DataError):
        read_model(nokind)
    unknown = tmp_path / "unknown.json"
    unknown.write_text('{"kind": "quantile"}')
    with pytest.raises(DataError):
        read_model(unknown)


def test_isotonic_model_roundtrip_preserves_curve(tmp_path):
    rng = np.random.default_rng(131)
    scores = rng.uniform(0.05, 0.95, 60)
    ious = np.clip(scores + rng.normal(0, 0.15, 60), 0, 1)
    model = fit_isotonic(_pairs(scores, ious))
    path = tmp_path / "iso.json"
    write_model(path, model)
    back = read_model(path)
    grid = np.linspace(0, 1, 101)
    assert np.allclose(back.apply(grid), model.apply(grid), atol=1e-12)
