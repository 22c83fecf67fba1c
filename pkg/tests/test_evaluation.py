import csv
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smileage.attention import read_pgm
from smileage.data import Dataset, SyntheticSpec, VideoSample, generate_synthetic, holdout_split
from smileage.evaluation import (
    CURVE_X,
    EvalReport,
    age_bin,
    attention_maps,
    cumulative_curve,
    evaluate,
    export_attention,
    fold_seeds,
    mean_predictor_report,
    permutation_equivariant,
    run_ablation,
    run_crossval,
    run_mechanism_compare,
    salience_ratio,
    threshold_study,
    upsample_nearest,
)
from smileage.network import ModelParams, attention_input, toy_config
from smileage.training import TrainConfig


# report arithmetic -----------------------------------------------------------------


def test_age_bins_are_decades_with_top_bin_absorbing_overflow():
    assert age_bin([0, 9.99, 10, 45.5, 79.9, 80, 95]).tolist() == [0, 0, 1, 4, 7, 7, 7]


def test_identity_predictions_give_zero_error():
    r = EvalReport.from_predictions([12.0, 33.0, 57.5], [12.0, 33.0, 57.5])
    assert r.mae == 0 and r.error_std == 0
    assert r.curve[0] == 1.0 and all(c == 1.0 for c in r.curve)


def test_two_sample_example():
    r = EvalReport.from_predictions([20.0, 40.0], [22.0, 34.0])
    assert r.mae == 4.0 and r.error_std == 2.0
    curve = dict(zip(r.curve_x, r.curve))
    assert curve[0] == curve[1] == 0.0
    assert all(curve[x] == 0.5 for x in range(2, 6))
    assert curve[6] == 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 99), st.floats(-30, 30)), min_size=1, max_size=60))
def test_overall_mae_is_count_weighted_bin_mean(pairs):
    ages = np.array([a for a, _ in pairs])
    preds = ages + np.array([e for _, e in pairs])
    r = EvalReport.from_predictions(ages, preds)
    counts = np.array(r.bin_counts)
    assert counts.sum() == len(pairs)
    weighted = sum(c * m for c, m in zip(counts, r.bin_mae) if c)
    assert abs(weighted / counts.sum() - r.mae) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 40), min_size=1, max_size=80))
def test_cumulative_curve_is_monotone_and_reaches_one(errors):
    curve = cumulative_curve(errors, np.arange(0, 41))
    assert np.all(np.diff(curve) >= 0)
    assert curve[-1] == 1.0
    assert cumulative_curve(errors, [max(errors)])[0] == 1.0


def test_curve_loop_oracle():
    errors = np.random.default_rng(0).exponential(5, size=200)
    expected = [np.mean([e <= x for e in errors]) for x in CURVE_X]
    np.testing.assert_array_equal(cumulative_curve(errors), expected)


def test_bins_without_samples_are_nan_not_zero():
    r = EvalReport.from_predictions([15.0], [17.0])
    assert r.bin_counts[1] == 1 and r.bin_mae[1] == 2.0
    assert np.isnan(r.bin_mae[0]) and r.bin_counts[0] == 0


def test_report_files(tmp_path):
    r = EvalReport.from_predictions([10.0, 25.0], [12.0, 24.0], subjects=[3, 4], video_ids=[7, 8])
    paths = r.write(tmp_path, "rep")
    summary = json.loads(paths[0].read_text())
    assert summary["mae"] == 1.5 and "records" not in summary
    with paths[3].open() as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0] == {"subject_id": "3", "video_id": "7", "age": "10.0", "prediction": "12.0"}
    bins = paths[1].read_text().splitlines()
    assert bins[0] == "bin,count,mae" and bins[2].startswith("10-19,1,")


def test_mismatched_or_empty_predictions_rejected():
    with pytest.raises(ValueError):
        EvalReport.from_predictions([], [])
    with pytest.raises(ValueError):
        EvalReport.from_predictions([1.0, 2.0], [1.0])


def test_mean_predictor_baseline_closed_form():
    train = Dataset([VideoSample(i, np.zeros((1, 2, 2, 1)), a) for i, a in enumerate([10.0, 20.0, 60.0])])
    test = Dataset([VideoSample(9, np.zeros((1, 2, 2, 1)), a) for a in (30.0, 50.0)])
    r = mean_predictor_report(train, test)
    assert r.predictions.tolist() == [30.0, 30.0] and r.mae == 10.0


# threshold study -------------------------------------------------------------------


def test_threshold_one_equals_overall():
    rng = np.random.default_rng(1)
    ages = rng.integers(10, 30, size=50).astype(float)
    preds = ages + rng.normal(0, 3, size=50)
    rows = threshold_study(ages, ages, preds)
    assert rows[0].threshold == 1 and rows[0].n_samples == 50
    assert rows[0].mae == pytest.approx(np.abs(preds - ages).mean(), abs=1e-12)


def test_threshold_beyond_support_is_undefined():
    ages = np.array([20.0, 20.0, 31.0])
    rows = threshold_study(ages, ages, ages + 1, max_threshold=4)
    assert [r.n_samples for r in rows] == [3, 2, 0, 0]
    assert rows[2].mae is None and rows[2].error_std is None


def test_uniform_counts_keep_mae_constant_until_cutoff():
    ages = np.repeat(np.arange(20, 30, dtype=float), 4)
    preds = ages + np.tile([1.0, -2.0, 3.0, 0.0], 10)
    rows = threshold_study(ages, ages, preds, max_threshold=6)
    assert [r.mae for r in rows[:4]] == [rows[0].mae] * 4
    assert rows[4].mae is None and rows[5].n_samples == 0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(8, 20), min_size=1, max_size=60))
def test_retained_count_is_nonincreasing(ints):
    ages = np.array(ints, dtype=float)
    counts = [r.n_samples for r in threshold_study(ages, ages, ages)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


# model evaluation, crossval and experiment drivers ----------------------------------


@pytest.fixture(scope="module")
def four_subjects():
    return generate_synthetic(SyntheticSpec(n_subjects=4, videos_per_subject=1, frames=(3, 4), seed=12))


QUICK = TrainConfig(epochs=2, learning_rate=1e-3)


def test_evaluate_is_deterministic_and_matches_records(four_subjects):
    params = ModelParams.init(toy_config(), 0)
    a, b = evaluate(params, four_subjects), evaluate(params, four_subjects)
    assert a.mae == b.mae and len(a.records) == len(four_subjects)
    assert [r["subject_id"] for r in a.records] == [v.subject_id for v in four_subjects]
    with pytest.raises(ValueError):
        evaluate(params, [])


def test_crossval_smoke_two_folds(four_subjects):
    cv = run_crossval(four_subjects, toy_config(), QUICK, k=2, seed=3)
    assert len(cv.folds) == 2 and all(f.report is not None for f in cv.folds)
    assert len(cv.pooled.records) == len(four_subjects)
    assert len({f.seed for f in cv.folds}) == 2 and [f.seed for f in cv.folds] == fold_seeds(3, 2)
    tested = sorted(r["subject_id"] for f in cv.folds for r in f.report.records)
    assert tested == four_subjects.subjects
    summary = cv.summary()
    assert summary["baseline_mae"] == cv.baseline.mae and len(summary["folds"]) == 2


def test_crossval_is_reproducible(four_subjects):
    a = run_crossval(four_subjects, toy_config(), QUICK, k=2, seed=5).summary()
    b = run_crossval(four_subjects, toy_config(), QUICK, k=2, seed=5).summary()
    assert a == b


def test_crossval_reports_diverged_fold_without_aborting(four_subjects):
    bad = replace(QUICK, learning_rate=float("nan"))
    with np.errstate(invalid="ignore"):
        cv = run_crossval(four_subjects, toy_config(), bad, k=2, seed=0)
    assert len(cv.folds) == 2 and all(f.error for f in cv.folds)
    assert cv.pooled is None and cv.baseline.mae > 0


def test_ablation_emits_one_row_per_variant(four_subjects):
    rows = run_ablation(four_subjects, toy_config(), replace(QUICK, epochs=1), k=2, seed=0)
    assert [r["variant"] for r in rows] == ["cnn_only", "cnn_rnn", "cnn_rnn_spatial", "full"]
    assert all(r["mae"] is not None and r["baseline_mae"] == rows[0]["baseline_mae"] for r in rows)


def test_mechanism_compare_covers_twelve_configurations(four_subjects, tmp_path):
    train, val = holdout_split(four_subjects, 0.25, 0)
    rows = run_mechanism_compare(train, val, toy_config(), replace(QUICK, epochs=1), tmp_path)
    assert len(rows) == 12
    assert {(r["mechanism"], r["attn_layer"]) for r in rows} == {
        (m, l) for m in ("spatially_agnostic", "fully_spatially_indexed", "mediate_spatially_indexed",
                         "spatially_indexed") for l in (1, 2, 3)}
    for r in rows:
        assert r["equivariant"] == (r["mechanism"] == "spatially_agnostic")
        assert any((tmp_path / f"{r['mechanism']}_layer{r['attn_layer']}").glob("*.pgm"))


def test_holdout_split_is_subject_disjoint(four_subjects):
    train, val = holdout_split(four_subjects, 0.5, 1)
    assert len(val.subjects) == 2 and not set(train.subjects) & set(val.subjects)
    train, val = holdout_split(four_subjects, 0.0, 1)
    assert len(val) == 0 and len(train) == len(four_subjects)
    with pytest.raises(ValueError):
        holdout_split(four_subjects, 0.05, 1)


# attention export ------------------------------------------------------------------


def test_untrained_maps_are_near_half_and_temporal_sums_to_one(four_subjects, tmp_path):
    params = ModelParams.init(toy_config(), 0)
    spatial, temporal = attention_maps(params, four_subjects[0])
    grids = np.stack([m.weights for m in spatial])
    assert np.all((grids > 0) & (grids < 1)) and np.abs(grids - 0.5).max() < 0.1
    paths = export_attention(params, four_subjects[0], tmp_path / "maps", stem="v")
    assert len(paths) == four_subjects[0].length + 1
    assert read_pgm(paths[0]).shape == params.config.attention_grid()[:2]
    with paths[-1].open() as fh:
        weights = [float(r["weight"]) for r in csv.DictReader(fh)]
    assert abs(sum(weights) - 1.0) <= 1e-9


def test_export_to_unwritable_path_is_reported(four_subjects, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="cannot create"):
        export_attention(ModelParams.init(toy_config(), 0), four_subjects[0], blocker / "sub")


def test_upsample_and_salience_ratio():
    grid = np.array([[1.0, 0.0], [0.0, 0.0]])
    up = upsample_nearest(grid, 4)
    assert up[:2, :2].tolist() == [[1, 1], [1, 1]] and up.sum() == 4
    mask = np.zeros((4, 4), dtype=bool)
    mask[:2, :2] = True
    assert salience_ratio(grid + 0.5, mask) == pytest.approx(1.5 / 0.5)


def test_equivariance_probe_separates_shared_from_indexed(four_subjects):
    for mechanism, expected in (("spatially_agnostic", True), ("spatially_indexed", False)):
        params = ModelParams.init(toy_config(mechanism=mechanism), 1)
        fmap = attention_input(four_subjects[0].frames, params)[0]
        assert permutation_equivariant(params, fmap) is expected
