import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsrg.errors import UndefinedMetricError
from fsrg.evaluation import (ScoredPredictions, emit_results_table, evaluate_template,
                             location_averaged_auc, per_class_auc, read_prediction_dump, roc_auc,
                             severity_auc, write_prediction_dump)
from fsrg.templates import bundled_template


def pair_count_auc(scores, labels):
    """Brute force: fraction of (pos, neg) pairs ordered correctly, ties count 1/2."""
    pos = [s for s, y in zip(scores, labels) if y > 0]
    neg = [s for s, y in zip(scores, labels) if y <= 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.booleans()), min_size=2, max_size=60))
def test_auc_matches_pair_count_with_ties(data):
    scores = [float(s) / 3 for s, _ in data]
    labels = [1 if b else -1 for _, b in data]
    if len(set(labels)) < 2:
        with pytest.raises(UndefinedMetricError):
            roc_auc(scores, labels)
        return
    assert roc_auc(scores, labels) == pytest.approx(pair_count_auc(scores, labels), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=4, max_size=40), st.integers(0, 1000))
def test_auc_invariant_under_monotone_map(ints, seed):
    scores = [i / 50 for i in ints]
    rng = np.random.default_rng(seed)
    labels = rng.choice([-1, 1], len(scores))
    if len(set(labels)) < 2:
        return
    a = roc_auc(scores, labels)
    assert roc_auc(np.exp(3 * np.array(scores)), labels) == pytest.approx(a, abs=1e-12)
    assert roc_auc(-np.array(scores), labels) == pytest.approx(1 - a, abs=1e-12)


def test_auc_reference_values():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [-1, -1, 1, 1]) == pytest.approx(0.75)
    assert roc_auc([1, 2, 3], [-1, 1, 1]) == 1.0
    assert roc_auc([0.5] * 4, [1, -1, 1, -1]) == 0.5


def _preds(scores, labels, mask=None):
    scores = np.asarray(scores, dtype=float)
    mask = np.ones_like(scores, dtype=bool) if mask is None else mask
    return ScoredPredictions([f"i{k}" for k in range(scores.shape[0])], scores, labels, mask)


def test_location_average_is_unweighted_and_skips_undefined(caplog):
    rng = np.random.default_rng(0)
    N = 40
    scores = rng.uniform(-1, 1, (N, 5))
    labels = np.where(rng.random((N, 5)) < 0.3, 1, -1)
    labels[:, 4] = -1                     # class 4 has no positives: skipped
    preds = _preds(scores, labels)
    grouping = {"a": [0, 1, 2], "b": [3, 4]}
    with caplog.at_level(logging.INFO):
        per, macro = location_averaged_auc(preds, grouping)
    expect_a = np.mean([pair_count_auc(scores[:, c], labels[:, c]) for c in range(3)])
    expect_b = pair_count_auc(scores[:, 3], labels[:, 3])
    assert per["a"] == pytest.approx(expect_a, abs=1e-12)
    assert per["b"] == pytest.approx(expect_b, abs=1e-12)
    assert macro == pytest.approx((expect_a + expect_b) / 2, abs=1e-12)
    assert "class 4 skipped" in caplog.text


def test_location_average_mask_excludes_rows():
    scores = np.array([[0.9], [0.1], [0.5], [0.95]])
    labels = np.array([[1], [-1], [1], [-1]])
    mask = np.array([[True], [True], [True], [False]])
    per, _ = location_averaged_auc(_preds(scores, labels, mask), {"x": [0]})
    assert per["x"] == 1.0


def test_grouping_validation():
    preds = _preds(np.zeros((2, 3)), np.array([[1, 1, 1], [-1, -1, -1]]))
    with pytest.raises(ValueError, match="more than one"):
        location_averaged_auc(preds, {"a": [0, 1], "b": [1]})
    with pytest.raises(ValueError, match="out of range"):
        location_averaged_auc(preds, {"a": [3]})


def test_severity_auc_one_vs_rest_and_absent_levels(caplog):
    rng = np.random.default_rng(1)
    levels = rng.choice([0, 1, 3], 50)       # level 2 absent
    p = rng.dirichlet(np.ones(4), 50)
    with caplog.at_level(logging.WARNING):
        per, macro = severity_auc(p, levels, 4)
    assert set(per) == {0, 1, 3}
    for k in per:
        assert per[k] == pytest.approx(pair_count_auc(p[:, k], np.where(levels == k, 1, -1)))
    assert macro == pytest.approx(np.mean(list(per.values())))
    assert "level 2 absent" in caplog.text
    with pytest.raises(UndefinedMetricError):
        severity_auc(p, np.zeros(50, int), 4)


def test_perfect_and_chance_predictions():
    levels = np.repeat(np.arange(6), 10)
    onehot = np.eye(6)[levels]
    assert severity_auc(onehot, levels)[1] == 1.0
    assert severity_auc(np.full((60, 6), 1 / 6), levels)[1] == 0.5


def test_evaluate_template_localization_and_severity():
    tree = bundled_template("synthetic_localization")
    rng = np.random.default_rng(2)
    y = np.where(rng.random((80, tree.num_classes)) < 0.2, 1, -1)
    out = evaluate_template(tree, _preds(y * 0.5, y))
    assert out["localization_auc"] == 1.0 and out["macro_auc"] == 1.0
    assert set(out["pathology_auc"]) == set(tree.attributes)

    sev = bundled_template("cardiomegaly")
    levels = np.repeat(np.arange(6), 5)
    y = np.where(np.eye(6)[levels] == 1, 1, -1)
    out = evaluate_template(sev, _preds(np.eye(6)[levels] * 0.2, y))
    assert out["group_auc"]["cardiomegaly"] == 1.0
    assert len(out["level_auc"]["cardiomegaly"]) == 6


def test_results_table_files(tmp_path):
    runs = [("prompt / 1-shot", {"lung opacity": 0.71234, "macro": 0.7}),
            ("random / 1-shot", {"lung opacity": 0.61, "macro": 0.6})]
    csv_path, txt_path = emit_results_table(runs, tmp_path / "table", "configuration")
    assert csv_path.read_text().splitlines()[0] == "configuration,lung opacity,macro"
    txt = txt_path.read_text().splitlines()
    assert "0.7123" in txt[2]
    assert len({len(line) for line in txt[2:]}) == 1
    with pytest.raises(ValueError):
        emit_results_table([("a", {"x": 1.0}), ("b", {"y": 1.0})], tmp_path / "t")
    with pytest.raises(ValueError):
        emit_results_table([], tmp_path / "t")


def test_prediction_dump_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    s = rng.uniform(-1, 1, (4, 3))
    preds = _preds(s, np.where(s > 0, 1, -1), rng.random((4, 3)) > 0.2)
    write_prediction_dump(preds, tmp_path / "p.csv")
    back = read_prediction_dump(tmp_path / "p.csv")
    assert back.image_ids == preds.image_ids
    assert np.array_equal(back.scores, preds.scores)
    assert np.array_equal(back.labels, preds.labels) and np.array_equal(back.mask, preds.mask)
    assert per_class_auc(back) == per_class_auc(preds)


def test_predictions_validation():
    with pytest.raises(ValueError):
        ScoredPredictions(["a"], np.zeros((1, 2)), np.zeros((1, 3)), np.ones((1, 2), bool))
    with pytest.raises(ValueError, match="finite"):
        ScoredPredictions(["a"], np.array([[np.nan]]), np.ones((1, 1)), np.ones((1, 1), bool))
