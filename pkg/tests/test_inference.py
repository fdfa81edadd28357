import json

import numpy as np
import pytest

import oracles
from emdepart import inference as inf


def test_predict_single_candidate_and_argmax():
    assert inf.predict_zsl([[0.3, 0.9]], [4, 7], [4]).tolist() == [4]
    assert inf.predict_zsl([[0.85, 0.50]], [1, 2], [1, 2]).tolist() == [1]


def test_predict_shift_invariance():
    S = np.random.default_rng(0).standard_normal((20, 5))
    a = inf.predict(S, list(range(5)))
    np.testing.assert_array_equal(inf.predict(S + 3.25, list(range(5))), a)


def test_predict_ties_go_to_lowest_class_id():
    assert inf.predict([[0.5, 0.5, 0.1]], [9, 3, 1]).tolist() == [3]


def test_predict_empty_candidates():
    with pytest.raises(ValueError):
        inf.predict([[0.1]], [0], candidates=[])


def test_calibrated_stacking_examples():
    classes, seen = [0, 1], [0]
    S = np.array([[0.9, 0.85]])
    assert inf.predict_gzsl(S, classes, seen, [1], 0.0).tolist() == [0]
    assert inf.predict_gzsl(S, classes, seen, [1], 0.1).tolist() == [1]  # 0.8 < 0.85


def test_calibrated_stacking_zero_equals_plain_argmax():
    rng = np.random.default_rng(1)
    S = rng.standard_normal((50, 6))
    classes = [5, 0, 3, 1, 4, 2]
    plain = np.asarray(classes)[np.argmax(S, axis=1)]
    np.testing.assert_array_equal(inf.predict_gzsl(S, classes, [0, 1, 2], [3, 4, 5], 0.0), plain)


def test_large_penalty_always_predicts_unseen():
    rng = np.random.default_rng(2)
    S = rng.standard_normal((40, 5))
    g = S.max() - S.min() + 1e-6
    preds = inf.predict_gzsl(S, list(range(5)), [0, 1, 2], [3, 4], g)
    assert set(preds.tolist()) <= {3, 4}


def test_penalty_is_monotone_per_image():
    rng = np.random.default_rng(3)
    S = rng.standard_normal((60, 6))
    seen, unseen = [0, 1, 2], [3, 4, 5]
    prev = inf.predict_gzsl(S, list(range(6)), seen, unseen, 0.0)
    for g in np.linspace(0.05, 3, 12):
        cur = inf.predict_gzsl(S, list(range(6)), seen, unseen, g)
        assert not np.any(np.isin(prev, unseen) & np.isin(cur, seen))
        prev = cur


def test_negative_gamma_rejected():
    with pytest.raises(ValueError):
        inf.predict_gzsl([[0.1, 0.2]], [0, 1], [0], [1], -0.1)


def test_per_class_top1_examples():
    assert inf.per_class_top1([1, 2, 2], [1, 2, 2], [1, 2]) == 100.0
    # class 0: 1 of 1 right, class 1: 0 of 9 right; per-class mean, not pooled
    assert inf.per_class_top1([0] + [0] * 9, [0] + [1] * 9, [0, 1]) == 50.0
    with pytest.raises(ValueError):
        inf.per_class_top1([0], [0], [0, 1])


def test_per_class_top1_matches_tally():
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 3, 30)
    labels[:3] = [0, 1, 2]
    preds = rng.integers(0, 3, 30)
    assert inf.per_class_top1(preds, labels, [0, 1, 2]) == pytest.approx(
        oracles.per_class_top1(preds.tolist(), labels.tolist(), [0, 1, 2]), abs=1e-12)


@pytest.mark.parametrize("U,S,H", [(76.0, 87.8, 81.5), (0.0, 50.0, 0.0), (50.0, 50.0, 50.0)])
def test_harmonic_mean(U, S, H):
    assert inf.harmonic_mean(U, S) == pytest.approx(H, abs=0.05)


def test_harmonic_mean_properties():
    rng = np.random.default_rng(5)
    for U, S in rng.uniform(0, 100, (50, 2)):
        h = inf.harmonic_mean(U, S)
        assert h == inf.harmonic_mean(S, U)
        assert h <= 2 * min(U, S) + 1e-12
    assert inf.harmonic_mean(0.0, 0.0) == 0.0
    with pytest.raises(ValueError):
        inf.harmonic_mean(-1.0, 10.0)


def _pool():
    rng = np.random.default_rng(6)
    labels = np.repeat([0, 1, 2, 3], 5)
    S = rng.standard_normal((20, 4)) + 1.5 * np.eye(4)[labels]
    return S, labels


def test_evaluate_scores_report_fields():
    S, labels = _pool()
    seen_mask = np.isin(labels, [0, 1])
    rep = inf.evaluate_scores(S, [0, 1, 2, 3], labels, [0, 1], [2, 3], seen_mask, 0.0, p=3)
    assert 0 <= rep.T1 <= 100 and 0 <= rep.U <= 100 and 0 <= rep.S <= 100
    assert rep.H == pytest.approx(inf.harmonic_mean(rep.U, rep.S))
    d = json.loads(rep.to_json())
    assert {"T1", "U", "S", "H", "per_class", "gamma_cs", "p"} <= set(d)
    assert set(d["per_class"]) == {"0", "1", "2", "3"}


def test_zsl_mode_report():
    S, labels = _pool()
    rep = inf.evaluate_scores(S, [0, 1, 2, 3], labels, [0, 1], [2, 3], np.isin(labels, [0, 1]),
                              mode="zsl")
    assert rep.U is None and rep.H is None and set(rep.per_class) == {2, 3}
    assert rep.T1 == pytest.approx(np.mean(list(rep.per_class.values())))


def test_select_gamma_maximizes_h_on_pool():
    S, labels = _pool()
    S[:, :2] += 0.8  # seen bias that calibration should remove
    seen_mask = np.isin(labels, [0, 1])
    grid = [0.0, 0.4, 0.8, 1.2]
    g = inf.select_gamma_cs(S, [0, 1, 2, 3], labels, [0, 1], [2, 3], seen_mask, grid)
    hs = [inf.gzsl_metrics(S, [0, 1, 2, 3], labels, [0, 1], [2, 3], seen_mask, x)[2] for x in grid]
    assert g == grid[int(np.argmax(hs))]
