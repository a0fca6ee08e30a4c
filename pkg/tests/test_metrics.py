import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcnn import metrics


def brute_auc(scores, truths):
    pos = scores[truths.astype(bool)]
    neg = scores[~truths.astype(bool)]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def test_accuracy():
    assert metrics.accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert metrics.accuracy([1, 2, 3, 4], [1, 0, 3, 0]) == 0.5
    with pytest.raises(ValueError):
        metrics.accuracy([], [])
    with pytest.raises(ValueError):
        metrics.accuracy([1], [1, 2])


def test_aggregate_song():
    songs, means = metrics.aggregate_song([[0.4], [0.9], [0.6]], ["a", "b", "a"])
    assert songs == ["a", "b"]
    np.testing.assert_allclose(means, [[0.5], [0.9]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 30))
def test_aggregate_threshold_invariant_to_order(seed, n):
    rng = np.random.default_rng(seed)
    out = rng.random((n, 4))
    ids = [f"s{i}" for i in rng.integers(0, 5, n)]
    perm = rng.permutation(n)
    s1, m1 = metrics.aggregate_song(out, ids)
    s2, m2 = metrics.aggregate_song(out[perm], [ids[i] for i in perm])
    d1 = dict(zip(s1, m1 >= 0.2))
    d2 = dict(zip(s2, m2 >= 0.2))
    assert d1.keys() == d2.keys()
    for k in d1:
        np.testing.assert_array_equal(d1[k], d2[k])


def test_prf_examples():
    t = np.array([[1, 0], [0, 1], [1, 1]])
    perfect = metrics.prf_multilabel(t.astype(float), t)
    assert all(v == 1.0 for v in perfect.metrics.values()) and len(perfect.metrics) == 6
    low = metrics.prf_multilabel(np.full(t.shape, 0.1), t)
    assert low.metrics["micro_recall"] == 0 and low.metrics["macro_recall"] == 0
    assert low.metrics["micro_precision"] == 0
    # label A: one of two positives found, no false alarm; label B: found, one false alarm
    truths = np.array([[1, 1], [1, 0]])
    scores = np.array([[0.9, 0.9], [0.0, 0.9]])
    r = metrics.prf_multilabel(scores, truths, labels=["A", "B"])
    assert r.metrics["macro_precision"] == pytest.approx(0.75)
    assert r.metrics["macro_recall"] == pytest.approx(0.75)
    assert [row["label"] for row in r.per_label] == ["A", "B"]
    with pytest.raises(ValueError):
        metrics.prf_multilabel(scores, truths, threshold=1.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_prf_invariants(seed):
    rng = np.random.default_rng(seed)
    n, k = rng.integers(1, 20), rng.integers(1, 6)
    r = metrics.prf_multilabel(rng.random((n, k)), rng.random((n, k)) < 0.4)
    assert all(0 <= v <= 1 for v in r.metrics.values())
    for key in ("precision", "recall", "f1"):
        assert r.metrics[f"macro_{key}"] == pytest.approx(np.mean([x[key] for x in r.per_label]))
    p, rec = r.metrics["micro_precision"], r.metrics["micro_recall"]
    if p > 0 and rec > 0:
        assert r.metrics["micro_f1"] == pytest.approx(2 * p * rec / (p + rec))


def test_auc_examples():
    assert metrics.auc_binary([0.9, 0.1], [1, 0]) == 1.0
    assert metrics.auc_binary([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    with pytest.raises(ValueError):
        metrics.auc_binary([0.1, 0.2], [1, 1])


def test_auc_matches_brute_force_40_by_5():
    rng = np.random.default_rng(11)
    scores = np.round(rng.random((40, 5)), 2)  # rounding forces ties
    truths = rng.random((40, 5)) < 0.3
    r = metrics.auc_per_tag(scores, truths)
    for row in r.per_label:
        k = int(row["label"])
        assert abs(row["auc"] - brute_auc(scores[:, k], truths[:, k])) <= 1e-9


def test_auc_per_tag_excludes_degenerate():
    scores = np.array([[0.1, 0.5, 0.2], [0.8, 0.5, 0.1]])
    truths = np.array([[0, 1, 0], [1, 1, 0]])
    r = metrics.auc_per_tag(scores, truths, ["a", "b", "c"])
    assert r.excluded == ["b", "c"] and r.metrics == {"auc": 1.0, "n_scored_tags": 1}
    with pytest.raises(ValueError):
        metrics.auc_per_tag(scores[:, 1:], truths[:, 1:])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_auc_monotone_transform_and_range(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 50))
    s = rng.normal(size=n)
    t = np.zeros(n, bool)
    t[rng.choice(n, int(rng.integers(1, n)), replace=False)] = True
    a = metrics.auc_binary(s, t)
    assert 0 <= a <= 1
    assert metrics.auc_binary(np.exp(3 * s) + 7, t) == pytest.approx(a, abs=1e-12)
    assert a == pytest.approx(brute_auc(s, t), abs=1e-9)


def test_eval_result_serialises():
    import json
    r = metrics.auc_per_tag(np.array([[0.1], [0.9]]), np.array([[0], [1]]))
    assert json.loads(json.dumps(r.to_dict()))["metrics"]["auc"] == 1.0
