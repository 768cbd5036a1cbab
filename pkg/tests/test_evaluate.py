import math
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relmeta import evaluate as ev
from relmeta.evaluate import (CLASSIFICATION, REGRESSION, DownstreamTask, alignment_uniformity, finetune_head, mae,
                              proto_scores, roc_auc)


def pairwise_auc(scores, labels):
    """Brute-force count over positive/negative pairs; ties count half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_auc_examples():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert roc_auc([0.1, 0.2, 0.3, 0.4], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.5] * 4, [0, 1, 0, 1]) == 0.5
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=40))
def test_auc_matches_pair_count(rows):
    scores = [float(s) for s, _ in rows]
    labels = [int(y) for _, y in rows]
    if len(set(labels)) < 2:
        return
    assert roc_auc(scores, labels) == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)


def test_mae_examples():
    assert mae([1, 2], [2, 4]) == 1.5
    assert mae([3.0, -1.0], [3.0, -1.0]) == 0.0
    with pytest.raises(ValueError):
        mae([1.0], [1.0, 2.0])


def test_alignment_uniformity_examples():
    a, u = alignment_uniformity(np.ones((3, 2)), [0, 0, 1])
    assert a == 0.0 and u == 0.0
    a, u = alignment_uniformity(np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]]), [0, 1, 0])
    # pairs: (0,1) d2=4, (0,2) d2=0, (1,2) d2=4
    assert abs(a - 0.0) < 1e-12
    assert abs(u - math.log((2 * math.exp(-8) + 1) / 3)) < 1e-12


def test_two_point_cases():
    a, u = alignment_uniformity(np.array([[1.0, 0.0], [-1.0, 0.0]]), [0, 1])
    assert math.isnan(a) and abs(u + 8.0) < 1e-12
    a, u = alignment_uniformity(np.array([[3.0, 0.0], [0.0, 2.0]]), [1, 1])
    # normalized to (1,0) and (0,1): squared distance 2
    assert abs(a - 2.0) < 1e-12 and abs(u + 4.0) < 1e-12


def test_proto_scores():
    support = np.array([[0.0, 0.0], [10.0, 0.0]])
    s = proto_scores(support, [0, 1], np.array([[10.0, 0.0], [5.0, 3.0]]))
    assert s[0, 1] == pytest.approx(1.0) and s[1, 1] == pytest.approx(0.5)
    with pytest.raises(ValueError, match="missing a class"):
        proto_scores(support, [0, 0], support)


def test_zero_head_on_centered_targets():
    x = np.random.default_rng(0).normal(size=(6, 4))
    head = finetune_head(x, np.full(6, 3.0), REGRESSION, epochs=1, zero_init=True)
    assert head.history[0] == 0.0


def test_regression_head_fits_linear_targets():
    r = np.random.default_rng(0)
    x = r.normal(size=(200, 5))
    y = x @ np.array([1.0, -2.0, 0.5, 0.0, 3.0]) + 10.0
    head = finetune_head(x, y, REGRESSION, epochs=200, lr=0.01)
    assert mae(head.predict(x), head.normalize(y)) < 0.1


def test_classification_head_learns():
    r = np.random.default_rng(0)
    x = r.normal(size=(100, 3))
    y = (x[:, 0] > 0).astype(float)
    head = finetune_head(x, y, CLASSIFICATION, epochs=100, lr=0.05)
    assert roc_auc(head.predict(x), y) > 0.95
    with pytest.raises(ValueError, match="both classes"):
        finetune_head(x, np.ones(100), CLASSIFICATION)


def _task(n=40, kind=CLASSIFICATION):
    r = np.random.default_rng(0)
    y = (np.arange(n) % 2).astype(float) if kind == CLASSIFICATION else r.normal(size=n)
    rows = np.stack([np.arange(n), np.full(n, 5), y], axis=1)
    return DownstreamTask("t", "Customer", kind, rows[: n // 2], rows[n // 2:])


def test_few_shot_budgets():
    t = _task()
    s = t.few_shot(3, seed=1)
    assert len(s) == 6 and s[:, 2].tolist().count(1.0) == 3
    assert np.array_equal(s, t.few_shot(3, seed=1))
    with pytest.raises(ValueError):
        t.few_shot(11, 0)
    r = _task(kind=REGRESSION)
    assert len(r.few_shot(5, 0)) == 5


def test_task_validation():
    rows = np.array([[0, 1, 0.0], [1, 1, 1.0]])
    with pytest.raises(ValueError, match="share"):
        DownstreamTask("t", "C", CLASSIFICATION, rows, rows)
    with pytest.raises(ValueError, match="0/1"):
        DownstreamTask("t", "C", CLASSIFICATION, np.array([[0, 1, 2.0]]), np.zeros((0, 3)))


def test_task_roundtrip(tmp_path):
    tasks = {"a": _task(), "b": _task(kind=REGRESSION)}
    ev.write_tasks(tasks, tmp_path, {"cutoff": 5})
    back, doc = ev.read_tasks(tmp_path)
    assert doc["cutoff"] == 5
    for k in tasks:
        assert np.array_equal(back[k].train, tasks[k].train) and np.array_equal(back[k].test, tasks[k].test)
