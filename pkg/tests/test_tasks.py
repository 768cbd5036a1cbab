import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from relmeta import tasks as tk
from relmeta.tasks import (UNLABELED, TaskPool, discretize_labels, exhaustive_two_partition_sse, generate_pool,
                           ground_truth_pool, kmeans, randomized_pool)

points_strategy = arrays(np.float64, st.tuples(st.integers(2, 8), st.integers(1, 3)),
                         elements=st.floats(-10, 10, allow_nan=False).map(lambda v: round(v, 3)))


def test_kmeans_separates_pairs():
    x = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], dtype=float)
    r = kmeans(x, 2, seed=0)
    assert r.labels[0] == r.labels[1] != r.labels[2] == r.labels[3]
    assert r.sse == pytest.approx(1.0)


def test_kmeans_c_equals_n():
    x = np.random.default_rng(0).normal(size=(6, 2))
    r = kmeans(x, 6, seed=1)
    assert sorted(r.labels.tolist()) == list(range(6))
    assert r.sse == pytest.approx(0.0, abs=1e-20)


def test_kmeans_errors():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 4)
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 1)


def test_exhaustive_oracle_by_hand():
    # best split of 0,1,10 is {0,1} | {10}
    assert exhaustive_two_partition_sse(np.array([[0.0], [1.0], [10.0]])) == pytest.approx(0.5)


@settings(max_examples=60, deadline=None)
@given(points_strategy, st.integers(0, 1000))
def test_lloyd_sse_monotone_and_bounded_by_oracle(x, seed):
    if len(np.unique(x, axis=0)) < 2:
        return
    r = kmeans(x, 2, seed=seed)
    assert np.all(np.diff(r.sse_history) <= 1e-12 * max(1.0, r.sse_history[0]))
    assert r.sse >= exhaustive_two_partition_sse(x) * (1 - 1e-9) - 1e-12
    assert set(r.labels.tolist()) <= {0, 1}


def test_pool_defaults_and_determinism():
    x = np.random.default_rng(0).normal(size=(60, 3))
    pool = generate_pool(x, tk.HYBRID, seed=3)
    assert pool.P == 100
    assert all(2 <= t.granularity <= 20 for t in pool.tasks)
    assert all(t.labels.max() < t.granularity for t in pool.tasks)
    assert pool == generate_pool(x, tk.HYBRID, seed=3)
    assert pool == generate_pool(x, tk.HYBRID, seed=3, workers=3)
    assert pool != generate_pool(x, tk.HYBRID, seed=4)


def test_degenerate_range():
    x = np.random.default_rng(0).normal(size=(20, 2))
    assert {t.granularity for t in generate_pool(x, tk.INTRINSIC, P=10, c_range=(3, 3)).tasks} == {3}
    with pytest.raises(ValueError):
        generate_pool(x, tk.INTRINSIC, P=3, c_range=(5, 2))
    with pytest.raises(ValueError):
        generate_pool(x, tk.INTRINSIC, P=3, c_range=(2, 21))


def test_randomized_pool():
    pool = randomized_pool(50, P=100, seed=0)
    assert pool.P == 100 and pool.perspective == tk.RANDOMIZED
    assert all(len(t.labels) == 50 and t.labels.max() < t.granularity for t in pool.tasks)


def test_discretize_examples():
    assert discretize_labels([1, 2, 3, 4], 2).tolist() == [0, 0, 1, 1]
    with pytest.raises(ValueError):
        discretize_labels([3, 3, 3], 2)
    v = [0.5, -2.0, 9.0, 3.0, 1.0]
    assert discretize_labels(v, 5).tolist() == np.argsort(np.argsort(v)).tolist()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=40), st.integers(2, 6))
def test_discretize_is_monotone(values, bins):
    if len(set(values)) < bins:
        with pytest.raises(ValueError):
            discretize_labels(values, bins)
        return
    lab = discretize_labels(values, bins)
    order = np.argsort(values, kind="stable")
    assert np.all(np.diff(lab[order]) >= 0)
    assert lab.min() == 0 and lab.max() <= bins - 1


def test_ground_truth_binary_and_regression():
    y = np.array([0, 1, 1, 0, 1])
    pool = ground_truth_pool(y, P=4)
    assert all(t.granularity == 2 and np.array_equal(t.labels, y) for t in pool.tasks)
    r = np.random.default_rng(0).normal(size=200)
    pool = ground_truth_pool(r, P=30, c_range=(2, 20), regression=True)
    assert len({t.granularity for t in pool.tasks}) > 3


def test_ground_truth_holds_out_unlisted_nodes():
    pool = ground_truth_pool([1, 0, 1], P=2, nodes=[4, 0, 2], n_nodes=6)
    labels = pool.tasks[0].labels
    assert labels.tolist() == [0, UNLABELED, 1, UNLABELED, 1, UNLABELED]
    members = pool.tasks[0].class_members()
    assert [m.tolist() for m in members] == [[0], [2, 4]]


def test_pool_save_load(tmp_path):
    x = np.random.default_rng(0).normal(size=(30, 2))
    pool = generate_pool(x, tk.RELATIONAL, P=5, seed=1, node_type="Customer")
    pool.save(tmp_path)
    assert TaskPool.load(tmp_path) == pool


def test_clustering_inputs_views():
    rng = np.random.default_rng(0)
    xi, xr = rng.normal(size=(40, 10)), rng.normal(size=(40, 4))
    views = tk.clustering_inputs(xi, xr, variance=0.95, max_components=3)
    assert views[tk.INTRINSIC].shape == (40, 3)
    assert np.array_equal(views[tk.RELATIONAL], xr)
    assert np.array_equal(views[tk.HYBRID], np.hstack([views[tk.INTRINSIC], xr]))
