import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from relmeta import features
from relmeta.features import HASH_BAG, encode_cell, fit_encoders, hash_bag, pca_fit, pca_transform, tokenize
from relmeta.rdb import NUMERIC, PRIMARY_KEY, TEXT, ColumnSpec, Database, Table


def _one_column_db(values, dtype=NUMERIC):
    cols = (ColumnSpec("id", PRIMARY_KEY), ColumnSpec("x", dtype))
    return Database({"T": Table("T", cols, tuple((i, v) for i, v in enumerate(values)))})


def test_numeric_population_stats():
    spec = fit_encoders(_one_column_db([1.0, 2.0, 3.0]))
    enc = spec["T.x"]
    assert enc.mean == 2.0
    assert enc.std == pytest.approx(np.sqrt(2 / 3), abs=1e-12)
    assert np.array_equal(encode_cell(spec, "T.x", 2.0), [0.0, 0.0])
    assert np.array_equal(encode_cell(spec, "T.x", None), [0.0, 1.0])


def test_constant_column_clamped():
    spec = fit_encoders(_one_column_db([5.0, 5.0, 5.0]))
    assert spec["T.x"].std == features.EPS
    assert encode_cell(spec, "T.x", 5.0)[0] == 0.0


def test_text_hash_bag_default_dim():
    spec = fit_encoders(_one_column_db(["red shirt", "blue"], TEXT))
    assert spec["T.x"].kind == HASH_BAG and spec["T.x"].out_dim == 65
    a, b = encode_cell(spec, "T.x", "red shirt"), encode_cell(spec, "T.x", "red shirt")
    assert np.array_equal(a, b)
    assert np.linalg.norm(a[:-1]) == pytest.approx(1.0) and a[-1] == 0.0
    assert np.array_equal(encode_cell(spec, "T.x", None)[-1:], [1.0])


def test_tokenize_and_hash_are_stable():
    assert tokenize("Red-Shirt_42, XL") == ["red", "shirt", "42", "xl"]
    # FNV-1a 64 reference value for the empty string and "a"
    assert features.fnv1a_64(b"") == 0xCBF29CE484222325
    assert features.fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert np.array_equal(hash_bag("a b", 16), hash_bag("b a", 16))


def test_cutoff_restricts_statistics():
    cols = (ColumnSpec("id", PRIMARY_KEY), ColumnSpec("t", "timestamp", is_time_column=True), ColumnSpec("x", NUMERIC))
    db = Database({"T": Table("T", cols, ((0, 1, 1.0), (1, 2, 3.0), (2, 9, 100.0)))})
    assert fit_encoders(db, cutoff=5)["T.x"].mean == 2.0


def test_pca_line_is_rank_one():
    t = np.linspace(-1, 1, 20)[:, None]
    pts = t * np.array([[1.0, 2.0, -1.0]]) + 3.0
    m = pca_fit(pts)
    assert m.k == 1 and m.explained_variance_ratio[0] == pytest.approx(1.0)
    assert np.allclose(pca_transform(m, pts.mean(axis=0, keepdims=True)), 0.0, atol=1e-12)


def _pairwise(x):
    return np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1))


def test_pca_full_rank_preserves_distances():
    x = np.random.default_rng(0).normal(size=(30, 4))
    m = pca_fit(x, variance=1.0)
    assert m.k == 4
    y = pca_transform(m, x)
    assert np.max(np.abs(_pairwise(x) - _pairwise(y))) < 1e-8
    assert np.max(np.abs(y @ m.components - (x - x.mean(0)))) < 1e-8


def test_pca_against_covariance_eigendecomposition():
    # second route: eigenvalues of the covariance matrix
    x = np.random.default_rng(1).normal(size=(50, 6)) @ np.diag([5, 3, 2, 1, 0.5, 0.1])
    m = pca_fit(x, variance=1.0)
    w = np.linalg.eigvalsh(np.cov(x.T, bias=True))[::-1]
    assert np.allclose(m.explained_variance_ratio, w / w.sum(), atol=1e-10)


def test_pca_errors():
    with pytest.raises(ValueError):
        pca_fit(np.zeros((1, 3)))
    m = pca_fit(np.random.default_rng(0).normal(size=(5, 3)))
    with pytest.raises(ValueError, match="columns"):
        pca_transform(m, np.zeros((2, 4)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(3, 15), st.integers(1, 6)),
              elements=st.floats(-100, 100, allow_nan=False)))
def test_pca_components_orthonormal(x):
    m = pca_fit(x, variance=0.9, max_components=4)
    c = m.components
    assert 1 <= m.k <= min(4, x.shape[1])
    assert np.allclose(c @ c.T, np.eye(m.k), atol=1e-8)
    dup = pca_transform(m, np.vstack([x[:1], x[:1]]))
    assert np.array_equal(dup[0], dup[1])
