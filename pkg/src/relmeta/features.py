"""Column encoders and PCA.

Numeric and temporal cells become ``(z-score, missing)``. Text and
categorical cells become a signed feature-hashed bag of lowercase tokens,
L2-normalized, followed by a missing indicator.
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping

import numpy as np

from .rdb import CATEGORICAL, NUMERIC, TEXT, TIMESTAMP, Database

EPS = 1e-8
DEFAULT_HASH_DIM = 64

NUMERIC_ZSCORE = "numeric-zscore"
TEMPORAL_ZSCORE = "temporal-zscore"
HASH_BAG = "hash-bag"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF
_TOKEN_SPLIT = re.compile(r"[\W_]+")


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(str(text).lower()) if t]


@lru_cache(maxsize=1 << 16)
def _token_slot(token: str, dim: int) -> tuple[int, float]:
    h = fnv1a_64(token.encode("utf-8"))
    sign = -1.0 if h >> 63 else 1.0
    return h % dim, sign


def hash_bag(text, dim: int) -> np.ndarray:
    """Signed hashed token counts, L2-normalized when nonzero (no indicator)."""
    v = np.zeros(dim)
    for tok in tokenize(text):
        k, s = _token_slot(tok, dim)
        v[k] += s
    n = np.sqrt(v @ v)
    return v / n if n > 0 else v


@dataclass(frozen=True)
class ColumnEncoder:
    kind: str
    mean: float = 0.0
    std: float = 1.0
    dim: int = DEFAULT_HASH_DIM

    @property
    def out_dim(self) -> int:
        return self.dim + 1 if self.kind == HASH_BAG else 2

    def encode(self, value) -> np.ndarray:
        if self.kind == HASH_BAG:
            out = np.zeros(self.dim + 1)
            if value is None or not tokenize(value):
                out[-1] = 1.0
            else:
                out[:-1] = hash_bag(value, self.dim)
            return out
        if value is None:
            return np.array([0.0, 1.0])
        return np.array([(float(value) - self.mean) / self.std, 0.0])

    def encode_many(self, values) -> np.ndarray:
        """Row-wise ``encode`` over a sequence of cells."""
        if self.kind == HASH_BAG:
            out = np.zeros((len(values), self.dim + 1))
            for i, v in enumerate(values):
                out[i] = self.encode(v)
            return out
        missing = np.array([v is None for v in values], dtype=bool)
        x = np.array([0.0 if v is None else float(v) for v in values])
        z = np.where(missing, 0.0, (x - self.mean) / self.std)
        return np.stack([z, missing.astype(float)], axis=1).reshape(len(values), 2)


@dataclass(frozen=True)
class EncoderSpec:
    """Fitted encoders keyed by ``"Table.column"``."""
    columns: Mapping[str, ColumnEncoder] = field(default_factory=dict)

    def __getitem__(self, column: str) -> ColumnEncoder:
        try:
            return self.columns[column]
        except KeyError:
            raise KeyError(f"no encoder for column {column!r}") from None

    def to_dict(self) -> dict:
        return {k: {"kind": e.kind, "mean": e.mean, "std": e.std, "dim": e.dim} for k, e in self.columns.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderSpec":
        return cls({k: ColumnEncoder(v["kind"], float(v["mean"]), float(v["std"]), int(v["dim"]))
                    for k, v in d.items()})

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EncoderSpec":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def fit_encoders(db: Database, hash_dim: int = DEFAULT_HASH_DIM, cutoff: int | None = None) -> EncoderSpec:
    """Fit one encoder per non-key column.

    Statistics use non-null cells of rows created at or before ``cutoff``
    (all rows when None), population standard deviation clamped at 1e-8.
    """
    if hash_dim < 2:
        raise ValueError("hash dim must be >= 2")
    cols: dict[str, ColumnEncoder] = {}
    for t in db.tables.values():
        visible = np.ones(len(t), dtype=bool) if cutoff is None else t.timestamps <= cutoff
        for c in t.feature_columns:
            key = f"{t.name}.{c.name}"
            if c.dtype in (TEXT, CATEGORICAL):
                cols[key] = ColumnEncoder(HASH_BAG, dim=hash_dim)
                continue
            vals = np.array([v for v, ok in zip(t.values(c.name), visible) if ok and v is not None], dtype=float)
            kind = TEMPORAL_ZSCORE if c.dtype == TIMESTAMP else NUMERIC_ZSCORE
            assert c.dtype in (NUMERIC, TIMESTAMP)
            if len(vals) == 0:
                cols[key] = ColumnEncoder(kind, 0.0, 1.0, hash_dim)
            else:
                cols[key] = ColumnEncoder(kind, float(vals.mean()), max(float(vals.std()), EPS), hash_dim)
    return EncoderSpec(cols)


def encode_cell(spec: EncoderSpec, column: str, value) -> np.ndarray:
    return spec[column].encode(value)


# ---------------------------------------------------------------------------
# PCA

@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray          # k x d_in, orthonormal rows
    explained_variance_ratio: np.ndarray

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "components": self.components.tolist(),
                "explained_variance_ratio": self.explained_variance_ratio.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PcaModel":
        mean = np.asarray(d["mean"], dtype=float)
        comps = np.asarray(d["components"], dtype=float).reshape(-1, len(mean))
        return cls(mean, comps, np.asarray(d["explained_variance_ratio"], dtype=float))


def pca_fit(points: np.ndarray, variance: float = 0.95, max_components: int = 32) -> PcaModel:
    """Smallest k reaching ``variance`` explained, capped by ``max_components`` and the rank."""
    x = np.asarray(points, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"PCA needs a 2-D array with at least 2 rows, got shape {x.shape}")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    total = float((s ** 2).sum())
    if total == 0.0:
        # all points identical; a single arbitrary axis with zero variance
        comp = np.zeros((1, x.shape[1]))
        comp[0, 0] = 1.0
        return PcaModel(mean, comp, np.zeros(1))
    tol = s[0] * max(x.shape) * np.finfo(float).eps
    rank = int((s > tol).sum())
    ratio = s ** 2 / total
    reach = int(np.searchsorted(np.cumsum(ratio), variance - 1e-12) + 1)
    k = max(1, min(max_components, reach, rank))
    comps = vt[:k].copy()
    # deterministic sign: largest-magnitude loading positive
    idx = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(k), idx])[:, None]
    return PcaModel(mean, comps, ratio[:k].copy())


def pca_transform(model: PcaModel, points: np.ndarray) -> np.ndarray:
    x = np.asarray(points, dtype=float)
    if x.ndim != 2 or x.shape[1] != len(model.mean):
        raise ValueError(f"expected {len(model.mean)} columns, got shape {x.shape}")
    return (x - model.mean) @ model.components.T
