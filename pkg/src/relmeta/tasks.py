"""Pseudo-task pools: repeated K-Means at sampled granularities, plus the
randomized and ground-truth reference pools."""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

INTRINSIC = "intrinsic"
RELATIONAL = "relational"
HYBRID = "hybrid"
RANDOMIZED = "randomized"
GROUND_TRUTH = "ground-truth"
PERSPECTIVES = (INTRINSIC, RELATIONAL, HYBRID, RANDOMIZED, GROUND_TRUTH)

DEFAULT_P = 100
DEFAULT_RANGE = (2, 20)
MAX_ITER = 100
UNLABELED = -1     # ground-truth pools: node whose label is held out


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    sse_history: list[float]
    iterations: int

    @property
    def sse(self) -> float:
        return self.sse_history[-1]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp(x: np.ndarray, C: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    idx = [int(rng.integers(n))]
    d2 = ((x - x[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, C):
        total = d2.sum()
        j = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(n))
        idx.append(j)
        d2 = np.minimum(d2, ((x - x[j]) ** 2).sum(axis=1))
    return x[idx].copy()


def kmeans(points: np.ndarray, C: int, seed: int | np.random.Generator = 0, max_iter: int = MAX_ITER) -> KMeansResult:
    """Lloyd iterations from a k-means++ start.

    Stops when assignments repeat or after ``max_iter`` rounds. Ties go to the
    lowest centroid index; an emptied cluster is re-seeded at the point
    farthest from its centroid. ``sse_history`` holds the SSE after every
    assignment step.
    """
    x = np.asarray(points, dtype=float)
    n = len(x)
    if C < 2:
        raise ValueError(f"need C >= 2, got {C}")
    if C > n:
        raise ValueError(f"C={C} exceeds the number of points {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cent = _kmeanspp(x, C, rng)
    labels = None
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(x, cent)
        new = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=C)
        for c in range(C):
            if counts[c]:
                cent[c] = x[labels == c].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            own = ((x - cent[labels]) ** 2).sum(axis=1)
            for c in empty:
                j = int(np.argmax(own))
                cent[c] = x[j]
                own[j] = -1.0
    return KMeansResult(cent, labels, history, it)


def exhaustive_two_partition_sse(points: np.ndarray) -> float:
    """Minimum SSE over all splits of the points into two non-empty groups."""
    x = np.asarray(points, dtype=float)
    n = len(x)
    best = np.inf
    for mask in range(1, 2 ** (n - 1)):
        sel = np.array([(mask >> i) & 1 for i in range(n)], dtype=bool)
        a, b = x[sel], x[~sel]
        sse = ((a - a.mean(0)) ** 2).sum() + ((b - b.mean(0)) ** 2).sum()
        best = min(best, sse)
    return float(best)


@dataclass
class PseudoTask:
    perspective: str
    granularity: int
    labels: np.ndarray
    input_key: str = "hybrid"
    seed: int | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PseudoTask):
            return NotImplemented
        return (self.perspective == other.perspective and self.granularity == other.granularity
                and self.input_key == other.input_key and np.array_equal(self.labels, other.labels))

    def class_members(self) -> list[np.ndarray]:
        order = np.argsort(self.labels, kind="stable")
        bounds = np.searchsorted(self.labels[order], np.arange(self.granularity + 1))
        return [order[bounds[c]:bounds[c + 1]] for c in range(self.granularity)]


@dataclass
class TaskPool:
    perspective: str
    tasks: list[PseudoTask]
    seed: int
    node_type: str | None = None
    c_range: tuple[int, int] = DEFAULT_RANGE
    meta: dict = field(default_factory=dict)

    @property
    def P(self) -> int:
        return len(self.tasks)

    def __len__(self) -> int:
        return len(self.tasks)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TaskPool):
            return NotImplemented
        return (self.perspective == other.perspective and self.seed == other.seed
                and self.tasks == other.tasks)

    def save(self, out_dir: str | os.PathLike) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for i, t in enumerate(self.tasks):
            fn = f"task-{i:04d}.csv"
            with open(out / fn, "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(["node", "label"])
                w.writerows(enumerate(t.labels.tolist()))
            files.append(fn)
        doc = {"perspective": self.perspective, "seed": self.seed, "node_type": self.node_type,
               "c_range": list(self.c_range), "P": self.P,
               "granularities": [t.granularity for t in self.tasks],
               "task_seeds": [t.seed for t in self.tasks], "input_key": "hybrid", "files": files,
               "meta": self.meta}
        with open(out / "pool.json", "w") as f:
            json.dump(doc, f, indent=1)
        return out

    @classmethod
    def load(cls, in_dir: str | os.PathLike) -> "TaskPool":
        src = Path(in_dir)
        with open(src / "pool.json") as f:
            doc = json.load(f)
        tasks = []
        for fn, C, s in zip(doc["files"], doc["granularities"], doc["task_seeds"]):
            arr = np.loadtxt(src / fn, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
            labels = np.empty(len(arr), dtype=np.int64)
            labels[arr[:, 0]] = arr[:, 1]
            tasks.append(PseudoTask(doc["perspective"], C, labels, doc.get("input_key", "hybrid"), s))
        return cls(doc["perspective"], tasks, doc["seed"], doc.get("node_type"), tuple(doc["c_range"]),
                   doc.get("meta", {}))


def _compact(labels: np.ndarray) -> tuple[np.ndarray, int]:
    """Relabel to consecutive ids 0..k-1 in order of first appearance of sorted ids."""
    uniq, inv = np.unique(labels, return_inverse=True)
    return inv.astype(np.int64), len(uniq)


def _check_range(c_range: Sequence[int], n: int) -> tuple[int, int]:
    lo, hi = int(c_range[0]), int(c_range[1])
    if lo < 2 or hi < lo:
        raise ValueError(f"invalid cluster range {c_range}")
    if n < hi:
        raise ValueError(f"{n} rows is fewer than C_max={hi}")
    return lo, hi


def _run_seeds(seed: int, P: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(P)]


def generate_pool(attrs: np.ndarray, perspective: str, P: int = DEFAULT_P, c_range: Sequence[int] = DEFAULT_RANGE,
                  seed: int = 0, workers: int = 1, node_type: str | None = None) -> TaskPool:
    """P clustering runs; run p draws C_p uniformly from c_range and labels by nearest centroid."""
    x = np.asarray(attrs, dtype=float)
    lo, hi = _check_range(c_range, len(x))
    rngs = _run_seeds(seed, P)
    grans = [int(r.integers(lo, hi + 1)) for r in rngs]

    def run(p: int) -> PseudoTask:
        res = kmeans(x, grans[p], rngs[p])
        labels, k = _compact(res.labels)
        return PseudoTask(perspective, k, labels, "hybrid", p)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            tasks = list(ex.map(run, range(P)))
    else:
        tasks = [run(p) for p in range(P)]
    return TaskPool(perspective, tasks, seed, node_type, (lo, hi))


def randomized_pool(n_nodes: int, P: int = DEFAULT_P, c_range: Sequence[int] = DEFAULT_RANGE, seed: int = 0,
                    node_type: str | None = None) -> TaskPool:
    lo, hi = _check_range(c_range, n_nodes)
    tasks = []
    for p, rng in enumerate(_run_seeds(seed, P)):
        C = int(rng.integers(lo, hi + 1))
        tasks.append(PseudoTask(RANDOMIZED, C, rng.integers(0, C, size=n_nodes), "hybrid", p))
    return TaskPool(RANDOMIZED, tasks, seed, node_type, (lo, hi))


def discretize_labels(values: Sequence[float], bins: int) -> np.ndarray:
    """Quantile binning: thresholds at the empirical i/bins quantiles, ties to the lower bin."""
    v = np.asarray(values, dtype=float)
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    if len(v) < bins:
        raise ValueError(f"{len(v)} values cannot fill {bins} bins")
    distinct = len(np.unique(v))
    if bins > distinct:
        raise ValueError(f"bins={bins} exceeds the {distinct} distinct values")
    thresholds = np.quantile(v, np.arange(1, bins) / bins, method="inverted_cdf")
    return np.searchsorted(thresholds, v, side="left").astype(np.int64)


def _spread(labels: np.ndarray, nodes, n_nodes: int | None) -> np.ndarray:
    if nodes is None:
        return labels
    full = np.full(n_nodes, UNLABELED, dtype=np.int64)
    full[np.asarray(nodes, dtype=np.int64)] = labels
    return full


def ground_truth_pool(targets: Sequence[float], P: int = DEFAULT_P, c_range: Sequence[int] = DEFAULT_RANGE,
                      seed: int = 0, regression: bool = False, node_type: str | None = None,
                      nodes: Sequence[int] | None = None, n_nodes: int | None = None) -> TaskPool:
    """Pool built from real labels; regression targets are discretized with per-task bin counts.

    With ``nodes`` given, ``targets[i]`` belongs to node ``nodes[i]`` and every
    other node of the ``n_nodes`` is left UNLABELED, so held-out labels never
    reach pre-training.
    """
    y = np.asarray(targets)
    if nodes is not None and (n_nodes is None or len(nodes) != len(y)):
        raise ValueError("nodes needs n_nodes and one entry per target")
    tasks = []
    if not regression:
        labels, k = _compact(y)
        if k < 2:
            raise ValueError("ground-truth labels have a single class")
        labels = _spread(labels, nodes, n_nodes)
        tasks = [PseudoTask(GROUND_TRUTH, k, labels.copy(), "hybrid", p) for p in range(P)]
        return TaskPool(GROUND_TRUTH, tasks, seed, node_type, (k, k))
    lo, hi = _check_range(c_range, len(y))
    for p, rng in enumerate(_run_seeds(seed, P)):
        bins = int(rng.integers(lo, hi + 1))
        labels, k = _compact(discretize_labels(y, bins))
        tasks.append(PseudoTask(GROUND_TRUTH, k, _spread(labels, nodes, n_nodes), "hybrid", p))
    return TaskPool(GROUND_TRUTH, tasks, seed, node_type, (lo, hi))


def clustering_inputs(x_intrinsic: np.ndarray, x_relational: np.ndarray, variance: float = 0.95,
                      max_components: int = 32) -> dict[str, np.ndarray]:
    """Per-perspective clustering matrices: PCA-reduced intrinsic, raw relational, and their concatenation."""
    from .features import pca_fit, pca_transform
    reduced = pca_transform(pca_fit(x_intrinsic, variance, max_components), x_intrinsic)
    return {INTRINSIC: reduced, RELATIONAL: np.asarray(x_relational, dtype=float),
            HYBRID: np.concatenate([reduced, x_relational], axis=1)}
