"""Downstream adaptation and metrics.

Classification with few labels uses prototypical inference on frozen
embeddings; with sufficient labels (and always for regression) a small head
is fitted on top of the frozen embeddings.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import Tensor

CLASSIFICATION = "classification"
REGRESSION = "regression"
SUFFICIENT = "sufficient"
EPS = 1e-8


@dataclass
class DownstreamTask:
    name: str
    node_type: str
    kind: str
    train: np.ndarray       # rows of (node ordinal, t_ref, label)
    test: np.ndarray
    val: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in (CLASSIFICATION, REGRESSION):
            raise ValueError(f"unknown task kind {self.kind!r}")
        for split in ("train", "test", "val"):
            a = getattr(self, split)
            if a is None:
                continue
            a = np.asarray(a, dtype=float).reshape(-1, 3)
            setattr(self, split, a)
            if self.kind == CLASSIFICATION and not np.isin(a[:, 2], (0.0, 1.0)).all():
                raise ValueError(f"{self.name}: classification labels must be 0/1")
        seen = [set(zip(s[:, 0].tolist(), s[:, 1].tolist())) for s in (self.train, self.test)]
        if seen[0] & seen[1]:
            raise ValueError(f"{self.name}: train and test share (node, t_ref) examples")

    @staticmethod
    def columns(split: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return split[:, 0].astype(np.int64), split[:, 1].astype(np.int64), split[:, 2]

    def few_shot(self, k: int, seed: int) -> np.ndarray:
        """k labeled examples per class (classification) or k in total (regression)."""
        rng = np.random.default_rng(seed)
        y = self.train[:, 2]
        if self.kind == REGRESSION:
            if k > len(y):
                raise ValueError(f"{self.name}: k={k} exceeds {len(y)} training rows")
            return self.train[np.sort(rng.choice(len(y), size=k, replace=False))]
        rows = []
        for c in (0.0, 1.0):
            idx = np.flatnonzero(y == c)
            if len(idx) < k:
                raise ValueError(f"{self.name}: class {int(c)} has {len(idx)} < {k} training rows")
            rows.append(np.sort(rng.choice(idx, size=k, replace=False)))
        return self.train[np.concatenate(rows)]

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["node", "t_ref", "label", "split"])
            for split in ("train", "val", "test"):
                a = getattr(self, split)
                if a is None:
                    continue
                for node, t, y in a:
                    lab = int(y) if self.kind == CLASSIFICATION else repr(float(y))
                    w.writerow([int(node), int(t), lab, split])

    @classmethod
    def load(cls, path: str | os.PathLike, name: str, node_type: str, kind: str) -> "DownstreamTask":
        parts: dict[str, list] = {"train": [], "val": [], "test": []}
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                parts[row["split"]].append((float(row["node"]), float(row["t_ref"]), float(row["label"])))
        arr = {k: np.array(v, dtype=float).reshape(-1, 3) for k, v in parts.items()}
        return cls(name, node_type, kind, arr["train"], arr["test"], arr["val"] if len(arr["val"]) else None)


def write_tasks(tasks: dict[str, DownstreamTask], out_dir: str | os.PathLike, extra: dict | None = None) -> None:
    """One CSV per task plus ``tasks.json`` describing them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"tasks": {}}
    for name, t in tasks.items():
        fn = f"task-{name}.csv"
        t.save(out / fn)
        doc["tasks"][name] = {"file": fn, "node_type": t.node_type, "kind": t.kind}
    doc.update(extra or {})
    with open(out / "tasks.json", "w") as f:
        json.dump(doc, f, indent=1)


def read_tasks(in_dir: str | os.PathLike) -> tuple[dict[str, DownstreamTask], dict]:
    src = Path(in_dir)
    path = src / "tasks.json"
    if not path.exists():
        return {}, {}
    with open(path) as f:
        doc = json.load(f)
    tasks = {name: DownstreamTask.load(src / d["file"], name, d["node_type"], d["kind"])
             for name, d in doc["tasks"].items()}
    return tasks, doc


# ---------------------------------------------------------------------------
# prototypical inference

def proto_scores(support: np.ndarray, support_labels: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Per-query softmax over classes of negative squared distance to class means.

    Returns an (n_query, n_classes) matrix; classes are 0..C-1.
    """
    support = np.asarray(support, dtype=float)
    support_labels = np.asarray(support_labels, dtype=np.int64)
    C = int(support_labels.max()) + 1 if len(support_labels) else 0
    counts = np.bincount(support_labels, minlength=C)
    if C < 2 or (counts == 0).any():
        raise ValueError(f"support is missing a class (counts per class: {counts.tolist()})")
    protos = np.stack([support[support_labels == c].mean(axis=0) for c in range(C)])
    d2 = ((np.asarray(queries, dtype=float)[:, None, :] - protos[None]) ** 2).sum(axis=2)
    z = -d2 - (-d2).max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def proto_classify(encoder, node_type: str, support: np.ndarray, queries: np.ndarray, seed: int = 0) -> np.ndarray:
    """Class-1 scores for ``queries`` given labeled ``support`` rows (node, t_ref, label).

    ``encoder`` is a GraphEncoder; queries are rows of (node, t_ref[, label]).
    """
    s_nodes, s_t, s_y = DownstreamTask.columns(np.asarray(support, dtype=float))
    q = np.asarray(queries, dtype=float)
    hs = encoder.embed_numpy(node_type, s_nodes, s_t, seed)
    hq = encoder.embed_numpy(node_type, q[:, 0].astype(np.int64), q[:, 1].astype(np.int64), seed + 1)
    return proto_scores(hs, s_y.astype(np.int64), hq)[:, 1]


# ---------------------------------------------------------------------------
# heads

@dataclass
class Head:
    kind: str
    params: dict[str, Tensor]
    mean: float = 0.0
    std: float = 1.0
    history: list[float] = field(default_factory=list)

    def forward(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if self.kind == CLASSIFICATION:
            return ad.reshape(ad.add(ad.matmul(x, self.params["w"]), self.params["b"]), (x.shape[0],))
        h = ad.relu(ad.add(ad.matmul(x, self.params["W1"]), self.params["b1"]))
        return ad.reshape(ad.add(ad.matmul(h, self.params["w2"]), self.params["b2"]), (x.shape[0],))

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Class-1 probability, or the prediction on the normalized target scale."""
        out = self.forward(np.asarray(x, dtype=float)).value
        if self.kind == CLASSIFICATION:
            return 1.0 / (1.0 + np.exp(-out))
        return out

    def normalize(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.mean) / self.std

    def loss(self, x, y_norm) -> Tensor:
        out = self.forward(x)
        if self.kind == CLASSIFICATION:
            return ad.mean(ad.bce_with_logits(out, y_norm))
        return ad.mean(ad.abs_(ad.sub(out, ad.Tensor(np.asarray(y_norm, dtype=float)))))


def init_head(kind: str, d: int, hidden: int = 64, seed: int = 0, zero: bool = False) -> Head:
    rng = np.random.default_rng(seed)

    def glorot(r, c):
        if zero:
            return np.zeros((r, c))
        lim = np.sqrt(6.0 / (r + c))
        return rng.uniform(-lim, lim, size=(r, c))

    if kind == CLASSIFICATION:
        p = {"w": glorot(d, 1), "b": np.zeros(1)}
    elif kind == REGRESSION:
        p = {"W1": glorot(d, hidden), "b1": np.zeros(hidden), "w2": glorot(hidden, 1), "b2": np.zeros(1)}
    else:
        raise ValueError(f"unknown head kind {kind!r}")
    return Head(kind, {k: Tensor(v, True) for k, v in p.items()})


def finetune_head(embeddings: np.ndarray, targets, kind: str, epochs: int = 200, lr: float = 0.001,
                  seed: int = 0, batch_size: int = 32, hidden: int = 64, zero_init: bool = False) -> Head:
    """Fit a head on frozen embeddings with Adam.

    Classification trains a linear logit head with binary cross-entropy.
    Regression trains a d-64-1 relu perceptron with L1 loss on targets
    normalized by this split's mean and std.
    """
    x = np.asarray(embeddings, dtype=float)
    y = np.asarray(targets, dtype=float)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} embeddings but {len(y)} targets")
    if len(y) < 2:
        raise ValueError("need at least 2 examples")
    head = init_head(kind, x.shape[1], hidden, seed, zero_init)
    if kind == CLASSIFICATION:
        if len(np.unique(y)) < 2:
            raise ValueError("classification head needs both classes")
        yn = y
    else:
        head.mean, head.std = float(y.mean()), max(float(y.std()), EPS)
        yn = head.normalize(y)
    rng = np.random.default_rng(seed + 1)
    params = list(head.params.values())
    state = None
    for _ in range(epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for i in range(0, len(y), batch_size):
            idx = order[i:i + batch_size]
            with ad.Tape() as tape:
                loss = head.loss(x[idx], yn[idx])
                grads = tape.gradients(loss, params)
            state = ad.adam_step(params, grads, state, lr)
            total += float(loss.value) * len(idx)
        head.history.append(total / len(y))
    return head


# ---------------------------------------------------------------------------
# metrics

def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score of a positive > score of a negative), ties count half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError(f"{s.shape} scores vs {y.shape} labels")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes")
    ranks = rankdata(s)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def mae(preds, targets) -> float:
    p = np.asarray(preds, dtype=float)
    t = np.asarray(targets, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("mae of empty vectors")
    return float(np.abs(p - t).mean())


def alignment_uniformity(embeddings, labels) -> tuple[float, float]:
    """Alignment and uniformity of L2-normalized embeddings.

    alignment  = mean over same-label pairs of ||x_i - x_j||^2
    uniformity = log mean over all pairs of exp(-2 ||x_i - x_j||^2)

    Alignment is NaN when no two embeddings share a label.
    """
    x = np.asarray(embeddings, dtype=float)
    y = np.asarray(labels)
    if len(x) < 2:
        raise ValueError("need at least 2 embeddings")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = x / np.where(norms > 0, norms, 1.0)
    i, j = np.triu_indices(len(x), k=1)
    d2 = ((x[i] - x[j]) ** 2).sum(axis=1)
    same = y[i] == y[j]
    align = float(d2[same].mean()) if same.any() else float("nan")
    return align, float(np.log(np.exp(-2.0 * d2).mean()))


@dataclass
class EvalRecord:
    task: str
    regime: str
    k: int | str
    metric: str
    value: float
    seed: int

    def to_dict(self) -> dict:
        return {"task": self.task, "regime": self.regime, "k": self.k, "metric": self.metric,
                "value": self.value, "seed": self.seed}


def evaluate_task(encoder, task: DownstreamTask, k: int | str, seed: int = 0, epochs: int = 200,
                  lr: float = 0.001) -> EvalRecord:
    """Adapt to ``task`` with budget ``k`` (int or "sufficient") and score the test split."""
    support = task.train if k == SUFFICIENT else task.few_shot(int(k), seed)
    t_nodes, t_times, t_y = DownstreamTask.columns(task.test)
    if task.kind == CLASSIFICATION and k != SUFFICIENT:
        scores = proto_classify(encoder, task.node_type, support, task.test, seed)
        return EvalRecord(task.name, "prototype", k, "roc_auc", roc_auc(scores, t_y), seed)
    s_nodes, s_times, s_y = DownstreamTask.columns(support)
    hs = encoder.embed_numpy(task.node_type, s_nodes, s_times, seed)
    ht = encoder.embed_numpy(task.node_type, t_nodes, t_times, seed + 1)
    head = finetune_head(hs, s_y, task.kind, epochs, lr, seed)
    if task.kind == CLASSIFICATION:
        return EvalRecord(task.name, "finetune", k, "roc_auc", roc_auc(head.predict(ht), t_y), seed)
    return EvalRecord(task.name, "finetune", k, "mae", mae(head.predict(ht), head.normalize(t_y)), seed)
