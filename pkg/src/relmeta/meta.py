"""Episodic prototypical pre-training over mixed pseudo-task pools."""
from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .attributes import AttributeStore
from .autodiff import Tensor
from .encoder import EncoderParams, GraphEncoder, derive_seed, init_params
from .graph import TemporalHeterogeneousGraph
from .tasks import HYBRID, INTRINSIC, RELATIONAL, TaskPool

MAX_TASK_RETRIES = 20
ANCHOR_HORIZON = "horizon"
ANCHOR_CREATION = "creation"


class EpisodeError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 100
    episodes_per_epoch: int = 50
    meta_batch: int = 32
    way: int = 2
    shot: int = 1
    query: int = 5
    ratio: tuple[float, float, float] = (2.0, 3.0, 5.0)   # intrinsic : relational : hybrid
    lr: float = 0.001
    fanouts: tuple[int, ...] = (16, 8)
    hidden: int = 64
    layers: int = 2
    use_reverse: bool = True
    anchor: str = ANCHOR_HORIZON
    seed: int = 0

    def __post_init__(self):
        self.ratio = tuple(float(r) for r in self.ratio)
        self.fanouts = tuple(int(f) for f in self.fanouts)
        if self.way < 2:
            raise ValueError(f"way must be >= 2, got {self.way}")
        if self.shot < 1 or self.query < 1:
            raise ValueError("shot and query must be >= 1")
        if len(self.ratio) != 3 or min(self.ratio) < 0 or sum(self.ratio) == 0:
            raise ValueError(f"invalid pool ratio {self.ratio}")
        if self.anchor not in (ANCHOR_HORIZON, ANCHOR_CREATION):
            raise ValueError(f"unknown anchor {self.anchor!r}")

    @property
    def steps(self) -> int:
        return self.epochs * self.episodes_per_epoch

    @property
    def nodes_per_task(self) -> int:
        return self.way * (self.shot + self.query)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratio"], d["fanouts"] = list(self.ratio), list(self.fanouts)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown training options {sorted(extra)}")
        return cls(**d)


@dataclass
class Episode:
    pool: str
    task: int
    way: int
    support: np.ndarray      # way x shot node ordinals, row c holds class c
    query: np.ndarray        # way x query node ordinals
    classes: np.ndarray      # original task labels of the episode classes

    @property
    def support_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.way), self.support.shape[1])

    @property
    def query_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.way), self.query.shape[1])

    def nodes(self) -> np.ndarray:
        """Support then query ordinals, class-major."""
        return np.concatenate([self.support, self.query], axis=1).reshape(-1)


def pool_weights(pools: Mapping[str, TaskPool], ratio: Sequence[float]) -> tuple[list[str], np.ndarray]:
    """Sampling weights per pool.

    The three clustered perspectives take the configured ratio. Any other pool
    set (a lone randomized or ground-truth pool) is weighted uniformly.
    """
    names = list(pools)
    by_name = dict(zip((INTRINSIC, RELATIONAL, HYBRID), ratio))
    if set(names) <= set(by_name):
        w = np.array([by_name[n] for n in names], dtype=float)
    else:
        w = np.ones(len(names))
    if w.sum() == 0:
        raise EpisodeError("every available pool has zero weight")
    return names, w / w.sum()


def sample_episode(pools: Mapping[str, TaskPool], config: TrainConfig, rng: np.random.Generator) -> Episode:
    names, w = pool_weights(pools, config.ratio)
    k = int(np.flatnonzero(rng.multinomial(1, w))[0])
    pool = pools[names[k]]
    if not len(pool):
        raise EpisodeError(f"pool {names[k]!r} is empty")
    need = config.shot + config.query
    for _ in range(MAX_TASK_RETRIES):
        t = int(rng.integers(len(pool)))
        members = pool.tasks[t].class_members()
        ok = [c for c, m in enumerate(members) if len(m) >= need]
        if len(ok) < config.way:
            continue
        classes = rng.choice(ok, size=config.way, replace=False)
        sup = np.empty((config.way, config.shot), dtype=np.int64)
        qry = np.empty((config.way, config.query), dtype=np.int64)
        for i, c in enumerate(classes):
            picked = rng.choice(members[c], size=need, replace=False)
            sup[i], qry[i] = picked[:config.shot], picked[config.shot:]
        return Episode(names[k], t, config.way, sup, qry, np.asarray(classes))
    raise EpisodeError(f"no task in pool {names[k]!r} has {config.way} classes with >= {need} members "
                       f"after {MAX_TASK_RETRIES} draws")


def prototypes(support) -> Tensor:
    """Class means of support embeddings.

    ``support`` is either a tensor shaped (..., way, shot, d) or a list with
    one (n_c, d) array or tensor per class.
    """
    if isinstance(support, (list, tuple)):
        if any(ad.as_tensor(s).shape[0] == 0 for s in support):
            raise ValueError("empty support class")
        return ad.concat([ad.mean(ad.as_tensor(s), axis=0, keepdims=True) for s in support], axis=0)
    s = ad.as_tensor(support)
    if s.shape[-2] == 0:
        raise ValueError("empty support class")
    return ad.mean(s, axis=-2)


def episode_loss(queries, labels, protos) -> Tensor:
    """Mean over queries of -log softmax(-||h - mu_c||^2) at the true class.

    Accepts a single episode (q x d queries, way x d prototypes) or a batch
    with a leading episode axis; the result is the mean over all queries.
    """
    q, p = ad.as_tensor(queries), ad.as_tensor(protos)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= p.shape[-2]):
        raise ValueError(f"query label without a prototype (have {p.shape[-2]} classes)")
    return ad.mean(ad.nll_from_distances(ad.squared_distances(q, p), labels))


@dataclass
class TrainResult:
    params: EncoderParams
    history: list[tuple[int, str, float]] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def losses(self) -> np.ndarray:
        return np.array([h[2] for h in self.history])

    def save_history(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", "pool_tag", "loss"])
            for step, tag, loss in self.history:
                w.writerow([step, tag, repr(loss)])


def _pool_tag(episodes: Sequence[Episode]) -> str:
    tags = sorted({e.pool for e in episodes})
    counts = [sum(e.pool == t for e in episodes) for t in tags]
    return ";".join(f"{t}:{c}" for t, c in zip(tags, counts))


def meta_batch_loss(enc: GraphEncoder, node_type: str, episodes: Sequence[Episode], t_refs: np.ndarray,
                    seed: int) -> Tensor:
    """Mean episode loss of a meta-batch, all nodes encoded in one pass.

    ``t_refs`` gives the anchor time of every node of ``node_type``.
    """
    way, shot, qn = episodes[0].way, episodes[0].support.shape[1], episodes[0].query.shape[1]
    B = len(episodes)
    nodes = np.concatenate([e.nodes() for e in episodes])
    H = enc.embed(node_type, nodes, t_refs[nodes], seed)
    d = H.shape[1]
    H = ad.reshape(H, (B, way, shot + qn, d))
    flat = ad.reshape(H, (B * way * (shot + qn), d))
    idx = np.arange(B * way * (shot + qn)).reshape(B, way, shot + qn)
    sup = ad.reshape(ad.take(flat, idx[:, :, :shot].reshape(-1)), (B, way, shot, d))
    qry = ad.reshape(ad.take(flat, idx[:, :, shot:].reshape(-1)), (B, way * qn, d))
    labels = np.broadcast_to(np.repeat(np.arange(way), qn), (B, way * qn))
    return episode_loss(qry, labels, prototypes(sup))


def anchor_times(g: TemporalHeterogeneousGraph, node_type: str, config: TrainConfig,
                 horizon: int | None = None) -> np.ndarray:
    """Per-node reference time used when encoding pre-training episodes."""
    n = g.num_nodes(node_type)
    if config.anchor == ANCHOR_CREATION:
        return np.asarray(g.node_timestamps[node_type], dtype=np.int64)
    if horizon is None:
        stamps = [g.all_timestamps] + [es.timestamp for es in g.edges.values()]
        stamps = np.concatenate(stamps)
        horizon = int(stamps.max()) if len(stamps) else 0
    return np.full(n, horizon, dtype=np.int64)


def pretrain(g: TemporalHeterogeneousGraph, attrs: AttributeStore, pools: Mapping[str, TaskPool],
             config: TrainConfig, horizon: int | None = None, params: EncoderParams | None = None,
             checkpoint_dir: str | os.PathLike | None = None,
             on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Meta-train an encoder; fully determined by ``config.seed``.

    Each of ``epochs * episodes_per_epoch`` steps samples ``meta_batch``
    episodes, encodes their nodes, averages the episode losses and applies one
    Adam step. Checkpoints go to ``checkpoint_dir`` after every epoch.
    """
    types = {p.node_type for p in pools.values()}
    if len(types) != 1 or None in types:
        raise ValueError(f"pools must share one target node type, got {types}")
    node_type = types.pop()
    if params is None:
        params = init_params(g, attrs, config.hidden, config.layers, config.seed)
    enc = GraphEncoder(g, attrs, params, config.fanouts, config.use_reverse)
    t_refs = anchor_times(g, node_type, config, horizon)
    rng = np.random.default_rng(config.seed)
    step_seeds = derive_seed(config.seed ^ 0x5EED, np.arange(config.steps))
    state = None
    result = TrainResult(params)
    t0 = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        for _ in range(config.episodes_per_epoch):
            episodes = [sample_episode(pools, config, rng) for _ in range(config.meta_batch)]
            with ad.Tape() as tape:
                loss = meta_batch_loss(enc, node_type, episodes, t_refs, int(step_seeds[step]))
                value = float(loss.value)
                if not math.isfinite(value):
                    raise NumericalError(step, value)
                grads = tape.gradients(loss, params.values)
            state = ad.adam_step(params.values, grads, state, config.lr)
            result.history.append((step, _pool_tag(episodes), value))
            if on_step is not None:
                on_step(step, value)
            step += 1
        if checkpoint_dir is not None:
            params.save(Path(checkpoint_dir) / f"epoch-{epoch + 1:03d}")
    if checkpoint_dir is not None:
        params.save(Path(checkpoint_dir) / "final")
    result.seconds = time.perf_counter() - t0
    return result
