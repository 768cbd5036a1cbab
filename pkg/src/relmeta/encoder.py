"""Graph encoder over sampled temporal ego-subgraphs.

Each node u of a subgraph starts from ``h0_u = relu(W_type x^H_u + b)``. A
layer sends messages along sampled edges towards the center::

    m_e     = W_v h_u + (W_r z_e + b_r)
    logit_e = <W_q h_w, W_k h_u> / sqrt(d)
    h'_w    = relu(W_o sum_e softmax_w(logit)_e m_e + b_o + h_w)

where the softmax runs over the sampled in-edges of w; nodes without sampled
in-edges keep their state. The center's final state is the embedding.

Neighbor sampling is uniform without replacement among edges whose
timestamp, and whose neighbor's creation time, are at or before ``t_ref``.
Random draws come from a counter-based hash of (seed, hop, edge identity),
so a node's sample depends on its own seed only and is unaffected by edges
outside its eligible set.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attributes import AttributeStore
from .autodiff import Tensor
from .graph import REVERSE_PREFIX, EdgeRef, NodeRef, TemporalHeterogeneousGraph

DEFAULT_HIDDEN = 64
DEFAULT_FANOUTS = (16, 8)
MAX_LAYERS = 2

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, index) -> np.ndarray:
    """Per-item seeds from a base seed and item indices."""
    base = _splitmix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    return _splitmix(base ^ _splitmix(np.asarray(index, dtype=np.uint64)))


def halving_fanouts(first: int, layers: int) -> list[int]:
    out = [int(first)]
    for _ in range(layers - 1):
        out.append(math.ceil(out[-1] / 2))
    return out


def check_fanouts(fanouts: Sequence[int]) -> None:
    if not fanouts:
        raise ValueError("fanouts must be non-empty")
    if len(fanouts) > MAX_LAYERS:
        raise ValueError(f"at most {MAX_LAYERS} layers supported, got {len(fanouts)} fanouts")
    for a, b in zip(fanouts, fanouts[1:]):
        if b != math.ceil(a / 2):
            raise ValueError(f"fanouts must halve (next = ceil(prev / 2)): {list(fanouts)}")


# ---------------------------------------------------------------------------
# sampling

class _SamplerIndex:
    """Searchable (owner, effective time) keys over a graph's incidence lists."""

    def __init__(self, g: TemporalHeterogeneousGraph):
        inc = g.incidence
        self.inc = inc
        self.times = np.unique(inc.eff_time)
        self.span = len(self.times) + 1
        owner = np.repeat(np.arange(g.total_nodes, dtype=np.int64), inc.degree())
        self.key = owner * self.span + np.searchsorted(self.times, inc.eff_time)

    def eligible(self, nodes: np.ndarray, t_ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """[start, end) incidence ranges of entries with effective time <= t_ref."""
        q = np.searchsorted(self.times, t_ref, side="right")
        start = self.inc.indptr[nodes]
        end = np.searchsorted(self.key, nodes * self.span + q, side="left")
        return start, np.maximum(end, start)


def _sampler_index(g: TemporalHeterogeneousGraph) -> _SamplerIndex:
    idx = g.__dict__.get("_sampler_index")
    if idx is None:
        idx = g.__dict__["_sampler_index"] = _SamplerIndex(g)
    return idx


@dataclass
class Hop:
    """Sampled message edges of one hop; ``dst`` is the node sampled from."""
    batch: np.ndarray
    dst: np.ndarray
    src: np.ndarray
    relation: np.ndarray
    edge: np.ndarray

    def __len__(self) -> int:
        return len(self.dst)

    def select(self, mask) -> "Hop":
        return Hop(*(a[mask] for a in (self.batch, self.dst, self.src, self.relation, self.edge)))


@dataclass
class EgoBatch:
    """Several ego-subgraphs sampled together (global node ids)."""
    centers: np.ndarray
    t_refs: np.ndarray
    fanouts: tuple[int, ...]
    hops: list[Hop]

    def __len__(self) -> int:
        return len(self.centers)

    def subgraph(self, g: TemporalHeterogeneousGraph, i: int) -> "EgoSubgraph":
        return EgoSubgraph(_noderef(g, int(self.centers[i])), int(self.t_refs[i]), self.fanouts,
                           [h.select(h.batch == i) for h in self.hops])


@dataclass
class EgoSubgraph:
    center: NodeRef
    t_ref: int
    fanouts: tuple[int, ...]
    hops: list[Hop] = field(default_factory=list)

    def edge_refs(self, g: TemporalHeterogeneousGraph, hop: int) -> list[EdgeRef]:
        """Connecting edges of one hop as stored edge references."""
        out = []
        h = self.hops[hop]
        for rel, eid in zip(h.relation, h.edge):
            et = g.edge_types[int(rel) // 2]
            es = g.edges[et.name]
            e = int(eid)
            out.append(EdgeRef(et.name, g.node(et.src_type, int(es.src[e])), g.node(et.dst_type, int(es.dst[e])),
                               int(es.timestamp[e]), (et.row_table, int(es.row[e]))))
        return out

    def as_batch(self, g: TemporalHeterogeneousGraph) -> EgoBatch:
        gid = int(g.global_id(self.center.node_type, self.center.ordinal))
        hops = [Hop(np.zeros(len(h), dtype=np.int64), h.dst, h.src, h.relation, h.edge) for h in self.hops]
        return EgoBatch(np.array([gid]), np.array([self.t_ref], dtype=np.int64), self.fanouts, hops)


def _noderef(g: TemporalHeterogeneousGraph, gid: int) -> NodeRef:
    a = g.node_types[int(g.node_type_index[gid])]
    return g.node(a, gid - g.type_offsets[a])


def sample_batch(g: TemporalHeterogeneousGraph, centers: np.ndarray, t_refs: np.ndarray,
                 fanouts: Sequence[int], seeds: np.ndarray, use_reverse: bool = True) -> EgoBatch:
    """Sample one temporal ego-subgraph per center (global ids) with per-center seeds."""
    centers = np.asarray(centers, dtype=np.int64)
    t_refs = np.asarray(t_refs, dtype=np.int64)
    seeds = np.asarray(seeds, dtype=np.uint64)
    index = _sampler_index(g)
    inc = index.inc
    f_batch, f_node = np.arange(len(centers), dtype=np.int64), centers
    hops = []
    for h, fanout in enumerate(fanouts):
        if len(f_node) >= 1 << 24:
            raise ValueError(f"sampling frontier of {len(f_node)} nodes is too large; use smaller batches")
        start, end = index.eligible(f_node, t_refs[f_batch])
        counts = end - start
        total = int(counts.sum())
        seg = np.repeat(np.arange(len(f_node), dtype=np.int64), counts)
        offsets = np.cumsum(counts) - counts
        pos = start[seg] + (np.arange(total, dtype=np.int64) - offsets[seg])
        rel, eid = inc.relation[pos], inc.edge[pos]
        if not use_reverse:
            keep = rel % 2 == 0
            seg, pos, rel, eid = seg[keep], pos[keep], rel[keep], eid[keep]
        hop_salt = _splitmix(np.uint64(((h + 1) * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF))
        hop_seed = _splitmix(seeds[f_batch[seg]] ^ hop_salt)
        key = _splitmix(hop_seed ^ _splitmix((rel.astype(np.uint64) << np.uint64(40)) ^ eid.astype(np.uint64)))
        # segment id in the top 24 bits, the key's high 40 bits below: one sort orders both
        order = np.argsort((seg.astype(np.uint64) << np.uint64(40)) | (key >> np.uint64(24)), kind="stable")
        seg_s = seg[order]
        first = np.searchsorted(seg_s, seg_s, side="left")
        chosen = order[(np.arange(len(order)) - first) < fanout]
        chosen.sort()
        hop = Hop(f_batch[seg[chosen]], f_node[seg[chosen]], inc.neighbor[pos[chosen]], rel[chosen], eid[chosen])
        hops.append(hop)
        if len(hop):
            n = g.total_nodes
            pairs = np.unique(hop.batch * n + hop.src)
            f_batch, f_node = pairs // n, pairs % n
        else:
            f_batch = f_node = np.zeros(0, dtype=np.int64)
    return EgoBatch(centers, t_refs, tuple(int(f) for f in fanouts), hops)


def sample_ego(g: TemporalHeterogeneousGraph, v: NodeRef, t_ref: int, fanouts: Sequence[int] = DEFAULT_FANOUTS,
               seed: int = 0, use_reverse: bool = True) -> EgoSubgraph:
    if v.node_type not in g.node_timestamps or not 0 <= v.ordinal < g.num_nodes(v.node_type):
        raise KeyError(f"unknown node {v.node_type}#{v.ordinal}")
    gid = g.global_id(v.node_type, [v.ordinal])
    batch = sample_batch(g, gid, np.array([t_ref]), fanouts, np.array([seed], dtype=np.uint64), use_reverse)
    return batch.subgraph(g, 0)


# ---------------------------------------------------------------------------
# parameters

@dataclass
class EncoderParams:
    tensors: dict[str, Tensor]
    hidden: int
    layers: int

    def __post_init__(self):
        if self.layers > MAX_LAYERS:
            raise ValueError(f"at most {MAX_LAYERS} layers supported")
        for k, t in self.tensors.items():
            if not np.all(np.isfinite(t.value)):
                raise ValueError(f"parameter {k} has non-finite entries")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.tensors.items()}

    def copy(self) -> "EncoderParams":
        return EncoderParams({k: Tensor(t.value.copy(), True) for k, t in self.tensors.items()},
                             self.hidden, self.layers)

    def save(self, prefix) -> None:
        ad.save_checkpoint(prefix, self.arrays(), {"hidden": self.hidden, "layers": self.layers})

    @classmethod
    def load(cls, prefix) -> "EncoderParams":
        arrays, meta = ad.load_checkpoint(prefix)
        return cls({k: Tensor(v, True) for k, v in arrays.items()}, int(meta["hidden"]), int(meta["layers"]))


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (rows + cols)) if rows + cols else 0.0
    return rng.uniform(-lim, lim, size=(rows, cols))


def init_params(g: TemporalHeterogeneousGraph, attrs: AttributeStore, hidden: int = DEFAULT_HIDDEN,
                layers: int = 2, seed: int = 0) -> EncoderParams:
    rng = np.random.default_rng(seed)
    t: dict[str, np.ndarray] = {}
    for a in g.node_types:
        t[f"node:{a}:W"] = _glorot(rng, hidden, attrs.d_hybrid(a))
        t[f"node:{a}:b"] = np.zeros(hidden)
    for rel in g.relations:
        stored = rel[len(REVERSE_PREFIX):] if rel.startswith(REVERSE_PREFIX) else rel
        t[f"edge:{rel}:W"] = _glorot(rng, hidden, attrs.d_edge(stored))
        t[f"edge:{rel}:b"] = np.zeros(hidden)
    for l in range(layers):
        for m in ("q", "k", "v", "o"):
            t[f"layer{l}:W{m}"] = _glorot(rng, hidden, hidden)
        t[f"layer{l}:bo"] = np.zeros(hidden)
    return EncoderParams({k: Tensor(v, True) for k, v in t.items()}, hidden, layers)


# ---------------------------------------------------------------------------
# forward

def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    return ad.linear(x, w, b)


def encode_samples(g: TemporalHeterogeneousGraph, batch: EgoBatch, attrs: AttributeStore,
                   params: EncoderParams) -> Tensor:
    """Embeddings (len(batch) x d) of the centers of a sampled batch."""
    if len(batch.hops) != params.layers:
        raise ValueError(f"{len(batch.hops)} sampled hops but encoder has {params.layers} layers")
    d = params.hidden
    B = len(batch)
    n_glob = g.total_nodes
    # local nodes: distinct (batch item, global node) pairs
    parts_b = [np.arange(B, dtype=np.int64)] + [h.batch for h in batch.hops] * 2
    parts_n = [batch.centers] + [h.dst for h in batch.hops] + [h.src for h in batch.hops]
    lkey, inv = np.unique(np.concatenate(parts_b) * n_glob + np.concatenate(parts_n), return_inverse=True)
    local_gid = lkey % n_glob
    sizes = [B] + [len(h) for h in batch.hops] * 2
    cuts = np.cumsum(sizes)[:-1]
    pieces = np.split(inv, cuts)
    center_local = pieces[0]
    L = len(batch.hops)
    edge_dst = np.concatenate(pieces[1:1 + L]) if L else np.zeros(0, dtype=np.int64)
    edge_src = np.concatenate(pieces[1 + L:]) if L else np.zeros(0, dtype=np.int64)
    rel = np.concatenate([h.relation for h in batch.hops])
    eid = np.concatenate([h.edge for h in batch.hops])

    # layer-0 states on distinct graph nodes
    uniq_gid, row_of_local = np.unique(local_gid, return_inverse=True)
    types = g.node_type_index[uniq_gid]
    blocks, order = [], []
    for ti, a in enumerate(g.node_types):
        sel = np.flatnonzero(types == ti)
        if not len(sel):
            continue
        if f"node:{a}:W" not in params:
            raise KeyError(f"node type {a} has no projector in params")
        x = attrs.x_hybrid[a][uniq_gid[sel] - g.type_offsets[a]]
        blocks.append(ad.relu(_linear(Tensor(x), params[f"node:{a}:W"], params[f"node:{a}:b"])))
        order.append(sel)
    perm = np.empty(len(uniq_gid), dtype=np.int64)
    perm[np.concatenate(order)] = np.arange(len(uniq_gid))
    H = ad.take(ad.concat(blocks, axis=0), perm)

    # which local nodes must be updated at each layer for the centers' outputs
    n_local = len(local_gid)
    need = [None] * (L + 1)
    need[L] = np.zeros(n_local, dtype=bool)
    need[L][center_local] = True
    for l in range(L, 0, -1):
        prev = need[l].copy()
        prev[edge_src[need[l][edge_dst]]] = True
        need[l - 1] = prev

    # Attention weights are applied before the value and edge projections:
    # sum_e a_e (W_v h_u + W_r z_e + b_r) = W_v sum_e a_e h_u + sum_r (W_r sum_{e in r} a_e z_e + b_r sum_{e in r} a_e)
    # which keeps every per-edge array at the width of the raw inputs.
    scale = 1.0 / math.sqrt(d)
    for l in range(1, L + 1):
        act = np.flatnonzero(need[l][edge_dst])
        if not len(act):
            continue
        upd, seg = np.unique(edge_dst[act], return_inverse=True)
        n_upd = len(upd)
        P = f"layer{l - 1}:"
        hw = ad.take(H, row_of_local[upd])
        h_src = ad.take(H, row_of_local[edge_src[act]])
        qk = ad.matmul(_linear(hw, params[P + "Wq"]), params[P + "Wk"])
        logits = ad.scale(ad.rowdot(ad.take(qk, seg), h_src), scale)
        alpha = ad.segment_softmax(logits, seg, n_upd)
        agg = _linear(ad.weighted_segment_sum(alpha, h_src, seg, n_upd), params[P + "Wv"])
        a_rel, a_eid = rel[act], eid[act]
        for r in np.unique(a_rel):
            k, rev = divmod(int(r), 2)
            stored = g.edge_types[k].name
            name = REVERSE_PREFIX + stored if rev else stored
            if f"edge:{name}:W" not in params:
                raise KeyError(f"relation {name} has no projector in params")
            sel = np.flatnonzero(a_rel == r)
            a_r = ad.take(alpha, sel)
            z = Tensor(attrs.z_intrinsic[stored][a_eid[sel]])
            z_agg = ad.weighted_segment_sum(a_r, z, seg[sel], n_upd)
            mass = ad.reshape(ad.segment_sum(a_r, seg[sel], n_upd), (n_upd, 1))
            bias = ad.reshape(params[f"edge:{name}:b"], (1, d))
            agg = ad.add(agg, ad.add(_linear(z_agg, params[f"edge:{name}:W"]), ad.matmul(mass, bias)))
        new = ad.relu(ad.add(_linear(agg, params[P + "Wo"], params[P + "bo"]), hw))
        base = H.shape[0]
        H = ad.concat([H, new], axis=0)
        row_of_local = row_of_local.copy()
        row_of_local[upd] = base + np.arange(n_upd)
    return ad.take(H, row_of_local[center_local])


def encode(g: TemporalHeterogeneousGraph, sub: EgoSubgraph, attrs: AttributeStore, params: EncoderParams) -> Tensor:
    """Embedding (length d) of a single ego-subgraph's center."""
    return ad.reshape(encode_samples(g, sub.as_batch(g), attrs, params), (params.hidden,))


def encode_batch(g: TemporalHeterogeneousGraph, nodes: Sequence[NodeRef], t_refs, attrs: AttributeStore,
                 params: EncoderParams, fanouts: Sequence[int] = DEFAULT_FANOUTS, seed: int = 0,
                 use_reverse: bool = True) -> Tensor:
    """Row i encodes node i with sampling seed ``derive_seed(seed, i)``."""
    gids = np.array([g.global_id(v.node_type, v.ordinal) for v in nodes], dtype=np.int64)
    return GraphEncoder(g, attrs, params, fanouts, use_reverse).embed_gids(gids, t_refs, seed)


@dataclass
class GraphEncoder:
    """A graph, its attributes and encoder parameters bundled for embedding."""
    graph: TemporalHeterogeneousGraph
    attrs: AttributeStore
    params: EncoderParams
    fanouts: tuple[int, ...] = DEFAULT_FANOUTS
    use_reverse: bool = True

    def __post_init__(self):
        self.fanouts = tuple(int(f) for f in self.fanouts)
        check_fanouts(self.fanouts)

    def embed_gids(self, gids, t_refs, seed: int = 0, seeds=None) -> Tensor:
        gids = np.asarray(gids, dtype=np.int64)
        t_refs = np.broadcast_to(np.asarray(t_refs, dtype=np.int64), gids.shape)
        if seeds is None:
            seeds = derive_seed(seed, np.arange(len(gids)))
        batch = sample_batch(self.graph, gids, t_refs, self.fanouts, seeds, self.use_reverse)
        return encode_samples(self.graph, batch, self.attrs, self.params)

    def embed(self, node_type: str, ordinals, t_refs, seed: int = 0) -> Tensor:
        return self.embed_gids(self.graph.global_id(node_type, ordinals), t_refs, seed)

    def embed_numpy(self, node_type: str, ordinals, t_refs, seed: int = 0, chunk: int = 4096) -> np.ndarray:
        """Embeddings as a plain array, computed in chunks without recording gradients."""
        ordinals = np.asarray(ordinals, dtype=np.int64)
        t_refs = np.broadcast_to(np.asarray(t_refs, dtype=np.int64), ordinals.shape)
        seeds = derive_seed(seed, np.arange(len(ordinals)))
        gids = self.graph.global_id(node_type, ordinals)
        out = [self.embed_gids(gids[i:i + chunk], t_refs[i:i + chunk], seeds=seeds[i:i + chunk]).value
               for i in range(0, len(gids), chunk)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.params.hidden))
