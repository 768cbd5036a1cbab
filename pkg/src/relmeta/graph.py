"""Temporal heterogeneous graph built from a classified database.

Default construction (``fact-as-edge``): dimension rows are nodes, every FK
pair of a fact table is an edge type with one edge per fact row, and every
dimension->dimension FK column is an edge type directed from the referenced
(primary-key) node to the referencing node.

``fact-as-node`` keeps fact rows as nodes instead; every FK column of every
table then becomes a PK-FK edge type.
"""
from __future__ import annotations

import csv
import json
import os
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .rdb import DIMENSION, FACT, Database, Table, fk_pairs

FACT_AS_EDGE = "fact-as-edge"
FACT_AS_NODE = "fact-as-node"
MODES = (FACT_AS_EDGE, FACT_AS_NODE)

FKFK = "fkfk"
PKFK = "pkfk"
REVERSE_PREFIX = "rev:"


class GraphBuildError(ValueError):
    pass


@dataclass(frozen=True)
class NodeRef:
    node_type: str
    ordinal: int
    timestamp: int


@dataclass(frozen=True)
class EdgeRef:
    edge_type: str
    src: NodeRef
    dst: NodeRef
    timestamp: int
    row_link: tuple[str, int]


@dataclass(frozen=True)
class EdgeType:
    name: str
    tag: str                      # fkfk | pkfk
    table: str                    # fact table (fkfk) or FK-holding table (pkfk)
    columns: tuple[str, ...]      # the FK pair, or the single FK column
    src_type: str
    dst_type: str
    row_table: str                # table holding each edge's corresponding row

    def to_dict(self) -> dict:
        return {"name": self.name, "tag": self.tag, "table": self.table, "columns": list(self.columns),
                "src_type": self.src_type, "dst_type": self.dst_type, "row_table": self.row_table}

    @classmethod
    def from_dict(cls, d: dict) -> "EdgeType":
        return cls(d["name"], d["tag"], d["table"], tuple(d["columns"]), d["src_type"], d["dst_type"],
                   d["row_table"])


@dataclass(frozen=True)
class EdgeSet:
    """Columnar edge list of one edge type; ``row`` indexes the row table."""
    src: np.ndarray
    dst: np.ndarray
    timestamp: np.ndarray
    row: np.ndarray

    def __len__(self) -> int:
        return len(self.src)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EdgeSet):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("src", "dst", "timestamp", "row"))

    @classmethod
    def empty(cls) -> "EdgeSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), z.copy())


def fkfk_name(table: str, pair: tuple[str, str]) -> str:
    return f"{table}:{pair[0]}-{pair[1]}"


def pkfk_name(table: str, column: str) -> str:
    return f"{table}.{column}"


def reverse_name(name: str) -> str:
    return name[len(REVERSE_PREFIX):] if name.startswith(REVERSE_PREFIX) else REVERSE_PREFIX + name


def _fk_ordinals(db: Database, table: Table, column: str) -> np.ndarray:
    """Row ordinal in the referenced table per row, -1 for a null FK."""
    col = table.column(column)
    if not col.fk_target:
        raise GraphBuildError(f"{table.name}.{column} is not a foreign key")
    lookup = db[col.fk_target].pk_lookup
    j = table.column_index(column)
    return np.array([-1 if r[j] is None else lookup[r[j]] for r in table.rows], dtype=np.int64)


def _fkfk_edgeset(db: Database, fact: Table, pair: tuple[str, str]) -> EdgeSet:
    a = _fk_ordinals(db, fact, pair[0])
    b = _fk_ordinals(db, fact, pair[1])
    keep = np.flatnonzero((a >= 0) & (b >= 0))
    return EdgeSet(a[keep], b[keep], fact.timestamps[keep].copy(), keep.astype(np.int64))


def _pkfk_edgeset(db: Database, table: Table, column: str) -> EdgeSet:
    ref = _fk_ordinals(db, table, column)
    keep = np.flatnonzero(ref >= 0)
    src = ref[keep]
    target = db[table.column(column).fk_target]
    return EdgeSet(src, keep.astype(np.int64), target.timestamps[src].copy(), src.copy())


def _edge_refs(db: Database, et: EdgeType, es: EdgeSet) -> list[EdgeRef]:
    ts_src = db[et.src_type].timestamps
    ts_dst = db[et.dst_type].timestamps
    return [EdgeRef(et.name,
                    NodeRef(et.src_type, int(s), int(ts_src[s])),
                    NodeRef(et.dst_type, int(d), int(ts_dst[d])),
                    int(t), (et.row_table, int(r)))
            for s, d, t, r in zip(es.src, es.dst, es.timestamp, es.row)]


def extract_fkfk_edges(db: Database, fact: Table, fk_pair: tuple[str, str]) -> list[EdgeRef]:
    """One edge per fact row with both FKs non-null, stamped with the row's creation time."""
    for c in fk_pair:
        if not fact.column(c).fk_target:
            raise GraphBuildError(f"{fact.name}.{c} is not a foreign key")
    et = EdgeType(fkfk_name(fact.name, fk_pair), FKFK, fact.name, tuple(fk_pair),
                  fact.column(fk_pair[0]).fk_target, fact.column(fk_pair[1]).fk_target, fact.name)
    return _edge_refs(db, et, _fkfk_edgeset(db, fact, fk_pair))


def extract_pkfk_edges(db: Database, dim: Table, fk_column: str) -> list[EdgeRef]:
    """Edges from the referenced primary-key node to each referencing row.

    Timestamp and corresponding row are those of the primary-key node.
    """
    target = dim.column(fk_column).fk_target
    if not target:
        raise GraphBuildError(f"{dim.name}.{fk_column} is not a foreign key")
    if db[target].kind == FACT:
        raise GraphBuildError(f"{dim.name}.{fk_column} references fact table {target}; "
                              f"not representable as a PK-FK edge under {FACT_AS_EDGE}")
    et = EdgeType(pkfk_name(dim.name, fk_column), PKFK, dim.name, (fk_column,), target, dim.name, target)
    return _edge_refs(db, et, _pkfk_edgeset(db, dim, fk_column))


class TemporalHeterogeneousGraph:
    """Typed timestamped multigraph with a bidirectional adjacency index."""

    def __init__(self, node_timestamps: dict[str, np.ndarray], edge_types: list[EdgeType],
                 edges: dict[str, EdgeSet], mode: str = FACT_AS_EDGE):
        self.mode = mode
        self.node_types = tuple(node_timestamps)
        self.node_timestamps = {k: np.asarray(v, dtype=np.int64) for k, v in node_timestamps.items()}
        self.edge_types = tuple(edge_types)
        self.edges = dict(edges)
        self._etype = {et.name: et for et in self.edge_types}
        for et in self.edge_types:
            es = self.edges[et.name]
            for side, t in ((es.src, et.src_type), (es.dst, et.dst_type)):
                if len(side) and (side.min() < 0 or side.max() >= self.num_nodes(t)):
                    raise GraphBuildError(f"edge type {et.name}: endpoint outside node type {t}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, TemporalHeterogeneousGraph):
            return NotImplemented
        return (self.mode == other.mode and self.node_types == other.node_types
                and all(np.array_equal(self.node_timestamps[a], other.node_timestamps[a]) for a in self.node_types)
                and self.edge_types == other.edge_types
                and all(self.edges[r.name] == other.edges[r.name] for r in self.edge_types))

    def __repr__(self) -> str:
        return (f"TemporalHeterogeneousGraph(mode={self.mode!r}, nodes={self.total_nodes}, "
                f"edges={self.total_edges}, node_types={list(self.node_types)})")

    def edge_type(self, name: str) -> EdgeType:
        return self._etype[name]

    def num_nodes(self, node_type: str) -> int:
        return len(self.node_timestamps[node_type])

    def num_edges(self, edge_type: str) -> int:
        return len(self.edges[edge_type])

    @property
    def total_nodes(self) -> int:
        return sum(len(v) for v in self.node_timestamps.values())

    @property
    def total_edges(self) -> int:
        return sum(len(e) for e in self.edges.values())

    def node(self, node_type: str, ordinal: int) -> NodeRef:
        ts = self.node_timestamps[node_type]
        if not 0 <= ordinal < len(ts):
            raise KeyError(f"no node {node_type}#{ordinal}")
        return NodeRef(node_type, int(ordinal), int(ts[ordinal]))

    def nodes(self, node_type: str) -> list[NodeRef]:
        return [self.node(node_type, i) for i in range(self.num_nodes(node_type))]

    def edge_refs(self, edge_type: str) -> list[EdgeRef]:
        et = self._etype[edge_type]
        es = self.edges[edge_type]
        return [EdgeRef(et.name, self.node(et.src_type, int(s)), self.node(et.dst_type, int(d)),
                        int(t), (et.row_table, int(r)))
                for s, d, t, r in zip(es.src, es.dst, es.timestamp, es.row)]

    # -- relation-level adjacency -------------------------------------------------

    @property
    def relations(self) -> tuple[str, ...]:
        """Stored edge types followed by their auto-generated reverse relations."""
        return tuple(et.name for et in self.edge_types) + tuple(REVERSE_PREFIX + et.name for et in self.edge_types)

    def relation_endpoints(self, relation: str) -> tuple[str, str]:
        """(source node type, target node type) along the message direction."""
        et = self._etype[reverse_name(relation) if relation.startswith(REVERSE_PREFIX) else relation]
        if relation.startswith(REVERSE_PREFIX):
            return et.dst_type, et.src_type
        return et.src_type, et.dst_type

    @cached_property
    def _csr(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        out = {}
        for et in self.edge_types:
            es = self.edges[et.name]
            for rel, key, n in ((et.name, es.src, self.num_nodes(et.src_type)),
                                (REVERSE_PREFIX + et.name, es.dst, self.num_nodes(et.dst_type))):
                order = np.argsort(key, kind="stable")
                indptr = np.zeros(n + 1, dtype=np.int64)
                np.cumsum(np.bincount(key, minlength=n), out=indptr[1:])
                out[rel] = (indptr, order)
        return out

    def neighbors(self, node_type: str, ordinal: int, relation: str):
        """Timestamped neighbors of a node under a relation.

        For a stored type ``r`` the neighbors are the destinations of edges
        leaving the node; for ``rev:r`` they are the sources of edges entering
        it. Returns (neighbor ordinals, edge ordinals, edge timestamps).
        """
        stored = reverse_name(relation) if relation.startswith(REVERSE_PREFIX) else relation
        et = self._etype[stored]
        reverse = relation.startswith(REVERSE_PREFIX)
        expect = et.dst_type if reverse else et.src_type
        if node_type != expect:
            raise KeyError(f"relation {relation} does not start at node type {node_type}")
        indptr, order = self._csr[relation]
        eids = order[indptr[ordinal]:indptr[ordinal + 1]]
        es = self.edges[stored]
        nbr = es.src[eids] if reverse else es.dst[eids]
        return nbr, eids, es.timestamp[eids]

    # -- global incidence index -------------------------------------------------------

    @cached_property
    def type_offsets(self) -> dict[str, int]:
        offs, acc = {}, 0
        for a in self.node_types:
            offs[a] = acc
            acc += self.num_nodes(a)
        return offs

    @cached_property
    def node_type_index(self) -> np.ndarray:
        """Node type index per global node id."""
        return np.concatenate([np.full(self.num_nodes(a), i, dtype=np.int64) for i, a in enumerate(self.node_types)]
                              or [np.zeros(0, dtype=np.int64)])

    @cached_property
    def all_timestamps(self) -> np.ndarray:
        return np.concatenate([self.node_timestamps[a] for a in self.node_types]
                              or [np.zeros(0, dtype=np.int64)])

    def global_id(self, node_type: str, ordinals) -> np.ndarray:
        return np.asarray(ordinals, dtype=np.int64) + self.type_offsets[node_type]

    @cached_property
    def incidence(self) -> "Incidence":
        return Incidence.build(self)


@dataclass(frozen=True)
class Incidence:
    """Per-node incidence lists over every edge type in both directions.

    Entry k of node w describes a message edge u -> w: ``relation`` is
    ``2 * edge_type_index + direction`` with direction 0 when w is the stored
    destination and 1 when w is the stored source (reverse relation).
    Entries of a node are sorted by effective time, the later of the edge
    timestamp and the neighbor's creation time.
    """
    indptr: np.ndarray
    neighbor: np.ndarray
    relation: np.ndarray
    edge: np.ndarray
    edge_time: np.ndarray
    eff_time: np.ndarray

    @classmethod
    def build(cls, g: TemporalHeterogeneousGraph) -> "Incidence":
        owner, nbr, rel, eid, etime = [], [], [], [], []
        for k, et in enumerate(g.edge_types):
            es = g.edges[et.name]
            s = g.global_id(et.src_type, es.src)
            d = g.global_id(et.dst_type, es.dst)
            ids = np.arange(len(es), dtype=np.int64)
            owner += [d, s]
            nbr += [s, d]
            rel += [np.full(len(es), 2 * k, dtype=np.int64), np.full(len(es), 2 * k + 1, dtype=np.int64)]
            eid += [ids, ids]
            etime += [es.timestamp, es.timestamp]
        n = g.total_nodes
        if not owner:
            z = np.zeros(0, dtype=np.int64)
            return cls(np.zeros(n + 1, dtype=np.int64), z, z, z, z, z)
        owner = np.concatenate(owner)
        nbr = np.concatenate(nbr)
        rel = np.concatenate(rel)
        eid = np.concatenate(eid)
        etime = np.concatenate(etime).astype(np.int64)
        eff = np.maximum(etime, g.all_timestamps[nbr])
        order = np.lexsort((eid, rel, eff, owner))
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(owner, minlength=n), out=indptr[1:])
        return cls(indptr, nbr[order], rel[order], eid[order], etime[order], eff[order])

    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)


def build_graph(db: Database, mode: str = FACT_AS_EDGE) -> TemporalHeterogeneousGraph:
    if mode not in MODES:
        raise ValueError(f"unknown graph mode {mode!r}; expected one of {MODES}")
    if not db.is_classified:
        missing = [n for n, t in db.tables.items() if t.kind not in (DIMENSION, FACT)]
        raise GraphBuildError(f"unclassified tables: {missing}")
    as_node = mode == FACT_AS_NODE
    node_ts = {n: t.timestamps.copy() for n, t in db.tables.items() if as_node or t.kind == DIMENSION}
    edge_types: list[EdgeType] = []
    edges: dict[str, EdgeSet] = {}
    for t in db.tables.values():
        if t.kind == FACT and not as_node:
            for c in t.fk_columns:
                if db[c.fk_target].kind != DIMENSION:
                    raise GraphBuildError(f"fact table {t.name}: {c.name} references non-dimension {c.fk_target}")
            for pair in fk_pairs(t):
                et = EdgeType(fkfk_name(t.name, pair), FKFK, t.name, pair,
                              t.column(pair[0]).fk_target, t.column(pair[1]).fk_target, t.name)
                edge_types.append(et)
                edges[et.name] = _fkfk_edgeset(db, t, pair)
        else:
            for c in t.fk_columns:
                if not as_node and db[c.fk_target].kind == FACT:
                    raise GraphBuildError(f"{t.name}.{c.name} references fact table {c.fk_target}; "
                                          f"not representable as a PK-FK edge under {FACT_AS_EDGE}")
                et = EdgeType(pkfk_name(t.name, c.name), PKFK, t.name, (c.name,), c.fk_target, t.name,
                              c.fk_target)
                edge_types.append(et)
                edges[et.name] = _pkfk_edgeset(db, t, c.name)
    return TemporalHeterogeneousGraph(node_ts, edge_types, edges, mode)


# ---------------------------------------------------------------------------
# export / import

def _fname(kind: str, name: str) -> str:
    return f"{kind}-{re.sub(r'[^A-Za-z0-9_.-]', '_', name)}.csv"


def export_graph(g: TemporalHeterogeneousGraph, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = {"mode": g.mode, "node_types": [], "edge_types": []}
    for a in g.node_types:
        fn = _fname("nodes", a)
        with open(out / fn, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["ordinal", "timestamp"])
            w.writerows(enumerate(g.node_timestamps[a].tolist()))
        header["node_types"].append({"name": a, "count": g.num_nodes(a), "file": fn})
    for et in g.edge_types:
        fn = _fname("edges", et.name)
        es = g.edges[et.name]
        with open(out / fn, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["src", "dst", "timestamp", "row"])
            w.writerows(zip(es.src.tolist(), es.dst.tolist(), es.timestamp.tolist(), es.row.tolist()))
        header["edge_types"].append({**et.to_dict(), "count": len(es), "file": fn})
    with open(out / "graph.json", "w") as f:
        json.dump(header, f, indent=2)
        f.write("\n")
    return out


def import_graph(in_dir: str | os.PathLike) -> TemporalHeterogeneousGraph:
    src = Path(in_dir)
    with open(src / "graph.json") as f:
        header = json.load(f)

    def read(fn, ncol):
        arr = np.loadtxt(src / fn, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        return arr.reshape(-1, ncol)

    node_ts = {n["name"]: read(n["file"], 2)[:, 1].copy() for n in header["node_types"]}
    ets, edges = [], {}
    for d in header["edge_types"]:
        et = EdgeType.from_dict(d)
        a = read(d["file"], 4)
        ets.append(et)
        edges[et.name] = EdgeSet(*(a[:, i].copy() for i in range(4)))
    return TemporalHeterogeneousGraph(node_ts, ets, edges, header["mode"])
