"""Intrinsic, relational and hybrid node attributes; intrinsic edge attributes.

Relational attributes per node v, over the multiset U_v of one-hop neighbors
across every edge type and both directions (one entry per incident edge):

    freq     = ln(1 + |U_v|)
    int_sum  = ln(1 + sum_e ||z_e||)
    int_mean = sum_e ||z_e|| / |U_v|
    qual     = ln(1 + mean_u ||x_u||)

with isolated nodes set to zeros.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import EncoderSpec
from .graph import NodeRef, EdgeRef, TemporalHeterogeneousGraph
from .rdb import Database, Table

D_R = 4
MULTISET = "multiset"
SET = "set"


def feature_keys(table: Table) -> list[str]:
    return [f"{table.name}.{c.name}" for c in table.feature_columns]


def encode_row(table: Table, row: tuple, spec: EncoderSpec) -> np.ndarray:
    parts = [spec[f"{table.name}.{c.name}"].encode(row[table.column_index(c.name)]) for c in table.feature_columns]
    return np.concatenate(parts) if parts else np.zeros(0)


def encode_table(table: Table, spec: EncoderSpec) -> np.ndarray:
    """Intrinsic matrix of a whole table, rows in table order."""
    parts = [spec[f"{table.name}.{c.name}"].encode_many(table.values(c.name)) for c in table.feature_columns]
    if not parts:
        return np.zeros((len(table), 0))
    return np.concatenate(parts, axis=1)


def intrinsic_node(db: Database, v: NodeRef, spec: EncoderSpec) -> np.ndarray:
    t = db[v.node_type]
    return encode_row(t, t.rows[v.ordinal], spec)


def intrinsic_edge(db: Database, e: EdgeRef, spec: EncoderSpec) -> np.ndarray:
    """Encoding of the edge's corresponding row (fact row, or the primary-key node's row)."""
    t = db[e.row_link[0]]
    return encode_row(t, t.rows[e.row_link[1]], spec)


def hybrid_node(x_intrinsic: np.ndarray, x_relational: np.ndarray, d_intrinsic: int | None = None) -> np.ndarray:
    x_intrinsic = np.asarray(x_intrinsic, dtype=float)
    x_relational = np.asarray(x_relational, dtype=float)
    if d_intrinsic is not None and x_intrinsic.shape[-1] != d_intrinsic:
        raise ValueError(f"intrinsic length {x_intrinsic.shape[-1]} != recorded d_I {d_intrinsic}")
    if x_relational.shape[-1] != D_R:
        raise ValueError(f"relational length {x_relational.shape[-1]} != {D_R}")
    return np.concatenate([x_intrinsic, x_relational], axis=-1)


def relational_matrix(g: TemporalHeterogeneousGraph, x_intrinsic: dict[str, np.ndarray],
                      z_intrinsic: dict[str, np.ndarray], cutoff: int | None = None,
                      neighbor_mode: str = MULTISET) -> np.ndarray:
    """Relational attributes for every node, rows in global node-id order."""
    inc = g.incidence
    n = g.total_nodes
    owner = np.repeat(np.arange(n), inc.degree())
    keep = np.ones(len(owner), dtype=bool) if cutoff is None else inc.eff_time <= cutoff
    owner, nbr, rel, eid = owner[keep], inc.neighbor[keep], inc.relation[keep], inc.edge[keep]

    edge_norm = np.zeros(len(eid))
    for k, et in enumerate(g.edge_types):
        m = rel // 2 == k
        if m.any():
            z = z_intrinsic[et.name]
            edge_norm[m] = np.sqrt((z[eid[m]] ** 2).sum(axis=1)) if z.shape[1] else 0.0
    node_norm = np.concatenate([np.sqrt((x_intrinsic[a] ** 2).sum(axis=1)) for a in g.node_types]
                               or [np.zeros(0)])

    count = np.bincount(owner, minlength=n).astype(float)
    sum_int = np.bincount(owner, weights=edge_norm, minlength=n)
    if neighbor_mode == MULTISET:
        size = count
        qual_sum = np.bincount(owner, weights=node_norm[nbr], minlength=n)
    elif neighbor_mode == SET:
        pairs = np.unique(np.stack([owner, nbr], axis=1), axis=0) if len(owner) else np.zeros((0, 2), dtype=np.int64)
        size = np.bincount(pairs[:, 0], minlength=n).astype(float)
        qual_sum = np.bincount(pairs[:, 0], weights=node_norm[pairs[:, 1]], minlength=n)
    else:
        raise ValueError(f"unknown neighbor mode {neighbor_mode!r}")
    has = size > 0
    safe = np.where(has, size, 1.0)
    out = np.zeros((n, D_R))
    out[:, 0] = np.log1p(size)
    out[:, 1] = np.where(has, np.log1p(sum_int), 0.0)
    out[:, 2] = np.where(has, sum_int / safe, 0.0)
    out[:, 3] = np.where(has, np.log1p(qual_sum / safe), 0.0)
    return out


def relational_node(g: TemporalHeterogeneousGraph, v: NodeRef, z_intrinsic: dict[str, np.ndarray],
                    x_intrinsic: dict[str, np.ndarray], cutoff: int | None = None,
                    neighbor_mode: str = MULTISET) -> np.ndarray:
    """Relational attributes of a single node (see module docstring)."""
    gid = int(g.global_id(v.node_type, v.ordinal))
    return relational_matrix(g, x_intrinsic, z_intrinsic, cutoff, neighbor_mode)[gid]


@dataclass
class AttributeStore:
    node_columns: dict[str, list[str]]
    edge_columns: dict[str, list[str]]
    x_intrinsic: dict[str, np.ndarray]
    x_relational: dict[str, np.ndarray]
    z_intrinsic: dict[str, np.ndarray]
    cutoff: int | None = None
    neighbor_mode: str = MULTISET
    x_hybrid: dict[str, np.ndarray] = field(init=False)

    def __post_init__(self):
        self.x_hybrid = {a: hybrid_node(self.x_intrinsic[a], self.x_relational[a], self.d_intrinsic(a))
                         for a in self.x_intrinsic}

    def d_intrinsic(self, node_type: str) -> int:
        return self.x_intrinsic[node_type].shape[1]

    def d_hybrid(self, node_type: str) -> int:
        return self.d_intrinsic(node_type) + D_R

    def d_edge(self, edge_type: str) -> int:
        return self.z_intrinsic[edge_type].shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, AttributeStore):
            return NotImplemented

        def same(a, b):
            return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)

        return (self.node_columns == other.node_columns and self.edge_columns == other.edge_columns
                and self.cutoff == other.cutoff and self.neighbor_mode == other.neighbor_mode
                and same(self.x_intrinsic, other.x_intrinsic) and same(self.x_relational, other.x_relational)
                and same(self.z_intrinsic, other.z_intrinsic))

    def save(self, out_dir: str | os.PathLike) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = {"cutoff": self.cutoff, "neighbor_mode": self.neighbor_mode, "d_R": D_R,
                  "node_types": {}, "edge_types": {}}
        for i, a in enumerate(self.x_intrinsic):
            files = {}
            for kind, mat in (("intrinsic", self.x_intrinsic[a]), ("relational", self.x_relational[a]),
                              ("hybrid", self.x_hybrid[a])):
                files[kind] = f"node{i}-{kind}.csv"
                _savecsv(out / files[kind], mat)
            header["node_types"][a] = {"columns": self.node_columns[a], "d_I": self.d_intrinsic(a),
                                       "rows": len(self.x_intrinsic[a]), "files": files}
        for i, r in enumerate(self.z_intrinsic):
            fn = f"edge{i}-intrinsic.csv"
            _savecsv(out / fn, self.z_intrinsic[r])
            header["edge_types"][r] = {"columns": self.edge_columns[r], "d_I": self.d_edge(r),
                                       "rows": len(self.z_intrinsic[r]), "file": fn}
        with open(out / "attributes.json", "w") as f:
            json.dump(header, f, indent=1)
        return out

    @classmethod
    def load(cls, in_dir: str | os.PathLike) -> "AttributeStore":
        src = Path(in_dir)
        with open(src / "attributes.json") as f:
            h = json.load(f)
        xi, xr, cols = {}, {}, {}
        for a, d in h["node_types"].items():
            xi[a] = _loadcsv(src / d["files"]["intrinsic"], d["rows"], d["d_I"])
            xr[a] = _loadcsv(src / d["files"]["relational"], d["rows"], D_R)
            cols[a] = d["columns"]
        zi, ecols = {}, {}
        for r, d in h["edge_types"].items():
            zi[r] = _loadcsv(src / d["file"], d["rows"], d["d_I"])
            ecols[r] = d["columns"]
        return cls(cols, ecols, xi, xr, zi, h["cutoff"], h["neighbor_mode"])


def _savecsv(path: Path, mat: np.ndarray) -> None:
    np.savetxt(path, mat, delimiter=",", fmt="%.17g")


def _loadcsv(path: Path, rows: int, cols: int) -> np.ndarray:
    if rows == 0 or cols == 0:
        return np.zeros((rows, cols))
    return np.loadtxt(path, delimiter=",", ndmin=2).reshape(rows, cols)


def build_attribute_store(db: Database, g: TemporalHeterogeneousGraph, spec: EncoderSpec,
                          cutoff: int | None = None, neighbor_mode: str = MULTISET) -> AttributeStore:
    """All attribute matrices for ``g``.

    With ``cutoff`` set, relational statistics ignore edges (and neighbors)
    created after it.
    """
    table_mats = {name: encode_table(db[name], spec) for name in
                  set(g.node_types) | {et.row_table for et in g.edge_types}}
    x_i = {a: table_mats[a] for a in g.node_types}
    node_cols = {a: feature_keys(db[a]) for a in g.node_types}
    z_i, edge_cols = {}, {}
    for et in g.edge_types:
        z_i[et.name] = table_mats[et.row_table][g.edges[et.name].row]
        edge_cols[et.name] = feature_keys(db[et.row_table])
    rel = relational_matrix(g, x_i, z_i, cutoff, neighbor_mode)
    x_r = {a: rel[g.type_offsets[a]:g.type_offsets[a] + g.num_nodes(a)] for a in g.node_types}
    return AttributeStore(node_cols, edge_cols, x_i, x_r, z_i, cutoff, neighbor_mode)
