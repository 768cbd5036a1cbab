"""In-memory relational database: schema manifest, CSV tables, key checks.

The manifest is a JSON document::

    {"tables": [
        {"name": "Customer", "file": "customer.csv", "kind": "dimension",
         "columns": [
            {"name": "customer_id", "dtype": "primary-key"},
            {"name": "signup", "dtype": "timestamp", "time": true},
            {"name": "age", "dtype": "numeric"},
            {"name": "product_id", "dtype": "foreign-key", "references": "Product"}
         ]}
    ]}

``kind`` is optional and acts as a classification override. Data files are
RFC-4180 CSV with a header row; an empty cell is a null.
"""
from __future__ import annotations

import csv
import json
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import cached_property
from itertools import combinations
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

NUMERIC = "numeric"
CATEGORICAL = "categorical"
TEXT = "text"
TIMESTAMP = "timestamp"
PRIMARY_KEY = "primary-key"
FOREIGN_KEY = "foreign-key"
DTYPES = (NUMERIC, CATEGORICAL, TEXT, TIMESTAMP, PRIMARY_KEY, FOREIGN_KEY)
KEY_DTYPES = (PRIMARY_KEY, FOREIGN_KEY)

DIMENSION = "dimension"
FACT = "fact"
UNCLASSIFIED = "unclassified"
KINDS = (DIMENSION, FACT)

# creation time of rows in tables without a time column: present at any t_ref
NO_TIME = int(np.iinfo(np.int64).min)


class RDBError(Exception):
    """Base class for database loading and validation errors."""


class ManifestError(RDBError):
    pass


class DataFileError(RDBError):
    pass


class KeyViolation(RDBError):
    def __init__(self, findings: Sequence["Finding"]):
        self.findings = list(findings)
        super().__init__("; ".join(f.line() for f in self.findings[:5]))


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    dtype: str
    fk_target: str | None = None
    is_time_column: bool = False

    @property
    def is_key(self) -> bool:
        return self.dtype in KEY_DTYPES


@dataclass(frozen=True)
class Table:
    name: str
    columns: tuple[ColumnSpec, ...]
    rows: tuple[tuple, ...] = ()
    kind: str = UNCLASSIFIED

    def __post_init__(self):
        names = [c.name for c in self.columns]
        dup = [n for n, k in Counter(names).items() if k > 1]
        if dup:
            raise ManifestError(f"table {self.name}: duplicate column names {dup}")
        pks = [c for c in self.columns if c.dtype == PRIMARY_KEY]
        if len(pks) != 1:
            raise ManifestError(f"table {self.name}: expected exactly one primary-key column, found {len(pks)}")
        if sum(c.is_time_column for c in self.columns) > 1:
            raise ManifestError(f"table {self.name}: more than one time column")
        for c in self.columns:
            if c.dtype not in DTYPES:
                raise ManifestError(f"table {self.name}: column {c.name} has unknown dtype {c.dtype!r}")
            if (c.dtype == FOREIGN_KEY) != (c.fk_target is not None):
                raise ManifestError(f"table {self.name}: column {c.name}: fk target given iff dtype is foreign-key")
        for i, row in enumerate(self.rows):
            if len(row) != len(self.columns):
                raise DataFileError(f"table {self.name}: row {i} has {len(row)} cells, expected {len(self.columns)}")

    def __len__(self) -> int:
        return len(self.rows)

    @cached_property
    def _index(self) -> dict[str, int]:
        return {c.name: i for i, c in enumerate(self.columns)}

    def column_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"table {self.name} has no column {name!r}") from None

    def column(self, name: str) -> ColumnSpec:
        return self.columns[self.column_index(name)]

    def values(self, name: str) -> list:
        j = self.column_index(name)
        return [r[j] for r in self.rows]

    @property
    def pk_column(self) -> ColumnSpec:
        return next(c for c in self.columns if c.dtype == PRIMARY_KEY)

    @property
    def fk_columns(self) -> tuple[ColumnSpec, ...]:
        return tuple(c for c in self.columns if c.dtype == FOREIGN_KEY)

    @property
    def time_column(self) -> ColumnSpec | None:
        return next((c for c in self.columns if c.is_time_column), None)

    @property
    def feature_columns(self) -> tuple[ColumnSpec, ...]:
        """Non-key columns in schema order (the time column included)."""
        return tuple(c for c in self.columns if not c.is_key)

    @cached_property
    def timestamps(self) -> np.ndarray:
        """Creation time per row; rows with a null time or no time column get NO_TIME."""
        tc = self.time_column
        if tc is None:
            return np.full(len(self.rows), NO_TIME, dtype=np.int64)
        j = self.column_index(tc.name)
        return np.array([NO_TIME if r[j] is None else r[j] for r in self.rows], dtype=np.int64)

    @cached_property
    def pk_lookup(self) -> dict[Any, int]:
        """Primary-key value -> row ordinal (first occurrence wins)."""
        j = self.column_index(self.pk_column.name)
        out: dict[Any, int] = {}
        for i, r in enumerate(self.rows):
            out.setdefault(r[j], i)
        return out


@dataclass(frozen=True)
class Database:
    tables: Mapping[str, Table]
    kind_overrides: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for t in self.tables.values():
            for c in t.fk_columns:
                if c.fk_target not in self.tables:
                    raise ManifestError(f"table {t.name}: column {c.name} references undeclared table {c.fk_target!r}")
        for name, kind in self.kind_overrides.items():
            if name not in self.tables:
                raise ManifestError(f"kind override for unknown table {name!r}")
            if kind not in KINDS:
                raise ManifestError(f"table {name}: unknown kind {kind!r}")

    def __getitem__(self, name: str) -> Table:
        return self.tables[name]

    @property
    def dim_tables(self) -> tuple[str, ...]:
        return tuple(n for n, t in self.tables.items() if t.kind == DIMENSION)

    @property
    def fact_tables(self) -> tuple[str, ...]:
        return tuple(n for n, t in self.tables.items() if t.kind == FACT)

    @property
    def is_classified(self) -> bool:
        return all(t.kind in KINDS for t in self.tables.values())

    def with_rows(self, name: str, rows: Iterable[tuple]) -> "Database":
        tables = dict(self.tables)
        tables[name] = replace(self.tables[name], rows=tuple(tuple(r) for r in rows))
        return replace(self, tables=tables)


# ---------------------------------------------------------------------------
# validation

@dataclass(frozen=True)
class Finding:
    code: str  # PKDUP, PKNULL, FKDANGLE
    table: str
    column: str
    row: int
    value: Any
    detail: str = ""

    def line(self) -> str:
        s = f"{self.code} table={self.table} column={self.column} row={self.row} value={self.value!r}"
        return f"{s} {self.detail}" if self.detail else s


def validate_keys(db: Database) -> list[Finding]:
    """Every primary-key duplicate/null and every dangling foreign key, in table/row order."""
    findings: list[Finding] = []
    for t in db.tables.values():
        pk = t.pk_column.name
        j = t.column_index(pk)
        first: dict[Any, int] = {}
        for i, r in enumerate(t.rows):
            v = r[j]
            if v is None:
                findings.append(Finding("PKNULL", t.name, pk, i, None))
            elif v in first:
                findings.append(Finding("PKDUP", t.name, pk, i, v, f"first_row={first[v]}"))
            else:
                first[v] = i
        for c in t.fk_columns:
            targets = db.tables[c.fk_target].pk_lookup
            jc = t.column_index(c.name)
            for i, r in enumerate(t.rows):
                v = r[jc]
                if v is not None and v not in targets:
                    findings.append(Finding("FKDANGLE", t.name, c.name, i, v, f"target={c.fk_target}"))
    return findings


def format_report(findings: Sequence[Finding]) -> str:
    return "".join(f.line() + "\n" for f in findings)


# ---------------------------------------------------------------------------
# classification

def incoming_references(db: Database) -> dict[str, list[tuple[str, str]]]:
    refs: dict[str, list[tuple[str, str]]] = {n: [] for n in db.tables}
    for t in db.tables.values():
        for c in t.fk_columns:
            if c.fk_target != t.name:
                refs[c.fk_target].append((t.name, c.name))
    return refs


def classify_tables(db: Database, overrides: Mapping[str, str] | None = None) -> Database:
    """Mark each table as dimension or fact.

    A table is a fact table iff no other table references it and it has at
    least two foreign keys. Manifest kinds, then ``overrides``, take precedence.
    """
    overrides = dict(overrides or {})
    for name, kind in overrides.items():
        if name not in db.tables:
            raise KeyError(f"override names unknown table {name!r}")
        if kind not in KINDS:
            raise ValueError(f"table {name}: unknown kind {kind!r}")
    refs = incoming_references(db)
    tables = {}
    for name, t in db.tables.items():
        kind = FACT if not refs[name] and len(t.fk_columns) >= 2 else DIMENSION
        kind = overrides.get(name, db.kind_overrides.get(name, kind))
        tables[name] = replace(t, kind=kind)
    return replace(db, tables=tables)


def fk_pairs(table: Table) -> list[tuple[str, str]]:
    """All unordered FK column pairs, in schema order."""
    return list(combinations([c.name for c in table.fk_columns], 2))


# ---------------------------------------------------------------------------
# IO

def _parse_column(spec: Mapping[str, Any], table: str) -> ColumnSpec:
    try:
        name = spec["name"]
        dtype = spec["dtype"]
    except KeyError as e:
        raise ManifestError(f"table {table}: column entry missing {e.args[0]!r}") from None
    return ColumnSpec(name=name, dtype=dtype, fk_target=spec.get("references"),
                      is_time_column=bool(spec.get("time", False)))


def _parse_cell(raw: str, col: ColumnSpec, table: str, row: int):
    if raw == "":
        return None
    try:
        if col.dtype == NUMERIC:
            return float(raw)
        if col.dtype == TIMESTAMP:
            return int(raw)
    except ValueError:
        raise DataFileError(f"table {table} row {row} column {col.name}: "
                            f"cannot parse {raw!r} as {col.dtype}") from None
    return raw


def _format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_manifest(path: str | os.PathLike) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("tables"), list):
        raise ManifestError(f"{path}: expected an object with a 'tables' list")
    return doc


def load_database(manifest_path: str | os.PathLike, data_dir: str | os.PathLike | None = None,
                  check_keys: bool = True) -> Database:
    """Parse a manifest and its CSV files; raises on any key violation."""
    manifest_path = Path(manifest_path)
    data_dir = Path(data_dir) if data_dir is not None else manifest_path.parent
    doc = read_manifest(manifest_path)
    tables: dict[str, Table] = {}
    overrides: dict[str, str] = {}
    for entry in doc["tables"]:
        name = entry.get("name")
        if not name:
            raise ManifestError(f"{manifest_path}: table entry without a name")
        if name in tables:
            raise ManifestError(f"{manifest_path}: duplicate table {name!r}")
        columns = tuple(_parse_column(c, name) for c in entry.get("columns", []))
        if "kind" in entry:
            overrides[name] = entry["kind"]
        path = data_dir / entry.get("file", f"{name}.csv")
        if not path.exists():
            raise DataFileError(f"table {name}: missing data file {path}")
        tables[name] = Table(name, columns, _read_rows(path, name, columns))
    db = Database(tables, overrides)
    if check_keys:
        findings = validate_keys(db)
        if findings:
            raise KeyViolation(findings)
    return db


def _read_rows(path: Path, name: str, columns: tuple[ColumnSpec, ...]) -> tuple[tuple, ...]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFileError(f"table {name}: {path} is empty (no header row)") from None
        declared = [c.name for c in columns]
        if sorted(header) != sorted(declared):
            raise DataFileError(f"table {name}: header {header} does not match declared columns {declared}")
        order = [header.index(n) for n in declared]
        rows = []
        for i, raw in enumerate(reader):
            if len(raw) != len(header):
                raise DataFileError(f"table {name} row {i}: {len(raw)} cells, expected {len(header)}")
            rows.append(tuple(_parse_cell(raw[k], c, name, i) for k, c in zip(order, columns)))
    return tuple(rows)


def manifest_document(db: Database) -> dict:
    tables = []
    for t in db.tables.values():
        cols = []
        for c in t.columns:
            d: dict[str, Any] = {"name": c.name, "dtype": c.dtype}
            if c.fk_target is not None:
                d["references"] = c.fk_target
            if c.is_time_column:
                d["time"] = True
            cols.append(d)
        entry: dict[str, Any] = {"name": t.name, "file": f"{t.name}.csv", "columns": cols}
        if t.name in db.kind_overrides:
            entry["kind"] = db.kind_overrides[t.name]
        tables.append(entry)
    return {"tables": tables}


def write_database(db: Database, out_dir: str | os.PathLike, manifest_name: str = "manifest.json") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t in db.tables.values():
        with open(out / f"{t.name}.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow([c.name for c in t.columns])
            for r in t.rows:
                w.writerow([_format_cell(v) for v in r])
    path = out / manifest_name
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest_document(db), f, indent=2)
        f.write("\n")
    return path
