"""Seeded e-commerce style databases with planted latent structure.

Customers carry two independent latent classes: an *intrinsic* class that
shapes their own row (numeric centers separated by ``sigma_ratio`` within-class
standard deviations, class-specific vocabulary) and an *activity* class that
sets how often they buy and how likely they are to stop buying. Products
carry one class that shapes their row and which customers favour them.

Three ground-truth tasks are emitted, all anchored at the cutoff time:

- churn:  1 if the customer has no transaction after the cutoff
- source: 1 if the customer's intrinsic class is in the upper half
- spend:  total amount the customer spends after the cutoff
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .evaluate import CLASSIFICATION, REGRESSION, DownstreamTask, write_tasks
from .rdb import (CATEGORICAL, FOREIGN_KEY, NUMERIC, PRIMARY_KEY, TEXT, TIMESTAMP, ColumnSpec, Database, Table,
                  classify_tables, write_database)

CUSTOMER_COLUMNS = (
    ColumnSpec("customer_id", PRIMARY_KEY),
    ColumnSpec("signup_time", TIMESTAMP, is_time_column=True),
    ColumnSpec("age", NUMERIC),
    ColumnSpec("income", NUMERIC),
    ColumnSpec("region", CATEGORICAL),
    ColumnSpec("bio", TEXT),
)
PRODUCT_COLUMNS = (
    ColumnSpec("product_id", PRIMARY_KEY),
    ColumnSpec("added_time", TIMESTAMP, is_time_column=True),
    ColumnSpec("price", NUMERIC),
    ColumnSpec("category", CATEGORICAL),
    ColumnSpec("description", TEXT),
)
TRANSACTION_COLUMNS = (
    ColumnSpec("txn_id", PRIMARY_KEY),
    ColumnSpec("customer_id", FOREIGN_KEY, "Customer"),
    ColumnSpec("product_id", FOREIGN_KEY, "Product"),
    ColumnSpec("time", TIMESTAMP, is_time_column=True),
    ColumnSpec("amount", NUMERIC),
    ColumnSpec("rating", NUMERIC),
)

_SHARED_WORDS = ("the", "and", "good", "value", "daily", "new", "local", "classic")


@dataclass
class SynthConfig:
    customers: int = 1000
    products: int = 200
    transactions: int = 5000
    classes: int = 4
    sigma_ratio: float = 5.0
    signal: tuple[float, float] = (0.5, 0.5)     # (intrinsic, relational) share of the spend signal
    span: int = 1_000_000
    cutoff_frac: float = 0.7
    test_frac: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.signal = tuple(float(s) for s in self.signal)
        if min(self.customers, self.products) < self.classes:
            raise ValueError(f"entity counts must be >= the latent class count {self.classes}")
        if self.classes < 2:
            raise ValueError("need at least 2 latent classes")
        if self.transactions < 1:
            raise ValueError("need at least one transaction")
        if self.sigma_ratio <= 0:
            raise ValueError("sigma_ratio must be positive")
        if not 0.3 < self.cutoff_frac < 1.0:
            raise ValueError("cutoff_frac must lie in (0.3, 1)")
        if self.span < 100:
            raise ValueError("span too short")
        if len(self.signal) != 2 or min(self.signal) < 0 or sum(self.signal) == 0:
            raise ValueError(f"invalid signal split {self.signal}")

    @property
    def cutoff(self) -> int:
        return int(self.span * self.cutoff_frac)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["signal"] = list(self.signal)
        return d


@dataclass
class SynthData:
    db: Database
    tasks: dict[str, DownstreamTask]
    customer_intrinsic: np.ndarray
    customer_activity: np.ndarray
    product_class: np.ndarray
    config: SynthConfig

    def oracle_source_scores(self) -> np.ndarray:
        """Nearest planted center on the raw numeric customer features, as a 0/1 score per customer."""
        return oracle_scores(self.db, self.config)

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        write_database(self.db, out)
        write_tasks(self.tasks, out, {"cutoff": self.config.cutoff, "synth": self.config.to_dict()})
        return out


def _centers(cfg: SynthConfig) -> np.ndarray:
    # unit within-class std; class k sits at sigma_ratio * k on both numeric axes
    return cfg.sigma_ratio * np.arange(cfg.classes, dtype=float)


def _vocab(prefix: str, k: int, size: int = 6) -> list[str]:
    return [f"{prefix}{k}x{j}" for j in range(size)]


def _text(rng, words: list[str], n_class: int = 4, n_shared: int = 2) -> str:
    picked = list(rng.choice(words, size=n_class)) + list(rng.choice(_SHARED_WORDS, size=n_shared))
    rng.shuffle(picked)
    return " ".join(picked)


def generate(cfg: SynthConfig | None = None) -> SynthData:
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    K = cfg.classes
    T = cfg.span
    dim_end = int(0.3 * T)
    centers = _centers(cfg)

    # customers
    ci = rng.integers(K, size=cfg.customers)
    ca = rng.integers(K, size=cfg.customers)
    signup = np.sort(rng.integers(0, dim_end, size=cfg.customers))
    age = 30.0 + centers[ci] + rng.normal(size=cfg.customers)
    income = 50.0 + centers[ci] + rng.normal(size=cfg.customers)
    regions = [f"region{k}" for k in range(K)]
    cust_rows = []
    for i in range(cfg.customers):
        region = regions[ci[i]] if rng.random() < 0.8 else regions[rng.integers(K)]
        cust_rows.append((f"C{i:05d}", int(signup[i]), round(float(age[i]), 6), round(float(income[i]), 6),
                          region, _text(rng, _vocab("cw", ci[i]))))

    # products
    pc = rng.integers(K, size=cfg.products)
    added = np.sort(rng.integers(0, dim_end, size=cfg.products))
    price = 10.0 + centers[pc] + rng.normal(size=cfg.products)
    prod_rows = [(f"P{j:05d}", int(added[j]), round(float(price[j]), 6), f"cat{pc[j]}",
                  _text(rng, _vocab("pw", pc[j]))) for j in range(cfg.products)]

    # transactions: the activity class sets a per-time purchase rate, the
    # chance of stopping at the cutoff and how satisfied the customer is
    w_i, w_r = cfg.signal
    rate = np.exp(np.linspace(-1.0, 1.0, K) * (0.5 + w_r))[ca]
    stops = rng.random(cfg.customers) < np.linspace(0.9, 0.05, K)[ca]
    cut = cfg.cutoff
    window = np.where(stops, cut, T) - dim_end
    counts = rng.multinomial(cfg.transactions, rate * window / (rate * window).sum())
    satisfaction = 2.0 * w_r * np.linspace(-1.0, 1.0, K)[ca]
    by_class = [np.flatnonzero(pc == k) for k in range(K)]
    tx = []
    for i in np.flatnonzero(counts):
        n = int(counts[i])
        prods = rng.integers(cfg.products, size=n)
        liked = by_class[ci[i]]
        if len(liked):
            fav = rng.random(n) < 0.6
            prods[fav] = liked[rng.integers(len(liked), size=int(fav.sum()))]
        times = rng.integers(dim_end, dim_end + window[i] + 1, size=n)
        base = 20.0 * (1.0 + w_i * ci[i] / max(K - 1, 1))
        amounts = base * np.exp(0.25 * rng.normal(size=n))
        ratings = np.clip(np.round(3.0 + (pc[prods] == ci[i]) + satisfaction[i] + 0.7 * rng.normal(size=n)), 1, 5)
        for p, t, a, r in zip(prods, times, amounts, ratings):
            tx.append((int(t), int(i), int(p), round(float(a), 4), float(r)))
    tx.sort()
    tx_rows = [(f"T{k:06d}", f"C{i:05d}", f"P{p:05d}", t, a, r) for k, (t, i, p, a, r) in enumerate(tx)]

    db = classify_tables(Database({
        "Customer": Table("Customer", CUSTOMER_COLUMNS, tuple(cust_rows)),
        "Product": Table("Product", PRODUCT_COLUMNS, tuple(prod_rows)),
        "Transactions": Table("Transactions", TRANSACTION_COLUMNS, tuple(tx_rows)),
    }))

    after = np.zeros(cfg.customers, dtype=bool)
    spend = np.zeros(cfg.customers)
    for t, i, _, a, _ in tx:
        if t > cut:
            after[i] = True
            spend[i] += a
    churn = (~after).astype(float)
    source = (ci >= (K + 1) // 2).astype(float)

    order = np.random.default_rng(cfg.seed + 1).permutation(cfg.customers)
    n_test = int(round(cfg.test_frac * cfg.customers))
    test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])

    def task(name, kind, y):
        def rows(idx):
            return np.stack([idx, np.full(len(idx), cut), y[idx]], axis=1).astype(float)
        return DownstreamTask(name, "Customer", kind, rows(train_idx), rows(test_idx))

    tasks = {"churn": task("churn", CLASSIFICATION, churn),
             "source": task("source", CLASSIFICATION, source),
             "spend": task("spend", REGRESSION, spend)}
    return SynthData(db, tasks, ci, ca, pc, cfg)


def oracle_scores(db: Database, cfg: SynthConfig) -> np.ndarray:
    """Assign each customer to the nearest planted center on (age, income); return 1 for upper-half classes."""
    t = db["Customer"]
    x = np.stack([np.array(t.values("age"), dtype=float) - 30.0,
                  np.array(t.values("income"), dtype=float) - 50.0], axis=1)
    c = _centers(cfg)
    pred = np.argmin(((x[:, None, :] - c[None, :, None]) ** 2).sum(axis=2), axis=1)
    return (pred >= (cfg.classes + 1) // 2).astype(float)
