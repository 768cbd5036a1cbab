"""Small hand-built databases shared by the test modules."""
import numpy as np

from relmeta import rdb
from relmeta.attributes import build_attribute_store
from relmeta.features import fit_encoders
from relmeta.graph import build_graph
from relmeta.rdb import (CATEGORICAL, FOREIGN_KEY, NUMERIC, PRIMARY_KEY, TEXT, TIMESTAMP, ColumnSpec, Database,
                         Table)

CUSTOMER = (ColumnSpec("customer_id", PRIMARY_KEY), ColumnSpec("signup", TIMESTAMP, is_time_column=True),
            ColumnSpec("age", NUMERIC), ColumnSpec("bio", TEXT))
PRODUCT = (ColumnSpec("product_id", PRIMARY_KEY), ColumnSpec("added", TIMESTAMP, is_time_column=True),
           ColumnSpec("price", NUMERIC), ColumnSpec("color", CATEGORICAL))
TXN = (ColumnSpec("txn_id", PRIMARY_KEY), ColumnSpec("customer_id", FOREIGN_KEY, "Customer"),
       ColumnSpec("product_id", FOREIGN_KEY, "Product"), ColumnSpec("time", TIMESTAMP, is_time_column=True),
       ColumnSpec("rating", NUMERIC))


def shop(n_customers=10, n_products=5, n_txn=20, seed=0, null_every=0) -> Database:
    """Customer/Product/Transactions database with random rows.

    With ``null_every`` > 0 every such transaction gets a null product_id.
    """
    rng = np.random.default_rng(seed)
    cust = tuple((f"c{i}", int(rng.integers(0, 100)), float(rng.normal(40, 10)), f"likes {rng.choice(['red', 'blue'])}")
                 for i in range(n_customers))
    prod = tuple((f"p{j}", int(rng.integers(0, 100)), float(rng.uniform(1, 50)), str(rng.choice(["red", "blue"])))
                 for j in range(n_products))
    txn = []
    for k in range(n_txn):
        p = None if null_every and k % null_every == 0 else f"p{rng.integers(n_products)}"
        txn.append((f"t{k}", f"c{rng.integers(n_customers)}", p, int(rng.integers(100, 1000)),
                    float(rng.integers(1, 6))))
    db = Database({"Customer": Table("Customer", CUSTOMER, cust), "Product": Table("Product", PRODUCT, prod),
                   "Transactions": Table("Transactions", TXN, tuple(txn))})
    return rdb.classify_tables(db)


def pipeline(db, hash_dim=8, cutoff=None):
    g = build_graph(db)
    attrs = build_attribute_store(db, g, fit_encoders(db, hash_dim=hash_dim, cutoff=cutoff), cutoff=cutoff)
    return g, attrs


def relational_oracle(g, x_intrinsic, z_intrinsic, cutoff=None, distinct=False):
    """Relational attributes recomputed with plain loops over the raw edge lists.

    Returns {node_type: list of 4-tuples}. A neighbor only counts when both
    the edge and the neighbor exist at ``cutoff``.
    """
    import math
    inc = {a: [[] for _ in range(g.num_nodes(a))] for a in g.node_types}
    for et in g.edge_types:
        es = g.edges[et.name]
        for k in range(len(es)):
            s, d, t = int(es.src[k]), int(es.dst[k]), int(es.timestamp[k])
            z = math.sqrt(sum(float(v) ** 2 for v in z_intrinsic[et.name][k]))
            # both endpoints see the other one through this edge
            for owner, me, ot, other in ((et.dst_type, d, et.src_type, s), (et.src_type, s, et.dst_type, d)):
                eff = max(t, int(g.node_timestamps[ot][other]))
                if cutoff is None or eff <= cutoff:
                    inc[owner][me].append((z, ot, other))
    out = {}
    for a in g.node_types:
        rows = []
        for entries in inc[a]:
            if not entries:
                rows.append((0.0, 0.0, 0.0, 0.0))
                continue
            nbrs = {(ot, o) for _, ot, o in entries} if distinct else [(ot, o) for _, ot, o in entries]
            size = len(nbrs)
            total = sum(z for z, _, _ in entries)
            qual = sum(math.sqrt(sum(float(v) ** 2 for v in x_intrinsic[ot][o])) for ot, o in nbrs) / size
            rows.append((math.log(1 + size), math.log(1 + total), total / size, math.log(1 + qual)))
        out[a] = rows
    return out
