"""Compare pre-training task sources on the same synthetic shop.

clustered:    multi-view clustering tasks (the default)
randomized:   random partitions, a lower bound
ground-truth: the churn labels themselves, repeated

One pre-training run per source at ten epochs, about a minute.
Single runs are noisy; the acceptance suite takes five-seed medians.

    python demos/pool_types.py
"""
import time

import numpy as np

from relmeta import meta, synth
from relmeta import tasks as tk
from relmeta.attributes import build_attribute_store
from relmeta.encoder import GraphEncoder
from relmeta.evaluate import DownstreamTask, proto_classify, roc_auc
from relmeta.features import fit_encoders
from relmeta.graph import build_graph

data = synth.generate(synth.SynthConfig())
cutoff = data.config.cutoff
g = build_graph(data.db)
attrs = build_attribute_store(data.db, g, fit_encoders(data.db, cutoff=cutoff), cutoff=cutoff)
churn = data.tasks["churn"]
n = g.num_nodes("Customer")

inputs = tk.clustering_inputs(attrs.x_intrinsic["Customer"], attrs.x_relational["Customer"])
nodes, _, y = DownstreamTask.columns(churn.train)
sources = {
    "clustered": {p: tk.generate_pool(inputs[p], p, 100, seed=i, node_type="Customer")
                  for i, p in enumerate((tk.INTRINSIC, tk.RELATIONAL, tk.HYBRID))},
    "randomized": {tk.RANDOMIZED: tk.randomized_pool(n, 100, seed=0, node_type="Customer")},
    "ground-truth": {tk.GROUND_TRUTH: tk.ground_truth_pool(y, 100, seed=0, node_type="Customer",
                                                           nodes=nodes, n_nodes=n)},
}

for name, pools in sources.items():
    t0 = time.perf_counter()
    cfg = meta.TrainConfig(epochs=10)
    res = meta.pretrain(g, attrs, pools, cfg, horizon=cutoff)
    enc = GraphEncoder(g, attrs, res.params, cfg.fanouts)
    aucs = [roc_auc(proto_classify(enc, "Customer", churn.few_shot(50, s), churn.test, s), churn.test[:, 2])
            for s in range(3)]
    print(f"{name:12s} 50-shot churn AUC {np.median(aucs):.3f}  ({time.perf_counter() - t0:.0f}s)")
