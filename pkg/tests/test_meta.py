import math

import numpy as np
import pytest

from relmeta import autodiff as ad
from relmeta import meta
from relmeta import tasks as tk
from relmeta.encoder import EncoderParams
from relmeta.meta import EpisodeError, TrainConfig, episode_loss, prototypes, sample_episode
from relmeta.tasks import PseudoTask, TaskPool

from helpers import pipeline, shop


def pool(name, labels_list, node_type="Customer"):
    return TaskPool(name, [PseudoTask(name, int(max(l)) + 1, np.array(l), "hybrid", i)
                           for i, l in enumerate(labels_list)], 0, node_type)


def three_pools(n=40):
    lab = [i % 4 for i in range(n)]
    return {p: pool(p, [lab]) for p in (tk.INTRINSIC, tk.RELATIONAL, tk.HYBRID)}


def test_ratio_frequencies():
    cfg = TrainConfig()
    rng = np.random.default_rng(0)
    draws = [sample_episode(three_pools(), cfg, rng).pool for _ in range(10_000)]
    freq = {p: draws.count(p) / len(draws) for p in (tk.INTRINSIC, tk.RELATIONAL, tk.HYBRID)}
    assert abs(freq[tk.INTRINSIC] - 0.2) < 0.02
    assert abs(freq[tk.RELATIONAL] - 0.3) < 0.02
    assert abs(freq[tk.HYBRID] - 0.5) < 0.02


def test_zero_ratio_excludes_pools():
    cfg = TrainConfig(ratio=(1, 0, 0))
    rng = np.random.default_rng(0)
    assert {sample_episode(three_pools(), cfg, rng).pool for _ in range(200)} == {tk.INTRINSIC}


def test_episode_shapes_and_disjointness():
    cfg = TrainConfig(way=3, shot=2, query=4)
    ep = sample_episode(three_pools(), cfg, np.random.default_rng(1))
    assert ep.support.shape == (3, 2) and ep.query.shape == (3, 4)
    assert len(set(ep.nodes().tolist())) == 18
    labels = three_pools()[ep.pool].tasks[ep.task].labels
    for c in range(3):
        assert set(labels[ep.support[c]]) == set(labels[ep.query[c]]) == {ep.classes[c]}


def test_small_classes_are_resampled():
    cfg = TrainConfig(shot=1, query=5)
    # task 0: class 1 has shot + query - 1 = 5 members; task 1 qualifies
    bad = [0] * 10 + [1] * 5
    good = [0] * 8 + [1] * 7
    p = {"randomized": pool("randomized", [bad, good])}
    rng = np.random.default_rng(0)
    assert {sample_episode(p, cfg, rng).task for _ in range(50)} == {1}
    with pytest.raises(EpisodeError):
        sample_episode({"randomized": pool("randomized", [bad])}, cfg, rng)


def test_unlabeled_nodes_never_sampled():
    lab = [tk.UNLABELED] * 20 + [0] * 10 + [1] * 10
    p = {"ground-truth": pool("ground-truth", [lab])}
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert sample_episode(p, TrainConfig(), rng).nodes().min() >= 20


def test_prototypes_examples():
    assert np.array_equal(prototypes([np.array([[1.0, 2.0]])]).value, [[1.0, 2.0]])
    assert np.array_equal(prototypes([np.array([[0.0, 0.0], [2.0, 2.0]])]).value, [[1.0, 1.0]])
    with pytest.raises(ValueError):
        prototypes([np.zeros((0, 2))])


def test_loss_examples():
    protos = np.array([[-1.0, 0.0], [1.0, 0.0]])
    assert abs(episode_loss(np.array([[0.0, 3.0]]), [0], protos).value - math.log(2)) < 1e-12
    near = episode_loss(np.array([[0.0, 0.0]]), [0], np.array([[0.0, 0.0], [1.0, 0.0]])).value
    assert abs(near - math.log1p(math.exp(-1))) < 1e-12
    assert episode_loss(np.array([[5.0, 5.0]]), [0], np.array([[0.0, 0.0]])).value == 0.0
    with pytest.raises(ValueError):
        episode_loss(np.zeros((1, 2)), [2], protos)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(way=1)
    with pytest.raises(ValueError):
        TrainConfig(ratio=(0, 0, 0))
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 1, "bogus": 2})
    cfg = TrainConfig(epochs=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def _setup():
    db = shop(40, 10, 200, seed=1)
    g, attrs = pipeline(db)
    x = tk.clustering_inputs(attrs.x_intrinsic["Customer"], attrs.x_relational["Customer"])
    pools = {p: tk.generate_pool(x[p], p, P=5, c_range=(2, 3), seed=i, node_type="Customer")
             for i, p in enumerate((tk.INTRINSIC, tk.RELATIONAL, tk.HYBRID))}
    return g, attrs, pools


def small(**kw):
    base = dict(epochs=2, episodes_per_epoch=3, meta_batch=4, shot=1, query=2, hidden=8, fanouts=(4, 2))
    return TrainConfig(**{**base, **kw})


def test_zero_lr_keeps_parameters():
    g, attrs, pools = _setup()
    from relmeta.encoder import init_params
    cfg = small(lr=0.0)
    init = init_params(g, attrs, cfg.hidden, cfg.layers, cfg.seed)
    res = meta.pretrain(g, attrs, pools, cfg)
    assert all(np.array_equal(a.value, b.value) for a, b in zip(init.values, res.params.values))
    assert len(res.history) == 6


def test_same_seed_same_checkpoints(tmp_path):
    g, attrs, pools = _setup()
    meta.pretrain(g, attrs, pools, small(), checkpoint_dir=tmp_path / "a")
    meta.pretrain(g, attrs, pools, small(), checkpoint_dir=tmp_path / "b")
    for name in ("epoch-001", "epoch-002", "final"):
        assert (tmp_path / "a" / f"{name}.bin").read_bytes() == (tmp_path / "b" / f"{name}.bin").read_bytes()
    other = meta.pretrain(g, attrs, pools, small(seed=1))
    final = EncoderParams.load(tmp_path / "a" / "final")
    assert not all(np.array_equal(a.value, b.value) for a, b in zip(final.values, other.params.values))


def test_history_csv(tmp_path):
    g, attrs, pools = _setup()
    res = meta.pretrain(g, attrs, pools, small())
    res.save_history(tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,pool_tag,loss" and len(lines) == 7
    assert float(lines[1].split(",")[2]) == res.history[0][2]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises():
    g, attrs, pools = _setup()
    from relmeta.encoder import init_params
    p = init_params(g, attrs, 8, 2, 0)
    p["node:Customer:W"].value[...] = 1e200
    with pytest.raises(meta.NumericalError):
        meta.pretrain(g, attrs, pools, small(), params=p)


def test_mixed_node_types_rejected():
    g, attrs, pools = _setup()
    pools[tk.HYBRID].node_type = "Product"
    with pytest.raises(ValueError, match="node type"):
        meta.pretrain(g, attrs, pools, small())


def test_anchor_times():
    g, _, _ = _setup()
    h = meta.anchor_times(g, "Customer", TrainConfig())
    last = max(int(g.all_timestamps.max()), max(int(es.timestamp.max()) for es in g.edges.values()))
    assert np.all(h == last)
    c = meta.anchor_times(g, "Customer", TrainConfig(anchor="creation"))
    assert np.array_equal(c, g.node_timestamps["Customer"])
