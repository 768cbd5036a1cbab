"""Command-line pipeline: synth -> ingest -> build-graph -> build-attrs -> gen-tasks -> pretrain -> adapt -> eval -> report.

Every stage writes its artifact directory under the workspace together with a
``stage.json`` manifest holding the hashes of its inputs, its outputs and its
configuration. A stage whose recorded hashes still match is skipped.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import attributes, encoder, evaluate, features, graph, meta, rdb, synth, tasks

EXIT_OK, EXIT_CONFIG, EXIT_STALE, EXIT_NUMERIC = 0, 2, 3, 4
STAGE_FILE = "stage.json"
CONFIG_NAME = "relmeta.json"

DEFAULTS = {
    "seed": 0,
    "synth": synth.SynthConfig().to_dict(),
    "ingest": {"data": None, "check_keys": True},
    "graph": {"mode": graph.FACT_AS_EDGE},
    "attrs": {"hash_dim": features.DEFAULT_HASH_DIM, "cutoff": "auto", "neighbor_mode": attributes.MULTISET},
    "tasks": {"mode": "clustered", "P": tasks.DEFAULT_P, "c_range": list(tasks.DEFAULT_RANGE), "node_type": "auto",
              "variance": 0.95, "max_components": 32, "ground_truth_task": "churn"},
    "pretrain": {k: v for k, v in meta.TrainConfig().to_dict().items() if k != "seed"},
    "adapt": {"tasks": ["churn", "source", "spend"], "shots": [1, 5, 50, evaluate.SUFFICIENT],
              "seeds": [0, 1, 2, 3, 4], "head_epochs": 200, "head_lr": 0.001},
}

# stage -> (output dir, upstream stages whose outputs it reads, config sections it depends on)
STAGES = {
    "synth": ("data", [], ["synth"]),
    "ingest": ("db", [], ["ingest"]),
    "build-graph": ("graph", ["ingest"], ["graph"]),
    "build-attrs": ("attrs", ["ingest", "build-graph"], ["attrs"]),
    "gen-tasks": ("tasks/{mode}", ["ingest", "build-attrs"], ["tasks"]),
    "pretrain": ("model/{mode}", ["build-graph", "build-attrs", "gen-tasks"], ["pretrain"]),
    "adapt": ("adapt/{mode}", ["ingest", "build-graph", "build-attrs", "pretrain"], ["adapt", "pretrain"]),
    "eval": ("eval/{mode}", ["adapt"], ["adapt"]),
    "report": ("report", [], []),
}


class ConfigError(Exception):
    pass


class StaleArtifact(Exception):
    pass


# ---------------------------------------------------------------------------
# config

def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"unknown config key {where}{k}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(path: Path | None, overrides: list[str]) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None and path.exists():
        text = path.read_text()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: line 1: expected a JSON object")
        cfg = _merge(cfg, doc)
    elif path is not None and path.name != CONFIG_NAME:
        raise ConfigError(f"config file {path} not found")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key}")
        node[parts[-1]] = value
    return cfg


def _hash_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def hash_dir(path: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file() and p.name != STAGE_FILE):
        rel = f.relative_to(path).as_posix()
        if rel.split("/")[0] in ("checkpoints",):
            continue
        h.update(rel.encode() + b"\0")
        h.update(hashlib.sha256(f.read_bytes()).digest())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# workspace

class Workspace:
    def __init__(self, root: Path, cfg: dict, mode: str, force: bool = False, log=print):
        self.root = root
        self.cfg = cfg
        self.mode = mode
        self.force = force
        self.log = log

    def dir(self, stage: str) -> Path:
        return self.root / STAGES[stage][0].format(mode=self.mode)

    def stage_doc(self, stage: str) -> dict | None:
        p = self.dir(stage) / STAGE_FILE
        if not p.exists():
            return None
        with open(p) as f:
            return json.load(f)

    def config_hash(self, stage: str) -> str:
        sections = {s: self.cfg[s] for s in STAGES[stage][2]}
        return _hash_obj({"seed": self.cfg["seed"], "mode": self.mode if "{mode}" in STAGES[stage][0] else None,
                          **sections})

    def check_current(self, stage: str) -> str:
        """Output hash of an upstream stage, raising if it is missing, edited or itself stale."""
        doc = self.stage_doc(stage)
        if doc is None:
            raise StaleArtifact(f"missing artifact {self.dir(stage)}; run `relmeta {stage}`")
        out = hash_dir(self.dir(stage))
        if out != doc["outputs"]:
            raise StaleArtifact(f"artifact {self.dir(stage)} was modified; rerun `relmeta {stage}`")
        for name, h in doc["inputs"].items():
            if name in STAGES:
                up = self.stage_doc(name)
                if up is None or up["outputs"] != h:
                    raise StaleArtifact(f"{stage} is stale (its input {name} changed); rerun `relmeta {stage}`")
        return out

    def input_hashes(self, stage: str) -> dict:
        hashes = {up: self.check_current(up) for up in STAGES[stage][1]}
        if stage == "ingest":
            hashes["source-data"] = hash_dir(self.data_source())
        return hashes

    def data_source(self) -> Path:
        src = self.cfg["ingest"]["data"]
        path = Path(src) if src else self.root / "data"
        if not (path / "manifest.json").exists():
            hint = "run `relmeta synth`" if not src else "check ingest.data"
            raise StaleArtifact(f"no database manifest at {path}; {hint}")
        return path

    def run(self, stage: str, fn) -> bool:
        """Run ``fn(out_dir)`` unless the stage is up to date; returns True when work was done."""
        inputs = self.input_hashes(stage)
        conf = self.config_hash(stage)
        out = self.dir(stage)
        doc = self.stage_doc(stage)
        if (not self.force and doc is not None and doc["inputs"] == inputs and doc["config"] == conf
                and doc["outputs"] == hash_dir(out)):
            self.log(f"{stage}: up to date")
            return False
        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)
        t0 = time.perf_counter()
        fn(out)
        doc = {"stage": stage, "inputs": inputs, "config": conf, "seed": self.cfg["seed"],
               "outputs": hash_dir(out)}
        with open(out / STAGE_FILE, "w") as f:
            json.dump(doc, f, indent=1)
        self.log(f"{stage}: done in {time.perf_counter() - t0:.1f}s -> {out}")
        return True

    # loaders for upstream artifacts
    def database(self) -> rdb.Database:
        return rdb.classify_tables(rdb.load_database(self.dir("ingest") / "manifest.json"))

    def graph(self) -> graph.TemporalHeterogeneousGraph:
        return graph.import_graph(self.dir("build-graph"))

    def attrs(self) -> attributes.AttributeStore:
        return attributes.AttributeStore.load(self.dir("build-attrs"))

    def downstream(self) -> tuple[dict, dict]:
        return evaluate.read_tasks(self.dir("ingest"))

    def train_config(self) -> meta.TrainConfig:
        return meta.TrainConfig.from_dict({**self.cfg["pretrain"], "seed": self.cfg["seed"]})


# ---------------------------------------------------------------------------
# stages

def stage_synth(ws: Workspace) -> None:
    cfg = synth.SynthConfig(**{**ws.cfg["synth"], "seed": ws.cfg["synth"].get("seed", 0) + ws.cfg["seed"]})
    ws.run("synth", lambda out: synth.generate(cfg).write(out))


def stage_ingest(ws: Workspace) -> None:
    src = ws.data_source()

    def go(out: Path):
        try:
            db = rdb.load_database(src / "manifest.json", check_keys=ws.cfg["ingest"]["check_keys"])
        except rdb.KeyViolation as e:
            (out / "key-report.txt").write_text(rdb.format_report(e.findings) + "\n")
            raise
        db = rdb.classify_tables(db)
        rdb.write_database(db, out)
        kinds = {name: t.kind for name, t in db.tables.items()}
        with open(out / "classification.json", "w") as f:
            json.dump(kinds, f, indent=1)
        ds, doc = evaluate.read_tasks(src)
        horizon = min((int(t.train[:, 1].min()) for t in ds.values() if len(t.train)), default=None)
        evaluate.write_tasks(ds, out, {"horizon": horizon})

    ws.run("ingest", go)


def stage_graph(ws: Workspace) -> None:
    ws.run("build-graph", lambda out: graph.export_graph(graph.build_graph(ws.database(), ws.cfg["graph"]["mode"]), out))


def _horizon(ws: Workspace) -> int | None:
    c = ws.cfg["attrs"]["cutoff"]
    if c == "auto":
        return ws.downstream()[1].get("horizon")
    return None if c is None else int(c)


def stage_attrs(ws: Workspace) -> None:
    def go(out: Path):
        db, g = ws.database(), ws.graph()
        cutoff = _horizon(ws)
        spec = features.fit_encoders(db, ws.cfg["attrs"]["hash_dim"], cutoff)
        store = attributes.build_attribute_store(db, g, spec, cutoff, ws.cfg["attrs"]["neighbor_mode"])
        store.save(out)
        spec.save(out / "encoders.json")

    ws.run("build-attrs", go)


def _target_type(ws: Workspace, g) -> str:
    nt = ws.cfg["tasks"]["node_type"]
    if nt != "auto":
        return nt
    ds = ws.downstream()[0]
    if ds:
        return next(iter(ds.values())).node_type
    return g.node_types[0]


def stage_tasks(ws: Workspace, workers: int) -> None:
    tc = ws.cfg["tasks"]
    seed = ws.cfg["seed"]

    def go(out: Path):
        store = ws.attrs()
        g = ws.graph()
        node_type = _target_type(ws, g)
        rng_c = tuple(tc["c_range"])
        if ws.mode == "clustered":
            inputs = tasks.clustering_inputs(store.x_intrinsic[node_type], store.x_relational[node_type],
                                             tc["variance"], tc["max_components"])
            for i, p in enumerate((tasks.INTRINSIC, tasks.RELATIONAL, tasks.HYBRID)):
                tasks.generate_pool(inputs[p], p, tc["P"], rng_c, seed * 1000 + i, workers, node_type).save(out / p)
        elif ws.mode == "randomized":
            tasks.randomized_pool(g.num_nodes(node_type), tc["P"], rng_c, seed, node_type).save(out / tasks.RANDOMIZED)
        elif ws.mode == "ground-truth":
            ds = ws.downstream()[0]
            name = tc["ground_truth_task"]
            if name not in ds:
                raise ConfigError(f"tasks.ground_truth_task {name!r} is not a downstream task ({sorted(ds)})")
            t = ds[name]
            # only training-split labels are exposed; every other node stays unlabeled
            nodes, _, y = evaluate.DownstreamTask.columns(t.train)
            pool = tasks.ground_truth_pool(y, tc["P"], rng_c, seed, t.kind == evaluate.REGRESSION, node_type,
                                           nodes, g.num_nodes(node_type))
            pool.meta = {"task": name}
            pool.save(out / tasks.GROUND_TRUTH)
        else:
            raise ConfigError(f"unknown gen-tasks mode {ws.mode!r}")

    ws.run("gen-tasks", go)


def load_pools(path: Path) -> dict[str, tasks.TaskPool]:
    pools = {}
    for sub in sorted(p for p in path.iterdir() if (p / "pool.json").exists()):
        pool = tasks.TaskPool.load(sub)
        pools[pool.perspective] = pool
    return pools


def stage_pretrain(ws: Workspace) -> None:
    def go(out: Path):
        g, store = ws.graph(), ws.attrs()
        pools = load_pools(ws.dir("gen-tasks"))
        cfg = ws.train_config()
        res = meta.pretrain(g, store, pools, cfg, horizon=_horizon(ws), checkpoint_dir=out / "checkpoints")
        res.params.save(out / "encoder")
        res.save_history(out / "loss.csv")
        with open(out / "train.json", "w") as f:
            json.dump({"config": cfg.to_dict(), "pools": sorted(pools), "steps": len(res.history)}, f, indent=1)

    ws.run("pretrain", go)


def _encoder(ws: Workspace) -> encoder.GraphEncoder:
    params = encoder.EncoderParams.load(ws.dir("pretrain") / "encoder")
    cfg = ws.train_config()
    return encoder.GraphEncoder(ws.graph(), ws.attrs(), params, cfg.fanouts, cfg.use_reverse)


def _budgets(task: evaluate.DownstreamTask, shots: list) -> list:
    out = []
    for k in shots:
        if k == evaluate.SUFFICIENT:
            out.append(k)
        elif task.kind == evaluate.REGRESSION and int(k) < 2:
            continue   # a regression head needs at least two targets
        else:
            out.append(int(k))
    return out


def stage_adapt(ws: Workspace) -> None:
    ac = ws.cfg["adapt"]

    def go(out: Path):
        enc = _encoder(ws)
        ds = ws.downstream()[0]
        for name in ac["tasks"]:
            if name not in ds:
                raise ConfigError(f"adapt.tasks names unknown task {name!r} ({sorted(ds)})")
            task = ds[name]
            for k in _budgets(task, ac["shots"]):
                for seed in ac["seeds"]:
                    rows = adapt_predictions(enc, task, k, int(seed), ac["head_epochs"], ac["head_lr"])
                    with open(out / f"pred-{name}-k{k}-s{seed}.csv", "w", newline="") as f:
                        w = csv.writer(f, lineterminator="\n")
                        w.writerow(["node", "t_ref", "target", "prediction", "regime"])
                        w.writerows(rows)

    ws.run("adapt", go)


def adapt_predictions(enc, task: evaluate.DownstreamTask, k, seed: int, epochs: int, lr: float) -> list[tuple]:
    """Test-split rows (node, t_ref, target, prediction, regime); regression targets on the normalized scale."""
    support = task.train if k == evaluate.SUFFICIENT else task.few_shot(int(k), seed)
    t_nodes, t_times, t_y = evaluate.DownstreamTask.columns(task.test)
    if task.kind == evaluate.CLASSIFICATION and k != evaluate.SUFFICIENT:
        scores = evaluate.proto_classify(enc, task.node_type, support, task.test, seed)
        regime, target = "prototype", t_y
    else:
        s_nodes, s_times, s_y = evaluate.DownstreamTask.columns(support)
        head = evaluate.finetune_head(enc.embed_numpy(task.node_type, s_nodes, s_times, seed), s_y, task.kind,
                                      epochs, lr, seed)
        scores = head.predict(enc.embed_numpy(task.node_type, t_nodes, t_times, seed + 1))
        regime = "finetune"
        target = t_y if task.kind == evaluate.CLASSIFICATION else head.normalize(t_y)
    return [(int(n), int(t), repr(float(y)), repr(float(s)), regime)
            for n, t, y, s in zip(t_nodes, t_times, target, scores)]


def stage_eval(ws: Workspace) -> None:
    def go(out: Path):
        ds = ws.downstream()[0]
        records = []
        for f in sorted(ws.dir("adapt").glob("pred-*.csv")):
            name, k, seed = f.stem[len("pred-"):].rsplit("-", 2)
            with open(f, newline="") as fh:
                rows = list(csv.DictReader(fh))
            y = np.array([float(r["target"]) for r in rows])
            p = np.array([float(r["prediction"]) for r in rows])
            kind = ds[name].kind
            k_val = k[1:] if k[1:] == evaluate.SUFFICIENT else int(k[1:])
            if kind == evaluate.CLASSIFICATION:
                metric, value = "roc_auc", evaluate.roc_auc(p, y)
            else:
                metric, value = "mae", evaluate.mae(p, y)
            records.append(evaluate.EvalRecord(name, rows[0]["regime"], k_val, metric, value, int(seed[1:])).to_dict())
        records.sort(key=lambda r: (r["task"], str(r["k"]), r["seed"]))
        with open(out / "results.json", "w") as fh:
            json.dump({"mode": ws.mode, "records": records}, fh, indent=1)
        with open(out / "per_seed.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task", "regime", "k", "metric", "seed", "value"])
            for r in records:
                w.writerow([r["task"], r["regime"], r["k"], r["metric"], r["seed"], repr(r["value"])])
        # representation quality of classification test embeddings
        enc = _encoder(ws)
        with open(out / "alignment_uniformity.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task", "alignment", "uniformity"])
            for name, t in sorted(ds.items()):
                if t.kind != evaluate.CLASSIFICATION:
                    continue
                nodes, times, y = evaluate.DownstreamTask.columns(t.test)
                a, u = evaluate.alignment_uniformity(enc.embed_numpy(t.node_type, nodes, times, 0), y)
                w.writerow([name, repr(a), repr(u)])
        shutil.copy(ws.dir("pretrain") / "loss.csv", out / "loss.csv")

    ws.run("eval", go)


def stage_report(ws: Workspace) -> None:
    evals = sorted(p for p in (ws.root / "eval").glob("*/results.json")) if (ws.root / "eval").exists() else []
    if not evals:
        raise StaleArtifact("no evaluation results under eval/; run `relmeta eval`")
    out = ws.root / "report"
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    rows = []
    inputs = {}
    for p in evals:
        mode = p.parent.name
        ws_mode = Workspace(ws.root, ws.cfg, mode, log=lambda *_: None)
        inputs[f"eval/{mode}"] = ws_mode.check_current("eval")
        with open(p) as f:
            records = json.load(f)["records"]
        groups: dict[tuple, list[float]] = {}
        for r in records:
            groups.setdefault((r["task"], r["regime"], str(r["k"]), r["metric"]), []).append(r["value"])
        for (task, regime, k, metric), vals in sorted(groups.items()):
            v = np.array(vals)
            rows.append([mode, task, regime, k, metric, len(v), float(np.median(v)), float(v.mean()), float(v.std())])
        for name in ("loss.csv", "alignment_uniformity.csv"):
            shutil.copy(p.parent / name, out / f"{mode}-{name}")
    header = ["pool", "task", "regime", "k", "metric", "n", "median", "mean", "std"]
    with open(out / "results.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(r[:6] + [f"{x:.6f}" for x in r[6:]])
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(x) if not isinstance(x, float) else f"{x:.4f}" for x in r) + " |" for r in rows]
    (out / "results.md").write_text("\n".join(lines) + "\n")
    doc = {"stage": "report", "inputs": inputs, "config": ws.config_hash("report"), "seed": ws.cfg["seed"],
           "outputs": hash_dir(out)}
    with open(out / STAGE_FILE, "w") as f:
        json.dump(doc, f, indent=1)
    ws.log((out / "results.md").read_text().rstrip())


# ---------------------------------------------------------------------------

ORDER = ["synth", "ingest", "build-graph", "build-attrs", "gen-tasks", "pretrain", "adapt", "eval", "report"]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="relmeta", description=__doc__.splitlines()[0])
    ap.add_argument("stage", choices=ORDER + ["all"], help="pipeline stage to run ('all' runs the chain)")
    ap.add_argument("--workspace", "-w", default=os.environ.get("WORKSPACE"),
                    help="artifact directory (default: $WORKSPACE)")
    ap.add_argument("--config", "-c", help=f"JSON config file (default: <workspace>/{CONFIG_NAME} if present)")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override one config value (JSON-parsed); repeatable")
    ap.add_argument("--seed", type=int, help="global seed")
    ap.add_argument("--mode", choices=["clustered", "randomized", "ground-truth"],
                    help="pseudo-task pool type (gen-tasks and later stages)")
    ap.add_argument("--threads", type=int, default=1, help="cap on worker and BLAS threads")
    ap.add_argument("--force", action="store_true", help="rerun even when up to date")
    ap.add_argument("--quiet", "-q", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if not args.workspace:
        print("error: no workspace (pass --workspace or set WORKSPACE)", file=sys.stderr)
        return EXIT_CONFIG
    root = Path(args.workspace)
    root.mkdir(parents=True, exist_ok=True)
    log = (lambda *_: None) if args.quiet else (lambda msg: print(msg, flush=True))
    try:
        cfg_path = Path(args.config) if args.config else root / CONFIG_NAME
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.mode is not None:
            overrides.append(f"tasks.mode={json.dumps(args.mode)}")
        cfg = load_config(cfg_path, overrides)
        if cfg["tasks"]["mode"] not in ("clustered", "randomized", "ground-truth"):
            raise ConfigError(f"tasks.mode must be clustered, randomized or ground-truth, got {cfg['tasks']['mode']!r}")
        ws = Workspace(root, cfg, cfg["tasks"]["mode"], args.force, log)
        stages = ORDER if args.stage == "all" else [args.stage]
        with threadpool_limits(limits=max(1, args.threads)):
            for s in stages:
                run_stage(ws, s, max(1, args.threads))
    except (ConfigError, ValueError, KeyError, TypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (StaleArtifact, rdb.RDBError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STALE
    except (meta.NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def run_stage(ws: Workspace, stage: str, threads: int) -> None:
    if stage == "synth":
        stage_synth(ws)
    elif stage == "ingest":
        stage_ingest(ws)
    elif stage == "build-graph":
        stage_graph(ws)
    elif stage == "build-attrs":
        stage_attrs(ws)
    elif stage == "gen-tasks":
        stage_tasks(ws, threads)
    elif stage == "pretrain":
        stage_pretrain(ws)
    elif stage == "adapt":
        stage_adapt(ws)
    elif stage == "eval":
        stage_eval(ws)
    elif stage == "report":
        stage_report(ws)


if __name__ == "__main__":
    sys.exit(main())
