"""Experiment orchestration and persistence.

``run_experiment`` turns an :class:`ExperimentConfig` into a finished run;
``write_run`` stores it as metrics.csv, timing.csv and manifest.json. Wall
time only ever goes to timing.csv, so metrics.csv and manifest.json are
byte-identical across replays of the same config and seed.
"""
from __future__ import annotations

import csv
import json
import statistics
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, _rng, data, nn
from .baselines import run_fedavg, run_fedmd, run_fedprox, run_local
from .diagnostics import CNNProblem, estimate_constants, estimate_public_gap
from .exceptions import ConfigError, DatasetFormatError
from .protocol import make_clients, run_fedkd_hybrid

METRICS_HEADER = ("round", "algorithm", "seed", "accuracy", "tpr", "fpr", "objective", "participants")
DATA_FILES = ("public", "private", "test")
DIAG_RADIUS = 0.1


@dataclass
class ExperimentData:
    public: data.Dataset
    private: data.Dataset
    test: data.Dataset
    shards: list


def generate_pool(n_train, hotspot_rate, n_test, test_hotspot_rate, public_fraction, seed):
    """Synthetic (public, private, test); train and test come from separate streams."""
    pool = data.generate_synthetic(n_train, hotspot_rate, seed, "train", stream=0)
    public, private = data.split_public_private(pool, public_fraction, seed)
    test = data.generate_synthetic(n_test, test_hotspot_rate, seed, "test", stream=1)
    return pool, data.Dataset(public.X, public.y, "public"), data.Dataset(private.X, private.y, "private"), test


def load_data_dir(path):
    path = Path(path)
    out = []
    for name in DATA_FILES:
        f = path / f"{name}.lhd"
        if not f.is_file():
            raise DatasetFormatError(f"missing dataset file {f}")
        out.append(data.load_dataset(f, name))
    return tuple(out)


def prepare_data(cfg):
    if cfg.data_dir:
        public, private, test = load_data_dir(cfg.data_dir)
    else:
        _, public, private, test = generate_pool(cfg.n_train, cfg.hotspot_rate, cfg.n_test,
                                                 cfg.test_hotspot_rate, cfg.public_fraction, cfg.seed)
    plan = data.partition(private, cfg.n_clients, cfg.partition,
                          cfg.alpha if cfg.partition == "dirichlet" else None, cfg.seed)
    return ExperimentData(public, private, test, plan.shards(private))


def build_clients(cfg):
    build = nn.ARCHITECTURES[cfg.architecture]
    spec = build(cfg.shared)
    wide = build(cfg.shared, wide=True) if cfg.heterogeneous else None
    return make_clients(spec, cfg.n_clients, cfg.seed, cfg.optimizer, cfg.lr2, wide)


def run_algorithm(cfg, clients, d, round_config=None):
    rc = round_config or cfg.round_config()
    if cfg.algorithm == "fedkd-hybrid":
        return run_fedkd_hybrid(rc, clients, d.public, d.shards, d.test)
    if cfg.algorithm == "fedmd":
        return run_fedmd(rc, clients, d.shards, d.public, d.test)
    if cfg.algorithm == "fedavg":
        return run_fedavg(rc, clients, d.shards, d.test, d.public)
    if cfg.algorithm == "fedprox":
        return run_fedprox(rc, clients, d.shards, d.test, d.public, cfg.mu)
    if cfg.algorithm == "local":
        return run_local(rc, clients, d.shards, d.test, d.public)
    raise ConfigError(f"unknown algorithm {cfg.algorithm!r}")


def final_model(cfg, result):
    """``(spec, params)`` of the model the constants are measured at: the global model
    for parameter averaging, client 0 otherwise."""
    c0 = result.clients[0]
    if cfg.algorithm in ("fedavg", "fedprox") and result.state is not None and result.state.w_bar:
        return c0.spec, result.state.w_bar
    return c0.spec, c0.params


def _head(dataset, k):
    return dataset.subset(np.arange(min(k, len(dataset))))


def model_constants(cfg, spec, params, public, private_shard, seed):
    """Sampled constants of the CNN objective around ``params``.

    Smoothness, gradient and variance constants use the first ``diag_samples``
    public clips, with the model's own logits as distillation targets. The
    minibatch variance uses ``min(batch_size, diag_samples // 2)`` so it is
    not trivially zero on the small sample. ``M_l``/``M_d`` compare the
    private shard with the public clips at the same points.
    """
    pub = _head(public, cfg.diag_samples)
    priv = _head(private_shard, cfg.diag_samples)
    pub_problem = CNNProblem.with_teacher(spec, params, pub, cfg.lam)
    batch = max(1, min(cfg.batch_size or cfg.diag_samples, cfg.diag_samples // 2))
    constants = estimate_constants(pub_problem, cfg.lam, cfg.diag_pairs, seed, radius=DIAG_RADIUS,
                                   batch_size=batch)
    priv_problem = CNNProblem.with_teacher(spec, params, priv, cfg.lam)
    constants.M_l, constants.M_d = estimate_public_gap(priv_problem, pub_problem, n_points=cfg.diag_pairs,
                                                       seed=seed, radius=DIAG_RADIUS)
    return constants


@dataclass
class ExperimentRun:
    config: object
    result: object
    constants: object

    @property
    def records(self):
        return self.result.records


def run_experiment(cfg, d=None):
    d = d if d is not None else prepare_data(cfg)
    clients = build_clients(cfg)
    result = run_algorithm(cfg, clients, d)
    spec, params = final_model(cfg, result)
    constants = model_constants(cfg, spec, params, d.public, d.shards[0], cfg.seed)
    return ExperimentRun(cfg, result, constants)


# ---------------------------------------------------------------- persistence

def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def metrics_rows(run):
    cfg = run.config
    for r in run.records:
        yield (r.round, cfg.algorithm, cfg.seed, _fmt(r.accuracy), _fmt(r.tpr), _fmt(r.fpr),
               _fmt(r.objective), r.participants)


def manifest(run):
    cfg = run.config
    return {
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "algorithm": cfg.algorithm,
        "records": [r.as_dict(with_time=False) for r in run.records],
        "constants": run.constants.as_dict() if run.constants is not None else None,
        "version": f"fedkd {__version__}",
        "config": {line.split(" = ", 1)[0]: line.split(" = ", 1)[1]
                   for line in cfg.canonical_text().splitlines()},
    }


def write_run(run, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(metrics_rows(run))
    with open(out / "timing.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("round", "wall_time"))
        w.writerows((r.round, f"{r.wall_time:.6f}") for r in run.records)
    (out / "manifest.json").write_text(json.dumps(manifest(run), indent=2) + "\n", encoding="utf-8")
    return out


def write_datasets(out_dir, public, private, test):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, d in zip(DATA_FILES, (public, private, test)):
        data.save_dataset(d, out / f"{name}.lhd")
    return out


# ---------------------------------------------------------------- comparison

SUMMARY_HEADER = ("algorithm", "config_hash", "n_seeds", "accuracy", "tpr", "fpr")


def _median(values):
    vals = [v for v in values if v is not None]
    return statistics.median(vals) if vals else None


def find_manifests(root):
    root = Path(root)
    if root.is_file():
        return [root]
    return sorted(root.rglob("manifest.json"))


def summarize(manifests):
    """Final-round accuracy/TPR/FPR per (algorithm, config hash), median over seeds.

    Rows are sorted by algorithm name, then config hash.
    """
    groups = {}
    for path in manifests:
        m = json.loads(Path(path).read_text(encoding="utf-8"))
        if not m.get("records"):
            continue
        groups.setdefault((m["algorithm"], m["config_hash"]), []).append(m["records"][-1])
    rows = []
    for (alg, h), finals in sorted(groups.items()):
        rows.append({"algorithm": alg, "config_hash": h, "n_seeds": len(finals),
                     **{k: _median([f[k] for f in finals]) for k in ("accuracy", "tpr", "fpr")}})
    return rows


def format_summary(rows):
    lines = [f"{'algorithm':<14s} {'config':<12s} {'seeds':>5s} {'accuracy':>9s} {'tpr':>9s} {'fpr':>9s}"]
    for r in rows:
        vals = " ".join(f"{_fmt(r[k]) or '-':>9s}" for k in ("accuracy", "tpr", "fpr"))
        lines.append(f"{r['algorithm']:<14s} {r['config_hash'][:12]:<12s} {r['n_seeds']:5d} {vals}")
    return "\n".join(lines)


def write_summary(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in rows:
            w.writerow((r["algorithm"], r["config_hash"], r["n_seeds"],
                        _fmt(r["accuracy"]), _fmt(r["tpr"]), _fmt(r["fpr"])))


# ---------------------------------------------------------------- gradcheck helper

def jittered_params(spec, seed, scale=0.1):
    """Glorot weights with biases drawn from ``U(-scale, scale)``.

    Zero biases on binary inputs put many ReLU inputs exactly at the kink,
    where finite differences are meaningless.
    """
    params = nn.init_params(spec, seed)
    rng = _rng.keyed_rng(seed, _rng.DIAG, 3)
    return {k: nn.LayerParams(p.weight, rng.uniform(-scale, scale, p.bias.shape)) for k, p in params.items()}


def gradcheck_batch(spec, seed, n=2):
    """``n`` synthetic clips (both classes) plus random distillation targets."""
    d = data.generate_synthetic(n, 0.5, seed, "gradcheck", stream=2)
    target = _rng.keyed_rng(seed, _rng.DIAG, 4).standard_normal((n, spec.n_classes))
    return d.images, d.y, target
