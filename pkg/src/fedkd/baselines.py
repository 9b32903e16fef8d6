"""Comparison algorithms run on the same engine, data and seeds as the hybrid protocol.

* FedAvg: local steps, then every parameter is averaged and broadcast.
* FedProx: FedAvg with ``mu * (w - w_global)`` added to local gradients.
* FedMD: logits-only transfer over the public set, no parameter sharing.
* Local: no communication at all.

Round-0 conventions match :func:`fedkd.protocol.run_round`: nothing is
downloaded before the first aggregate exists.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

from .diagnostics.metrics import MetricsRecord
from .exceptions import ConfigError
from .protocol import (
    RunResult,
    ServerState,
    aggregate_logits,
    aggregate_shared_params,
    apply_consensus_params,
    client_eval_public,
    client_local_train,
    consensus_train,
    eval_objective,
    evaluate_clients,
    sample_clients,
)

ALGORITHMS = ("fedkd-hybrid", "fedavg", "fedprox", "fedmd", "local")
DEFAULT_MU = 0.01


@dataclass(frozen=True)
class BaselineConfig:
    algorithm: str = "fedavg"
    mu: float = DEFAULT_MU

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.mu < 0:
            raise ConfigError("mu must be >= 0")


def _require_homogeneous(clients):
    first = clients[0].spec
    for c in clients[1:]:
        if c.spec.layers != first.layers or c.spec.input_shape != first.input_shape:
            raise ConfigError(f"parameter averaging needs identical architectures; client {c.client_id} differs")


def _record(t, evaluated, objective, n_part, start, test):
    counts = evaluate_clients(evaluated, test)
    return MetricsRecord.from_counts(t, counts, objective, n_part, time.perf_counter() - start)


def _param_averaging(cfg, clients, shards, test, public, mu):
    """Shared loop of FedAvg and FedProx."""
    clients = list(clients)
    _require_homogeneous(clients)
    everything = frozenset(clients[0].spec.param_layer_names)
    clients = [replace(c, spec=c.spec.with_shared(everything)) for c in clients]
    global_params = None
    records = []
    for t in range(cfg.rounds):
        start = time.perf_counter()
        part = sample_clients(len(clients), cfg.participation, t, cfg.seed)
        for i in part:
            c = apply_consensus_params(clients[i], global_params)
            clients[i], _ = client_local_train(c, shards[i], cfg.e2, cfg.lr2, cfg.batch_size, t,
                                               prox_center=global_params, mu=mu)
        global_params = aggregate_shared_params([clients[i].params for i in part])
        view = [replace(c, params=global_params) for c in clients]
        objective = None
        if cfg.track_objective and public is not None:
            objective = eval_objective(view[:1], None, None, public, cfg.lam)
        records.append(_record(t, view[:1], objective, len(part), start, test))
    return RunResult(records, clients, ServerState(global_params, None, cfg.rounds))


def run_fedavg(cfg, clients, shards, test, public=None):
    """Local ``e2`` steps, then the full parameter mean becomes the global model."""
    return _param_averaging(cfg, clients, shards, test, public, 0.0)


def run_fedprox(cfg, clients, shards, test, public=None, mu=DEFAULT_MU):
    """FedAvg whose local gradients carry the proximal term ``mu * (w - w_global)``."""
    if mu < 0:
        raise ConfigError("mu must be >= 0")
    return _param_averaging(cfg, clients, shards, test, public, mu)


def run_fedmd(cfg, clients, shards, public, test):
    """Logit averaging over the public set with distillation-only digestion.

    Each round the participants distil toward the mean public logits uploaded
    at the end of the previous round (``e1`` steps of ``lam * MSE``), train
    ``e2`` private steps, then upload fresh logits.
    """
    clients = list(clients)
    f_bar = None
    records = []
    for t in range(cfg.rounds):
        start = time.perf_counter()
        part = sample_clients(len(clients), cfg.participation, t, cfg.seed)
        for i in part:
            c = clients[i]
            if f_bar is not None:
                c, _ = consensus_train(c, f_bar, public, cfg.e1, cfg.lr1, cfg.lam, cfg.batch_size, t,
                                       public_ce=False)
            clients[i], _ = client_local_train(c, shards[i], cfg.e2, cfg.lr2, cfg.batch_size, t)
        f_bar = aggregate_logits([client_eval_public(clients[i], public) for i in part])
        objective = eval_objective(clients, None, f_bar, public, cfg.lam) if cfg.track_objective else None
        records.append(_record(t, clients, objective, len(part), start, test))
    return RunResult(records, clients, ServerState(None, f_bar, cfg.rounds))


def run_local(cfg, clients, shards, test, public=None):
    """Every client trains ``e2`` steps per round on its own shard; nothing is exchanged."""
    clients = list(clients)
    records = []
    for t in range(cfg.rounds):
        start = time.perf_counter()
        for i, c in enumerate(clients):
            clients[i], _ = client_local_train(c, shards[i], cfg.e2, cfg.lr2, cfg.batch_size, t)
        objective = None
        if cfg.track_objective and public is not None:
            objective = eval_objective(clients, None, None, public, cfg.lam)
        records.append(_record(t, clients, objective, len(clients), start, test))
    return RunResult(records, clients, None)
