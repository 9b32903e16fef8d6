"""Hybrid parameter-plus-logits federated rounds.

One round: sample participants; each participant replaces its shared layers
with the server average and retrains on the public set against the averaged
logits (skipped in round 0, when no aggregate exists yet); then it trains on
its private shard, evaluates the public set and uploads shared parameters and
logits; the server averages both.

All randomness comes from streams keyed by (seed, purpose, client, round), so
the order in which client updates are computed does not matter.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import _rng
from . import nn
from .diagnostics.metrics import ConfusionCounts, MetricsRecord, confusion
from .exceptions import InvariantError, NonFiniteError, ShapeError

EVAL_CHUNK = 512


@dataclass(frozen=True)
class RoundConfig:
    """Protocol hyperparameters.

    ``e1``/``lr1`` drive the public-set consensus steps and ``e2``/``lr2`` the
    private-set steps; one step is one minibatch update. ``batch_size=None``
    means full-batch steps.
    """

    rounds: int = 10
    n_clients: int = 8
    participation: float = 1.0
    e1: int = 20
    e2: int = 10
    lr1: float = 1e-3
    lr2: float = 1e-3
    lam: float = 0.5
    batch_size: int | None = 64
    optimizer: str = nn.ADAM
    seed: int = 0
    public_ce: bool = True
    check_invariants: bool = False
    track_consensus: bool = False
    track_objective: bool = True

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.e1 < 0 or self.e2 < 0:
            raise ValueError("e1 and e2 must be >= 0")
        if not 0.0 < self.participation <= 1.0:
            raise ValueError("participation must lie in (0, 1]")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1 or None")


@dataclass(frozen=True)
class ClientModel:
    client_id: int
    spec: nn.ModelSpec
    params: dict
    opt: nn.OptimizerState
    seed: int = 0


@dataclass(frozen=True)
class LogitsMatrix:
    values: np.ndarray
    source: int | str = "aggregated"


@dataclass(frozen=True)
class ServerState:
    w_bar: dict | None = None
    f_bar: LogitsMatrix | None = None
    t: int = 0


@dataclass
class ClientRoundInfo:
    client_id: int
    consensus_losses: list = field(default_factory=list)
    local_losses: list = field(default_factory=list)


@dataclass
class RoundResult:
    t: int
    participants: list
    clients: dict = field(default_factory=dict)  # id -> ClientRoundInfo
    invariant_checked: bool = False


def make_clients(spec, n_clients, seed, optimizer=nn.ADAM, lr=1e-3, wide_spec=None):
    """Initialise ``n_clients`` models; odd ids get ``wide_spec`` when it is given."""
    clients = []
    for i in range(n_clients):
        s = wide_spec if (wide_spec is not None and i % 2 == 1) else spec
        params = nn.init_params(s, seed, i)
        clients.append(ClientModel(i, s, params, nn.make_optimizer(optimizer, params, lr), seed))
    return clients


# ---------------------------------------------------------------- sampling

def sample_clients(n_clients, participation, t, seed):
    """Participants of round ``t``, ascending.

    ``k = max(1, round_half_up(participation * n))`` ids are chosen by the
    first ``k`` swaps of a Fisher-Yates shuffle of ``0..n-1`` driven by
    ``keyed_rng(seed, SAMPLING, t)``: swap slot ``i`` with ``i + integers(n - i)``.
    """
    k = max(1, min(n_clients, _rng.round_half_up(participation * n_clients)))
    if k == n_clients:
        return list(range(n_clients))
    rng = _rng.keyed_rng(seed, _rng.SAMPLING, t)
    ids = list(range(n_clients))
    for i in range(k):
        j = i + int(rng.integers(n_clients - i))
        ids[i], ids[j] = ids[j], ids[i]
    return sorted(ids[:k])


def minibatches(n, batch_size, steps, rng):
    """Index arrays for ``steps`` updates.

    Full batch (natural order, no randomness) when ``batch_size`` is None or
    covers the data; otherwise consecutive slices of reshuffled epochs.
    """
    if batch_size is None or batch_size >= n:
        full = np.arange(n)
        for _ in range(steps):
            yield full
        return
    perm = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            perm = rng.permutation(n)
            pos = 0
        yield perm[pos:pos + batch_size]
        pos += batch_size


def train_steps(c, images, labels, steps, lr, batch_size, rng, *, target=None, lam=0.0, ce=True,
                prox_center=None, mu=0.0, track=False, phase="local"):
    """Run ``steps`` optimizer updates; return ``(client, losses)``.

    ``prox_center``/``mu`` add the proximal gradient ``mu * (w - center)``.
    With ``track`` the loss after the final step is appended too, so the list
    has ``steps + 1`` entries.
    """
    if steps == 0:
        return c, []
    params, opt = c.params, replace(c.opt, lr=lr)
    losses = []
    for k, idx in enumerate(minibatches(len(labels), batch_size, steps, rng)):
        tgt = None if target is None else target[idx]
        try:
            loss, grads = nn.value_and_grad(c.spec, params, images[idx], labels[idx], tgt, lam, ce)
        except NonFiniteError as exc:
            raise NonFiniteError(f"client {c.client_id} {phase} step {k}: {exc}", exc.where) from exc
        if prox_center is not None and mu > 0:
            grads = {n: nn.LayerParams(g.weight + mu * (params[n].weight - prox_center[n].weight),
                                       g.bias + mu * (params[n].bias - prox_center[n].bias))
                     for n, g in grads.items()}
        losses.append(loss)
        params, opt = nn.step(params, grads, opt)
    if track:
        idx = next(minibatches(len(labels), None, 1, rng))
        losses.append(nn.loss_value(c.spec, params, images[idx], labels[idx],
                                    None if target is None else target[idx], lam, ce))
    return replace(c, params=params, opt=opt), losses


# ---------------------------------------------------------------- client side

def client_local_train(c, shard, e2, lr2, batch_size, t=0, *, prox_center=None, mu=0.0, track=False):
    """``e2`` steps of supervised training on the private shard."""
    if len(shard) == 0:
        raise ValueError(f"client {c.client_id} has an empty shard")
    rng = _rng.keyed_rng(c.seed, _rng.LOCAL, c.client_id, t)
    return train_steps(c, shard.images, shard.y, e2, lr2, batch_size, rng,
                       prox_center=prox_center, mu=mu, track=track, phase="local")


def predict_logits(spec, params, images):
    out = [nn.forward(spec, params, images[i:i + EVAL_CHUNK]) for i in range(0, len(images), EVAL_CHUNK)]
    return np.concatenate(out) if out else np.zeros((0, spec.n_classes))


def client_eval_public(c, public):
    """Logits of every public sample under the client's current model."""
    if len(public) == 0:
        raise ValueError("public dataset is empty")
    return LogitsMatrix(predict_logits(c.spec, c.params, public.images), c.client_id)


def apply_consensus_params(c, w_bar):
    """Overwrite the shared layers with ``w_bar`` and zero their Adam moments."""
    if w_bar is None:
        return c
    shared = c.spec.shared_layer_names
    if set(w_bar) != set(shared):
        raise ShapeError(f"client {c.client_id}: aggregate has layers {sorted(w_bar)}, "
                         f"model shares {sorted(shared)}")
    params = dict(c.params)
    for name, p in w_bar.items():
        own = params[name]
        if own.weight.shape != p.weight.shape or own.bias.shape != p.bias.shape:
            raise ShapeError(f"shared layer {name} shape mismatch", name)
        params[name] = p
    return replace(c, params=params, opt=nn.reset_moments(c.opt, w_bar.keys()))


def consensus_train(c, f_bar, public, e1, lr1, lam, batch_size, t=0, *, public_ce=True, track=False):
    """``e1`` steps on the public set minimising ``CE(labels) + lam * MSE(logits, f_bar)``."""
    target = None
    if f_bar is not None:
        target = f_bar.values
        if target.shape[0] != len(public):
            raise ShapeError(f"aggregated logits have {target.shape[0]} rows, public set has {len(public)}")
    if not public_ce and target is None:
        return c, []
    rng = _rng.keyed_rng(c.seed, _rng.PUBLIC, c.client_id, t)
    return train_steps(c, public.images, public.y, e1, lr1, batch_size, rng, target=target,
                       lam=lam, ce=public_ce, track=track, phase="consensus")


def client_consensus_update(c, w_bar, f_bar, public, e1, lr1, lam, batch_size, t=0, *,
                            public_ce=True, track=False):
    c = apply_consensus_params(c, w_bar)
    return consensus_train(c, f_bar, public, e1, lr1, lam, batch_size, t,
                           public_ce=public_ce, track=track)


# ---------------------------------------------------------------- server side

def aggregate_logits(ms):
    """Entrywise mean, folded in ascending client-id order."""
    if not ms:
        raise ValueError("no logits to aggregate")
    ordered = sorted(ms, key=lambda m: (isinstance(m.source, str), m.source))
    shape = ordered[0].values.shape
    acc = np.zeros(shape)
    for m in ordered:
        if m.values.shape != shape:
            raise ShapeError(f"logits of client {m.source} have shape {m.values.shape}, expected {shape}")
        acc = acc + m.values
    return LogitsMatrix(acc / len(ordered), "aggregated")


def aggregate_shared_params(ps):
    """Per-entry mean of parameter maps (a list, or a dict folded in key order)."""
    if isinstance(ps, dict):
        ps = [ps[k] for k in sorted(ps)]
    if not ps:
        raise ValueError("no parameters to aggregate")
    keys = list(ps[0])
    for p in ps[1:]:
        if set(p) != set(keys):
            raise ShapeError(f"shared layer sets differ: {sorted(keys)} vs {sorted(p)}")
    out = {}
    for name in keys:
        ref = ps[0][name]
        acc_w, acc_b = np.zeros(ref.weight.shape), np.zeros(ref.bias.shape)
        for p in ps:
            if p[name].weight.shape != ref.weight.shape or p[name].bias.shape != ref.bias.shape:
                raise ShapeError(f"shared layer {name} shape mismatch", name)
            acc_w = acc_w + p[name].weight
            acc_b = acc_b + p[name].bias
        out[name] = nn.LayerParams(acc_w / len(ps), acc_b / len(ps))
    return out


def shared_params(c):
    return {n: c.params[n] for n in c.spec.param_layer_names if n in c.spec.shared_layer_names}


def run_round(state, clients, public, shards, cfg):
    """Advance the federation by one round.

    ``clients`` is a list (any order) or dict keyed by client id. Returns
    ``(state, clients, RoundResult)`` with clients as a list in id order.
    Non-participants are left untouched and download the aggregate the next
    time they are sampled.
    """
    by_id = dict(clients) if isinstance(clients, dict) else {c.client_id: c for c in clients}
    t = state.t
    if t >= cfg.rounds:
        raise ValueError(f"round {t} is past the configured {cfg.rounds} rounds")
    participants = sample_clients(len(by_id), cfg.participation, t, cfg.seed)
    result = RoundResult(t, participants)
    have_aggregate = state.f_bar is not None or state.w_bar is not None
    order = [c.client_id for c in (clients.values() if isinstance(clients, dict) else clients)]
    replaced = {}
    for i in order:
        if i not in participants:
            continue
        c = by_id[i]
        info = ClientRoundInfo(i)
        if have_aggregate:
            c = apply_consensus_params(c, state.w_bar)
            if cfg.check_invariants and state.w_bar:
                _assert_shared_equal(c, state.w_bar, t)
                replaced[i] = shared_params(c)
            c, info.consensus_losses = consensus_train(
                c, state.f_bar, public, cfg.e1, cfg.lr1, cfg.lam, cfg.batch_size, t,
                public_ce=cfg.public_ce, track=cfg.track_consensus)
        c, info.local_losses = client_local_train(c, shards[i], cfg.e2, cfg.lr2, cfg.batch_size, t)
        by_id[i] = c
        result.clients[i] = info
    if replaced:
        _assert_identical_across(replaced, t)
        result.invariant_checked = True
    logits = [client_eval_public(by_id[i], public) for i in participants]
    f_bar = aggregate_logits(logits)
    uploads = [shared_params(by_id[i]) for i in participants]
    w_bar = aggregate_shared_params(uploads) if uploads[0] else None
    new_state = ServerState(w_bar, f_bar, t + 1)
    return new_state, [by_id[k] for k in sorted(by_id)], result


def _assert_shared_equal(c, w_bar, t):
    for name, p in w_bar.items():
        own = c.params[name]
        if not (np.array_equal(own.weight, p.weight) and np.array_equal(own.bias, p.bias)):
            raise InvariantError(f"round {t}: client {c.client_id} layer {name} differs from the aggregate")


def _assert_identical_across(replaced, t):
    ids = sorted(replaced)
    ref = replaced[ids[0]]
    for i in ids[1:]:
        if not nn.params_equal(ref, replaced[i]):
            raise InvariantError(f"round {t}: shared layers of clients {ids[0]} and {i} differ after replacement")


# ---------------------------------------------------------------- objective and evaluation

def eval_objective(clients, w_bar, f_bar, public, lam):
    """Mean over clients of ``CE(public) + lam * MSE(logits, f_bar)`` with shared layers set to ``w_bar``.

    The distillation term is omitted when ``f_bar`` is None.
    """
    total = 0.0
    clients = list(clients.values()) if isinstance(clients, dict) else list(clients)
    for c in clients:
        params = dict(c.params)
        if w_bar:
            params.update({k: v for k, v in w_bar.items() if k in params})
        logits = predict_logits(c.spec, params, public.images)
        value = nn.loss_ce(logits, public.y)
        if f_bar is not None and lam:
            value += lam * nn.loss_distill(logits, f_bar.values)
        total += value
    return total / len(clients)


def evaluate_clients(clients, test):
    """Confusion counts pooled over every client's predictions on ``test``."""
    counts = ConfusionCounts()
    for c in clients:
        pred = predict_logits(c.spec, c.params, test.images).argmax(axis=1)
        counts = counts + confusion(test.y, pred)
    return counts


@dataclass
class RunResult:
    records: list
    clients: list
    state: ServerState | None = None
    rounds: list = field(default_factory=list)


def run_fedkd_hybrid(cfg, clients, public, shards, test):
    """Run ``cfg.rounds`` rounds and record test metrics after each one."""
    state = ServerState()
    records, rounds = [], []
    for _ in range(cfg.rounds):
        start = time.perf_counter()
        state, clients, result = run_round(state, clients, public, shards, cfg)
        objective = (eval_objective(clients, state.w_bar, state.f_bar, public, cfg.lam)
                     if cfg.track_objective else None)
        counts = evaluate_clients(clients, test)
        records.append(MetricsRecord.from_counts(result.t, counts, objective, len(result.participants),
                                                 time.perf_counter() - start))
        rounds.append(result)
    return RunResult(records, clients, state, rounds)
