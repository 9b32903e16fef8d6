"""Hybrid rounds: sampling, client steps, aggregation, consensus and full-round traces."""
import math
from dataclasses import replace

import numpy as np
import pytest

from fedkd import _rng, nn
from fedkd.exceptions import NonFiniteError, ShapeError
from fedkd.protocol import (
    LogitsMatrix,
    RoundConfig,
    ServerState,
    aggregate_logits,
    aggregate_shared_params,
    apply_consensus_params,
    client_consensus_update,
    client_eval_public,
    client_local_train,
    consensus_train,
    eval_objective,
    make_clients,
    minibatches,
    run_fedkd_hybrid,
    run_round,
    sample_clients,
    shared_params,
)

from conftest import make_client, scalar_dataset, scalar_spec, tiny_dataset, tiny_spec

SGD_CFG = dict(optimizer=nn.SGD, batch_size=None, lr1=0.05, lr2=0.05)


def _lp(w, b):
    return nn.LayerParams(np.array(w, dtype=float), np.array(b, dtype=float))


def _setup(n_clients=3, seed=0, shared=("Conv1", "FC3"), optimizer=nn.SGD, lr=0.05):
    spec = tiny_spec(shared)
    clients = make_clients(spec, n_clients, seed, optimizer, lr)
    shards = [tiny_dataset(6, 10 + i) for i in range(n_clients)]
    return spec, clients, shards, tiny_dataset(5, 99, "public")


# ---------------------------------------------------------------- sampling

def test_full_participation():
    assert sample_clients(5, 1.0, 0, 0) == [0, 1, 2, 3, 4]


def test_eighty_percent_of_hundred():
    for t in range(5):
        ids = sample_clients(100, 0.8, t, 3)
        assert len(ids) == len(set(ids)) == 80 and ids == sorted(ids)


def test_sampling_matches_reference_shuffle():
    rng = _rng.keyed_rng(7, _rng.SAMPLING, 0)
    ids = [0, 1, 2, 3]
    for i in range(2):
        j = i + int(rng.integers(4 - i))
        ids[i], ids[j] = ids[j], ids[i]
    assert sample_clients(4, 0.5, 0, 7) == sorted(ids[:2])


def test_sampling_minimum_one():
    assert len(sample_clients(3, 0.01, 0, 0)) == 1


def test_minibatches():
    full = list(minibatches(5, None, 2, None))
    assert [b.tolist() for b in full] == [[0, 1, 2, 3, 4]] * 2
    assert [b.tolist() for b in minibatches(5, 8, 1, None)] == [[0, 1, 2, 3, 4]]
    batches = list(minibatches(6, 2, 3, np.random.default_rng(0)))
    assert sorted(np.concatenate(batches).tolist()) == list(range(6))


def test_round_config_validation():
    for bad in (dict(rounds=0), dict(e1=-1), dict(participation=0.0), dict(lam=-0.1), dict(batch_size=0)):
        with pytest.raises(ValueError):
            RoundConfig(**bad)


# ---------------------------------------------------------------- local training

def test_zero_local_steps_is_noop():
    spec, clients, shards, _ = _setup()
    c, losses = client_local_train(clients[0], shards[0], 0, 0.1, None)
    assert c is clients[0] and losses == []


def test_one_sgd_step_closed_form():
    W, b, x, eta = np.array([[0.5, -0.25]]), np.array([0.1, 0.0]), 2.0, 0.1
    c = make_client(scalar_spec(), {"FC": nn.LayerParams(W, b)}, lr=eta)
    new, _ = client_local_train(c, scalar_dataset([x], [1]), 1, eta, None)
    z = x * W[0] + b
    p = np.exp(z) / np.exp(z).sum()
    dz = p - [0.0, 1.0]
    assert np.allclose(new.params["FC"].weight[0], W[0] - eta * x * dz, rtol=1e-15, atol=0)
    assert np.allclose(new.params["FC"].bias, b - eta * dz, rtol=1e-15, atol=0)


def test_full_batch_gd_is_non_increasing():
    spec, clients, shards, _ = _setup()
    _, losses = client_local_train(clients[0], shards[0], 10, 0.01, None, track=True)
    assert len(losses) == 11
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_local_training_deterministic_per_round_key():
    spec, clients, shards, _ = _setup(optimizer=nn.ADAM, lr=1e-3)
    a, _ = client_local_train(clients[0], shards[0], 4, 1e-3, 2, t=1)
    b, _ = client_local_train(clients[0], shards[0], 4, 1e-3, 2, t=1)
    c, _ = client_local_train(clients[0], shards[0], 4, 1e-3, 2, t=2)
    assert nn.params_equal(a.params, b.params) and not nn.params_equal(a.params, c.params)


def test_nonfinite_names_client_and_step():
    spec, clients, shards, _ = _setup()
    c = clients[1]
    bad = dict(c.params)
    bad["FC3"] = nn.LayerParams(c.params["FC3"].weight, np.array([np.nan, 0.0]))
    with pytest.raises(NonFiniteError, match="client 1 local step 0"):
        client_local_train(replace(c, params=bad), shards[1], 2, 0.1, None)


def test_empty_shard_rejected():
    spec, clients, shards, _ = _setup()
    with pytest.raises(ValueError):
        client_local_train(clients[0], shards[0].subset([]), 1, 0.1, None)


# ---------------------------------------------------------------- public evaluation

def test_zero_model_gives_zero_logits():
    spec, clients, _, public = _setup()
    c = replace(clients[0], params=nn.zeros_like_params(clients[0].params))
    m = client_eval_public(c, public)
    assert m.values.shape == (5, 2) and not m.values.any() and m.source == 0


def test_identical_params_identical_logits():
    spec, clients, _, public = _setup()
    twin = replace(clients[1], params=clients[0].params)
    assert np.array_equal(client_eval_public(clients[0], public).values, client_eval_public(twin, public).values)


def test_hand_set_single_layer_logits():
    c = make_client(scalar_spec(), {"FC": _lp([[2.0, -1.0]], [0.5, 0.25])})
    m = client_eval_public(c, scalar_dataset([3.0], [0]))
    assert m.values.tolist() == [[6.5, -2.75]]


# ---------------------------------------------------------------- aggregation

def test_aggregate_logits_examples():
    one = LogitsMatrix(np.array([[1.0, 3.0]]), 0)
    assert aggregate_logits([one]).values.tolist() == [[1.0, 3.0]]
    two = LogitsMatrix(np.array([[3.0, 5.0]]), 1)
    assert aggregate_logits([one, two]).values.tolist() == [[2.0, 4.0]]
    with pytest.raises(ValueError):
        aggregate_logits([])
    with pytest.raises(ShapeError):
        aggregate_logits([one, LogitsMatrix(np.zeros((2, 2)), 1)])


def test_aggregate_logits_permutation_bit_identical():
    rng = np.random.default_rng(0)
    ms = [LogitsMatrix(rng.standard_normal((7, 2)) * 10 ** k, k) for k in range(5)]
    ref = aggregate_logits(ms).values
    for perm in ([4, 3, 2, 1, 0], [2, 0, 4, 1, 3]):
        assert aggregate_logits([ms[i] for i in perm]).values.tobytes() == ref.tobytes()


def test_aggregate_params_examples():
    a = {"FC3": _lp([1.0, 3.0], [1.0])}
    b = {"FC3": _lp([3.0, 5.0], [3.0])}
    out = aggregate_shared_params([a, b])
    assert out["FC3"].weight.tolist() == [2.0, 4.0] and out["FC3"].bias.tolist() == [2.0]
    assert nn.params_equal(aggregate_shared_params([a, a]), a)
    assert nn.params_equal(aggregate_shared_params({1: b, 0: a}), aggregate_shared_params([a, b]))


def test_aggregate_params_shape_mismatch_names_layer():
    a = {"FC3": _lp([[1.0, 2.0]], [0.0, 0.0])}
    b = {"FC3": _lp([[1.0, 2.0], [3.0, 4.0]], [0.0, 0.0])}
    with pytest.raises(ShapeError, match="shared layer FC3 shape mismatch") as exc:
        aggregate_shared_params([a, b])
    assert exc.value.layer == "FC3"
    with pytest.raises(ShapeError):
        aggregate_shared_params([a, {"FC2": a["FC3"]}])


# ---------------------------------------------------------------- consensus update

def test_zero_consensus_steps_only_replace_shared_layers():
    spec, clients, _, public = _setup(optimizer=nn.ADAM, lr=1e-3)
    c = clients[0]
    w_bar = {n: nn.LayerParams(p.weight + 1.0, p.bias - 1.0) for n, p in shared_params(clients[1]).items()}
    f_bar = LogitsMatrix(np.ones((5, 2)))
    new, losses = client_consensus_update(c, w_bar, f_bar, public, 0, 1e-3, 0.7, None)
    assert losses == []
    for n in spec.param_layer_names:
        expect = w_bar[n] if n in w_bar else c.params[n]
        assert np.array_equal(new.params[n].weight, expect.weight)


def test_replacement_resets_only_shared_moments():
    spec, clients, shards, _ = _setup(optimizer=nn.ADAM, lr=1e-3)
    c, _ = client_local_train(clients[0], shards[0], 2, 1e-3, None)
    new = apply_consensus_params(c, shared_params(clients[1]))
    assert not new.opt.m["Conv1"].weight.any() and not new.opt.v["FC3"].bias.any()
    assert np.array_equal(new.opt.m["FC1"].weight, c.opt.m["FC1"].weight)
    assert new.opt.t == c.opt.t == 2


def test_replacement_rejects_wrong_layers():
    spec, clients, _, _ = _setup()
    with pytest.raises(ShapeError):
        apply_consensus_params(clients[0], {"Conv1": clients[0].params["Conv1"]})


def test_lambda_zero_is_supervised_fine_tuning_on_public():
    spec, clients, _, public = _setup()
    f_bar = LogitsMatrix(np.full((5, 2), 3.0))
    a, _ = consensus_train(clients[0], f_bar, public, 3, 0.05, 0.0, None)
    b, _ = client_local_train(clients[0], public, 3, 0.05, None)
    assert nn.params_equal(a.params, b.params)


def test_one_consensus_step_closed_form():
    # z = [0, 0], label 0, f_bar = [1, -1]: dCE = [-1/2, 1/2], d(lam*MSE) = lam * (z - f_bar)
    eta, lam = 0.1, 0.5
    c = make_client(scalar_spec(), {"FC": _lp([[0.0, 0.0]], [0.0, 0.0])}, lr=eta)
    new, _ = consensus_train(c, LogitsMatrix(np.array([[1.0, -1.0]])), scalar_dataset([1.0], [0]),
                             1, eta, lam, None)
    dz = np.array([-0.5, 0.5]) + lam * np.array([-1.0, 1.0])
    assert np.allclose(new.params["FC"].weight[0], -eta * dz, rtol=1e-15, atol=0)
    assert np.allclose(new.params["FC"].bias, -eta * dz, rtol=1e-15, atol=0)


def test_consensus_row_mismatch():
    spec, clients, _, public = _setup()
    with pytest.raises(ShapeError):
        consensus_train(clients[0], LogitsMatrix(np.zeros((4, 2))), public, 1, 0.1, 0.5, None)


def test_full_batch_consensus_loss_non_increasing():
    spec, clients, _, public = _setup()
    f_bar = LogitsMatrix(np.random.default_rng(0).standard_normal((5, 2)))
    _, losses = consensus_train(clients[0], f_bar, public, 10, 1e-3, 0.5, None, track=True)
    assert all(b <= a for a, b in zip(losses, losses[1:]))


# ---------------------------------------------------------------- full rounds

def test_single_client_fixpoint():
    spec, clients, shards, public = _setup(n_clients=1)
    cfg = RoundConfig(rounds=2, n_clients=1, e1=2, e2=2, **SGD_CFG)
    state, out, _ = run_round(ServerState(), clients, public, shards, cfg)
    assert nn.params_equal(state.w_bar, shared_params(out[0]))
    assert np.array_equal(state.f_bar.values, client_eval_public(out[0], public).values)
    assert state.t == 1


def test_identical_clients_without_steps_keep_state_constant():
    spec, clients, shards, public = _setup()
    clients = [replace(c, params=clients[0].params) for c in clients]
    cfg = RoundConfig(rounds=4, n_clients=3, e1=0, e2=0, **SGD_CFG)
    state, states = ServerState(), []
    for _ in range(4):
        state, clients, _ = run_round(state, clients, public, shards, cfg)
        states.append(state)
    for s in states[1:]:
        assert nn.params_equal(s.w_bar, states[0].w_bar)
        assert np.array_equal(s.f_bar.values, states[0].f_bar.values)


def straight_line_trace(spec, seed, shards, public, rounds, e1, e2, lr1, lr2, lam):
    """Independent transcription of the round loop with full-batch SGD."""
    shared = sorted(spec.shared_layer_names)
    P = [nn.init_params(spec, seed, i) for i in range(len(shards))]
    f_bar = w_bar = None
    trace = []
    for t in range(rounds):
        for i, shard in enumerate(shards):
            p = dict(P[i])
            if t > 0:
                for n in shared:
                    p[n] = w_bar[n]
                for _ in range(e1):
                    _, g = nn.value_and_grad(spec, p, public.images, public.y, f_bar, lam)
                    p = {n: nn.LayerParams(p[n].weight - lr1 * g[n].weight, p[n].bias - lr1 * g[n].bias) for n in p}
            for _ in range(e2):
                _, g = nn.value_and_grad(spec, p, shard.images, shard.y)
                p = {n: nn.LayerParams(p[n].weight - lr2 * g[n].weight, p[n].bias - lr2 * g[n].bias) for n in p}
            P[i] = p
        L = [nn.forward(spec, p, public.images) for p in P]
        f_bar = (L[0] + L[1] + L[2]) / 3
        w_bar = {n: nn.LayerParams((P[0][n].weight + P[1][n].weight + P[2][n].weight) / 3,
                                   (P[0][n].bias + P[1][n].bias + P[2][n].bias) / 3) for n in shared}
        trace.append((f_bar, w_bar, [dict(p) for p in P]))
    return trace


def test_three_clients_two_rounds_match_straight_line_trace():
    spec, clients, shards, public = _setup()
    cfg = RoundConfig(rounds=2, n_clients=3, e1=2, e2=3, lam=0.5, **SGD_CFG)
    trace = straight_line_trace(spec, 0, shards, public, 2, 2, 3, 0.05, 0.05, 0.5)
    state = ServerState()
    for f_bar, w_bar, P in trace:
        state, clients, _ = run_round(state, clients, public, shards, cfg)
        assert np.array_equal(state.f_bar.values, f_bar)
        assert nn.params_equal(state.w_bar, w_bar)
        for c, p in zip(clients, P):
            assert nn.params_equal(c.params, p)


def test_shared_layers_equal_after_replacement_under_invariant_checks():
    spec, clients, shards, public = _setup(optimizer=nn.ADAM, lr=1e-3)
    cfg = RoundConfig(rounds=3, n_clients=3, e1=2, e2=2, batch_size=2, check_invariants=True)
    state = ServerState()
    for t in range(3):
        state, clients, result = run_round(state, clients, public, shards, cfg)
        assert result.invariant_checked == (t > 0)
    with pytest.raises(ValueError):
        run_round(state, clients, public, shards, cfg)


def test_non_participants_keep_stale_models():
    spec, clients, shards, public = _setup(n_clients=4)
    shards = shards + [tiny_dataset(6, 20)]
    cfg = RoundConfig(rounds=1, n_clients=4, participation=0.5, e1=1, e2=1, **SGD_CFG)
    _, out, result = run_round(ServerState(), clients, public, shards, cfg)
    assert len(result.participants) == 2
    for before, after in zip(clients, out):
        changed = not nn.params_equal(before.params, after.params)
        assert changed == (before.client_id in result.participants)


def test_client_order_does_not_matter():
    spec, clients, shards, public = _setup(optimizer=nn.ADAM, lr=1e-3)
    cfg = RoundConfig(rounds=2, n_clients=3, e1=2, e2=2, batch_size=2)
    a, b = ServerState(), ServerState()
    ca, cb = list(clients), list(reversed(clients))
    for _ in range(2):
        a, ca, _ = run_round(a, ca, public, shards, cfg)
        b, cb, _ = run_round(b, cb, public, shards, cfg)
        cb = list(reversed(cb))
    assert np.array_equal(a.f_bar.values, b.f_bar.values) and nn.params_equal(a.w_bar, b.w_bar)


def test_replay_is_bit_identical():
    spec, clients, shards, public = _setup(optimizer=nn.ADAM, lr=1e-3)
    cfg = RoundConfig(rounds=3, n_clients=3, e1=2, e2=2, batch_size=2)
    r1 = run_fedkd_hybrid(cfg, clients, public, shards, public)
    r2 = run_fedkd_hybrid(cfg, clients, public, shards, public)
    assert r1.state.f_bar.values.tobytes() == r2.state.f_bar.values.tobytes()
    assert nn.params_equal(r1.state.w_bar, r2.state.w_bar)
    assert [r.accuracy for r in r1.records] == [r.accuracy for r in r2.records]
    assert [r.round for r in r1.records] == [0, 1, 2]


# ---------------------------------------------------------------- objective

def _ce(z, label):
    return math.log(math.exp(z[0]) + math.exp(z[1])) - z[label]


def test_objective_identical_clients_is_ce_only():
    spec, clients, _, public = _setup()
    c = clients[0]
    f_bar = client_eval_public(c, public)
    twins = [c, replace(clients[1], params=c.params)]
    value = eval_objective(twins, shared_params(c), f_bar, public, 0.5)
    assert value == pytest.approx(nn.loss_ce(f_bar.values, public.y), rel=1e-15)


def test_objective_lambda_zero_is_mean_ce():
    spec, clients, _, public = _setup()
    f_bar = LogitsMatrix(np.full((5, 2), 9.0))
    ces = [nn.loss_ce(nn.forward(spec, c.params, public.images), public.y) for c in clients]
    assert eval_objective(clients, None, f_bar, public, 0.0) == pytest.approx(np.mean(ces), rel=1e-14)


def test_objective_two_hand_set_clients():
    spec = scalar_spec(shared=())
    public = scalar_dataset([1.0, -2.0], [0, 1])
    params = [{"FC": _lp([[1.0, 0.0]], [0.0, 0.5])}, {"FC": _lp([[0.0, 2.0]], [-1.0, 0.0])}]
    clients = [make_client(spec, p, client_id=i) for i, p in enumerate(params)]
    f_bar = np.array([[0.5, 0.5], [-1.0, 0.0]])
    total = 0.0
    for p in params:
        (w0, w1), (b0, b1) = p["FC"].weight[0], p["FC"].bias
        zs = [(x * w0 + b0, x * w1 + b1) for x in (1.0, -2.0)]
        ce = (_ce(zs[0], 0) + _ce(zs[1], 1)) / 2
        mse = sum((zs[r][k] - f_bar[r][k]) ** 2 for r in range(2) for k in range(2)) / 4
        total += ce + 0.5 * mse
    assert eval_objective(clients, None, LogitsMatrix(f_bar), public, 0.5) == pytest.approx(total / 2, rel=1e-14)
