"""Synthetic clips, splitting, client partitioning and the LHD1 file format."""
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedkd import _rng, data
from fedkd.exceptions import DatasetFormatError, PartitionError


# ---------------------------------------------------------------- generator

def test_default_training_counts():
    assert data.hotspot_count(18300, 0.0658) == 1204
    assert 18300 - data.hotspot_count(18300, 0.0658) == 17096


def test_round_half_up_rule():
    assert data.hotspot_count(10, 0.25) == 3  # 2.5 rounds up
    assert data.hotspot_count(10, 0.24) == 2


def test_two_clips_one_of_each():
    d = data.generate_synthetic(2, 0.0658, 0)
    assert sorted(d.y.tolist()) == [0, 1]


@pytest.mark.parametrize("n,rate", [(1, 0.5), (5, 0.0), (5, 1.0)])
def test_generator_rejects_unusable_requests(n, rate):
    with pytest.raises(ValueError):
        data.generate_synthetic(n, rate, 0)


def test_generator_is_deterministic(clips):
    again = data.generate_synthetic(400, 0.2, 0)
    assert again.X.tobytes() == clips.X.tobytes() and again.y.tobytes() == clips.y.tobytes()
    other = data.generate_synthetic(400, 0.2, 1)
    assert other.X.tobytes() != clips.X.tobytes()


def test_streams_differ_under_one_seed():
    a = data.generate_synthetic(50, 0.2, 3, stream=0)
    b = data.generate_synthetic(50, 0.2, 3, stream=1)
    assert not np.array_equal(a.X, b.X)


def test_clips_are_binary_and_immutable(clips):
    assert clips.X.shape == (400, 12, 12)
    assert set(np.unique(clips.X).tolist()) <= {0.0, 1.0}
    assert clips.n_hotspot == 80
    with pytest.raises(ValueError):
        clips.X[0, 0, 0] = 1.0


def test_verifier_agrees_with_every_label(clips):
    assert all(data.is_hotspot(s.grid) == bool(s.label) for s in clips)


@pytest.mark.parametrize("seed", range(30))
def test_each_motif_is_flagged_and_base_is_clean(seed):
    rng = np.random.default_rng(seed)
    grid, motif = data.make_clip(rng, True)
    assert motif in data.MOTIFS and data.is_hotspot(grid)
    grid, motif = data.make_clip(rng, False)
    assert motif is None and not data.is_hotspot(grid)


def test_verifier_hand_grids():
    g = np.zeros((12, 12))
    g[2:5, 2:5] = 1
    g[2:5, 7:10] = 1  # two squares, spacing 2
    assert data.violations(g) == (0, 0)
    assert not data.is_hotspot(g)
    bridged = g.copy()
    bridged[3, 5:7] = 1  # 1-px wide connector
    assert data.violations(bridged)[0] > 0
    close = np.zeros((12, 12))
    close[2:5, 2:5] = 1
    close[2:5, 6:9] = 1  # spacing 1
    assert data.violations(close) == (0, 3)


# ---------------------------------------------------------------- split

def _labelled(n_pos, n_neg, seed=0):
    rng = np.random.default_rng(seed)
    y = np.array([1] * n_pos + [0] * n_neg)
    return data.Dataset(rng.integers(0, 2, (len(y), 12, 12)).astype(float), y, "pool")


def _rows(d):
    return sorted(zip(d.y.tolist(), [x.tobytes() for x in d.X]))


def test_half_split_of_100():
    d = _labelled(20, 80)
    pub, priv = data.split_public_private(d, 0.5, 0)
    assert (len(pub), len(priv)) == (50, 50)
    assert pub.n_hotspot == priv.n_hotspot == 10


def test_split_two_samples():
    pub, priv = data.split_public_private(_labelled(1, 1), 0.5, 0)
    assert (len(pub), len(priv)) == (1, 1)
    assert pub.n_hotspot + priv.n_hotspot == 1


def test_split_union_equals_input(clips):
    pub, priv = data.split_public_private(clips, 0.3, 5)
    assert _rows(data.concat([pub, priv])) == _rows(clips)


@settings(max_examples=40, deadline=None)
@given(st.integers(20, 120), st.integers(200, 600), st.floats(0.1, 0.9), st.integers(0, 10 ** 6))
def test_split_is_stratified(n_pos, n_neg, fraction, seed):
    d = data.Dataset(np.zeros((n_pos + n_neg, 12, 12)), np.array([1] * n_pos + [0] * n_neg))
    pub, priv = data.split_public_private(d, fraction, seed)
    assert len(pub) == _rng.round_half_up(fraction * len(d))
    assert len(pub) + len(priv) == len(d)
    quota = len(pub) * n_pos / len(d)
    assert np.floor(quota) <= pub.n_hotspot <= np.ceil(quota)
    for side in (pub, priv):
        # a side of k clips can only hit rates in steps of 1/k
        if len(side) >= 50:
            assert abs(side.hotspot_rate - d.hotspot_rate) <= 0.01


def test_split_errors():
    with pytest.raises(ValueError):
        data.split_public_private(_labelled(1, 1), 1.0, 0)
    with pytest.raises(PartitionError):
        data.split_public_private(_labelled(1, 1), 0.1, 0)


# ---------------------------------------------------------------- partition

def reference_dirichlet(y, n_clients, alpha, seed):
    """Independent restatement of the class-wise Gamma construction."""
    rng = _rng.keyed_rng(seed, _rng.PARTITION)
    members = [[] for _ in range(n_clients)]
    for c in sorted(set(y.tolist())):
        idx = [i for i in range(len(y)) if y[i] == c]
        idx = [idx[j] for j in rng.permutation(len(idx))]
        g = rng.standard_gamma(alpha, size=n_clients)
        quota = [len(idx) * gi / sum(g) for gi in g]
        counts = [int(q // 1) for q in quota]
        by_remainder = sorted(range(n_clients), key=lambda i: (-(quota[i] - counts[i]), i))
        for i in by_remainder[:len(idx) - sum(counts)]:
            counts[i] += 1
        start = 0
        for i in range(n_clients):
            members[i] += idx[start:start + counts[i]]
            start += counts[i]
    for i in range(n_clients):
        if not members[i]:
            donor = max(range(n_clients), key=lambda j: (len(members[j]), -j))
            members[i].append(members[donor].pop())
    return [sorted(m) for m in members]


def test_single_client_gets_everything(clips):
    plan = data.partition(clips, 1, "dirichlet", 0.5, 0)
    assert not plan.assignment.any()


def test_iid_round_robin_counts():
    d = _labelled(10, 90)
    assert data.partition(d, 4, "iid", seed=2).sizes().tolist() == [25, 25, 25, 25]


@pytest.mark.parametrize("seed", range(5))
def test_dirichlet_matches_reference_sampler(clips, seed):
    plan = data.partition(clips, 2, "dirichlet", 0.1, seed)
    ref = reference_dirichlet(clips.y, 2, 0.1, seed)
    for i in range(2):
        assert plan.indices(i).tolist() == ref[i]
    per_class = [np.bincount(clips.y[plan.indices(i)], minlength=2) for i in range(2)]
    assert (sum(per_class) == [320, 80]).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.sampled_from([0.05, 0.5, 5.0]), st.integers(0, 10 ** 6))
def test_partition_exhaustive_disjoint_nonempty(n_clients, alpha, seed):
    d = _labelled(5, 25, seed % 7)
    for plan in (data.partition(d, n_clients, "dirichlet", alpha, seed), data.partition(d, n_clients, "iid", seed=seed)):
        assert plan.assignment.shape == (30,)
        assert plan.sizes().sum() == 30 and (plan.sizes() >= 1).all()
        assert sorted(np.concatenate([plan.indices(i) for i in range(n_clients)]).tolist()) == list(range(30))


def test_partition_errors():
    d = _labelled(1, 2)
    with pytest.raises(PartitionError):
        data.partition(d, 4, "iid")
    with pytest.raises(ValueError):
        data.partition(d, 2, "dirichlet", 0.0)
    with pytest.raises(ValueError):
        data.partition(d, 2, "zipf")


# ---------------------------------------------------------------- file format

def test_roundtrip(tmp_path, clips):
    path = tmp_path / "clips.lhd"
    data.save_dataset(clips, path)
    back = data.load_dataset(path, name=clips.name)
    assert back == clips
    raw = path.read_bytes()
    assert raw[:4] == b"LHD1"
    assert struct.unpack_from("<IHH", raw, 4) == (400, 12, 12)
    assert len(raw) == 12 + 400 * 145


def test_hand_written_file(tmp_path):
    grid = np.zeros((12, 12), dtype=np.uint8)
    grid[0, 1] = 1
    path = tmp_path / "one.lhd"
    path.write_bytes(b"LHD1" + struct.pack("<IHH", 1, 12, 12) + bytes([1]) + grid.tobytes())
    d = data.load_dataset(path)
    assert d.y.tolist() == [1] and d.X[0, 0, 1] == 1.0 and d.X.sum() == 1.0


@pytest.mark.parametrize("mutate,needle", [
    (lambda raw: b"", "too short"),
    (lambda raw: b"XHD1" + raw[4:], "magic"),
    (lambda raw: raw[:-7], "payload"),
    (lambda raw: raw[:4] + struct.pack("<IHH", 1, 8, 8) + raw[12:], "clip size"),
    (lambda raw: raw[:12] + bytes([7]) + raw[13:], "0 or 1"),
])
def test_malformed_files_raise_format_error(tmp_path, mutate, needle):
    path = tmp_path / "d.lhd"
    data.save_dataset(data.generate_synthetic(3, 0.4, 0), path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(DatasetFormatError, match=needle):
        data.load_dataset(path)


def test_csv_import(tmp_path, clips):
    path = tmp_path / "clips.csv"
    lines = ["," .join([f"p{i}" for i in range(144)] + ["label"])]
    for s in list(clips)[:5]:
        lines.append(",".join([f"{v:g}" for v in s.grid.ravel()] + [str(s.label)]))
    path.write_text("\n".join(lines) + "\n")
    d = data.dataset_from_csv(path)
    assert np.array_equal(d.X, clips.X[:5]) and np.array_equal(d.y, clips.y[:5])
    path.write_text("1,2,3\n")
    with pytest.raises(DatasetFormatError):
        data.dataset_from_csv(path)


def test_stats_block(clips):
    text = data.stats_block([("train", clips)])
    assert text.splitlines()[1].split() == ["train", "80", "320", "400", "0.2000"]
