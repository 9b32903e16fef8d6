"""Synthetic lithography clips, the LHD1 file format, splitting and client partitioning.

A clip is a 12x12 binary grid of axis-aligned rectangles. Clean layouts keep
every feature at least 2 px wide and every pair of features at least 2 px
apart. Hotspot clips add one defect motif (bridge, necking or shorten), each
of which leaves a 1-px feature or a 1-px gap that :func:`is_hotspot` detects.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _rng
from .exceptions import DatasetFormatError, PartitionError

HEIGHT = WIDTH = 12
MAGIC = b"LHD1"
HOTSPOT, NON_HOTSPOT = 1, 0
MOTIFS = ("bridge", "necking", "shorten")


@dataclass(frozen=True)
class Sample:
    grid: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered, immutable collection of labelled clips.

    ``X`` has shape ``(n, 12, 12)`` with entries in {0.0, 1.0}; ``y`` holds
    integer labels. Sample order is part of the dataset's identity.
    """

    X: np.ndarray
    y: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.int64).reshape(-1)
        if X.ndim != 3 or X.shape[0] != y.shape[0]:
            raise ValueError(f"X shape {X.shape} incompatible with {y.shape[0]} labels")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.y.shape[0]

    def __iter__(self):
        for grid, label in zip(self.X, self.y):
            yield Sample(grid, int(label))

    def __getitem__(self, i):
        return Sample(self.X[i], int(self.y[i]))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.name == other.name and np.array_equal(self.X, other.X)
                and np.array_equal(self.y, other.y))

    @property
    def images(self):
        """NHWC view with a single channel, as the CNN expects."""
        return self.X[..., None]

    @property
    def n_hotspot(self):
        return int(self.y.sum())

    @property
    def hotspot_rate(self):
        return self.n_hotspot / len(self) if len(self) else 0.0

    def subset(self, indices, name=None):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], name or self.name)


def concat(datasets, name="concat"):
    return Dataset(np.concatenate([d.X for d in datasets]), np.concatenate([d.y for d in datasets]), name)


# ---------------------------------------------------------------- verifier

def _runs(line):
    """Lengths of 1-runs and of interior 0-runs (bounded by 1s on both sides)."""
    ones, gaps = [], []
    n = len(line)
    i = 0
    while i < n:
        j = i
        while j < n and line[j] == line[i]:
            j += 1
        if line[i]:
            ones.append(j - i)
        elif i > 0 and j < n:
            gaps.append(j - i)
        i = j
    return ones, gaps


def violations(grid):
    """Count 1-px widths and 1-px spacings found by scanning rows and columns."""
    g = np.asarray(grid) > 0.5
    width = spacing = 0
    for line in list(g) + list(g.T):
        ones, gaps = _runs(line.tolist())
        width += sum(1 for r in ones if r == 1)
        spacing += sum(1 for r in gaps if r == 1)
    return width, spacing


def is_hotspot(grid):
    """Rule-based label: any minimum-width or minimum-spacing violation."""
    width, spacing = violations(grid)
    return width + spacing > 0


# ---------------------------------------------------------------- generator

def _gap(a0, a1, b0, b1):
    """Empty pixels between closed intervals [a0, a1] and [b0, b1] (negative if overlapping)."""
    return max(b0 - a1 - 1, a0 - b1 - 1)


def _separation(r, s):
    return max(_gap(r[0], r[1], s[0], s[1]), _gap(r[2], r[3], s[2], s[3]))


def _random_layout(rng, min_side=2, max_side=6, tries=200):
    """2-3 rectangles ``(r0, r1, c0, c1)`` (inclusive) with pairwise separation >= 2."""
    count = int(rng.integers(2, 4))
    rects = []
    for _ in range(tries):
        if len(rects) == count:
            break
        h = int(rng.integers(min_side, max_side + 1))
        w = int(rng.integers(min_side, max_side + 1))
        r0 = int(rng.integers(0, HEIGHT - h + 1))
        c0 = int(rng.integers(0, WIDTH - w + 1))
        rect = (r0, r0 + h - 1, c0, c0 + w - 1)
        if all(_separation(rect, other) >= 2 for other in rects):
            rects.append(rect)
    if len(rects) < 2:
        return None
    return rects


def _draw(rects):
    g = np.zeros((HEIGHT, WIDTH))
    for r0, r1, c0, c1 in rects:
        g[r0:r1 + 1, c0:c1 + 1] = 1.0
    return g


def _transpose(rects):
    return [(c0, c1, r0, r1) for r0, r1, c0, c1 in rects]


def _bridge(rng, grid, rects):
    """1-px connector across the gap between two rectangles facing each other."""
    options = []
    for axis, rs in ((0, rects), (1, _transpose(rects))):
        g = grid if axis == 0 else grid.T
        for a in rs:
            for b in rs:
                # b to the right of a, overlapping rows
                if b[2] <= a[3] or _gap(a[0], a[1], b[0], b[1]) >= 0:
                    continue
                lo, hi = max(a[0], b[0]), min(a[1], b[1])
                for row in range(lo, hi + 1):
                    cols = range(a[3] + 1, b[2])
                    # connector and its vertical neighbours must be empty
                    block = g[max(row - 1, 0):row + 2, a[3] + 1:b[2]]
                    if len(cols) and not block.any():
                        options.append((axis, row, a[3] + 1, b[2]))
    if not options:
        return None
    axis, row, c0, c1 = options[int(rng.integers(len(options)))]
    out = grid.copy()
    if axis == 0:
        out[row, c0:c1] = 1.0
    else:
        out[c0:c1, row] = 1.0
    return out


def _pinchable(rects):
    """(rect index, axis) pairs whose cross-section can be cut inside the rectangle."""
    out = []
    for i, (r0, r1, c0, c1) in enumerate(rects):
        if c1 - c0 + 1 >= 3:
            out.append((i, 0))
        if r1 - r0 + 1 >= 3:
            out.append((i, 1))
    return out


def _necking(rng, grid, rects):
    """Pinch one rectangle down to a 1-px neck at an interior cross-section."""
    options = _pinchable(rects)
    if not options:
        return None
    i, axis = options[int(rng.integers(len(options)))]
    r0, r1, c0, c1 = rects[i]
    out = grid.copy()
    if axis == 0:
        col = int(rng.integers(c0 + 1, c1))
        keep = int(rng.integers(r0, r1 + 1))
        out[r0:r1 + 1, col] = 0.0
        out[keep, col] = 1.0
    else:
        row = int(rng.integers(r0 + 1, r1))
        keep = int(rng.integers(c0, c1 + 1))
        out[row, c0:c1 + 1] = 0.0
        out[row, keep] = 1.0
    return out


def _shorten(rng, grid, rects):
    """Truncate one rectangle, leaving a 1-px gap to the cut-off end."""
    options = _pinchable(rects)
    if not options:
        return None
    i, axis = options[int(rng.integers(len(options)))]
    r0, r1, c0, c1 = rects[i]
    out = grid.copy()
    if axis == 0:
        out[r0:r1 + 1, int(rng.integers(c0 + 1, c1))] = 0.0
    else:
        out[int(rng.integers(r0 + 1, r1)), c0:c1 + 1] = 0.0
    return out


_MOTIF_FN = {"bridge": _bridge, "necking": _necking, "shorten": _shorten}


def make_clip(rng, hotspot):
    """One clip; hotspot clips get a motif drawn uniformly from :data:`MOTIFS`."""
    motif = MOTIFS[int(rng.integers(len(MOTIFS)))] if hotspot else None
    while True:
        rects = _random_layout(rng)
        if rects is None:
            continue
        grid = _draw(rects)
        if motif is None:
            return grid, None
        out = _MOTIF_FN[motif](rng, grid, rects)
        if out is not None:
            return out, motif


def hotspot_count(n, hotspot_rate):
    if n < 2:
        raise PartitionError(f"need n >= 2 to hold one sample of each class, got n={n}")
    if not 0.0 < hotspot_rate < 1.0:
        raise ValueError("hotspot_rate must lie strictly between 0 and 1")
    return min(max(_rng.round_half_up(n * hotspot_rate), 1), n - 1)


def generate_synthetic(n, hotspot_rate, seed, name="synthetic", stream=0):
    """``n`` clips, ``round_half_up(n * hotspot_rate)`` of them hotspots (at least one of each class).

    ``stream`` separates datasets drawn under the same seed (e.g. train vs test).
    """
    n_hot = hotspot_count(n, hotspot_rate)
    rng = _rng.keyed_rng(seed, _rng.DATA, stream)
    labels = np.zeros(n, dtype=np.int64)
    labels[:n_hot] = HOTSPOT
    labels = labels[rng.permutation(n)]
    X = np.empty((n, HEIGHT, WIDTH))
    for i, lab in enumerate(labels):
        X[i] = make_clip(rng, bool(lab))[0]
    return Dataset(X, labels, name)


# ---------------------------------------------------------------- splitting

def _apportion(total, weights):
    """Largest-remainder integer apportionment; ties go to the lower index."""
    weights = np.asarray(weights, dtype=np.float64)
    s = weights.sum()
    if s <= 0:
        weights = np.ones_like(weights)
        s = weights.sum()
    quota = total * weights / s
    base = np.floor(quota).astype(np.int64)
    rem = quota - base
    order = sorted(range(len(weights)), key=lambda i: (-rem[i], i))
    for i in order[:total - int(base.sum())]:
        base[i] += 1
    return base


def split_public_private(d, public_fraction, seed):
    """Stratified, disjoint, exhaustive split into ``(public, private_pool)``.

    The public size is ``round_half_up(fraction * n)``; it is shared between
    labels by largest remainder so each side keeps the source label mix.
    """
    if not 0.0 < public_fraction < 1.0:
        raise ValueError("public_fraction must lie strictly between 0 and 1")
    n = len(d)
    n_pub = _rng.round_half_up(public_fraction * n)
    if n_pub < 1 or n_pub > n - 1:
        raise PartitionError(f"a {public_fraction} split of {n} samples leaves one side empty")
    rng = _rng.keyed_rng(seed, _rng.SPLIT)
    classes = np.unique(d.y)
    counts = [int((d.y == c).sum()) for c in classes]
    quotas = _apportion(n_pub, counts)
    pub, priv = [], []
    for c, q in zip(classes, quotas):
        idx = np.flatnonzero(d.y == c)
        idx = idx[rng.permutation(idx.size)]
        pub.extend(idx[:q].tolist())
        priv.extend(idx[q:].tolist())
    return d.subset(sorted(pub), f"{d.name}-public"), d.subset(sorted(priv), f"{d.name}-private")


@dataclass(frozen=True)
class PartitionPlan:
    n_clients: int
    assignment: np.ndarray
    alpha: float | None = None  # None means IID

    @property
    def iid(self):
        return self.alpha is None

    def indices(self, client):
        return np.flatnonzero(self.assignment == client)

    def sizes(self):
        return np.bincount(self.assignment, minlength=self.n_clients)

    def shards(self, d):
        return [d.subset(self.indices(i), f"{d.name}-client{i}") for i in range(self.n_clients)]


def partition(d, n_clients, mode="iid", alpha=None, seed=0):
    """Assign every sample of ``d`` to one of ``n_clients`` clients.

    ``mode="iid"``: round-robin over a seeded shuffle.

    ``mode="dirichlet"``: for each label in ascending order, shuffle that
    label's indices, draw ``g_i ~ Gamma(alpha, 1)`` for every client, and give
    client ``i`` a consecutive chunk of size proportional to ``g_i / sum(g)``
    (largest-remainder rounding). Any client left empty then takes the last
    sample of the currently largest client (lowest id on ties).
    """
    n = len(d)
    if n_clients < 1:
        raise PartitionError("need at least one client")
    if n_clients > n:
        raise PartitionError(f"{n_clients} clients but only {n} samples")
    rng = _rng.keyed_rng(seed, _rng.PARTITION)
    assignment = np.empty(n, dtype=np.int64)
    if mode == "iid":
        perm = rng.permutation(n)
        assignment[perm] = np.arange(n) % n_clients
        return PartitionPlan(n_clients, assignment, None)
    if mode != "dirichlet":
        raise ValueError(f"unknown partition mode {mode!r}")
    if alpha is None or alpha <= 0:
        raise ValueError("Dirichlet partition needs alpha > 0")
    order = [[] for _ in range(n_clients)]
    for c in np.unique(d.y):
        idx = np.flatnonzero(d.y == c)
        idx = idx[rng.permutation(idx.size)]
        g = rng.standard_gamma(alpha, size=n_clients)
        counts = _apportion(idx.size, g)
        pos = 0
        for i in range(n_clients):
            order[i].extend(idx[pos:pos + counts[i]].tolist())
            pos += counts[i]
    for i in range(n_clients):
        if not order[i]:
            donor = max(range(n_clients), key=lambda j: (len(order[j]), -j))
            order[i].append(order[donor].pop())
    for i, members in enumerate(order):
        assignment[members] = i
    return PartitionPlan(n_clients, assignment, float(alpha))


# ---------------------------------------------------------------- file format

_HEADER = struct.Struct("<4sIHH")


def save_dataset(d, path):
    """Write ``d`` in the LHD1 binary format (little-endian)."""
    if d.X.shape[1:] != (HEIGHT, WIDTH):
        raise DatasetFormatError(f"only {HEIGHT}x{WIDTH} clips can be stored, got {d.X.shape[1:]}")
    body = bytearray(_HEADER.pack(MAGIC, len(d), HEIGHT, WIDTH))
    pixels = (d.X > 0.5).astype(np.uint8).reshape(len(d), -1)
    for lab, row in zip(d.y, pixels):
        body.append(int(lab))
        body.extend(row.tobytes())
    Path(path).write_bytes(bytes(body))


def load_dataset(path, name=None):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: file too short for an LHD1 header ({len(raw)} bytes)")
    magic, count, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if (h, w) != (HEIGHT, WIDTH):
        raise DatasetFormatError(f"{path}: unsupported clip size {h}x{w}")
    rec = 1 + h * w
    expected = _HEADER.size + count * rec
    if len(raw) != expected:
        raise DatasetFormatError(f"{path}: payload is {len(raw) - _HEADER.size} bytes, header implies {count * rec}")
    body = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape(count, rec)
    labels = body[:, 0].astype(np.int64)
    pix = body[:, 1:]
    if np.any(labels > 1) or np.any(pix > 1):
        raise DatasetFormatError(f"{path}: labels and pixels must be 0 or 1")
    return Dataset(pix.reshape(count, h, w).astype(np.float64), labels, name or Path(path).stem)


def dataset_from_csv(path, name=None, label_column="label"):
    """Import clips from a CSV of 144 flattened pixels plus a label column.

    Pixels are thresholded at 0.5. A header row is optional; without one the
    last column is taken as the label.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise DatasetFormatError(f"{path}: empty CSV")
    header = None
    try:
        [float(v) for v in rows[0]]
    except ValueError:
        header, rows = rows[0], rows[1:]
    lab_col = header.index(label_column) if header and label_column in header else -1
    X, y = [], []
    for lineno, row in enumerate(rows, start=2 if header else 1):
        vals = [float(v) for v in row]
        lab = vals.pop(lab_col)
        if len(vals) != HEIGHT * WIDTH:
            raise DatasetFormatError(f"{path}:{lineno}: expected {HEIGHT * WIDTH} pixels, got {len(vals)}")
        if lab not in (0.0, 1.0):
            raise DatasetFormatError(f"{path}:{lineno}: label must be 0 or 1")
        X.append((np.asarray(vals) > 0.5).astype(np.float64).reshape(HEIGHT, WIDTH))
        y.append(int(lab))
    return Dataset(np.asarray(X), np.asarray(y), name or Path(path).stem)


def stats_block(named):
    """Training/testing counts in the HS / non-HS layout of a dataset statistics table."""
    lines = [f"{'split':<10s} {'HS':>7s} {'non-HS':>8s} {'total':>7s} {'HS frac':>8s}"]
    for label, d in named:
        lines.append(f"{label:<10s} {d.n_hotspot:7d} {len(d) - d.n_hotspot:8d} {len(d):7d} "
                     f"{d.hotspot_rate:8.4f}")
    return "\n".join(lines)
