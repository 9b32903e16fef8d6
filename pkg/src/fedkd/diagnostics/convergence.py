"""Sampled smoothness/gradient constants and numerical descent and rate checks.

The constant estimators take maxima over finitely many sampled points, so
they are lower bounds on the true suprema; every result carries its sample
count. The descent and rate checks need a convex problem with a known
smoothness constant and optimum, which is why they run on the surrogates in
:mod:`fedkd.diagnostics.surrogates` rather than on the CNN.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .. import _rng
from .surrogates import Problem

CONSTANT_NAMES = ("L_l", "L_d", "G_l", "G_d", "sigma_l2", "sigma_d2", "M_l", "M_d")


@dataclass
class ConvergenceConstants:
    L_l: float = 0.0
    L_d: float = 0.0
    G_l: float = 0.0
    G_d: float = 0.0
    sigma_l2: float = 0.0
    sigma_d2: float = 0.0
    M_l: float = 0.0
    M_d: float = 0.0
    lam: float = 0.0
    n_pairs: int = 0

    def __post_init__(self):
        for name in CONSTANT_NAMES:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def L(self):
        return self.L_l + self.lam * self.L_d

    def as_dict(self):
        d = asdict(self)
        d["L"] = self.L
        return d


def _sample_point(problem, center, radius, rng):
    d = rng.standard_normal(problem.dim)
    return center + radius * d / max(np.linalg.norm(d), 1e-300)


def _ratio(g1, g2, w1, w2):
    dw = np.linalg.norm(w1 - w2)
    return float(np.linalg.norm(g1 - g2) / dw) if dw > 0 else 0.0


def _variance(problem, w, full_local, full_distill, batch_size, n_batches, rng):
    n = problem.n_samples
    if batch_size is None or batch_size >= n:
        return 0.0, 0.0
    vl = vd = 0.0
    for _ in range(n_batches):
        idx = np.sort(rng.choice(n, size=batch_size, replace=False))
        vl += float(np.sum((problem.local_grad(w, idx) - full_local) ** 2))
        vd += float(np.sum((problem.distill_grad(w, idx) - full_distill) ** 2))
    return vl / n_batches, vd / n_batches


def estimate_constants(problem: Problem, lam, n_pairs, seed, *, center=None, radius=1.0,
                       batch_size=None, n_batches=4):
    """Sampled estimates of the smoothness, gradient-bound and variance constants.

    Pair ``k`` is drawn from a stream keyed by ``(seed, k)``, so raising
    ``n_pairs`` only adds points and never lowers a max-based estimate.
    ``L_*`` are max gradient-difference ratios over the pairs, ``G_*`` max
    full-batch gradient norms, ``sigma_*2`` the largest mean squared deviation
    of minibatch from full-batch gradients. ``M_l``/``M_d`` are left at zero;
    see :func:`estimate_public_gap`.
    """
    if n_pairs < 2:
        raise ValueError("n_pairs must be >= 2")
    center = problem.w0 if center is None else np.asarray(center, dtype=np.float64)
    out = ConvergenceConstants(lam=lam, n_pairs=n_pairs)
    for k in range(n_pairs):
        rng = _rng.keyed_rng(seed, _rng.DIAG, k)
        w1 = _sample_point(problem, center, radius, rng)
        w2 = _sample_point(problem, center, radius, rng)
        l1, l2 = problem.local_grad(w1), problem.local_grad(w2)
        d1, d2 = problem.distill_grad(w1), problem.distill_grad(w2)
        out.L_l = max(out.L_l, _ratio(l1, l2, w1, w2))
        out.L_d = max(out.L_d, _ratio(d1, d2, w1, w2))
        out.G_l = max(out.G_l, float(np.linalg.norm(l1)), float(np.linalg.norm(l2)))
        out.G_d = max(out.G_d, float(np.linalg.norm(d1)), float(np.linalg.norm(d2)))
        vl, vd = _variance(problem, w1, l1, d1, batch_size, n_batches, _rng.keyed_rng(seed, _rng.DIAG, k, 1))
        out.sigma_l2 = max(out.sigma_l2, vl)
        out.sigma_d2 = max(out.sigma_d2, vd)
    return out


def estimate_public_gap(private: Problem, public: Problem, *, n_points=4, seed=0, radius=1.0, center=None):
    """``(M_l, M_d)``: largest gradient gap between private-shard and public-set losses.

    Evaluated at ``center`` and at ``n_points`` sampled points around it. Both
    problems must be over the same parameter vector.
    """
    if private.dim != public.dim:
        raise ValueError("private and public problems have different parameter dimensions")
    center = public.w0 if center is None else np.asarray(center, dtype=np.float64)
    points = [center]
    for k in range(n_points):
        points.append(_sample_point(public, center, radius, _rng.keyed_rng(seed, _rng.DIAG, 2, k)))
    m_l = m_d = 0.0
    for w in points:
        m_l = max(m_l, float(np.linalg.norm(private.local_grad(w) - public.local_grad(w))))
        m_d = max(m_d, float(np.linalg.norm(private.distill_grad(w) - public.distill_grad(w))))
    return m_l, m_d


# ---------------------------------------------------------------- descent check

@dataclass
class DescentStep:
    t: int
    lhs: float
    rhs: float
    holds: bool


@dataclass
class DescentReport:
    eta: float
    L: float
    steps: list = field(default_factory=list)
    rtol: float = 1e-10

    @property
    def passed(self):
        return all(s.holds for s in self.steps)

    @property
    def first_violation(self):
        return next((s.t for s in self.steps if not s.holds), None)


def check_descent(problem: Problem, eta, steps, *, w0=None, L=None, rtol=1e-10):
    """Check ``F(w+) <= F(w) - eta |g|^2 + eta^2 L / 2 |g|^2`` along gradient descent.

    ``L`` defaults to the problem's analytic smoothness constant.
    """
    L = problem.smoothness if L is None else L
    if eta < 0 or (eta > 0 and eta >= 1.0 / L):
        raise ValueError(f"step size {eta} must satisfy 0 <= eta < 1/L = {1.0 / L}")
    w = problem.w0 if w0 is None else np.asarray(w0, dtype=np.float64)
    report = DescentReport(eta, L, rtol=rtol)
    for t in range(steps):
        f = problem.value(w)
        g = problem.grad(w)
        gg = float(g @ g)
        w_next = w - eta * g
        lhs = problem.value(w_next)
        rhs = f - eta * gg + eta * eta * L / 2.0 * gg
        report.steps.append(DescentStep(t, lhs, rhs, lhs <= rhs + rtol * max(1.0, abs(rhs))))
        w = w_next
    return report


# ---------------------------------------------------------------- rate check

@dataclass
class RateCheckpoint:
    T: int
    gap: float
    bound: float
    holds: bool


@dataclass
class RateReport:
    eta: float
    L: float
    checkpoints: list
    ratios: dict
    gaps: list
    max_ratio: float = 0.75

    @property
    def bound_holds(self):
        return all(c.holds for c in self.checkpoints)

    @property
    def rate_holds(self):
        return all(r <= self.max_ratio for r in self.ratios.values())

    @property
    def passed(self):
        return self.bound_holds and self.rate_holds


def check_rate(problem: Problem, eta, Ts, *, w0=None, L=None, max_ratio=0.75, rtol=1e-12):
    """Average optimality gap along gradient descent against its O(1/T) bound.

    For each ``T`` in ``Ts`` the gap ``A(T) = mean_{t<T} F(w_t) - F*`` must
    stay below ``|w_0 - w*|^2 / (2 eta T) + eta L / (2T) * sum_{t<T} |grad F(w_t)|^2``
    and ``A(2T) / A(T) <= max_ratio``. A zero gap counts as passing the ratio test.
    """
    L = problem.smoothness if L is None else L
    if eta <= 0:
        raise ValueError("eta must be > 0")
    Ts = sorted(int(T) for T in Ts)
    horizon = 2 * Ts[-1]
    w = problem.w0 if w0 is None else np.asarray(w0, dtype=np.float64)
    w_start = w.copy()
    f_star = problem.value(problem.w_star)
    values, gnorms = [], []
    for _ in range(horizon):
        values.append(problem.value(w))
        g = problem.grad(w)
        gnorms.append(float(g @ g))
        w = w - eta * g
    values = np.asarray(values)
    gnorms = np.asarray(gnorms)
    dist2 = float(np.sum((w_start - problem.w_star) ** 2))

    def gap(T):
        return max(float(np.mean(values[:T]) - f_star), 0.0)

    def bound(T):
        return dist2 / (2 * eta * T) + eta * L / (2 * T) * float(np.sum(gnorms[:T]))

    checkpoints = [RateCheckpoint(T, gap(T), bound(T), gap(T) <= bound(T) * (1 + rtol))
                   for T in sorted(set(Ts) | {2 * T for T in Ts})]
    ratios = {T: (gap(2 * T) / gap(T) if gap(T) > 0 else 0.0) for T in Ts}
    return RateReport(eta, L, checkpoints, ratios, [gap(T) for T in range(1, horizon + 1)], max_ratio)
