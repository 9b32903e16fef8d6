"""Differentiable problems over a flat parameter vector.

A :class:`Problem` exposes a local (supervised) loss and a distillation loss,
with full-batch or index-subset gradients, so the constant estimators can
treat convex toys and the CNN alike. Convex surrogates also carry their
smoothness constant and optimum for the descent and rate checks.
"""
from __future__ import annotations

import numpy as np

from .. import nn


class Problem:
    """Interface: ``dim``, ``n_samples``, ``w0`` and the gradient callables.

    ``value``/``grad`` are the combined objective ``local + lam * distill``.
    """

    dim: int
    n_samples: int = 1
    lam: float = 0.0
    w0: np.ndarray

    def local_value(self, w, idx=None):
        raise NotImplementedError

    def local_grad(self, w, idx=None):
        raise NotImplementedError

    def distill_value(self, w, idx=None):
        return 0.0

    def distill_grad(self, w, idx=None):
        return np.zeros(self.dim)

    def value(self, w):
        return self.local_value(w) + self.lam * self.distill_value(w)

    def grad(self, w):
        return self.local_grad(w) + self.lam * self.distill_grad(w)


class QuadraticSurrogate(Problem):
    """``F(w) = 0.5 w'Aw - b'w`` with symmetric positive (semi)definite ``A``."""

    def __init__(self, A, b=None, w0=None):
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        if A.shape[0] != A.shape[1] or not np.allclose(A, A.T):
            raise ValueError("A must be square and symmetric")
        self.A = A
        self.dim = A.shape[0]
        self.b = np.zeros(self.dim) if b is None else np.asarray(b, dtype=np.float64).reshape(self.dim)
        self.w0 = np.ones(self.dim) if w0 is None else np.asarray(w0, dtype=np.float64).reshape(self.dim)
        self.smoothness = float(np.linalg.eigvalsh(A).max())
        self.w_star = np.linalg.lstsq(A, self.b, rcond=None)[0]

    @classmethod
    def random(cls, dim, seed, cond=10.0):
        """Random positive-definite quadratic with eigenvalues spread over ``[1, cond]``."""
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        eig = np.linspace(1.0, cond, dim)
        A = (q * eig) @ q.T
        A = 0.5 * (A + A.T)
        return cls(A, rng.standard_normal(dim), rng.standard_normal(dim) * 3)

    def local_value(self, w, idx=None):
        return float(0.5 * w @ self.A @ w - self.b @ w)

    def local_grad(self, w, idx=None):
        return self.A @ w - self.b


class LinearSurrogate(Problem):
    """``F(w) = c'w``: constant gradient, zero curvature."""

    def __init__(self, c, w0=None):
        self.c = np.atleast_1d(np.asarray(c, dtype=np.float64))
        self.dim = self.c.size
        self.w0 = np.zeros(self.dim) if w0 is None else np.asarray(w0, dtype=np.float64)
        self.smoothness = 0.0

    def local_value(self, w, idx=None):
        return float(self.c @ w)

    def local_grad(self, w, idx=None):
        return self.c.copy()


class LogisticSurrogate(Problem):
    """Ridge-regularised logistic regression, labels in {0, 1}.

    ``smoothness = 0.25 * lambda_max(X'X) / n + ridge``. The optimum is found
    by Newton's method to machine precision.
    """

    def __init__(self, X, y, ridge=1e-2, w0=None):
        self.X = np.asarray(X, dtype=np.float64)
        self.s = 2.0 * np.asarray(y, dtype=np.float64) - 1.0
        self.n_samples, self.dim = self.X.shape
        self.ridge = float(ridge)
        if self.ridge <= 0:
            raise ValueError("ridge must be > 0 so the optimum exists")
        self.w0 = np.zeros(self.dim) if w0 is None else np.asarray(w0, dtype=np.float64)
        self.smoothness = float(0.25 * np.linalg.eigvalsh(self.X.T @ self.X).max() / self.n_samples + self.ridge)
        self.w_star = self._newton()

    @classmethod
    def from_dataset(cls, d, ridge=1e-2, n_features=None):
        """Features: row and column pixel sums of each clip plus a bias column."""
        rows = d.X.sum(axis=2)
        cols = d.X.sum(axis=1)
        feats = np.concatenate([rows, cols], axis=1) / d.X.shape[1]
        if n_features is not None:
            feats = feats[:, :n_features]
        feats = np.concatenate([feats, np.ones((len(d), 1))], axis=1)
        return cls(feats, d.y, ridge)

    def _margins(self, w, idx):
        X = self.X if idx is None else self.X[idx]
        s = self.s if idx is None else self.s[idx]
        return X, s, s * (X @ w)

    def local_value(self, w, idx=None):
        _, _, m = self._margins(w, idx)
        return float(np.mean(np.logaddexp(0.0, -m)) + 0.5 * self.ridge * w @ w)

    def local_grad(self, w, idx=None):
        X, s, m = self._margins(w, idx)
        coef = -s * np.exp(-np.logaddexp(0.0, m))  # -s * sigmoid(-m)
        return X.T @ coef / X.shape[0] + self.ridge * w

    def _newton(self, iters=100):
        w = np.zeros(self.dim)
        for _ in range(iters):
            g = self.local_grad(w)
            m = self.s * (self.X @ w)
            p = np.exp(-np.logaddexp(0.0, -m))
            H = (self.X.T * (p * (1 - p))) @ self.X / self.n_samples + self.ridge * np.eye(self.dim)
            step = np.linalg.solve(H, g)
            w = w - step
            if np.linalg.norm(step) < 1e-15 * max(1.0, np.linalg.norm(w)):
                break
        return w


class CNNProblem(Problem):
    """The CNN's losses over a dataset, as functions of the flattened parameters.

    The distillation term targets ``target_logits`` (one row per sample);
    without targets it is identically zero.
    """

    def __init__(self, spec, params, dataset, target_logits=None, lam=0.0):
        self.spec = spec
        self.template = params
        self.names = spec.param_layer_names
        self.dataset = dataset
        self.target = None if target_logits is None else np.asarray(target_logits, dtype=np.float64)
        self.lam = lam
        self.w0 = nn.flatten_params(params, self.names)
        self.dim = self.w0.size
        self.n_samples = len(dataset)

    @classmethod
    def with_teacher(cls, spec, params, dataset, lam, teacher_params=None):
        """Distillation targets are a teacher's logits on ``dataset`` (by default the model itself at ``params``).

        Gives the distillation term a meaning on any dataset, which the
        private-vs-public gradient gap needs.
        """
        teacher = params if teacher_params is None else teacher_params
        return cls(spec, params, dataset, nn.forward(spec, teacher, dataset.images), lam)

    def _params(self, w):
        return nn.unflatten_params(np.asarray(w, dtype=np.float64), self.template, self.names)

    def _batch(self, idx):
        idx = np.arange(self.n_samples) if idx is None else np.asarray(idx)
        return self.dataset.images[idx], self.dataset.y[idx], idx

    def local_value(self, w, idx=None):
        x, y, _ = self._batch(idx)
        return nn.loss_value(self.spec, self._params(w), x, y)

    def local_grad(self, w, idx=None):
        x, y, _ = self._batch(idx)
        g = nn.backward(self.spec, self._params(w), x, y)
        return nn.flatten_params(g, self.names)

    def distill_value(self, w, idx=None):
        if self.target is None:
            return 0.0
        x, y, idx = self._batch(idx)
        return nn.loss_value(self.spec, self._params(w), x, y, self.target[idx], 1.0, ce=False)

    def distill_grad(self, w, idx=None):
        if self.target is None:
            return np.zeros(self.dim)
        x, y, idx = self._batch(idx)
        g = nn.backward(self.spec, self._params(w), x, y, self.target[idx], 1.0, ce=False)
        return nn.flatten_params(g, self.names)
