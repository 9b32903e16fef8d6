"""scikit-learn style wrappers around the CNN engine and the federated protocols.

Both estimators take clips as ``(n, 144)``, ``(n, 12, 12)`` or
``(n, 12, 12, 1)`` arrays and binary labels.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import _rng, data, nn
from .config import ExperimentConfig
from .protocol import make_clients, predict_logits, train_steps
from .runner import ExperimentData, build_clients, final_model, run_algorithm

_SHAPE = (data.HEIGHT, data.WIDTH, 1)


def _as_images(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2 and X.shape[1] == data.HEIGHT * data.WIDTH:
        return X.reshape(-1, *_SHAPE)
    if X.ndim == 3 and X.shape[1:] == _SHAPE[:2]:
        return X[..., None]
    if X.ndim == 4 and X.shape[1:] == _SHAPE:
        return X
    raise ValueError(f"expected clips of shape (n, 144), (n, 12, 12) or (n, 12, 12, 1); got {X.shape}")


def _check_fit_input(est, X, y):
    X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
    check_classification_targets(y)
    est.classes_, y_idx = np.unique(y, return_inverse=True)
    if len(est.classes_) != 2:
        raise ValueError(f"binary labels required; got {len(est.classes_)} classes")
    est.n_features_in_ = int(np.prod(X.shape[1:]))
    return _as_images(X), y_idx


def _check_predict_input(est, X):
    check_is_fitted(est, "classes_")
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if int(np.prod(X.shape[1:])) != est.n_features_in_:
        raise ValueError(f"X has {int(np.prod(X.shape[1:]))} features, expected {est.n_features_in_}")
    return _as_images(X)


def _dataset(images, y, name):
    return data.Dataset(images[..., 0], np.asarray(y, dtype=np.int64), name)


class CNNClassifier(ClassifierMixin, BaseEstimator):
    """One centrally trained CNN: ``steps`` minibatch updates of cross-entropy."""

    def __init__(self, architecture="compact", steps=200, lr=1e-3, batch_size=64, optimizer="adam", seed=0):
        self.architecture = architecture
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.seed = seed

    def fit(self, X, y):
        images, y_idx = _check_fit_input(self, X, y)
        if self.architecture not in nn.ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        spec = nn.ARCHITECTURES[self.architecture]()
        client = make_clients(spec, 1, self.seed, self.optimizer, self.lr)[0]
        rng = _rng.keyed_rng(self.seed, _rng.LOCAL, 0, 0)
        client, self.loss_curve_ = train_steps(client, images, y_idx, self.steps, self.lr, self.batch_size,
                                               rng, track=True, phase="fit")
        self.spec_, self.params_ = spec, client.params
        return self

    def _logits(self, X):
        images = _check_predict_input(self, X)
        return predict_logits(self.spec_, self.params_, images)

    def decision_function(self, X):
        logits = self._logits(X)
        return logits[:, 1] - logits[:, 0]

    def predict_proba(self, X):
        return nn.softmax(self._logits(X))

    def predict(self, X):
        idx = self.predict_proba(X).argmax(axis=1)
        return self.classes_[idx]


class FedKDHybridClassifier(ClassifierMixin, BaseEstimator):
    """Simulated federation fitted on pooled data.

    ``fit`` splits off a public set (unless ``X_public``/``y_public`` are
    given), partitions the rest over ``n_clients`` and runs ``algorithm``.
    ``predict_proba`` averages the clients' softmax outputs; for FedAvg and
    FedProx it uses the global model. ``history_`` holds per-round metrics
    measured on the public set.
    """

    def __init__(self, algorithm="fedkd-hybrid", n_clients=8, rounds=10, participation=1.0, e1=20, e2=10,
                 lr1=1e-3, lr2=1e-3, lam=0.5, batch_size=64, optimizer="adam", mu=0.01,
                 architecture="compact", shared_layers="Conv1,FC2,FC3", heterogeneous=False,
                 public_fraction=0.5, partition="dirichlet", alpha=0.5, seed=0):
        self.algorithm = algorithm
        self.n_clients = n_clients
        self.rounds = rounds
        self.participation = participation
        self.e1 = e1
        self.e2 = e2
        self.lr1 = lr1
        self.lr2 = lr2
        self.lam = lam
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.mu = mu
        self.architecture = architecture
        self.shared_layers = shared_layers
        self.heterogeneous = heterogeneous
        self.public_fraction = public_fraction
        self.partition = partition
        self.alpha = alpha
        self.seed = seed

    def _config(self):
        return ExperimentConfig(**self.get_params())

    def fit(self, X, y, X_public=None, y_public=None):
        images, y_idx = _check_fit_input(self, X, y)
        cfg = self._config()
        pool = _dataset(images, y_idx, "train")
        if X_public is None:
            public, private = data.split_public_private(pool, cfg.public_fraction, cfg.seed)
        else:
            Xp, yp = check_X_y(X_public, y_public, allow_nd=True, dtype=np.float64)
            if not np.isin(yp, self.classes_).all():
                raise ValueError("y_public contains labels absent from y")
            yp = np.searchsorted(self.classes_, yp)
            public, private = _dataset(_as_images(Xp), yp, "public"), pool
        plan = data.partition(private, cfg.n_clients, cfg.partition,
                              cfg.alpha if cfg.partition == "dirichlet" else None, cfg.seed)
        d = ExperimentData(public, private, public, plan.shards(private))
        result = run_algorithm(cfg, build_clients(cfg), d, cfg.round_config(track_objective=False))
        self.history_ = result.records
        if cfg.algorithm in ("fedavg", "fedprox"):
            self.models_ = [final_model(cfg, result)]
        else:
            self.models_ = [(c.spec, c.params) for c in result.clients]
        return self

    def predict_proba(self, X):
        images = _check_predict_input(self, X)
        probs = [nn.softmax(predict_logits(spec, params, images)) for spec, params in self.models_]
        return np.mean(probs, axis=0)

    def predict(self, X):
        idx = self.predict_proba(X).argmax(axis=1)
        return self.classes_[idx]
