"""SGD and Adam as pure functions over parameter maps."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..exceptions import ShapeError
from .model import LayerParams, zeros_like_params

SGD = "sgd"
ADAM = "adam"


@dataclass(frozen=True)
class OptimizerState:
    kind: str = ADAM
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (SGD, ADAM):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")


def make_optimizer(kind, params, lr=1e-3, **kw):
    if kind == ADAM:
        return OptimizerState(ADAM, lr, m=zeros_like_params(params), v=zeros_like_params(params), **kw)
    return OptimizerState(kind, lr, **kw)


def _check_keys(params, grads):
    if params.keys() != grads.keys():
        raise ShapeError(f"gradient keys {sorted(grads)} do not match parameters {sorted(params)}")
    for k in params:
        if params[k].weight.shape != grads[k].weight.shape or params[k].bias.shape != grads[k].bias.shape:
            raise ShapeError(f"gradient shape mismatch for layer {k}", k)


def sgd_step(params, grads, lr):
    """``w - lr * g`` for every tensor."""
    if lr <= 0:
        raise ValueError("learning rate must be > 0")
    _check_keys(params, grads)
    return {k: LayerParams(p.weight - lr * grads[k].weight, p.bias - lr * grads[k].bias)
            for k, p in params.items()}


def adam_step(params, grads, state):
    """Bias-corrected Adam update; returns ``(params, state)``."""
    _check_keys(params, grads)
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m0 = state.m.get(k)
        v0 = state.v.get(k)
        if m0 is None:
            m0 = LayerParams(np.zeros_like(p.weight), np.zeros_like(p.bias))
            v0 = LayerParams(np.zeros_like(p.weight), np.zeros_like(p.bias))
        parts_p, parts_m, parts_v = [], [], []
        for w, gi, mi, vi in zip(p, g, m0, v0):
            mi = b1 * mi + (1.0 - b1) * gi
            vi = b2 * vi + (1.0 - b2) * gi * gi
            parts_p.append(w - state.lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps))
            parts_m.append(mi)
            parts_v.append(vi)
        new_params[k] = LayerParams(*parts_p)
        m_new[k] = LayerParams(*parts_m)
        v_new[k] = LayerParams(*parts_v)
    return new_params, replace(state, t=t, m=m_new, v=v_new)


def step(params, grads, state):
    if state.kind == SGD:
        return sgd_step(params, grads, state.lr), replace(state, t=state.t + 1)
    return adam_step(params, grads, state)


def reset_moments(state, names):
    """Zero Adam moments for the named layers; other layers keep theirs."""
    if state.kind != ADAM:
        return state
    m, v = dict(state.m), dict(state.v)
    for k in names:
        if k in m:
            m[k] = LayerParams(np.zeros_like(m[k].weight), np.zeros_like(m[k].bias))
            v[k] = LayerParams(np.zeros_like(v[k].weight), np.zeros_like(v[k].bias))
    return replace(state, m=m, v=v)
