"""Forward pass, losses and exact backpropagation for :class:`ModelSpec` networks.

Everything runs in float64 on NHWC batches. Functions are pure: parameters
and inputs are never modified in place.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import NonFiniteError, ShapeError
from .model import CONV, DENSE, FLATTEN, RELU, LayerParams, conv_geometry


def check_finite(array, where):
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"non-finite values in {where}", where)
    return array


def _as_batch(spec, batch):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == len(spec.input_shape):
        x = x[None]
    if x.shape[1:] != spec.input_shape:
        raise ShapeError(f"batch shape {x.shape[1:]} does not match model input {spec.input_shape}")
    return x


# ---------------------------------------------------------------- layers

def _conv_forward(x, weight, bias, stride, padding):
    b, h, w, c = x.shape
    kh, kw, _, cout = weight.shape
    ho, pt, pb = conv_geometry(h, kh, stride, padding)
    wo, pl, pr = conv_geometry(w, kw, stride, padding)
    if pt or pb or pl or pr:
        xp = np.zeros((b, h + pt + pb, w + pl + pr, c))
        xp[:, pt:pt + h, pl:pl + w] = x
    else:
        xp = x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, kh * kw * c)
    out = cols @ weight.reshape(kh * kw * c, cout) + bias
    return out.reshape(b, ho, wo, cout), (cols, x.shape, xp.shape, (pt, pl))


def _conv_backward(dout, weight, cache, stride, need_dx):
    cols, xshape, xpshape, (pt, pl) = cache
    kh, kw, c, cout = weight.shape
    b, ho, wo, _ = dout.shape
    g = dout.reshape(-1, cout)
    dw = (g.T @ cols).T.reshape(weight.shape)
    db = g.sum(axis=0)
    if not need_dx:
        return None, dw, db
    h, w = xshape[1:3]
    if stride == 1:
        # input gradient = full correlation of dout with the flipped, transposed kernel
        flipped = weight[::-1, ::-1].transpose(0, 1, 3, 2)
        dpad = np.zeros((b, ho + 2 * (kh - 1), wo + 2 * (kw - 1), cout))
        dpad[:, kh - 1:kh - 1 + ho, kw - 1:kw - 1 + wo] = dout
        dxp, _ = _conv_forward(dpad, flipped, np.zeros(c), 1, "valid")
        return dxp[:, pt:pt + h, pl:pl + w], dw, db
    dcols = (g @ weight.reshape(-1, cout).T).reshape(b, ho, wo, kh, kw, c)
    dxp = np.zeros(xpshape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dcols[:, :, :, i, j]
    return dxp[:, pt:pt + h, pl:pl + w], dw, db


def _layer_forward(layer, params, h):
    if layer.kind == CONV:
        p = params[layer.name]
        return _conv_forward(h, p.weight, p.bias, layer.stride, layer.padding)
    if layer.kind == DENSE:
        p = params[layer.name]
        return h @ p.weight + p.bias, h
    if layer.kind == RELU:
        mask = h > 0
        return h * mask, mask
    if layer.kind == FLATTEN:
        return h.reshape(h.shape[0], -1), h.shape
    raise ValueError(layer.kind)


def _run(spec, params, h, start=0, keep=False):
    caches = []
    for layer in spec.layers[start:]:
        # overflow surfaces as NonFiniteError from check_finite, not as a warning
        with np.errstate(over="ignore", invalid="ignore"):
            h, cache = _layer_forward(layer, params, h)
        check_finite(h, f"activation of layer {layer.name}")
        if keep:
            caches.append(cache)
    return h, caches


def forward(spec, params, batch):
    """Raw (pre-softmax) logits, shape ``B x n_classes``."""
    x = _as_batch(spec, batch)
    return _run(spec, params, x)[0]


def forward_trace(spec, params, batch):
    """Inputs to every layer plus the final logits (used by gradcheck)."""
    h = _as_batch(spec, batch)
    inputs = []
    for layer in spec.layers:
        inputs.append(h)
        h = _layer_forward(layer, params, h)[0]
    return inputs, h


def forward_from(spec, params, h, start):
    return _run(spec, params, h, start=start)[0]


# ---------------------------------------------------------------- losses

def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def _labels(labels, n):
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} labels for {n} logit rows")
    return y


def loss_ce(logits, labels):
    """Mean softmax cross-entropy."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if z.shape[0] < 1:
        raise ShapeError("empty batch")
    y = _labels(labels, z.shape[0])
    loss = -_log_softmax(z)[np.arange(z.shape[0]), y].mean()
    return float(check_finite(loss, "cross-entropy loss"))


def loss_distill(logits, target_logits):
    """Mean squared difference over every logit entry."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    t = np.atleast_2d(np.asarray(target_logits, dtype=np.float64))
    if z.shape != t.shape:
        raise ShapeError(f"logit shape {z.shape} != target shape {t.shape}")
    return float(check_finite(np.mean((z - t) ** 2), "distillation loss"))


def hybrid_loss_and_dlogits(logits, labels, target_logits=None, lam=0.0, ce=True):
    """Loss ``ce * CE + lam * distill`` and its gradient w.r.t. the logits."""
    z = logits
    n = z.shape[0]
    loss = 0.0
    dz = np.zeros_like(z)
    if ce:
        y = _labels(labels, n)
        logp = _log_softmax(z)
        loss += -logp[np.arange(n), y].mean()
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        dz += p / n
    if target_logits is not None and lam != 0.0:
        t = np.asarray(target_logits, dtype=np.float64)
        if t.shape != z.shape:
            raise ShapeError(f"logit shape {z.shape} != target shape {t.shape}")
        diff = z - t
        loss += lam * np.mean(diff ** 2)
        dz += lam * 2.0 * diff / diff.size
    return float(check_finite(np.float64(loss), "loss")), dz


# ---------------------------------------------------------------- backward

def value_and_grad(spec, params, batch, labels=None, target_logits=None, lam=0.0, ce=True):
    """Loss and exact gradients of ``CE + lam * distill``.

    The distillation term is dropped when ``target_logits`` is None; the
    cross-entropy term is dropped when ``ce`` is False.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    x = _as_batch(spec, batch)
    logits, caches = _run(spec, params, x, keep=True)
    loss, d = hybrid_loss_and_dlogits(logits, labels, target_logits, lam, ce)
    grads = {}
    first_param = next(i for i, layer in enumerate(spec.layers) if layer.has_params)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, cache = spec.layers[i], caches[i]
        if layer.kind == CONV:
            d, dw, db = _conv_backward(d, params[layer.name].weight, cache, layer.stride,
                                       need_dx=i > first_param)
            grads[layer.name] = LayerParams(dw, db)
        elif layer.kind == DENSE:
            p = params[layer.name]
            grads[layer.name] = LayerParams(cache.T @ d, d.sum(axis=0))
            if i > first_param:
                d = d @ p.weight.T
        elif layer.kind == RELU:
            d = d * cache
        elif layer.kind == FLATTEN:
            d = d.reshape(cache)
        if i <= first_param:
            break
    grads = {name: grads[name] for name in spec.param_layer_names}
    for name, g in grads.items():
        check_finite(g.weight, f"gradient of layer {name}")
        check_finite(g.bias, f"gradient of layer {name}")
    return loss, grads


def backward(spec, params, batch, labels=None, target_logits=None, lam=0.0, ce=True):
    """Gradient map with the same keys and shapes as ``params``."""
    return value_and_grad(spec, params, batch, labels, target_logits, lam, ce)[1]


def loss_value(spec, params, batch, labels=None, target_logits=None, lam=0.0, ce=True):
    logits = forward(spec, params, batch)
    return hybrid_loss_and_dlogits(logits, labels, target_logits, lam, ce)[0]
