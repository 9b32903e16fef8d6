"""Layer and model descriptions, shape inference and weight initialisation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .. import _rng
from ..exceptions import ShapeError

CONV = "Conv2D"
DENSE = "Dense"
RELU = "ReLU"
FLATTEN = "Flatten"
LAYER_KINDS = (CONV, DENSE, RELU, FLATTEN)
PARAM_KINDS = (CONV, DENSE)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    kernel: tuple[int, int] = (3, 3)
    out_channels: int = 0
    stride: int = 1
    padding: str = "same"
    units: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == CONV:
            kh, kw = self.kernel
            if kh < 1 or kw < 1:
                raise ShapeError(f"{self.name}: kernel dims must be >= 1", self.name)
            if self.stride < 1:
                raise ShapeError(f"{self.name}: stride must be >= 1", self.name)
            if self.out_channels < 1:
                raise ShapeError(f"{self.name}: out_channels must be >= 1", self.name)
            if self.padding not in ("same", "valid"):
                raise ValueError(f"{self.name}: padding must be 'same' or 'valid'")
        if self.kind == DENSE and self.units < 1:
            raise ShapeError(f"{self.name}: units must be >= 1", self.name)

    @property
    def has_params(self):
        return self.kind in PARAM_KINDS


def conv2d(name, out_channels, kernel=3, stride=1, padding="same"):
    if isinstance(kernel, int):
        kernel = (kernel, kernel)
    return LayerSpec(CONV, name, kernel=tuple(kernel), out_channels=out_channels,
                     stride=stride, padding=padding)


def dense(name, units):
    return LayerSpec(DENSE, name, units=units)


def relu(name):
    return LayerSpec(RELU, name)


def flatten(name="flatten"):
    return LayerSpec(FLATTEN, name)


class LayerParams(NamedTuple):
    weight: np.ndarray
    bias: np.ndarray


def conv_geometry(size, k, stride, padding):
    """Return ``(out, pad_before, pad_after)`` along one spatial axis.

    'same' follows the usual convention: ``out = ceil(size / stride)`` and the
    odd pixel of padding goes after.
    """
    if padding == "valid":
        return (size - k) // stride + 1, 0, 0
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _layer_output_shape(layer, shape):
    if layer.kind == CONV:
        if len(shape) != 3:
            raise ShapeError(f"{layer.name}: Conv2D needs an HxWxC input, got {shape}", layer.name)
        h, w, _ = shape
        kh, kw = layer.kernel
        if layer.padding == "valid" and (kh > h or kw > w):
            raise ShapeError(
                f"{layer.name}: kernel {kh}x{kw} larger than input {h}x{w} with valid padding",
                layer.name)
        ho = conv_geometry(h, kh, layer.stride, layer.padding)[0]
        wo = conv_geometry(w, kw, layer.stride, layer.padding)[0]
        return (ho, wo, layer.out_channels)
    if layer.kind == DENSE:
        if len(shape) != 1:
            raise ShapeError(f"{layer.name}: Dense needs a flat input, got {shape}", layer.name)
        return (layer.units,)
    if layer.kind == FLATTEN:
        return (int(np.prod(shape)),)
    return tuple(shape)


def _infer(input_shape, layers):
    shapes = []
    shape = tuple(input_shape)
    for layer in layers:
        shape = _layer_output_shape(layer, shape)
        shapes.append(shape)
    return shapes


@dataclass(frozen=True)
class ModelSpec:
    """Layered CNN description; ``shared_layer_names`` marks the identical layers."""

    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    shared_layer_names: frozenset = field(default_factory=frozenset)
    n_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "shared_layer_names", frozenset(self.shared_layer_names))
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique: {names}")
        unknown = self.shared_layer_names - set(self.param_layer_names)
        if unknown:
            raise ValueError(f"shared layers {sorted(unknown)} are not parameterised layers of the model")
        shapes = _infer(self.input_shape, self.layers)
        if shapes[-1] != (self.n_classes,):
            raise ShapeError(f"final output {shapes[-1]} does not match {self.n_classes} classes",
                             self.layers[-1].name)

    @property
    def param_layer_names(self):
        return [layer.name for layer in self.layers if layer.has_params]

    def layer(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def with_shared(self, names):
        return ModelSpec(self.input_shape, self.layers, frozenset(names), self.n_classes)


def infer_shapes(spec):
    """Output shape after every layer of ``spec``."""
    return _infer(spec.input_shape, spec.layers)


def param_shapes(spec):
    """``{layer name: (weight shape, bias shape)}`` for parameterised layers."""
    out = {}
    shape = spec.input_shape
    for layer in spec.layers:
        nxt = _layer_output_shape(layer, shape)
        if layer.kind == CONV:
            kh, kw = layer.kernel
            out[layer.name] = ((kh, kw, shape[2], layer.out_channels), (layer.out_channels,))
        elif layer.kind == DENSE:
            out[layer.name] = ((shape[0], layer.units), (layer.units,))
        shape = nxt
    return out


def init_params(spec, seed, client_id=0):
    """Glorot-uniform weights and zero biases.

    Shared layers draw from a stream keyed only by the seed and layer name, so
    every client starts from the same broadcast values for them. Private layers
    draw from the client's own stream.
    """
    params = {}
    for name, (wshape, bshape) in param_shapes(spec).items():
        if name in spec.shared_layer_names:
            rng = _rng.keyed_rng(seed, _rng.INIT, _rng.SHARED, _rng.name_key(name))
        else:
            rng = _rng.keyed_rng(seed, _rng.INIT, client_id, _rng.name_key(name))
        if len(wshape) == 4:
            kh, kw, cin, cout = wshape
            fan_in, fan_out = kh * kw * cin, kh * kw * cout
        else:
            fan_in, fan_out = wshape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = LayerParams(rng.uniform(-limit, limit, size=wshape), np.zeros(bshape))
    return params


def zeros_like_params(params):
    return {k: LayerParams(np.zeros_like(p.weight), np.zeros_like(p.bias)) for k, p in params.items()}


def copy_params(params):
    return {k: LayerParams(p.weight.copy(), p.bias.copy()) for k, p in params.items()}


def params_equal(a, b):
    """Bit-exact equality of two parameter maps."""
    if a.keys() != b.keys():
        return False
    return all(np.array_equal(a[k].weight, b[k].weight) and np.array_equal(a[k].bias, b[k].bias)
               for k in a)


def flatten_params(params, names=None):
    names = list(params) if names is None else names
    return np.concatenate([np.concatenate([params[n].weight.ravel(), params[n].bias.ravel()])
                           for n in names])


def unflatten_params(vector, like, names=None):
    names = list(like) if names is None else names
    need = sum(like[n].weight.size + like[n].bias.size for n in names)
    if need != vector.size:
        raise ShapeError(f"vector has {vector.size} entries, parameters need {need}")
    out = dict(like)
    pos = 0
    for n in names:
        w, b = like[n]
        nw, nb = w.size, b.size
        out[n] = LayerParams(vector[pos:pos + nw].reshape(w.shape).copy(),
                             vector[pos + nw:pos + nw + nb].reshape(b.shape).copy())
        pos += nw + nb
    return out


SHARED_LAYERS = frozenset({"Conv1", "FC2", "FC3"})


def full_spec(shared=SHARED_LAYERS, wide=False, input_shape=(12, 12, 1)):
    """The 8-layer hotspot CNN.

    Conv5 is stride 2 / same padding so that 12x12 inputs give the 6x6x32 map
    the architecture expects. ``wide=True`` gives the heterogeneous variant
    with 24-channel Conv2-Conv4; every shared layer keeps its shape.
    """
    c = 24 if wide else 16
    c4 = 24 if wide else 32
    return _stack(input_shape, (16, c, c, c4, 32), (320, 240), shared)


def compact_spec(shared=SHARED_LAYERS, wide=False, input_shape=(12, 12, 1)):
    """Same topology as :func:`full_spec` with every width cut down.

    Used for desk-scale runs where the full model is too slow on one core.
    """
    c = 12 if wide else 8
    c4 = 12 if wide else 16
    return _stack(input_shape, (8, c, c, c4, 16), (64, 32), shared)


def _stack(input_shape, convs, fcs, shared):
    layers = []
    for i, ch in enumerate(convs, start=1):
        stride = 2 if i == 5 else 1
        layers.append(conv2d(f"Conv{i}", ch, 3, stride=stride, padding="same"))
        layers.append(relu(f"relu{i}"))
    layers.append(flatten("flatten"))
    for i, units in enumerate(fcs, start=1):
        layers.append(dense(f"FC{i}", units))
        layers.append(relu(f"relu_fc{i}"))
    layers.append(dense("FC3", 2))
    return ModelSpec(input_shape, tuple(layers), frozenset(shared))


ARCHITECTURES = {"full": full_spec, "compact": compact_spec}
