"""Central finite-difference verification of :func:`value_and_grad`."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import _rng
from .model import RELU, LayerParams
from .ops import _as_batch, _layer_forward, forward_trace, hybrid_loss_and_dlogits, value_and_grad


@dataclass
class LayerCheck:
    name: str
    max_rel_error: float
    n_checked: int
    coords: list = field(default_factory=list)  # (tensor, flat index) pairs
    worst: tuple | None = None
    n_skipped: int = 0  # stencils that crossed a ReLU kink

    def ok(self, tol):
        return self.n_checked > 0 and self.max_rel_error < tol


@dataclass
class GradcheckReport:
    layers: dict
    tolerance: float

    @property
    def passed(self):
        return all(c.ok(self.tolerance) for c in self.layers.values())

    @property
    def failing_layers(self):
        return [n for n, c in self.layers.items() if not c.ok(self.tolerance)]

    def lines(self):
        out = []
        for name, c in self.layers.items():
            status = "ok" if c.ok(self.tolerance) else "FAIL"
            out.append(f"{name:>8s}  checked={c.n_checked:6d}  skipped={c.n_skipped:3d}  "
                       f"max_rel_err={c.max_rel_error:.3e}  {status}")
        return out


def relative_error(analytic, numeric, floor=1e-6):
    """``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps gradients below ~1e-6, where central-difference roundoff
    (about 1e-11 in float64 at step 1e-5) dominates, from reading as failures.
    """
    denom = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / denom


def gradcheck(spec, params, batch, labels, lam=0.0, target_logits=None, *, fraction=0.05,
              step=1e-5, tol=1e-4, seed=0, analytic=None, ce=True, min_coords=1, floor=1e-6):
    """Compare analytic gradients with central differences on a random coordinate sample.

    ``analytic`` may be supplied to check a precomputed gradient map (used for
    fault injection); otherwise it is computed with :func:`value_and_grad`.
    Perturbing a coordinate of layer ``k`` only re-runs the network from layer
    ``k`` onward, reusing the cached input to that layer.

    A coordinate whose ``+step`` or ``-step`` evaluation flips any downstream
    ReLU mask is skipped and counted in ``n_skipped``: the loss is not
    differentiable inside that stencil, so the difference quotient measures
    nothing. A layer with no usable coordinate fails.
    """
    x = _as_batch(spec, batch)
    if analytic is None:
        _, analytic = value_and_grad(spec, params, x, labels, target_logits, lam, ce)
    inputs, _ = forward_trace(spec, params, x)
    rng = _rng.keyed_rng(seed, _rng.DIAG)

    base_masks = {i: inputs[i] > 0 for i, layer in enumerate(spec.layers) if layer.kind == RELU}

    def loss_at(p, start):
        """Loss, and whether every ReLU mask after ``start`` matches the unperturbed pass."""
        h, same = inputs[start], True
        for i in range(start, len(spec.layers)):
            h, cache = _layer_forward(spec.layers[i], p, h)
            if i in base_masks and same:
                same = np.array_equal(cache, base_masks[i])
        return hybrid_loss_and_dlogits(h, labels, target_logits, lam, ce)[0], same

    report = {}
    for idx, layer in enumerate(spec.layers):
        if not layer.has_params:
            continue
        name = layer.name
        check = LayerCheck(name, 0.0, 0)
        parts = [params[name].weight.copy(), params[name].bias.copy()]
        p2 = dict(params)
        p2[name] = LayerParams(*parts)
        for t, tensor in enumerate(parts):
            size = tensor.size
            k = min(size, max(min_coords, int(np.ceil(fraction * size))))
            view = tensor.reshape(-1)
            for flat in sorted(rng.choice(size, size=k, replace=False).tolist()):
                orig = view[flat]
                view[flat] = orig + step
                up, same_up = loss_at(p2, idx)
                view[flat] = orig - step
                down, same_down = loss_at(p2, idx)
                view[flat] = orig
                if not (same_up and same_down):
                    check.n_skipped += 1
                    continue
                numeric = (up - down) / (2 * step)
                a = float(analytic[name][t].reshape(-1)[flat])
                err = relative_error(a, numeric, floor)
                check.coords.append((t, flat))
                check.n_checked += 1
                if err >= check.max_rel_error:
                    check.max_rel_error = err
                    check.worst = (t, flat, a, numeric)
        report[name] = check
    return GradcheckReport(report, tol)
