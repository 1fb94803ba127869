"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from crophybrid.nn.layers import Layer, softmax_xent


@dataclass
class GradReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def lines(self) -> list[str]:
        out = []
        for name, err in self.errors.items():
            flag = "ok" if err < self.tolerance else "FAIL"
            out.append(f"{name:<32} {err:.3e}  {flag}")
        return out


# Below this magnitude a block is compared absolutely: central differences at
# h=1e-5 carry ~1e-11 of rounding noise, so a gradient that is exactly zero
# (a conv bias feeding a train-mode batch norm) has no meaningful ratio.
SCALE_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = SCALE_FLOOR) -> float:
    """Max-norm relative error of a whole block; 0 when both are exactly zero."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale == 0.0:
        return 0.0 if diff == 0.0 else np.inf
    return float(diff / scale)


def _blocks(target):
    layers = target.layers if hasattr(target, "layers") else [target]
    for i, layer in enumerate(layers):
        for pname in layer.params:
            key = pname if len(layers) == 1 else f"{i}.{layer.name}.{pname}"
            yield key, layer, pname


def _numeric(f, arr: np.ndarray, h: float) -> np.ndarray:
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def grad_check(target, x, labels=None, tolerance: float = 1e-4, h: float = 1e-5, seed: int = 0) -> GradReport:
    """Compare ``backward`` against central differences for every parameter and the input.

    ``target`` is a single :class:`Layer` (objective: ``sum(forward(x) * R)``
    with a fixed random ``R``) or a model exposing ``layers`` (objective: mean
    softmax cross-entropy against ``labels``). The target is deep-copied
    and promoted to float64; the caller's object is not touched.
    """
    target = copy.deepcopy(target)
    target.astype(np.float64)
    x = np.array(x, dtype=np.float64)
    rng = np.random.default_rng(seed)

    if isinstance(target, Layer):
        probe = rng.standard_normal(target.forward(x, train=True).shape)

        def objective():
            return float(np.sum(target.forward(x, train=True) * probe))

        target.forward(x, train=True)
        dx = target.backward(probe.copy())
    else:
        logits = target.forward(x, train=True)
        if labels is None:
            labels = rng.integers(0, logits.shape[1], size=logits.shape[0])

        def objective():
            return softmax_xent(target.forward(x, train=True), labels)[0]

        _, g = softmax_xent(target.forward(x, train=True), labels)
        dx = target.backward(g, input_grad=True)

    analytic = {key: layer.grads[p].copy() for key, layer, p in _blocks(target)}
    report = GradReport(tolerance=tolerance)
    report.errors["input"] = relative_error(dx, _numeric(objective, x, h))
    for key, layer, p in _blocks(target):
        report.errors[key] = relative_error(analytic[key], _numeric(objective, layer.params[p], h))
    return report
