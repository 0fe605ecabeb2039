"""Loss and ADAM optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from forcepipe.errors import LengthMismatch, ShapeMismatch


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient ``2 (pred - target) / N``."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape:
        raise LengthMismatch(f"prediction length {pred.size} != target length {target.size}")
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


@dataclass
class OptimizerState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2_coeff: float = 1e-4
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def init_moments(self, params) -> None:
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step = 0


def adam_step(params, grads, state: OptimizerState, decay_mask=None):
    """One bias-corrected ADAM update, applied to ``params`` in place.

    ``l2_coeff * param`` is added to the gradient of every parameter selected
    by ``decay_mask`` (all of them by default) before the moment update.
    """
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.init_moments(params)
    if len(state.m) != len(params):
        raise ShapeMismatch("optimizer state tracks a different parameter list")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise ShapeMismatch(f"parameter {i}: shape {p.shape} vs gradient {g.shape}")
        if state.l2_coeff and (decay_mask is None or decay_mask[i]):
            g = g + state.l2_coeff * p
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return params


class Adam:
    """ADAM bound to a list of ``(layer, name)`` parameter handles."""

    def __init__(self, handles, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8, l2_coeff=1e-4):
        self.handles = list(handles)
        self.state = OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, l2_coeff=l2_coeff)
        self.state.init_moments([layer.params[name] for layer, name in self.handles])
        self.decay_mask = [name in layer.decay for layer, name in self.handles]

    def step(self):
        params = [layer.params[name] for layer, name in self.handles]
        grads = [layer.grads[name] for layer, name in self.handles]
        adam_step(params, grads, self.state, self.decay_mask)

    def l2_penalty(self) -> float:
        """The regularization term whose gradient ``step`` adds: ``l2/2 * sum(w^2)``."""
        total = 0.0
        for (layer, name), decayed in zip(self.handles, self.decay_mask):
            if decayed:
                total += float(np.sum(layer.params[name] ** 2))
        return 0.5 * self.state.l2_coeff * total
