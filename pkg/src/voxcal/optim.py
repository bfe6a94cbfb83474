"""Adam, written against gradient maps returned by ``autodiff.backward``."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def optimizer_step(params: list[Tensor], grads: dict[int, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``."""
    missing = [i for i, p in enumerate(params) if p.node_id not in grads]
    if missing:
        raise KeyError(f"no gradient for parameter(s) at position {missing[:5]}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise ValueError("optimizer state was built for a different parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, m, v in zip(params, state.m, state.v):
        g = grads[p.node_id].astype(p.data.dtype, copy=False)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)
    return state


class Adam:
    """Convenience wrapper binding a parameter list to an :class:`AdamState`."""

    def __init__(self, params: list[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr, beta1, beta2, eps)

    def step(self, grads: dict[int, np.ndarray]) -> None:
        # parameters the loss never touched get a zero gradient
        full = {p.node_id: grads.get(p.node_id, np.zeros_like(p.data)) for p in self.params}
        optimizer_step(self.params, full, self.state)
