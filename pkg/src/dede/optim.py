"""Adam with bias correction, plus the plain gradient-descent mode."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ContractError, Tensor

MAX_STEPS = 2**62


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mode: str = "adam"
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> AdamState:
    """Update ``params`` in place; ``None`` gradients count as zero."""
    if len(params) != len(grads):
        raise ContractError(f"adam_step: {len(params)} params vs {len(grads)} grads")
    if state.step >= MAX_STEPS:
        raise OverflowError("adam_step: step counter overflow")
    if state.mode == "sgd":
        for p, g in zip(params, grads):
            if g is None:
                continue
            if g.shape != p.shape:
                raise ContractError(f"adam_step: grad {g.shape} vs param {p.shape}")
            p.data -= p.data.dtype.type(state.lr) * g.astype(p.dtype, copy=False)
        state.step += 1
        return state
    if state.mode != "adam":
        raise ValueError(f"unknown optimizer mode {state.mode!r}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ContractError("adam_step: state does not match parameter list")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ContractError(f"adam_step: state {m.shape} vs param {p.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ContractError(f"adam_step: grad {g.shape} vs param {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)
    return state


class Optimizer:
    """Binds a parameter list to an :class:`AdamState`."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, mode: str = "adam"):
        self.params = list(params)
        self.state = AdamState(lr=lr, mode=mode)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)
