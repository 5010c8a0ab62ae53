"""Adam optimiser and the poly learning-rate policy."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .tensor import ContractError, DiffTensor


class NonFiniteGradient(FloatingPointError):
    def __init__(self, index: int, name=None):
        self.index = index
        self.name = name
        super().__init__(f"non-finite gradient in parameter #{index} ({name}); step aborted")


@dataclass
class OptimState:
    lr0: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[DiffTensor], **kwargs) -> "OptimState":
        state = cls(**kwargs)
        state.m = [np.zeros_like(p.values) for p in params]
        state.v = [np.zeros_like(p.values) for p in params]
        return state


def adam_step(params: Sequence[DiffTensor], state: OptimState, lr_t: float, grads=None) -> None:
    """One in-place Adam update with bias correction.

    Weight decay is the L2 form: ``weight_decay * p`` is added to the gradient
    before the moment updates. The whole step is rejected if any gradient is
    non-finite.
    """
    if lr_t < 0:
        raise ContractError("learning rate must be non-negative")
    if grads is None:
        grads = [p.grad for p in params]
    if len(state.m) != len(params):
        raise ContractError("optimiser state does not match parameter list")
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(i, p.name)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay > 0:
            g = g + state.weight_decay * p.values
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.values -= lr_t * (m / c1) / (np.sqrt(v / c2) + state.eps)


def poly_lr(t: int, total: int, lr0: float, power: float = 0.9) -> float:
    """``lr0 * (1 - t/total) ** power``."""
    if total <= 0:
        raise ContractError("poly_lr needs total iterations > 0")
    if not 0 <= t <= total:
        raise ContractError(f"poly_lr: t={t} outside [0, {total}]")
    return lr0 * (1.0 - t / total) ** power
