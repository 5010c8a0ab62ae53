"""Foveation network and the patch-selection schemes built on its output."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .layers import Module, he_normal
from .tensor import BatchNormState, ContractError, DiffTensor


class FoveationNet(Module):
    """3x3 conv -> BatchNorm -> ReLU, repeated, then a channel softmax.

    The last layer's width is the number of candidate patches D.
    """

    prefix = "fov."

    def __init__(self, in_channels: int, widths: Sequence[int] = (40, 40, 5), rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.widths = tuple(int(w) for w in widths)
        cin = in_channels
        for i, cout in enumerate(self.widths):
            self.add_param(f"conv{i}.w", he_normal(rng, 3, cin, cout))
            self.add_param(f"conv{i}.b", np.zeros(cout))
            self.add_param(f"bn{i}.gamma", np.ones(cout))
            self.add_param(f"bn{i}.beta", np.zeros(cout))
            self.bn[f"bn{i}"] = BatchNormState(cout)
            cin = cout

    @property
    def n_patches(self) -> int:
        return self.widths[-1]

    def forward(self, lowres, mode: str = "train") -> DiffTensor:
        """(L, h, w, C) low-res images -> (L, h, w, D) patch probabilities."""
        x = T.as_tensor(lowres)
        if x.values.ndim == 3:
            x = T.DiffTensor(x.values[None])
        for i in range(len(self.widths)):
            p = self.params
            x = T.conv2d(x, p[f"conv{i}.w"], stride=1, padding=1)
            x = T.add(x, p[f"conv{i}.b"])
            x = T.batchnorm(x, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], self.bn[f"bn{i}"], mode=mode)
            x = T.relu(x)
        return T.softmax_channel(x)


def _check_distribution(f: np.ndarray):
    if np.any(f < 0):
        raise ContractError("probabilities must be non-negative")
    if np.any(np.abs(f.sum(axis=-1) - 1.0) > 1e-6):
        raise ContractError("probabilities must sum to 1")


def sample_categorical(f, rng: np.random.Generator):
    """Inverse-CDF draw(s) from Categorical(f) over the last axis."""
    f = np.asarray(f, dtype=np.float64)
    _check_distribution(f)
    cdf = np.cumsum(f, axis=-1)
    u = rng.random(f.shape[:-1] + (1,))
    idx = (cdf <= u).sum(axis=-1)
    idx = np.minimum(idx, f.shape[-1] - 1)
    return int(idx) if idx.ndim == 0 else idx


def gsm_sample(f, tau: float, rng: np.random.Generator) -> DiffTensor:
    """Gumbel-Softmax relaxed sample ``softmax((log f + g) / tau)``.

    ``f`` may be a DiffTensor (gradients flow back to whatever produced it) or
    a plain array; one fresh Gumbel draw is taken per row.
    """
    if tau <= 0:
        raise ContractError("tau must be positive")
    f = T.as_tensor(f)
    noise = rng.gumbel(size=f.shape)
    logits = T.add(T.log_clamped(f), noise)
    return T.softmax_channel(T.scale(logits, 1.0 / tau))


def mean_combine(f: DiffTensor, patches: np.ndarray) -> DiffTensor:
    """Probability-weighted patch average. ``f`` is (P, D); patches (P, D, S, S, C)."""
    return T.blend(T.as_tensor(f), patches)


def mode_select(f: DiffTensor, patches: np.ndarray) -> DiffTensor:
    """Most probable patch forward; straight-through gradient to ``f``."""
    return T.blend(T.straight_through_onehot(T.as_tensor(f)), patches)


@dataclass
class TemperatureSchedule:
    rate: float
    floor: float = 0.10

    @classmethod
    def for_total(cls, total_iterations: int, floor: float = 0.10) -> "TemperatureSchedule":
        return cls(rate=1.0 / max(total_iterations, 1), floor=floor)


def tau_at(schedule: TemperatureSchedule, t: int) -> float:
    if t < 0:
        raise ContractError("t must be >= 0")
    return max(schedule.floor, math.exp(-schedule.rate * t))
