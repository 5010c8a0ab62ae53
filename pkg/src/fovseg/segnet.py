"""Small U-shaped segmentation CNN."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import tensor as T
from .layers import Module, he_normal
from .tensor import ContractError, DiffTensor


@dataclass(frozen=True)
class SegConfig:
    in_channels: int = 1
    classes: int = 4
    out_size: int = 16
    widths: Tuple[int, ...] = (16, 32, 64)

    @property
    def depth(self) -> int:
        return len(self.widths)


class SegNet(Module):
    """Encoder: one 3x3 conv per level, stride 2 between levels, plus a
    bottleneck conv. Decoder: bilinear upsample, concatenate the skip, 3x3
    conv. A 1x1 conv produces per-pixel class logits at the input size.
    """

    prefix = "seg."

    def __init__(self, config: SegConfig, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        w = config.widths
        cin = config.in_channels
        for i, cout in enumerate(w):
            self._conv(f"enc{i}", rng, 3, cin, cout)
            cin = cout
        self._conv("mid", rng, 3, w[-1], w[-1])
        for i in reversed(range(len(w) - 1)):
            self._conv(f"dec{i}", rng, 3, cin + w[i], w[i])
            cin = w[i]
        self._conv("head", rng, 1, cin, config.classes)

    def _conv(self, name, rng, k, cin, cout):
        self.add_param(f"{name}.w", he_normal(rng, k, cin, cout))
        self.add_param(f"{name}.b", np.zeros(cout))

    def _apply(self, name, x, stride=1, act=True):
        wt = self.params[f"{name}.w"]
        y = T.conv2d(x, wt, stride=stride, padding=wt.shape[0] // 2)
        y = T.add(y, self.params[f"{name}.b"])
        return T.relu(y) if act else y

    def forward(self, patches) -> DiffTensor:
        """(P, S, S, C) patches -> (P, S, S, K) logits."""
        x = T.as_tensor(patches)
        cfg = self.config
        if x.values.ndim != 4 or x.shape[1:] != (cfg.out_size, cfg.out_size, cfg.in_channels):
            raise ContractError(f"segnet expects (P, {cfg.out_size}, {cfg.out_size}, {cfg.in_channels}), got {x.shape}")
        skips = []
        for i in range(cfg.depth):
            x = self._apply(f"enc{i}", x, stride=1 if i == 0 else 2)
            skips.append(x)
        x = self._apply("mid", x)
        for i in reversed(range(cfg.depth - 1)):
            skip = skips[i]
            x = T.resize_bilinear(x, skip.shape[1], skip.shape[2])
            x = self._apply(f"dec{i}", T.concat([x, skip], axis=-1))
        return self._apply("head", x, act=False)
