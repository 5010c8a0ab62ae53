"""Parameter containers shared by the two networks."""

from __future__ import annotations

from typing import Dict, List

import numpy as np

from .tensor import BatchNormState, DiffTensor, parameter


def he_normal(rng: np.random.Generator, k: int, cin: int, cout: int) -> np.ndarray:
    """Fan-in He initialisation for a (k, k, cin, cout) kernel."""
    return rng.normal(0.0, np.sqrt(2.0 / (k * k * cin)), size=(k, k, cin, cout))


class Module:
    """Named parameters plus named non-trainable buffers."""

    prefix = ""

    def __init__(self):
        self.params: Dict[str, DiffTensor] = {}
        self.bn: Dict[str, BatchNormState] = {}

    def add_param(self, name: str, values: np.ndarray) -> DiffTensor:
        p = parameter(np.array(values, dtype=np.float64), name=f"{self.prefix}{name}")
        self.params[name] = p
        return p

    def parameters(self) -> List[DiffTensor]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def zero_(self):
        """Set every weight and bias to zero (keeps BN gamma at 1)."""
        for name, p in self.params.items():
            p.values[...] = 1.0 if name.endswith(".gamma") else 0.0

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {f"{self.prefix}{k}": p.values.copy() for k, p in self.params.items()}
        for k, st in self.bn.items():
            out[f"{self.prefix}{k}.running_mean"] = st.running_mean.copy()
            out[f"{self.prefix}{k}.running_var"] = st.running_var.copy()
        return out

    def load_state_dict(self, arrays: Dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            key = f"{self.prefix}{k}"
            if key not in arrays:
                raise KeyError(f"checkpoint is missing {key}")
            if arrays[key].shape != p.values.shape:
                raise ValueError(f"{key}: shape {arrays[key].shape} != {p.values.shape}")
            p.values[...] = arrays[key]
        for k, st in self.bn.items():
            st.running_mean = np.array(arrays[f"{self.prefix}{k}.running_mean"])
            st.running_var = np.array(arrays[f"{self.prefix}{k}.running_var"])
