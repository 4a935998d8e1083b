"""Named-parameter containers shared by the transformer and the CNN."""

from __future__ import annotations

import copy
import hashlib

import numpy as np

from .autograd import DEFAULT_DTYPE, Tensor


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return (rng.normal(size=shape) * np.sqrt(2.0 / (fan_in + fan_out))).astype(dtype)


class Module:
    """Holds an ordered ``name -> Tensor`` dict of trainable parameters."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype, copy=True)

    def clone(self):
        """Deep copy with fresh parameter tensors (no shared arrays)."""
        other = copy.copy(self)
        other.params = {k: Tensor(p.data.copy(), requires_grad=True, name=k) for k, p in self.params.items()}
        return other

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, p in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))
