"""Named trainable tensors with equalized-learning-rate scaling.

Stored weights are drawn from a unit normal; every forward use multiplies by
a per-parameter constant c = gain / sqrt(fan_in), so the effective learning
rate is uniform across layers regardless of fan-in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Variable, mul
from .errors import ShapeError
from .imageops import conv2d


@dataclass
class Parameter:
    name: str
    var: Variable
    scale: float = 1.0
    trainable: bool = True

    def effective(self) -> Variable:
        """Runtime-scaled value; records a mul node when a tape is active."""
        if self.scale == 1.0:
            return self.var
        return mul(self.var, self.scale)


class ParamStore:
    """Insertion-ordered mapping of parameter names to Parameters."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data: np.ndarray, scale: float = 1.0,
            trainable: bool = True) -> Parameter:
        if name in self._params:
            raise ShapeError(f"duplicate parameter name '{name}'")
        arr = np.ascontiguousarray(data, dtype=self.dtype)
        p = Parameter(name, Variable(arr, requires_grad=True, name=name), scale, trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def trainable(self) -> list[Parameter]:
        return [p for p in self._params.values() if p.trainable]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: p.var.data for name, p in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Replace stored values in-place; names and shapes must match."""
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ShapeError(f"parameter name mismatch: missing={sorted(missing)} "
                             f"extra={sorted(extra)}")
        for name, p in self._params.items():
            arr = np.ascontiguousarray(arrays[name], dtype=self.dtype)
            if arr.shape != p.var.data.shape:
                raise ShapeError(f"shape mismatch for '{name}': "
                                 f"{arr.shape} vs {p.var.data.shape}")
            p.var.data = arr


CONV_GAIN = math.sqrt(2.0)


def add_conv(store: ParamStore, name: str, in_ch: int, out_ch: int,
             kernel: int = 3, *, rng: np.random.Generator,
             gain: float = CONV_GAIN, zero_init: bool = False) -> None:
    """Register weight+bias for a conv layer under '<name>.w' / '<name>.b'."""
    fan_in = in_ch * kernel * kernel
    scale = gain / math.sqrt(fan_in)
    if zero_init:
        w = np.zeros((out_ch, in_ch, kernel, kernel))
    else:
        w = rng.standard_normal((out_ch, in_ch, kernel, kernel))
    store.add(f"{name}.w", w, scale=scale)
    store.add(f"{name}.b", np.zeros((1, out_ch, 1, 1)), scale=1.0)


def conv(store: ParamStore, name: str, x, stride: int = 1):
    """Apply the named conv layer with its equalized scale."""
    return conv2d(x, store[f"{name}.w"].effective(),
                  store[f"{name}.b"].effective(), stride=stride)
