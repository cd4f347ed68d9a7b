"""Named parameter collections.

A ParamSet is an ordered mapping from dotted names (``bb.conv1.w``,
``fanet.delta``) to numpy arrays.  Gradients and momentum buffers live in
separate plain dicts keyed by the same names; helpers here keep those
parallel structures aligned.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError, ShapeError


class ParamSet:
    def __init__(self):
        self._tensors: dict[str, np.ndarray] = {}

    def add(self, name: str, tensor: np.ndarray) -> None:
        if name in self._tensors:
            raise InputError(f"duplicate parameter name {name!r}")
        self._tensors[name] = np.asarray(tensor)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __setitem__(self, name: str, tensor: np.ndarray) -> None:
        if name not in self._tensors:
            raise InputError(f"unknown parameter name {name!r}")
        old = self._tensors[name]
        tensor = np.asarray(tensor)
        if tensor.shape != old.shape:
            raise ShapeError(
                f"parameter {name!r} has shape {old.shape}, got {tensor.shape}"
            )
        self._tensors[name] = tensor

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def update(self, other: "ParamSet") -> None:
        """Absorb another set; duplicate names are an error."""
        for name, tensor in other.items():
            self.add(name, tensor)

    def size(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for name, tensor in self.items():
            out.add(name, tensor.astype(dtype))
        return out

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, tensor in self.items():
            out.add(name, tensor.copy())
        return out

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(t) for name, t in self.items()}


def accumulate(grads: dict, delta: dict) -> dict:
    """Sum gradient contributions into ``grads`` (shape-checked)."""
    for name, g in delta.items():
        if name in grads:
            if grads[name].shape != g.shape:
                raise ShapeError(
                    f"gradient for {name!r}: shape {grads[name].shape} vs {g.shape}"
                )
            grads[name] = grads[name] + g
        else:
            grads[name] = g
    return grads
