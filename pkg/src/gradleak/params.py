"""Named per-layer parameter tensors with flat-vector views."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, ShapeError


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Coerce user data to a finite float64 array, optionally reshaped."""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"extents must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


class ParamSet:
    """Ordered (name, array) pairs; ``flatten``/``unflatten`` are exact inverses."""

    def __init__(self, layers: Iterable[tuple[str, np.ndarray]]):
        self.layers = [(str(name), np.asarray(value, dtype=np.float64)) for name, value in layers]
        names = [name for name, _ in self.layers]
        if len(set(names)) != len(names):
            raise ShapeError(f"duplicate layer names in {names}")

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.layers]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [value.shape for _, value in self.layers]

    @property
    def sizes(self) -> list[int]:
        return [value.size for _, value in self.layers]

    @property
    def total_dim(self) -> int:
        return sum(self.sizes)

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, name: str) -> np.ndarray:
        for key, value in self.layers:
            if key == name:
                return value
        raise KeyError(name)

    def arrays(self) -> list[np.ndarray]:
        return [value for _, value in self.layers]

    def flatten(self) -> np.ndarray:
        if not self.layers:
            return np.zeros(0)
        return np.concatenate([value.ravel() for _, value in self.layers])

    def unflatten(self, vector) -> "ParamSet":
        """Return a ParamSet with this structure holding ``vector``'s values."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.ndim != 1 or vector.size != self.total_dim:
            raise DimensionError(f"expected flat vector of length {self.total_dim}, got shape {vector.shape}")
        out, offset = [], 0
        for name, value in self.layers:
            out.append((name, vector[offset:offset + value.size].reshape(value.shape).copy()))
            offset += value.size
        return ParamSet(out)

    def slices(self) -> list[slice]:
        """Flat-vector slice occupied by each layer."""
        out, offset = [], 0
        for size in self.sizes:
            out.append(slice(offset, offset + size))
            offset += size
        return out

    def copy(self) -> "ParamSet":
        return ParamSet((name, value.copy()) for name, value in self.layers)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamSet):
            return NotImplemented
        return self.names == other.names and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )

    def __repr__(self) -> str:
        inner = ", ".join(f"{name}{list(value.shape)}" for name, value in self.layers)
        return f"ParamSet({inner})"
