"""Named parameter containers and the gradient entry point."""

from __future__ import annotations

from typing import Callable, Iterator, Mapping

import numpy as np

from .autodiff import Var, backward


class ParameterSet:
    """Ordered mapping of names to float64 arrays with frozen shapes.

    Iteration follows insertion order, so two sets built by the same code
    always iterate identically.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        for name, value in (arrays or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self._arrays:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name!r} has non-finite entries")
        self._arrays[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._arrays:
            raise KeyError(f"unknown parameter {name!r}; use add()")
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self._arrays[name].shape:
            raise ValueError(
                f"shape of {name!r} is fixed at {self._arrays[name].shape}, got {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name!r} has non-finite entries")
        self._arrays[name] = arr

    def __contains__(self, name: object) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._arrays.items()}

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self._arrays.items()})

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet({k: np.zeros_like(v) for k, v in self._arrays.items()})

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParameterSet":
        return ParameterSet({k: fn(v) for k, v in self._arrays.items()})

    def same_shapes(self, other: "ParameterSet") -> bool:
        return self.shapes() == other.shapes() and self.names() == other.names()

    def num_values(self) -> int:
        return int(sum(v.size for v in self._arrays.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._arrays.values()]) if self._arrays else np.zeros(0)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParameterSet) or not self.same_shapes(other):
            return False
        return all(np.array_equal(v, other[k]) for k, v in self.items())

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}{list(v.shape)}" for k, v in self._arrays.items())
        return f"ParameterSet({inner})"


def value_and_grad(fn: Callable[..., Var], params: ParameterSet, *args, **kwargs):
    """Evaluate ``fn(leaves, *args)`` and its gradient w.r.t. every parameter.

    ``fn`` receives a dict of leaf :class:`Var` objects keyed like ``params``
    and must return a scalar ``Var``. Parameters that do not influence the
    result get a zero gradient.
    """
    leaves = {name: Var(value) for name, value in params.items()}
    out = fn(leaves, *args, **kwargs)
    if not isinstance(out, Var):
        raise TypeError("loss function must return a Var")
    backward(out)
    grads = ParameterSet()
    for name, leaf in leaves.items():
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        grads.add(name, g)
    return float(out.value), grads


def grad(fn: Callable[..., Var], params: ParameterSet, *args, **kwargs) -> ParameterSet:
    return value_and_grad(fn, params, *args, **kwargs)[1]


def finite_difference_grad(
    fn: Callable[[ParameterSet], float], params: ParameterSet, h: float = 1e-5
) -> ParameterSet:
    """Central differences of a scalar numpy function of ``params``."""
    out = params.zeros_like()
    for name in params:
        base = params[name]
        g = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            probe = params.copy()
            arr = probe[name].copy()
            arr[idx] = base[idx] + h
            probe[name] = arr
            up = fn(probe)
            arr[idx] = base[idx] - h
            probe[name] = arr
            down = fn(probe)
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return out
