"""Uniform-mesh function containers.

A :class:`GridFunction` is a real function sampled at the ``m + 1`` nodes of a
uniform mesh over ``[start, end]``; values between nodes are understood by
linear interpolation. A :class:`FunctionTuple` stacks ``k`` of them on a
common mesh.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class GridFunction:
    start: float
    end: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1 or vals.size < 2:
            raise InvalidInputError("GridFunction needs a 1-D array with at least 2 nodes")
        if not np.all(np.isfinite(vals)):
            raise InvalidInputError("GridFunction values must be finite")
        if not self.start < self.end:
            raise InvalidInputError(f"interval start {self.start} must be < end {self.end}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_callable(cls, func: Callable, start: float, end: float, mesh: int) -> "GridFunction":
        s = np.linspace(start, end, mesh + 1)
        return cls(start, end, np.asarray(func(s), dtype=float) * np.ones_like(s))

    @property
    def mesh(self) -> int:
        return self.values.size - 1

    @property
    def step(self) -> float:
        return (self.end - self.start) / self.mesh

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.start, self.end, self.mesh + 1)

    def same_mesh(self, other: "GridFunction") -> bool:
        return (
            self.mesh == other.mesh
            and np.isclose(self.start, other.start)
            and np.isclose(self.end, other.end)
        )

    def __call__(self, s):
        return np.interp(s, self.nodes, self.values)

    def shifted(self, c: float) -> "GridFunction":
        return GridFunction(self.start, self.end, self.values + c)


@dataclass(frozen=True)
class FunctionTuple:
    functions: tuple

    def __post_init__(self):
        funcs = tuple(self.functions)
        if len(funcs) < 1:
            raise InvalidInputError("FunctionTuple needs k >= 1 functions")
        first = funcs[0]
        for g in funcs[1:]:
            if not first.same_mesh(g):
                raise InvalidInputError("all coordinates of a FunctionTuple must share one mesh")
        object.__setattr__(self, "functions", funcs)

    @classmethod
    def from_array(cls, values, start: float, end: float) -> "FunctionTuple":
        arr = np.atleast_2d(np.asarray(values, dtype=float))
        return cls(tuple(GridFunction(start, end, row) for row in arr))

    @classmethod
    def from_callables(cls, funcs: Iterable[Callable], start: float, end: float, mesh: int):
        return cls(tuple(GridFunction.from_callable(f, start, end, mesh) for f in funcs))

    @property
    def k(self) -> int:
        return len(self.functions)

    @property
    def start(self) -> float:
        return self.functions[0].start

    @property
    def end(self) -> float:
        return self.functions[0].end

    @property
    def mesh(self) -> int:
        return self.functions[0].mesh

    @property
    def nodes(self) -> np.ndarray:
        return self.functions[0].nodes

    def as_array(self) -> np.ndarray:
        """(k, mesh + 1) array of node values, top line first."""
        return np.stack([g.values for g in self.functions])

    def __getitem__(self, i) -> GridFunction:
        return self.functions[i]

    def __len__(self) -> int:
        return self.k

    def __iter__(self):
        return iter(self.functions)


def as_tuple(f: "FunctionTuple | GridFunction | Sequence[GridFunction]") -> FunctionTuple:
    if isinstance(f, FunctionTuple):
        return f
    if isinstance(f, GridFunction):
        return FunctionTuple((f,))
    return FunctionTuple(tuple(f))
