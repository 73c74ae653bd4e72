"""Finite-support scenario trees and exact conditional expectations.

A tree of horizon ``N`` has levels ``0..N``. Level ``k`` holds the atoms of
``F_{k-1}``: one node per history ``(w_0, ..., w_{k-1})``. Every time-``k``
quantity (state, backward value, control, adjoints) is stored as an array of
shape ``(M_k, d)`` indexed by the level-``k`` nodes in lexicographic history
order. Because each level shares one branch specification, the children of
node ``i`` at level ``k`` are the contiguous block ``i*s_k .. i*s_k + s_k - 1``
of level ``k+1``; all conditional expectations are reshapes plus a weighted
sum over the branch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BadProbability, LevelMismatch, MomentViolation, ShapeMismatch

MOMENT_TOL = 1e-12
MAX_BRANCHES = 10


@dataclass(frozen=True)
class BranchSpec:
    """One noise step: support points ``values`` with probabilities ``probs``."""

    values: np.ndarray
    probs: np.ndarray

    def __init__(self, points: Sequence[tuple[float, float]] | None = None, *,
                 values: Sequence[float] | None = None, probs: Sequence[float] | None = None):
        if points is not None:
            values = [float(v) for v, _ in points]
            probs = [float(p) for _, p in points]
        if values is None or probs is None:
            raise ValueError("BranchSpec needs points or values/probs")
        v = np.asarray(values, dtype=float).reshape(-1)
        p = np.asarray(probs, dtype=float).reshape(-1)
        if v.shape != p.shape:
            raise ShapeMismatch(f"{v.size} values but {p.size} probabilities")
        v.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "probs", p)

    @classmethod
    def rademacher(cls) -> "BranchSpec":
        return cls([(1.0, 0.5), (-1.0, 0.5)])

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def points(self) -> list[tuple[float, float]]:
        return [(float(v), float(p)) for v, p in zip(self.values, self.probs)]

    def validate(self, level: int | None = None) -> None:
        where = "" if level is None else f" at level {level}"
        p, v = self.probs, self.values
        if p.size == 0 or p.size > MAX_BRANCHES:
            raise BadProbability(f"branch must have 1..{MAX_BRANCHES} points{where}", witness={"level": level})
        if not np.all(np.isfinite(v)) or not np.all(np.isfinite(p)):
            raise BadProbability(f"non-finite branch data{where}", witness={"level": level})
        if np.any(p <= 0.0):
            raise BadProbability(f"non-positive probability{where}", witness={"level": level, "probs": p.tolist()})
        total = float(p.sum())
        if abs(total - 1.0) > MOMENT_TOL:
            raise BadProbability(f"probabilities sum to {total!r}{where}", witness={"level": level, "sum": total})
        mean = float(p @ v)
        if abs(mean) > MOMENT_TOL:
            raise MomentViolation(f"E[w] = {mean!r} != 0{where}", witness={"level": level, "mean": mean})
        var = float(p @ (v * v))
        if abs(var - 1.0) > MOMENT_TOL:
            raise MomentViolation(f"E[w^2] = {var!r} != 1{where}", witness={"level": level, "variance": var})


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    horizon: int
    branches: tuple[BranchSpec, ...]
    sizes: tuple[int, ...] = field(repr=False)
    path_prob: tuple[np.ndarray, ...] = field(repr=False)

    @property
    def levels(self) -> range:
        return range(self.horizon + 1)

    @property
    def n_nodes(self) -> int:
        return sum(self.sizes)

    @property
    def n_leaves(self) -> int:
        return self.sizes[-1]

    def branching(self, k: int) -> int:
        return self.branches[k].size

    def children(self, k: int) -> np.ndarray:
        """Level-(k+1) indices of the children of every level-k node, shape (M_k, s_k)."""
        s = self.branching(k)
        return np.arange(self.sizes[k])[:, None] * s + np.arange(s)[None, :]

    def parent(self, k: int) -> np.ndarray:
        """Level-(k-1) parent of every level-k node (k >= 1)."""
        return np.arange(self.sizes[k]) // self.branching(k - 1)

    def branch_index(self, k: int) -> np.ndarray:
        """Branch index taken to reach every level-k node (k >= 1)."""
        return np.arange(self.sizes[k]) % self.branching(k - 1)

    def noise(self, k: int) -> np.ndarray:
        """Value of w_{k-1} along the last edge into every level-k node (k >= 1)."""
        return self.branches[k - 1].values[self.branch_index(k)]

    def cond_prob(self, k: int) -> np.ndarray:
        """Probability of the last edge into every level-k node (k >= 1)."""
        return self.branches[k - 1].probs[self.branch_index(k)]

    def history(self, k: int, i: int) -> str:
        digits = []
        for level in range(k, 0, -1):
            s = self.branching(level - 1)
            digits.append(str(i % s))
            i //= s
        return "".join(reversed(digits))

    def histories(self, k: int) -> list[str]:
        return [self.history(k, i) for i in range(self.sizes[k])]

    def node_index(self, history: str) -> tuple[int, int]:
        """Inverse of :meth:`history`: returns ``(level, index)``."""
        k = len(history)
        if k > self.horizon:
            raise LevelMismatch(f"history {history!r} longer than horizon {self.horizon}")
        i = 0
        for level, ch in enumerate(history):
            j = int(ch)
            if j >= self.branching(level):
                raise LevelMismatch(f"branch {j} out of range at level {level}")
            i = i * self.branching(level) + j
        return k, i

    # array-level kernels -------------------------------------------------

    def _child_block(self, values: np.ndarray, k: int) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape[0] != self.sizes[k + 1]:
            raise LevelMismatch(
                f"expected {self.sizes[k + 1]} level-{k + 1} values, got {values.shape[0]}")
        return values.reshape((self.sizes[k], self.branching(k)) + values.shape[1:])

    def expect_next(self, values: np.ndarray, k: int) -> np.ndarray:
        """E[v_{k+1} | F_{k-1}] on level k from level-(k+1) values."""
        block = self._child_block(values, k)
        return np.tensordot(self.branches[k].probs, block, axes=(0, 1))

    def expect_weighted(self, values: np.ndarray, k: int) -> np.ndarray:
        """E[v_{k+1} w_k | F_{k-1}] on level k from level-(k+1) values."""
        block = self._child_block(values, k)
        spec = self.branches[k]
        return np.tensordot(spec.probs * spec.values, block, axes=(0, 1))

    def expectation(self, values: np.ndarray, k: int) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape[0] != self.sizes[k]:
            raise LevelMismatch(f"expected {self.sizes[k]} level-{k} values, got {values.shape[0]}")
        return np.tensordot(self.path_prob[k], values, axes=(0, 0))

    def spread(self, values: np.ndarray, k: int) -> np.ndarray:
        """Copy level-k values onto their level-(k+1) children."""
        return np.repeat(np.asarray(values), self.branching(k), axis=0)


def build_tree(horizon: int, branch_specs: Sequence[BranchSpec] | BranchSpec | None = None) -> ScenarioTree:
    """Build a level-regular tree; a single spec (or None, meaning Rademacher) is reused at every step."""
    if int(horizon) != horizon or horizon < 1:
        raise LevelMismatch(f"horizon must be a positive integer, got {horizon!r}")
    horizon = int(horizon)
    if branch_specs is None:
        branch_specs = BranchSpec.rademacher()
    if isinstance(branch_specs, BranchSpec):
        branch_specs = [branch_specs] * horizon
    branch_specs = tuple(branch_specs)
    if len(branch_specs) != horizon:
        raise LevelMismatch(f"{len(branch_specs)} branch specs for horizon {horizon}")
    for k, spec in enumerate(branch_specs):
        spec.validate(k)
    sizes = [1]
    probs = [np.ones(1)]
    for spec in branch_specs:
        sizes.append(sizes[-1] * spec.size)
        probs.append(np.outer(probs[-1], spec.probs).reshape(-1))
    for p in probs:
        p.setflags(write=False)
    return ScenarioTree(horizon, branch_specs, tuple(sizes), tuple(probs))


@dataclass(frozen=True, eq=False)
class AdaptedProcess:
    """Values on levels ``0..len(values)-1``; ``values[k]`` has shape ``(M_k, dim)``."""

    values: tuple[np.ndarray, ...]

    def __init__(self, values: Sequence[np.ndarray]):
        vals = []
        dim = None
        for k, v in enumerate(values):
            a = np.array(v, dtype=float)
            if a.ndim == 1:
                a = a[:, None]
            if a.ndim != 2:
                raise ShapeMismatch(f"level {k}: expected (nodes, dim) array, got shape {a.shape}")
            if dim is None:
                dim = a.shape[1]
            elif a.shape[1] != dim:
                raise ShapeMismatch(f"level {k}: dimension {a.shape[1]} != {dim}")
            a.setflags(write=False)
            vals.append(a)
        object.__setattr__(self, "values", tuple(vals))

    @property
    def dim(self) -> int:
        return self.values[0].shape[1]

    @property
    def n_levels(self) -> int:
        return len(self.values)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.values[k]

    def check_on(self, tree: ScenarioTree, n_levels: int | None = None) -> None:
        if n_levels is not None and self.n_levels != n_levels:
            raise LevelMismatch(f"process has {self.n_levels} levels, expected {n_levels}")
        for k, v in enumerate(self.values):
            if v.shape[0] != tree.sizes[k]:
                raise LevelMismatch(f"level {k}: {v.shape[0]} values for {tree.sizes[k]} nodes")

    def flat(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.values])

    @classmethod
    def from_flat(cls, tree: ScenarioTree, flat: np.ndarray, dim: int, n_levels: int) -> "AdaptedProcess":
        out, pos = [], 0
        for k in range(n_levels):
            size = tree.sizes[k] * dim
            out.append(np.asarray(flat[pos:pos + size]).reshape(tree.sizes[k], dim))
            pos += size
        return cls(out)

    @classmethod
    def zeros(cls, tree: ScenarioTree, dim: int, n_levels: int | None = None) -> "AdaptedProcess":
        n_levels = tree.horizon + 1 if n_levels is None else n_levels
        return cls([np.zeros((tree.sizes[k], dim)) for k in range(n_levels)])

    @classmethod
    def constant(cls, tree: ScenarioTree, value, n_levels: int | None = None) -> "AdaptedProcess":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        n_levels = tree.horizon + 1 if n_levels is None else n_levels
        return cls([np.tile(value, (tree.sizes[k], 1)) for k in range(n_levels)])

    def replace_level(self, k: int, values: np.ndarray) -> "AdaptedProcess":
        vals = list(self.values)
        vals[k] = np.asarray(values, dtype=float).reshape(vals[k].shape)
        return AdaptedProcess(vals)

    def __add__(self, other: "AdaptedProcess") -> "AdaptedProcess":
        return AdaptedProcess([a + b for a, b in zip(self.values, other.values, strict=True)])

    def __sub__(self, other: "AdaptedProcess") -> "AdaptedProcess":
        return AdaptedProcess([a - b for a, b in zip(self.values, other.values, strict=True)])

    def scale(self, c: float) -> "AdaptedProcess":
        return AdaptedProcess([c * a for a in self.values])

    def sup_distance(self, other: "AdaptedProcess") -> float:
        return max(float(np.max(np.abs(a - b), initial=0.0))
                   for a, b in zip(self.values, other.values, strict=True))


def _level_values(tree: ScenarioTree, proc: AdaptedProcess, level: int) -> np.ndarray:
    if not 0 <= level < proc.n_levels:
        raise LevelMismatch(f"process has no level {level} (levels 0..{proc.n_levels - 1})")
    values = proc[level]
    if values.shape[0] != tree.sizes[level]:
        raise LevelMismatch(f"level {level}: {values.shape[0]} values for {tree.sizes[level]} nodes")
    return values


def cond_expect_next(tree: ScenarioTree, proc: AdaptedProcess, k: int) -> np.ndarray:
    """``E[proc_{k+1} | F_{k-1}]`` as a level-k slice of shape (M_k, dim)."""
    if not 0 <= k < tree.horizon:
        raise LevelMismatch(f"time {k} outside 0..{tree.horizon - 1}")
    return tree.expect_next(_level_values(tree, proc, k + 1), k)


def cond_expect_weighted(tree: ScenarioTree, proc: AdaptedProcess, k: int) -> np.ndarray:
    """``E[proc_{k+1} w_k | F_{k-1}]`` as a level-k slice of shape (M_k, dim)."""
    if not 0 <= k < tree.horizon:
        raise LevelMismatch(f"time {k} outside 0..{tree.horizon - 1}")
    return tree.expect_weighted(_level_values(tree, proc, k + 1), k)


def total_expectation(tree: ScenarioTree, proc: AdaptedProcess, k: int) -> np.ndarray:
    return tree.expectation(_level_values(tree, proc, k), k)
