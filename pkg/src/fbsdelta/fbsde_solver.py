"""Solver for the fully coupled forward-backward system on a scenario tree.

Unknowns are every node value of ``x`` and ``y``, stacked level by level::

    [x_0, x_1, ..., x_N, y_0, y_1, ..., y_N]

and the residual uses the same layout: the ``x_k`` rows hold the forward
equation into level ``k`` (the initial coupling for ``k = 0``), the ``y_k``
rows hold the backward equation at level ``k`` (the terminal coupling for
``k = N``). ``y'`` and ``z'`` are linear in the children of ``y`` with weights
``p_j`` and ``p_j w_j``, which is what makes the Jacobian exact and sparse.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _sparse
from .errors import (LevelMismatch, NonConvergence, ShapeMismatch, SingularJacobian,
                     UncertifiedSolution)
from .model import ControlSet, ModelSpec
from .scenario_tree import AdaptedProcess, ScenarioTree

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 50
CERT_TOL = 1e-8
MAX_HALVINGS = 30


@dataclass(frozen=True, eq=False)
class FBSolution:
    x: AdaptedProcess
    y: AdaptedProcess
    yp: AdaptedProcess
    zp: AdaptedProcess
    residual_norm: float
    iterations: int = 0
    method: str = "newton"

    @property
    def horizon(self) -> int:
        return self.x.n_levels - 1


class Layout:
    """Offsets of the level blocks inside a stacked ``[a_0..a_N, b_0..b_N]`` vector."""

    def __init__(self, tree: ScenarioTree, dim: int):
        self.tree = tree
        self.dim = dim
        sizes = np.array(tree.sizes) * dim
        starts = np.concatenate([[0], np.cumsum(sizes)])
        self.half = int(starts[-1])
        self.size = 2 * self.half
        self._starts = starts

    def first(self, k: int) -> int:
        return int(self._starts[k])

    def second(self, k: int) -> int:
        return self.half + int(self._starts[k])

    def split(self, vec: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        t, d = self.tree, self.dim
        a = [vec[self.first(k):self.first(k) + t.sizes[k] * d].reshape(t.sizes[k], d) for k in t.levels]
        b = [vec[self.second(k):self.second(k) + t.sizes[k] * d].reshape(t.sizes[k], d) for k in t.levels]
        return a, b

    def join(self, a, b) -> np.ndarray:
        return np.concatenate([np.asarray(v).reshape(-1) for v in list(a) + list(b)])


def _check_control(model: ModelSpec, tree: ScenarioTree, u: AdaptedProcess, controls: ControlSet | None):
    if u.n_levels != tree.horizon:
        raise LevelMismatch(f"control needs levels 0..{tree.horizon - 1}, got {u.n_levels} levels")
    u.check_on(tree)
    if u.dim != model.m:
        raise ShapeMismatch(f"control dimension {u.dim} != model m={model.m}")
    if controls is not None:
        controls.check(u)


def conditional_parts(tree: ScenarioTree, y: list[np.ndarray]):
    """``(y', z')`` slices on levels 0..N-1 from backward values on levels 0..N."""
    yp = [tree.expect_next(y[k + 1], k) for k in range(tree.horizon)]
    zp = [tree.expect_weighted(y[k + 1], k) for k in range(tree.horizon)]
    return yp, zp


def _residual_parts(model, tree, u, x, y):
    N = tree.horizon
    yp, zp = conditional_parts(tree, y)
    rx = [x[0] - model.Lambda(y[0])]
    ry = []
    for k in range(N):
        nodes = np.arange(tree.sizes[k])
        args = (x[k], yp[k], zp[k], u[k])
        drift = model.b(k, nodes, *args)
        vol = model.sigma(k, nodes, *args)
        rx.append(x[k + 1] - tree.spread(drift, k) - tree.spread(vol, k) * tree.noise(k + 1)[:, None])
        ry.append(y[k] + model.f(k, nodes, *args))
    ry.append(y[N] - model.Phi(np.arange(tree.sizes[N]), x[N]))
    return rx, ry, yp, zp


def _as_levels(proc, tree, dim, label):
    if isinstance(proc, AdaptedProcess):
        proc.check_on(tree, tree.horizon + 1)
        if proc.dim != dim:
            raise ShapeMismatch(f"{label} dimension {proc.dim} != {dim}")
        return [np.asarray(v) for v in proc.values]
    return [np.asarray(v, dtype=float) for v in proc]


def residual(model: ModelSpec, tree: ScenarioTree, u: AdaptedProcess, candidate,
             controls: ControlSet | None = None) -> tuple[np.ndarray, float]:
    """Stacked residual of the coupled system at ``candidate`` and its sup norm.

    ``candidate`` is an :class:`FBSolution` or an ``(x, y)`` pair of processes.
    """
    _check_control(model, tree, u, controls)
    if isinstance(candidate, FBSolution):
        x, y = candidate.x, candidate.y
    else:
        x, y = candidate
    x = _as_levels(x, tree, model.n, "x")
    y = _as_levels(y, tree, model.n, "y")
    rx, ry, _, _ = _residual_parts(model, tree, u.values, x, y)
    vec = Layout(tree, model.n).join(rx, ry)
    return vec, float(np.max(np.abs(vec), initial=0.0))


def jacobian(model: ModelSpec, tree: ScenarioTree, u: AdaptedProcess, x, y):
    """Sparse Jacobian of the stacked residual with respect to ``[x, y]``."""
    n, N = model.n, tree.horizon
    lay = Layout(tree, n)
    trip = _sparse.Triplets(lay.size)
    trip.add_identity(0, lay.size)
    yp, zp = conditional_parts(tree, y)
    trip.add(lay.first(0), lay.second(0), -model.Lambda_jac(y[0]))
    for k in range(N):
        M = tree.sizes[k]
        nodes = np.arange(M)
        args = (x[k], yp[k], zp[k], u[k])
        bx, by, bz, _ = model.b_jac(k, nodes, *args)
        sx, sy, sz, _ = model.sigma_jac(k, nodes, *args)
        fx, fy, fz, _ = model.f_jac(k, nodes, *args)
        spec = tree.branches[k]
        kids = tree.children(k)
        for j, (vj, _) in enumerate(spec.points):
            rows = lay.first(k + 1) + kids[:, j] * n
            trip.add(rows, lay.first(k) + nodes * n, -(bx + vj * sx))
            for jj, (vjj, pjj) in enumerate(spec.points):
                block = -pjj * ((by + vj * sy) + vjj * (bz + vj * sz))
                trip.add(rows, lay.second(k + 1) + kids[:, jj] * n, block)
        rows = lay.second(k) + nodes * n
        trip.add(rows, lay.first(k) + nodes * n, fx)
        for jj, (vjj, pjj) in enumerate(spec.points):
            trip.add(rows, lay.second(k + 1) + kids[:, jj] * n, pjj * (fy + vjj * fz))
    leaves = np.arange(tree.sizes[N])
    trip.add(lay.second(N) + leaves * n, lay.first(N) + leaves * n, -model.Phi_jac(leaves, x[N]))
    return trip.tocsc()


def _fd_jacobian(fun, z: np.ndarray, h: float = 1e-7) -> np.ndarray:
    cols = []
    for j in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[j] += h
        zm[j] -= h
        cols.append((fun(zp) - fun(zm)) / (2 * h))
    return np.stack(cols, axis=1)


def _solution(model, tree, lay, z, norm, iterations, method) -> FBSolution:
    x, y = lay.split(z)
    yp, zp = conditional_parts(tree, y)
    return FBSolution(AdaptedProcess(x), AdaptedProcess(y), AdaptedProcess(yp), AdaptedProcess(zp),
                      norm, iterations, method)


def solve_newton(model: ModelSpec, tree: ScenarioTree, u: AdaptedProcess, init: FBSolution | None = None,
                 tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER, *,
                 controls: ControlSet | None = None, fd_jacobian: bool = False) -> FBSolution:
    """Global damped Newton on the stacked node values.

    At least one Newton step is always taken. Steps are halved (up to 30
    times) until the residual sup norm decreases.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    _check_control(model, tree, u, controls)
    lay = Layout(tree, model.n)
    uv = u.values

    def fun(z):
        x, y = lay.split(z)
        rx, ry, _, _ = _residual_parts(model, tree, uv, x, y)
        return lay.join(rx, ry)

    z = np.zeros(lay.size) if init is None else lay.join(init.x.values, init.y.values)
    F = fun(z)
    norm = float(np.max(np.abs(F), initial=0.0))
    it = 0
    polished = False
    while it == 0 or norm > tol or not (polished or norm == 0.0):
        if it > 0 and norm <= tol:
            # one extra step while the residual keeps falling; rejected below if it does not
            polished = True
        if it >= max_iter:
            if norm <= tol:
                break
            raise NonConvergence(f"Newton stopped after {max_iter} iterations at residual {norm:.3e}",
                                 best_residual=norm, witness={"iterations": it})
        x, y = lay.split(z)
        J = _fd_jacobian(fun, z) if fd_jacobian else jacobian(model, tree, u, x, y)
        dz = _sparse.solve(J, -F, what=f"Newton Jacobian (iteration {it})", error=SingularJacobian)
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            z_new = z + t * dz
            F_new = fun(z_new)
            norm_new = float(np.max(np.abs(F_new), initial=0.0))
            if norm_new < norm or norm_new == 0.0:
                break
            t *= 0.5
        else:
            if norm <= tol:
                break
            raise NonConvergence(f"line search failed at iteration {it}, residual {norm:.3e}",
                                 best_residual=norm, witness={"iterations": it})
        z, F, norm = z_new, F_new, norm_new
        it += 1
        log.debug("newton iteration %d: residual %.3e (step %.3g)", it, norm, t)
    return _solution(model, tree, lay, z, norm, it, "newton")


def solve_picard(model: ModelSpec, tree: ScenarioTree, u: AdaptedProcess, relaxation: float = 1.0,
                 tol: float = DEFAULT_TOL, max_iter: int = 10_000, *, init: FBSolution | None = None,
                 controls: ControlSet | None = None) -> FBSolution:
    """Relaxed alternating sweeps: backward for ``y`` given ``x``, then forward for ``x`` given ``y``.

    Stops when the sup distance between successive iterates is at most ``tol``.
    """
    if not 0 < relaxation <= 1:
        raise ValueError("relaxation must lie in (0, 1]")
    _check_control(model, tree, u, controls)
    N, n = tree.horizon, model.n
    uv = u.values
    if init is None:
        x = [np.zeros((tree.sizes[k], n)) for k in tree.levels]
        y = [np.zeros((tree.sizes[k], n)) for k in tree.levels]
    else:
        x = [np.array(v) for v in init.x.values]
        y = [np.array(v) for v in init.y.values]
    lay = Layout(tree, n)
    for sweep in range(1, max_iter + 1):
        y_new = [None] * (N + 1)
        y_new[N] = model.Phi(np.arange(tree.sizes[N]), x[N])
        for k in range(N - 1, -1, -1):
            yp, zp = tree.expect_next(y_new[k + 1], k), tree.expect_weighted(y_new[k + 1], k)
            y_new[k] = -model.f(k, np.arange(tree.sizes[k]), x[k], yp, zp, uv[k])
        x_new = [model.Lambda(y_new[0])]
        for k in range(N):
            yp, zp = tree.expect_next(y_new[k + 1], k), tree.expect_weighted(y_new[k + 1], k)
            args = (x_new[k], yp, zp, uv[k])
            nodes = np.arange(tree.sizes[k])
            x_new.append(tree.spread(model.b(k, nodes, *args), k)
                         + tree.spread(model.sigma(k, nodes, *args), k) * tree.noise(k + 1)[:, None])
        x_next = [(1 - relaxation) * a + relaxation * b for a, b in zip(x, x_new)]
        y_next = [(1 - relaxation) * a + relaxation * b for a, b in zip(y, y_new)]
        dist = max(float(np.max(np.abs(a - b))) for a, b in zip(x + y, x_next + y_next))
        x, y = x_next, y_next
        if not np.isfinite(dist):
            raise NonConvergence(f"Picard diverged at sweep {sweep}", best_residual=float("inf"))
        if dist <= tol:
            z = lay.join(x, y)
            rx, ry, _, _ = _residual_parts(model, tree, uv, x, y)
            norm = float(np.max(np.abs(lay.join(rx, ry)), initial=0.0))
            return _solution(model, tree, lay, z, norm, sweep, "picard")
    rx, ry, _, _ = _residual_parts(model, tree, uv, x, y)
    raise NonConvergence(f"Picard did not settle in {max_iter} sweeps (last step {dist:.3e})",
                         best_residual=float(np.max(np.abs(lay.join(rx, ry)))))


def cost(model: ModelSpec, tree: ScenarioTree, u: AdaptedProcess, solution: FBSolution,
         cert_tol: float = CERT_TOL) -> float:
    """Expected terminal cost + initial cost + expected running costs."""
    if not solution.residual_norm <= cert_tol:
        raise UncertifiedSolution(f"residual {solution.residual_norm:.3e} above {cert_tol:.1e}",
                                  witness={"residual_norm": solution.residual_norm})
    N = tree.horizon
    total = float(tree.expectation(model.phi(np.arange(tree.sizes[N]), solution.x[N]), N))
    total += float(model.gamma(solution.y[0])[0])
    for k in range(N):
        running = model.l(k, np.arange(tree.sizes[k]), solution.x[k], solution.yp[k], solution.zp[k], u[k])
        total += float(tree.expectation(running, k))
    return total


def solve_and_cost(model: ModelSpec, tree: ScenarioTree, u: AdaptedProcess, **kwargs) -> tuple[FBSolution, float]:
    sol = solve_newton(model, tree, u, **kwargs)
    return sol, cost(model, tree, u, sol)


# --- a priori and stability quantities -------------------------------------

def state_energy(tree: ScenarioTree, x: AdaptedProcess, y: AdaptedProcess) -> float:
    """``E[sum_k |x_k|^2 + sum_k |y_k|^2]`` over levels 0..N."""
    return float(sum(tree.expectation(np.sum(x[k] ** 2, -1) + np.sum(y[k] ** 2, -1), k) for k in tree.levels))


def apriori_input(model: ModelSpec, tree: ScenarioTree, u: AdaptedProcess) -> float:
    """Expected size of the coefficients at zero state (right side of the a priori bound)."""
    N, n = tree.horizon, model.n
    total = float(tree.expectation(np.sum(model.Phi(np.arange(tree.sizes[N]), np.zeros((tree.sizes[N], n))) ** 2, -1), N))
    total += float(np.sum(model.Lambda(np.zeros((1, n))) ** 2))
    for k in range(N):
        M = tree.sizes[k]
        zero = np.zeros((M, n))
        nodes = np.arange(M)
        for fun in (model.b, model.sigma, model.f):
            total += float(tree.expectation(np.sum(fun(k, nodes, zero, zero, zero, u[k]) ** 2, -1), k))
    return total


def stability_input(model: ModelSpec, tree: ScenarioTree, sol: FBSolution, u: AdaptedProcess,
                    sol_bar: FBSolution, u_bar: AdaptedProcess) -> float:
    """Control-difference energy bounding the state difference between two solutions.

    Follows the printed mix of arguments: the ``b``/``sigma`` terms use the
    barred state for both controls, the ``f`` term compares the unbarred state
    and control against the barred pair.
    """
    total = 0.0
    for k in range(tree.horizon):
        nodes = np.arange(tree.sizes[k])
        bar = (sol_bar.x[k], sol_bar.yp[k], sol_bar.zp[k])
        cur = (sol.x[k], sol.yp[k], sol.zp[k])
        terms = (model.b(k, nodes, *bar, u[k]) - model.b(k, nodes, *bar, u_bar[k]),
                 model.sigma(k, nodes, *bar, u[k]) - model.sigma(k, nodes, *bar, u_bar[k]),
                 model.f(k, nodes, *cur, u[k]) - model.f(k, nodes, *bar, u_bar[k]))
        total += float(sum(tree.expectation(np.sum(t ** 2, -1), k) for t in terms))
    return total
