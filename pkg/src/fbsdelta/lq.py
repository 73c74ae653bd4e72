"""Linear-quadratic problems: coefficients, the stacked optimality solve, and a storage preset.

Dynamics and cost::

    x_{k+1} = A x_k - Q y' + C1 u + (B^T x_k - L z' + C2 u) w_k,    x_0 = -N_mat y_0
    y_k     = A^T y' + B z' + C3 u,                                  y_N = eta
    J       = 1/2 E[x_N^T M_N x_N + y_0^T M_0 y_0
                    + sum_k (x^T D x + y'^T R y' + z'^T S z' + u^T C4 u)]

The optimality system adds the adjoint pair ``(p, r)``::

    r_{k+1} = Q^T p' + A r_k - R y' + (L^T q' + B^T r_k - S z') w_k,  r_0 = -M_0 y_0 + N_mat p_0
    p_k     = A^T p' + B q' + D x_k,                                 p_N = M_N x_N
    0       = C1^T p' + C2^T q' - C3^T r_k + C4 u_k

:func:`solve_lq` builds this system directly from the matrices. It does not go
through the generic model interface, so it serves as an independent check on
the generic solvers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _sparse
from .errors import InvariantViolation, ShapeMismatch, SingularC4, UncertifiedSolution
from .model import ModelSpec
from .rng import stream
from .scenario_tree import AdaptedProcess, ScenarioTree, build_tree

DEFAULT_DELTA = 1e-6
KKT_TOL = 1e-8

# (rows, cols) of each step coefficient in units of (n, m)
STEP_SHAPES = {"A": ("n", "n"), "B": ("n", "n"), "Q": ("n", "n"), "L": ("n", "n"),
               "C1": ("n", "m"), "C2": ("n", "m"), "C3": ("n", "m"), "C4": ("m", "m"),
               "D": ("n", "n"), "R": ("n", "n"), "S": ("n", "n")}
SYMMETRIC = ("C4", "D", "R", "S")


def _as_matrix(value, rows: int, cols: int, label: str) -> np.ndarray:
    """Scalars become ``value * eye(rows, cols)``; arrays must match ``(rows, cols)`` or ``(M, rows, cols)``."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(rows, cols)
    if arr.ndim == 1 and rows * cols == arr.size and (rows == 1 or cols == 1):
        arr = arr.reshape(rows, cols)
    if arr.shape[-2:] != (rows, cols) or arr.ndim not in (2, 3):
        raise ShapeMismatch(f"{label} has shape {arr.shape}, expected ({rows}, {cols}) or (nodes, {rows}, {cols})")
    return arr


def _sym_min_eig(mat: np.ndarray) -> float:
    mat = np.asarray(mat)
    sym = 0.5 * (mat + np.swapaxes(mat, -1, -2))
    return float(np.min(np.linalg.eigvalsh(sym)))


def _asym(mat: np.ndarray) -> float:
    return float(np.max(np.abs(mat - np.swapaxes(mat, -1, -2)), initial=0.0))


@dataclass(eq=False)
class LQCoefficients:
    """Per-step coefficient lists (length ``horizon``) plus boundary data.

    A step entry is either one matrix shared by all level-k nodes or an array
    with a leading node axis of length ``M_k``. ``eta`` is a vector or one row
    per leaf.
    """

    n: int
    m: int
    horizon: int
    steps: dict[str, list[np.ndarray]]
    M_N: np.ndarray
    M_0: np.ndarray
    N_mat: np.ndarray
    eta: np.ndarray
    delta: float = DEFAULT_DELTA
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_params(cls, params: dict, check: bool = True) -> "LQCoefficients":
        """Build from a plain parameter block (scalars, nested lists, or per-step lists of those)."""
        params = dict(params)
        n = int(params.pop("n", 1))
        m = int(params.pop("m", 1))
        horizon = params.pop("horizon", None)
        delta = float(params.pop("delta", DEFAULT_DELTA))
        dims = {"n": n, "m": m}
        steps = {}
        for name, (r, c) in STEP_SHAPES.items():
            raw = params.pop(name, 0.0)
            per_step = isinstance(raw, (list, tuple)) and len(raw) > 0 and _is_step_list(raw, dims[r], dims[c])
            if per_step:
                if horizon is None:
                    horizon = len(raw)
                if len(raw) != horizon:
                    raise ShapeMismatch(f"{name} lists {len(raw)} steps for horizon {horizon}")
                steps[name] = [_as_matrix(v, dims[r], dims[c], f"{name}[{k}]") for k, v in enumerate(raw)]
            else:
                steps[name] = [_as_matrix(raw, dims[r], dims[c], name)]
        if horizon is None:
            raise ShapeMismatch("LQ parameters need a horizon")
        horizon = int(horizon)
        for name, vals in steps.items():
            if len(vals) == 1:
                steps[name] = vals * horizon
        M_N = _as_matrix(params.pop("M_N", 1.0), n, n, "M_N")
        M_0 = _as_matrix(params.pop("M_0", 1.0), n, n, "M_0")
        N_mat = _as_matrix(params.pop("N_mat", 0.0), n, n, "N_mat")
        eta = np.asarray(params.pop("eta", 0.0), dtype=float)
        eta = np.full(n, float(eta)) if eta.ndim == 0 else eta
        if params:
            raise ShapeMismatch(f"unknown LQ parameters: {sorted(params)}")
        out = cls(n, m, horizon, steps, M_N, M_0, N_mat, eta, delta)
        if check:
            out.validate()
        return out

    def at(self, name: str, k: int, size: int) -> np.ndarray:
        """Coefficient ``name`` at step k broadcast to ``(size, rows, cols)``."""
        mat = self.steps[name][k]
        if mat.ndim == 3:
            if mat.shape[0] != size:
                raise ShapeMismatch(f"{name}[{k}] has {mat.shape[0]} node rows, level has {size} nodes")
            return mat
        return np.broadcast_to(mat, (size,) + mat.shape)

    def eta_at(self, size: int) -> np.ndarray:
        if self.eta.ndim == 1:
            return np.broadcast_to(self.eta, (size, self.n))
        if self.eta.shape != (size, self.n):
            raise ShapeMismatch(f"eta has shape {self.eta.shape}, expected ({size}, {self.n})")
        return self.eta

    def diagnostics(self, delta: float | None = None) -> list[str]:
        """Human-readable failures of the standing assumptions; empty when all hold."""
        delta = self.delta if delta is None else delta
        out = []
        if self.eta.shape[-1:] != (self.n,):
            out.append(f"eta has shape {self.eta.shape}, expected ({self.n},)")
        for name, vals in self.steps.items():
            if len(vals) != self.horizon:
                out.append(f"{name} has {len(vals)} steps for horizon {self.horizon}")
            for k, v in enumerate(vals):
                if not np.all(np.isfinite(v)):
                    out.append(f"{name}[{k}] is not finite")
        for name, mat in (("M_N", self.M_N), ("M_0", self.M_0), ("N_mat", self.N_mat), ("eta", self.eta)):
            if not np.all(np.isfinite(mat)):
                out.append(f"{name} is not finite")
        if out:
            return out
        for name in SYMMETRIC:
            for k, v in enumerate(self.steps[name]):
                if _asym(v) > 1e-12:
                    out.append(f"{name}[{k}] is not symmetric")
        for name in ("D", "R", "S"):
            for k, v in enumerate(self.steps[name]):
                if _sym_min_eig(v) < -1e-12:
                    out.append(f"{name}[{k}] is not positive semidefinite")
        for k, v in enumerate(self.steps["C4"]):
            if _sym_min_eig(v) - delta < -1e-15:
                out.append(f"C4 fails δ-positivity at step {k} (min eigenvalue {_sym_min_eig(v):.3g} < δ={delta:g})")
        for name, mat in (("M_N", self.M_N), ("M_0", self.M_0)):
            if _asym(mat) > 1e-12:
                out.append(f"{name} is not symmetric")
            elif _sym_min_eig(mat) <= 0:
                out.append(f"{name} is not positive definite")
        if _asym(self.N_mat) > 1e-12:
            out.append("N_mat is not symmetric; the two initial adjoint couplings disagree")
        return out

    def validate(self, delta: float | None = None) -> None:
        problems = self.diagnostics(delta)
        if problems:
            c4 = [msg for msg in problems if msg.startswith("C4 fails")]
            if c4:
                raise SingularC4(c4[0], witness={"diagnostics": problems})
            raise InvariantViolation(problems[0], witness={"diagnostics": problems})

    def to_params(self) -> dict:
        def enc(a):
            return np.asarray(a).tolist()
        out = {"n": self.n, "m": self.m, "horizon": self.horizon, "delta": self.delta}
        for name, vals in self.steps.items():
            out[name] = [enc(v) for v in vals]
        out.update(M_N=enc(self.M_N), M_0=enc(self.M_0), N_mat=enc(self.N_mat), eta=enc(self.eta))
        return out


def _is_step_list(raw, rows: int, cols: int) -> bool:
    """A list is per-step when it is ragged, holds matrices, or holds scalars for a 1x1 coefficient."""
    try:
        arr = np.asarray(raw, dtype=float)
    except (ValueError, TypeError):
        return True
    return arr.ndim >= 3 or (arr.ndim == 1 and rows * cols == 1)


def random_lq(n: int = 1, m: int = 1, horizon: int = 3, scale: float = 0.3, seed: int = 0,
              node_varying: bool = False, tree: ScenarioTree | None = None) -> LQCoefficients:
    """Random instance satisfying the standing assumptions.

    Weights are Gram matrices plus a diagonal shift, so definiteness holds by
    construction. With ``node_varying`` each step coefficient gets its own
    value at every node of ``tree`` (a binary tree by default).
    """
    rng = np.random.default_rng(stream(seed, "random_lq"))
    if node_varying and tree is None:
        tree = build_tree(horizon)
    dims = {"n": n, "m": m}

    def draw(name, size):
        r, c = dims[STEP_SHAPES[name][0]], dims[STEP_SHAPES[name][1]]
        lead = () if size is None else (size,)
        g = rng.normal(size=lead + (r, c))
        if name == "A":
            return 0.5 * np.eye(n) + scale * g
        if name == "C4":
            return scale * g @ np.swapaxes(g, -1, -2) / c + 0.5 * np.eye(m)
        if name in ("D", "R", "S"):
            return scale * g @ np.swapaxes(g, -1, -2) / c
        return scale * g

    steps = {name: [draw(name, tree.sizes[k] if node_varying else None) for k in range(horizon)]
             for name in STEP_SHAPES}

    def spd():
        g = rng.normal(size=(n, n))
        return scale * g @ g.T / n + 0.5 * np.eye(n)

    g = rng.normal(size=(n, n))
    N_mat = 0.5 * scale * (g + g.T)
    out = LQCoefficients(n, m, horizon, steps, spd(), spd(), N_mat, rng.normal(size=n),
                         meta={"generator": "random_lq", "seed": seed, "scale": scale,
                               "node_varying": node_varying})
    out.validate()
    return out


STORAGE_DEFAULTS = {
    "n": 1, "m": 1, "horizon": 4,
    "A": 0.98,    # retention over one step
    "Q": 0.1,     # pull of the anticipated reserve on the state
    "B": 0.05,    # state-proportional noise loading
    "L": 0.1,
    "C1": 1.0,    # dispatch into the state
    "C2": 0.1,    # dispatch-proportional noise loading
    "C3": 0.2,    # dispatch into the reserve recursion
    "C4": 0.1,    # conversion loss weight
    "D": 0.5, "R": 0.2, "S": 0.1,
    "M_0": 1.0, "M_N": 1.0,
    "N_mat": 0.5,
    "eta": 0.5,   # terminal reserve requirement
}


def storage_preset(params: dict | None = None, check: bool = True) -> LQCoefficients:
    """Storage dispatch instance; any key of :data:`STORAGE_DEFAULTS` may be overridden."""
    merged = dict(STORAGE_DEFAULTS)
    merged.update(params or {})
    out = LQCoefficients.from_params(merged, check)
    out.meta = {"preset": "storage"}
    return out


# --------------------------------------------------------------------------
# generic-model view


def _mv(mat, vec):
    return np.einsum("mij,mj->mi", mat, vec)


def _tmv(mat, vec):
    return np.einsum("mji,mj->mi", mat, vec)


def _quad(mat, vec):
    return np.einsum("mi,mij,mj->m", vec, mat, vec)


class LQModel(ModelSpec):
    name = "lq"
    phi_kind = "constant"
    lambda_kind = "linear"

    def __init__(self, coeffs: LQCoefficients):
        super().__init__(coeffs.n, coeffs.m, coeffs.horizon)
        self.coeffs = coeffs

    def _c(self, name, k, nodes):
        mat = self.coeffs.steps[name][k]
        if mat.ndim == 3:
            return mat[nodes]
        return np.broadcast_to(mat, (len(nodes),) + mat.shape)

    def b(self, k, nodes, x, yp, zp, u):
        c = lambda s: self._c(s, k, nodes)
        return _mv(c("A"), x) - _mv(c("Q"), yp) + _mv(c("C1"), u)

    def sigma(self, k, nodes, x, yp, zp, u):
        c = lambda s: self._c(s, k, nodes)
        return _tmv(c("B"), x) - _mv(c("L"), zp) + _mv(c("C2"), u)

    def f(self, k, nodes, x, yp, zp, u):
        c = lambda s: self._c(s, k, nodes)
        return -(_tmv(c("A"), yp) + _mv(c("B"), zp) + _mv(c("C3"), u))

    def l(self, k, nodes, x, yp, zp, u):
        c = lambda s: self._c(s, k, nodes)
        return 0.5 * (_quad(c("D"), x) + _quad(c("R"), yp) + _quad(c("S"), zp) + _quad(c("C4"), u))

    def b_jac(self, k, nodes, x, yp, zp, u):
        c = lambda s: np.array(self._c(s, k, nodes))
        return c("A"), -c("Q"), np.zeros_like(c("A")), c("C1")

    def sigma_jac(self, k, nodes, x, yp, zp, u):
        c = lambda s: np.array(self._c(s, k, nodes))
        return np.swapaxes(c("B"), -1, -2), np.zeros_like(c("B")), -c("L"), c("C2")

    def f_jac(self, k, nodes, x, yp, zp, u):
        c = lambda s: np.array(self._c(s, k, nodes))
        return np.zeros_like(c("A")), -np.swapaxes(c("A"), -1, -2), -c("B"), -c("C3")

    def l_grad(self, k, nodes, x, yp, zp, u):
        c = lambda s: self._c(s, k, nodes)
        return _mv(c("D"), x), _mv(c("R"), yp), _mv(c("S"), zp), _mv(c("C4"), u)

    def Lambda(self, y):
        return -y @ self.coeffs.N_mat.T

    def Lambda_jac(self, y):
        return np.broadcast_to(-self.coeffs.N_mat, (y.shape[0], self.n, self.n)).copy()

    def Phi(self, nodes, x):
        eta = self.coeffs.eta
        if eta.ndim == 1:
            return np.broadcast_to(eta, x.shape).copy()
        return np.array(eta[nodes])

    def phi(self, nodes, x):
        return 0.5 * np.einsum("mi,ij,mj->m", x, self.coeffs.M_N, x)

    def phi_grad(self, nodes, x):
        return x @ self.coeffs.M_N.T

    def gamma(self, y):
        return 0.5 * np.einsum("mi,ij,mj->m", y, self.coeffs.M_0, y)

    def gamma_grad(self, y):
        return y @ self.coeffs.M_0.T

    def describe(self) -> dict:
        out = super().describe()
        out["coefficients"] = self.coeffs.to_params()
        return out


def as_model(coeffs: LQCoefficients) -> LQModel:
    coeffs.validate()
    return LQModel(coeffs)


# --------------------------------------------------------------------------
# stacked optimality system


@dataclass(frozen=True, eq=False)
class LQSolution:
    x: AdaptedProcess
    y: AdaptedProcess
    p: AdaptedProcess
    r: AdaptedProcess
    u: AdaptedProcess
    cost: float
    kkt_residual: float
    pp: AdaptedProcess
    qp: AdaptedProcess


class _Blocks:
    """Offsets of the x, y, p, r (levels 0..N) and u (levels 0..N-1) blocks."""

    def __init__(self, tree: ScenarioTree, n: int, m: int):
        self.tree, self.n, self.m = tree, n, m
        self.offsets = {}
        pos = 0
        for name, dim, count in (("x", n, tree.horizon + 1), ("y", n, tree.horizon + 1),
                                 ("p", n, tree.horizon + 1), ("r", n, tree.horizon + 1),
                                 ("u", m, tree.horizon)):
            for k in range(count):
                self.offsets[name, k] = pos
                pos += tree.sizes[k] * dim
        self.size = pos

    def at(self, name: str, k: int, nodes) -> np.ndarray:
        dim = self.m if name == "u" else self.n
        return self.offsets[name, k] + np.asarray(nodes) * dim

    def extract(self, vec: np.ndarray, name: str, count: int):
        dim = self.m if name == "u" else self.n
        return [vec[self.offsets[name, k]:self.offsets[name, k] + self.tree.sizes[k] * dim]
                .reshape(self.tree.sizes[k], dim) for k in range(count)]


def kkt_system(coeffs: LQCoefficients, tree: ScenarioTree):
    """Sparse matrix and right-hand side of the full optimality system."""
    if coeffs.horizon != tree.horizon:
        raise ShapeMismatch(f"coefficients for horizon {coeffs.horizon} on a tree of horizon {tree.horizon}")
    n, m, N = coeffs.n, coeffs.m, tree.horizon
    blk = _Blocks(tree, n, m)
    trip = _sparse.Triplets(blk.size)
    rhs = np.zeros(blk.size)
    trip.add_identity(0, blk.offsets["u", 0])

    # rows are keyed by the block of the unknown they "solve for":
    #   x rows: state dynamics, y rows: backward equation,
    #   p rows: p-recursion, r rows: r-recursion, u rows: stationarity
    root = [0]
    trip.add(blk.at("x", 0, root), blk.at("y", 0, root), coeffs.N_mat)
    trip.add(blk.at("r", 0, root), blk.at("y", 0, root), coeffs.M_0)
    trip.add(blk.at("r", 0, root), blk.at("p", 0, root), -coeffs.N_mat.T)
    leaves = np.arange(tree.sizes[N])
    rhs_y = blk.offsets["y", N]
    rhs[rhs_y:rhs_y + tree.sizes[N] * n] = coeffs.eta_at(tree.sizes[N]).reshape(-1)
    trip.add(blk.at("p", N, leaves), blk.at("x", N, leaves), np.broadcast_to(-coeffs.M_N, (leaves.size, n, n)))

    for k in range(N):
        M = tree.sizes[k]
        nodes = np.arange(M)
        c = {name: coeffs.at(name, k, M) for name in STEP_SHAPES}
        At, Bt = np.swapaxes(c["A"], -1, -2), np.swapaxes(c["B"], -1, -2)
        kids = tree.children(k)
        spec = tree.branches[k]
        weights = [(pj, pj * vj) for vj, pj in spec.points]  # (for primes, for z'/q')

        # y_k - A^T y' - B z' - C3 u = 0
        yrow = blk.at("y", k, nodes)
        for jj, (w1, w2) in enumerate(weights):
            trip.add(yrow, blk.at("y", k + 1, kids[:, jj]), -(w1 * At + w2 * c["B"]))
        trip.add(yrow, blk.at("u", k, nodes), -c["C3"])

        # p_k - A^T p' - B q' - D x_k = 0
        prow = blk.at("p", k, nodes)
        for jj, (w1, w2) in enumerate(weights):
            trip.add(prow, blk.at("p", k + 1, kids[:, jj]), -(w1 * At + w2 * c["B"]))
        trip.add(prow, blk.at("x", k, nodes), -c["D"])

        # C1^T p' + C2^T q' - C3^T r + C4 u = 0
        urow = blk.at("u", k, nodes)
        C1t, C2t, C3t = (np.swapaxes(c[s], -1, -2) for s in ("C1", "C2", "C3"))
        for jj, (w1, w2) in enumerate(weights):
            trip.add(urow, blk.at("p", k + 1, kids[:, jj]), w1 * C1t + w2 * C2t)
        trip.add(urow, blk.at("r", k, nodes), -C3t)
        trip.add(urow, urow, c["C4"])

        for j, (vj, _) in enumerate(spec.points):
            child = kids[:, j]
            # x_{k+1} - (A x - Q y' + C1 u) - v_j (B^T x - L z' + C2 u) = 0
            xrow = blk.at("x", k + 1, child)
            trip.add(xrow, blk.at("x", k, nodes), -(c["A"] + vj * Bt))
            for jj, (w1, w2) in enumerate(weights):
                trip.add(xrow, blk.at("y", k + 1, kids[:, jj]), w1 * c["Q"] + vj * w2 * c["L"])
            trip.add(xrow, blk.at("u", k, nodes), -(c["C1"] + vj * c["C2"]))
            # r_{k+1} - (Q^T p' + A r - R y') - v_j (L^T q' + B^T r - S z') = 0
            rrow = blk.at("r", k + 1, child)
            Qt, Lt = np.swapaxes(c["Q"], -1, -2), np.swapaxes(c["L"], -1, -2)
            for jj, (w1, w2) in enumerate(weights):
                trip.add(rrow, blk.at("p", k + 1, kids[:, jj]), -(w1 * Qt + vj * w2 * Lt))
                trip.add(rrow, blk.at("y", k + 1, kids[:, jj]), w1 * c["R"] + vj * w2 * c["S"])
            trip.add(rrow, blk.at("r", k, nodes), -(c["A"] + vj * Bt))
    return trip.tocsc(), rhs, blk


def lq_cost(coeffs: LQCoefficients, tree: ScenarioTree, x, y, u) -> float:
    """Quadratic cost from state and control node values."""
    N = tree.horizon
    total = 0.5 * float(tree.expectation(np.einsum("mi,ij,mj->m", x[N], coeffs.M_N, x[N]), N))
    total += 0.5 * float(y[0][0] @ coeffs.M_0 @ y[0][0])
    for k in range(N):
        M = tree.sizes[k]
        yp, zp = tree.expect_next(y[k + 1], k), tree.expect_weighted(y[k + 1], k)
        run = (_quad(coeffs.at("D", k, M), x[k]) + _quad(coeffs.at("R", k, M), yp)
               + _quad(coeffs.at("S", k, M), zp) + _quad(coeffs.at("C4", k, M), u[k]))
        total += 0.5 * float(tree.expectation(run, k))
    return total


def solve_lq(coeffs: LQCoefficients, tree: ScenarioTree, cert_tol: float = KKT_TOL) -> LQSolution:
    """Solve the stacked state / adjoint / stationarity system in one sparse factorization."""
    coeffs.validate()
    matrix, rhs, blk = kkt_system(coeffs, tree)
    sol = _sparse.solve(matrix, rhs, what="LQ optimality system")
    kkt = float(np.max(np.abs(matrix @ sol - rhs), initial=0.0))
    scale = max(1.0, float(np.max(np.abs(sol), initial=0.0)))
    if not kkt <= cert_tol * scale:
        raise UncertifiedSolution(f"KKT residual {kkt:.3e} failed certification", witness={"kkt_residual": kkt})
    N = tree.horizon
    x, y, p, r = (blk.extract(sol, s, N + 1) for s in ("x", "y", "p", "r"))
    u = blk.extract(sol, "u", N)
    pp = [tree.expect_next(p[k + 1], k) for k in range(N)]
    qp = [tree.expect_weighted(p[k + 1], k) for k in range(N)]
    return LQSolution(AdaptedProcess(x), AdaptedProcess(y), AdaptedProcess(p), AdaptedProcess(r),
                      AdaptedProcess(u), lq_cost(coeffs, tree, x, y, u), kkt,
                      AdaptedProcess(pp), AdaptedProcess(qp))


def explicit_control(coeffs: LQCoefficients, k: int, node: int, pp, qp, r) -> np.ndarray:
    """``C4^{-1}(-C1^T p' - C2^T q' + C3^T r)`` at one node."""
    def coef(name):
        mat = coeffs.steps[name][k]
        return mat[node] if mat.ndim == 3 else mat

    C4 = coef("C4")
    if _sym_min_eig(C4) < coeffs.delta:
        raise SingularC4(f"C4 at step {k}, node {node} fails δ-positivity",
                         witness={"k": k, "node": node, "min_eig": _sym_min_eig(C4)})
    rhs = -coef("C1").T @ np.asarray(pp, float) - coef("C2").T @ np.asarray(qp, float) + coef("C3").T @ np.asarray(r, float)
    return np.linalg.solve(C4, rhs)


def explicit_control_process(coeffs: LQCoefficients, tree: ScenarioTree, pp: AdaptedProcess,
                             qp: AdaptedProcess, r: AdaptedProcess) -> AdaptedProcess:
    return AdaptedProcess([np.array([explicit_control(coeffs, k, i, pp[k][i], qp[k][i], r[k][i])
                                     for i in range(tree.sizes[k])]) for k in range(tree.horizon)])


def summary_table(tree: ScenarioTree, x: AdaptedProcess, y: AdaptedProcess, u: AdaptedProcess) -> list[dict]:
    """Expected state, control and backward value per time; the control is blank at the horizon."""
    rows = []
    for k in tree.levels:
        row = {"time": k}
        row.update({f"Ex{i}": float(v) for i, v in enumerate(tree.expectation(x[k], k))})
        if k < u.n_levels:
            row.update({f"Eu{i}": float(v) for i, v in enumerate(tree.expectation(u[k], k))})
        else:
            row.update({f"Eu{i}": None for i in range(u.dim)})
        row.update({f"Ey{i}": float(v) for i, v in enumerate(tree.expectation(y[k], k))})
        rows.append(row)
    return rows
