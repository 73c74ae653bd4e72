"""Coefficient bundles for controlled forward-backward difference systems.

A model supplies, for each time step ``k`` in ``0..N-1``::

    x_{k+1} = b(k, x_k, y'_{k+1}, z'_{k+1}, u_k) + sigma(k, ...) w_k
    y_k     = -f(k, x_k, y'_{k+1}, z'_{k+1}, u_k)

with boundary maps ``x_0 = Lambda(y_0)``, ``y_N = Phi(x_N)`` and the costs
``l``, ``phi`` (terminal) and ``gamma`` (initial). ``f(k, ...)`` is the driver
attached to step ``k``; it produces the time-``k`` backward value.

Every evaluator is batched: the array arguments carry a leading axis of
length ``M`` and ``nodes`` gives the level-``k`` node index for each row, so
node-dependent (F_{k-1}-measurable) coefficients can look themselves up.
Jacobians follow ``J[..., i, j] = d out_i / d arg_j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ControlOutsideSet, InvariantViolation, ShapeMismatch
from .rng import stream

ARGS = ("x", "y", "z", "u")
STEP_COEFFS = ("b", "sigma", "f")


class ModelSpec:
    """Base class; subclasses override the evaluators they need.

    The defaults describe the zero model, so a subclass only has to define
    non-trivial pieces. ``phi_kind`` / ``lambda_kind`` declare the structure
    of the boundary maps (``"linear"``, ``"constant"`` or ``"nonlinear"``);
    the sufficiency audit reads them.
    """

    name = "model"
    phi_kind = "constant"
    lambda_kind = "constant"

    def __init__(self, n: int, m: int, horizon: int | None = None):
        self.n = int(n)
        self.m = int(m)
        self.horizon = horizon

    # --- step coefficients -------------------------------------------------
    def b(self, k, nodes, x, yp, zp, u):
        return np.zeros_like(x)

    def sigma(self, k, nodes, x, yp, zp, u):
        return np.zeros_like(x)

    def f(self, k, nodes, x, yp, zp, u):
        return np.zeros_like(x)

    def l(self, k, nodes, x, yp, zp, u):
        return np.zeros(x.shape[0])

    def b_jac(self, k, nodes, x, yp, zp, u):
        return self._zero_jac(x.shape[0])

    def sigma_jac(self, k, nodes, x, yp, zp, u):
        return self._zero_jac(x.shape[0])

    def f_jac(self, k, nodes, x, yp, zp, u):
        return self._zero_jac(x.shape[0])

    def l_grad(self, k, nodes, x, yp, zp, u):
        M = x.shape[0]
        n, m = self.n, self.m
        return np.zeros((M, n)), np.zeros((M, n)), np.zeros((M, n)), np.zeros((M, m))

    # --- boundary maps and costs -------------------------------------------
    def Lambda(self, y):
        return np.zeros_like(y)

    def Lambda_jac(self, y):
        return np.zeros((y.shape[0], self.n, self.n))

    def Phi(self, nodes, x):
        return np.zeros_like(x)

    def Phi_jac(self, nodes, x):
        return np.zeros((x.shape[0], self.n, self.n))

    def phi(self, nodes, x):
        return np.zeros(x.shape[0])

    def phi_grad(self, nodes, x):
        return np.zeros_like(x)

    def gamma(self, y):
        return np.zeros(y.shape[0])

    def gamma_grad(self, y):
        return np.zeros_like(y)

    # --- helpers -------------------------------------------------------------
    def _zero_jac(self, M):
        n, m = self.n, self.m
        return (np.zeros((M, n, n)), np.zeros((M, n, n)), np.zeros((M, n, n)), np.zeros((M, n, m)))

    def step(self, which: str):
        return getattr(self, which), getattr(self, f"{which}_jac")

    def describe(self) -> dict:
        return {"name": self.name, "n": self.n, "m": self.m,
                "phi_kind": self.phi_kind, "lambda_kind": self.lambda_kind}


def _diag(v: np.ndarray) -> np.ndarray:
    """Batch of diagonal matrices from a (M, n) array."""
    out = np.zeros(v.shape + (v.shape[-1],))
    idx = np.arange(v.shape[-1])
    out[..., idx, idx] = v
    return out


def _eye(M: int, n: int, scale: float = 1.0) -> np.ndarray:
    return np.broadcast_to(scale * np.eye(n), (M, n, n)).copy()


# --------------------------------------------------------------------------
# control sets

@dataclass(frozen=True, eq=False)
class ControlSet:
    """Convex control sets U_k: the whole space or a box, optionally per step.

    ``lower`` / ``upper`` have shape ``(steps, m)``; a single row applies to
    every step. Infinite bounds describe the whole space.
    """

    m: int
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def all_space(cls, m: int) -> "ControlSet":
        return cls(m, np.full((1, m), -np.inf), np.full((1, m), np.inf))

    @classmethod
    def box(cls, lower, upper) -> "ControlSet":
        lo = np.atleast_2d(np.asarray(lower, dtype=float))
        hi = np.atleast_2d(np.asarray(upper, dtype=float))
        if lo.shape != hi.shape:
            raise ShapeMismatch(f"box bounds of shapes {lo.shape} and {hi.shape}")
        if np.any(lo > hi):
            raise InvariantViolation("box lower bound exceeds upper bound")
        return cls(lo.shape[1], lo, hi)

    def bounds(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        i = 0 if self.lower.shape[0] == 1 else k
        return self.lower[i], self.upper[i]

    def is_all_space(self, k: int) -> bool:
        lo, hi = self.bounds(k)
        return bool(np.all(np.isneginf(lo)) and np.all(np.isposinf(hi)))

    def contains(self, k: int, u: np.ndarray, tol: float = 0.0) -> np.ndarray:
        lo, hi = self.bounds(k)
        u = np.atleast_2d(u)
        return np.all((u >= lo - tol) & (u <= hi + tol), axis=-1)

    def check(self, u, tol: float = 1e-12) -> None:
        """Raise ControlOutsideSet if any node value of the control process leaves U_k."""
        for k, vals in enumerate(u.values):
            if vals.shape[1] != self.m:
                raise ShapeMismatch(f"control dimension {vals.shape[1]} != {self.m}")
            inside = self.contains(k, vals, tol)
            if not np.all(inside):
                i = int(np.argmin(inside))
                raise ControlOutsideSet(f"u_{k} at node {i} outside U_{k}",
                                        witness={"level": k, "node": i, "u": vals[i].tolist()})


# --------------------------------------------------------------------------
# single-point evaluation

_POINT_TAGS = {"b", "sigma", "f", "l", "Lambda", "Phi", "phi", "gamma"}


def evaluate(model: ModelSpec, which: str, k: int = 0, node: int = 0, x=None, yp=None, zp=None, u=None):
    """Evaluate one coefficient at a single node; returns a vector or a float."""
    if which not in _POINT_TAGS:
        raise ValueError(f"unknown coefficient {which!r}")
    n, m = model.n, model.m

    def vec(v, size, label):
        v = np.zeros(size) if v is None else np.atleast_1d(np.asarray(v, dtype=float))
        if v.shape != (size,):
            raise ShapeMismatch(f"{label} has shape {v.shape}, expected ({size},)")
        return v[None, :]

    nodes = np.array([node])
    if which == "Lambda":
        return model.Lambda(vec(yp, n, "y"))[0]
    if which == "gamma":
        return float(model.gamma(vec(yp, n, "y"))[0])
    if which == "Phi":
        return model.Phi(nodes, vec(x, n, "x"))[0]
    if which == "phi":
        return float(model.phi(nodes, vec(x, n, "x"))[0])
    args = (vec(x, n, "x"), vec(yp, n, "y'"), vec(zp, n, "z'"), vec(u, m, "u"))
    out = getattr(model, which)(k, nodes, *args)
    return float(out[0]) if which == "l" else out[0]


# --------------------------------------------------------------------------
# derivative checks

@dataclass
class DerivativeReport:
    errors: dict[str, float]
    step: float
    trial_points: int

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst_block(self) -> str:
        return max(self.errors, key=self.errors.get)

    def flagged(self, threshold: float = 1e-2) -> list[str]:
        return [key for key, err in self.errors.items() if err >= threshold]


def _sample_sites(model: ModelSpec, rng, count: int, tree=None):
    """Random (k, node) pairs for steps 0..N-1."""
    horizon = tree.horizon if tree is not None else (model.horizon or 1)
    ks = rng.integers(0, horizon, size=count)
    if tree is None:
        nodes = np.zeros(count, dtype=int)
    else:
        nodes = np.array([rng.integers(0, tree.sizes[k]) for k in ks], dtype=int)
    return ks, nodes


def _leaf_nodes(model: ModelSpec, rng, count: int, tree=None) -> np.ndarray:
    if tree is None:
        return np.zeros(count, dtype=int)
    return rng.integers(0, tree.sizes[-1], size=count)


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(1.0, float(np.max(np.abs(numeric), initial=0.0)))
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def _fd_jac(fun, args: list[np.ndarray], which: int, h: float) -> np.ndarray:
    """Central-difference Jacobian of a batched map w.r.t. ``args[which]``; shape (M, out, dim)."""
    base = args[which]
    cols = []
    for j in range(base.shape[1]):
        plus = [a.copy() for a in args]
        minus = [a.copy() for a in args]
        plus[which][:, j] += h
        minus[which][:, j] -= h
        cols.append((np.asarray(fun(*plus)) - np.asarray(fun(*minus))) / (2 * h))
    out = np.stack(cols, axis=-1)
    return out if out.ndim == 3 else out[:, None, :]


def check_derivatives(model: ModelSpec, trial_points: int = 100, seed: int = 0, *,
                      step: float = 1e-5, box: float = 1.0, tree=None) -> DerivativeReport:
    """Compare the analytic derivatives with central differences at random points.

    Errors are ``max|analytic - fd| / max(1, max|fd|)`` per ``coefficient/argument`` block.
    """
    rng = stream(seed, "check_derivatives")
    n, m = model.n, model.m
    errors: dict[str, float] = {}
    for t in range(trial_points):
        (k,), (node,) = _sample_sites(model, rng, 1, tree)
        nodes = np.array([node])
        args = [rng.uniform(-box, box, size=(1, d)) for d in (n, n, n, m)]
        for name in STEP_COEFFS:
            fun, jac = model.step(name)
            analytic = jac(k, nodes, *args)
            for a, label in enumerate(ARGS):
                numeric = _fd_jac(lambda *z: fun(k, nodes, *z), args, a, step)
                key = f"{name}/{label}"
                errors[key] = max(errors.get(key, 0.0), _rel_err(analytic[a], numeric))
        grads = model.l_grad(k, nodes, *args)
        for a, label in enumerate(ARGS):
            numeric = _fd_jac(lambda *z: model.l(k, nodes, *z), args, a, step)[:, 0, :]
            key = f"l/{label}"
            errors[key] = max(errors.get(key, 0.0), _rel_err(grads[a], numeric))
        leaf = _leaf_nodes(model, rng, 1, tree)
        x = rng.uniform(-box, box, size=(1, n))
        y = rng.uniform(-box, box, size=(1, n))
        checks = {
            "Lambda/y": (model.Lambda_jac(y), _fd_jac(model.Lambda, [y], 0, step)),
            "Phi/x": (model.Phi_jac(leaf, x), _fd_jac(lambda z: model.Phi(leaf, z), [x], 0, step)),
            "phi/x": (model.phi_grad(leaf, x), _fd_jac(lambda z: model.phi(leaf, z), [x], 0, step)[:, 0, :]),
            "gamma/y": (model.gamma_grad(y), _fd_jac(model.gamma, [y], 0, step)[:, 0, :]),
        }
        for key, (analytic, numeric) in checks.items():
            errors[key] = max(errors.get(key, 0.0), _rel_err(analytic, numeric))
    return DerivativeReport(errors, step, trial_points)


# --------------------------------------------------------------------------
# well-posedness checkers

@dataclass
class MonotonicityConstants:
    """Constants of the domination / monotonicity conditions.

    ``A``, ``B``, ``C`` may be a single matrix or a list with one matrix per
    step. ``M`` and ``G`` are independent matrices with ``n`` columns.
    """

    mu: float
    v: float
    G: np.ndarray
    M: np.ndarray
    A: np.ndarray | list
    B: np.ndarray | list
    C: np.ndarray | list
    case: int = 1

    def __post_init__(self):
        self.G = np.atleast_2d(np.asarray(self.G, dtype=float))
        self.M = np.atleast_2d(np.asarray(self.M, dtype=float))
        for name in ("A", "B", "C"):
            val = getattr(self, name)
            if isinstance(val, (list, tuple)) and val and np.ndim(val[0]) == 2:
                setattr(self, name, [np.asarray(a, dtype=float) for a in val])
            else:
                setattr(self, name, np.atleast_2d(np.asarray(val, dtype=float)))
        if self.mu < 0 or self.v < 0:
            raise InvariantViolation("mu and v must be non-negative")
        if not ((self.mu > 0 and self.v == 0) or (self.mu == 0 and self.v > 0)):
            raise InvariantViolation(f"need exactly one of mu, v positive (mu={self.mu}, v={self.v})")
        if self.case not in (1, 2):
            raise InvariantViolation(f"case must be 1 or 2, got {self.case}")

    def at(self, name: str, k: int) -> np.ndarray:
        val = getattr(self, name)
        return val[k] if isinstance(val, list) else val


@dataclass
class Inequality:
    name: str
    min_slack: float | None
    witness: dict | None = None
    skipped: str | None = None


@dataclass
class MarginReport:
    inequalities: dict[str, Inequality]
    case: int | None = None
    other_case: dict[str, Inequality] = field(default_factory=dict)
    notices: list[str] = field(default_factory=list)
    samples: int = 0

    @property
    def min_slack(self) -> float:
        vals = [q.min_slack for q in self.inequalities.values() if q.min_slack is not None]
        return min(vals) if vals else float("inf")

    @property
    def holds(self) -> bool:
        return self.min_slack >= 0.0

    def to_dict(self) -> dict:
        def enc(q: Inequality):
            return {"min_slack": q.min_slack, "witness": q.witness, "skipped": q.skipped}
        return {"case": self.case, "min_slack": self.min_slack, "samples": self.samples,
                "inequalities": {k: enc(q) for k, q in self.inequalities.items()},
                "other_case": {k: enc(q) for k, q in self.other_case.items()},
                "notices": list(self.notices)}


def _norm(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(v * v, axis=-1))


def _apply(mat_for_k, ks, vec):
    """Row-wise ``mat_k @ vec`` for per-sample step indices."""
    out = None
    for k in np.unique(ks):
        sel = ks == k
        part = vec[sel] @ mat_for_k(int(k)).T
        if out is None:
            out = np.zeros((vec.shape[0], part.shape[1]))
        out[sel] = part
    return out


def _draw(model: ModelSpec, samples: int, seed: int, consumer: str, box: float, tree, points):
    rng = stream(seed, consumer)
    n, m = model.n, model.m
    ks, nodes = _sample_sites(model, rng, samples, tree)
    draw = {"k": ks, "node": nodes, "leaf": _leaf_nodes(model, rng, samples, tree)}
    for name in ("x", "xb", "y", "yb", "z", "zb"):
        draw[name] = rng.uniform(-box, box, size=(samples, n))
    draw["u"] = rng.uniform(-box, box, size=(samples, m))
    if points:
        extra = {key: np.atleast_1d(np.asarray(val)) for key, val in points.items()}
        count = len(extra["x"]) if np.ndim(extra["x"]) == 2 else 1
        for key in draw:
            val = extra.get(key)
            if val is None:
                val = np.zeros((count,) + draw[key].shape[1:], dtype=draw[key].dtype)
            draw[key] = np.concatenate([draw[key], np.reshape(val, (count,) + draw[key].shape[1:])])
    return draw


def _per_step(model, fun_name, draw, x, y, z):
    """Evaluate a batched step coefficient with heterogeneous step indices."""
    fun = getattr(model, fun_name)
    out = np.zeros_like(x)
    for k in np.unique(draw["k"]):
        sel = draw["k"] == k
        out[sel] = fun(int(k), draw["node"][sel], x[sel], y[sel], z[sel], draw["u"][sel])
    return out


def _record(name: str, slack: np.ndarray, draw: dict) -> Inequality:
    i = int(np.argmin(slack))
    witness = None
    if slack[i] < 0:
        witness = {key: (val[i].tolist() if np.ndim(val[i]) else val[i].item()) for key, val in draw.items()}
        witness["slack"] = float(slack[i])
    return Inequality(name, float(slack[i]), witness)


def check_domination(model: ModelSpec, constants: MonotonicityConstants, samples: int = 10_000,
                     seed: int = 0, *, box: float = 10.0, tree=None, points: dict | None = None) -> MarginReport:
    """Sample the four domination inequalities; slack = right side minus left side.

    Inequalities that divide by a zero constant are vacuous in the selected
    case; they are skipped and listed in ``notices`` (code DivisionByZeroConstant).
    """
    d = _draw(model, samples, seed, "check_domination", box, tree, points)
    c = constants
    out: dict[str, Inequality] = {}
    notices: list[str] = []

    def skip(name, const):
        msg = f"DivisionByZeroConstant: '{name}' divides by {const}=0 and is skipped"
        notices.append(msg)
        out[name] = Inequality(name, None, skipped=msg)

    yhat, zhat, xhat = d["y"] - d["yb"], d["z"] - d["zb"], d["x"] - d["xb"]
    if c.mu > 0:
        lhs = _norm(model.Lambda(d["y"]) - model.Lambda(d["yb"]))
        out["Lambda"] = _record("Lambda", _norm(yhat @ c.M.T) / c.mu - lhs, d)
        bound = _norm(_apply(lambda k: c.at("B", k), d["k"], yhat) + _apply(lambda k: c.at("C", k), d["k"], zhat)) / c.mu
        for h in ("b", "sigma"):
            diff = (_per_step(model, h, d, d["x"], d["y"], d["z"])
                    - _per_step(model, h, d, d["x"], d["yb"], d["zb"]))
            out[h] = _record(h, bound - _norm(diff), d)
    else:
        skip("Lambda", "mu")
        skip("b", "mu")
        skip("sigma", "mu")
    if c.v > 0:
        lhs = _norm(model.Phi(d["leaf"], d["x"]) - model.Phi(d["leaf"], d["xb"]))
        out["Phi"] = _record("Phi", _norm(xhat @ c.G.T) / c.v - lhs, d)
        diff = _per_step(model, "f", d, d["x"], d["y"], d["z"]) - _per_step(model, "f", d, d["xb"], d["y"], d["z"])
        bound = _norm(_apply(lambda k: c.at("A", k), d["k"], xhat)) / c.v
        out["f"] = _record("f", bound - _norm(diff), d)
    else:
        skip("Phi", "v")
        skip("f", "v")
    return MarginReport(out, case=c.case, notices=notices, samples=len(d["k"]))


def check_monotonicity(model: ModelSpec, constants: MonotonicityConstants, samples: int = 10_000,
                       seed: int = 0, *, box: float = 10.0, tree=None, points: dict | None = None) -> MarginReport:
    """Sample the three monotonicity inequalities for both cases; report the selected one.

    The pairing inner product is ``<f, x> + <b, y> + <sigma, z>`` over the
    differences of ``(x, y', z')``.
    """
    d = _draw(model, samples, seed, "check_monotonicity", box, tree, points)
    c = constants
    xhat, yhat, zhat = d["x"] - d["xb"], d["y"] - d["yb"], d["z"] - d["zb"]
    lam = np.sum((model.Lambda(d["y"]) - model.Lambda(d["yb"])) * yhat, axis=-1)
    phi = np.sum((model.Phi(d["leaf"], d["x"]) - model.Phi(d["leaf"], d["xb"])) * xhat, axis=-1)
    gamma_pair = np.zeros(len(d["k"]))
    for name, hat in (("f", xhat), ("b", yhat), ("sigma", zhat)):
        diff = (_per_step(model, name, d, d["x"], d["y"], d["z"])
                - _per_step(model, name, d, d["xb"], d["yb"], d["zb"]))
        gamma_pair += np.sum(diff * hat, axis=-1)
    my2 = np.sum((yhat @ c.M.T) ** 2, axis=-1)
    gx2 = np.sum((xhat @ c.G.T) ** 2, axis=-1)
    ax2 = np.sum(_apply(lambda k: c.at("A", k), d["k"], xhat) ** 2, axis=-1)
    byz = _apply(lambda k: c.at("B", k), d["k"], yhat) + _apply(lambda k: c.at("C", k), d["k"], zhat)
    byz2 = np.sum(byz ** 2, axis=-1)
    weight = c.v * ax2 + c.mu * byz2
    cases = {
        1: {"Lambda": -c.mu * my2 - lam, "Phi": phi - c.v * gx2, "Gamma": -weight - gamma_pair},
        2: {"Lambda": lam - c.mu * my2, "Phi": -c.v * gx2 - phi, "Gamma": gamma_pair - weight},
    }
    chosen = {name: _record(name, s, d) for name, s in cases[c.case].items()}
    other = {name: _record(name, s, d) for name, s in cases[3 - c.case].items()}
    return MarginReport(chosen, case=c.case, other_case=other, samples=len(d["k"]))
