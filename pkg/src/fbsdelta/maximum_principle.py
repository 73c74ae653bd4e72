"""Variational derivative of the cost, the necessary condition, and the sufficiency audit.

A spike perturbation changes the control at one time ``s`` only::

    u^eps_k = u_k + [k == s] * eps * v_k

and the derivative of ``J(u^eps)`` at ``eps = 0`` is ``E<H_u(s), v_s>`` with
the Hamiltonian evaluated along the solved state and adjoint.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .adjoint import (AdjointSolution, hamiltonian_batch, hamiltonian_grads_batch,
                      hamiltonian_gradient_process, solve_adjoint)
from .errors import ControlOutsideSet, LevelMismatch
from .fbsde_solver import FBSolution, cost, solve_newton, state_energy
from .model import ControlSet, ModelSpec
from .rng import stream
from .scenario_tree import AdaptedProcess, ScenarioTree

DEFAULT_EPSILONS = (1e-2, 1e-3, 1e-4)
AUDIT_TOL = 1e-12


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def spike_perturb(u: AdaptedProcess, v: AdaptedProcess, s: int, eps: float,
                  controls: ControlSet | None = None) -> AdaptedProcess:
    if not 0 <= s < u.n_levels:
        raise LevelMismatch(f"spike time {s} outside 0..{u.n_levels - 1}")
    out = u.replace_level(s, u[s] + eps * v[s])
    if controls is not None:
        inside = controls.contains(s, out[s], 1e-12)
        if not np.all(inside):
            i = int(np.argmin(inside))
            raise ControlOutsideSet(f"spike at time {s} leaves U_{s} at node {i}",
                                    witness={"level": s, "node": i, "u": out[s][i].tolist(), "eps": eps})
    return out


def solve_state_and_adjoint(model: ModelSpec, tree: ScenarioTree, u: AdaptedProcess,
                            **newton) -> tuple[FBSolution, AdjointSolution]:
    fb = solve_newton(model, tree, u, **newton)
    return fb, solve_adjoint(model, tree, u, fb)


def gateaux_derivative(model: ModelSpec, tree: ScenarioTree, u_star: AdaptedProcess, v: AdaptedProcess,
                       s: int, *, solved: tuple[FBSolution, AdjointSolution] | None = None) -> float:
    """``E<H_u(s), v_s>`` along the solution at ``u_star``."""
    fb, adj = solved if solved is not None else solve_state_and_adjoint(model, tree, u_star)
    nodes = np.arange(tree.sizes[s])
    hu = hamiltonian_grads_batch(model, s, nodes, *adj.point(fb, u_star, s))[3]
    return float(tree.expectation(_dot(hu, v[s]), s))


def directional_derivative(model: ModelSpec, tree: ScenarioTree, u_star: AdaptedProcess, v: AdaptedProcess) -> float:
    """Sum of the spike derivatives over every time, i.e. the derivative along ``u + eps v``."""
    solved = solve_state_and_adjoint(model, tree, u_star)
    return sum(gateaux_derivative(model, tree, u_star, v, s, solved=solved) for s in range(tree.horizon))


@dataclass(frozen=True)
class FDEstimate:
    slope: float
    error_estimate: float
    mode: str
    curve: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.slope, self.error_estimate))


def _admissible(u, v, s, eps, controls):
    if controls is None:
        return True
    return bool(np.all(controls.contains(s, u[s] + eps * v[s], 1e-12)))


def fd_derivative(model: ModelSpec, tree: ScenarioTree, u_star: AdaptedProcess, v: AdaptedProcess, s: int,
                  epsilons=DEFAULT_EPSILONS, controls: ControlSet | None = None, **newton) -> FDEstimate:
    """Finite-difference slope of ``eps -> J(u^eps)`` at zero, with Richardson extrapolation.

    Central differences are used when every backward point is admissible,
    one-sided differences otherwise. ``curve`` lists ``(eps, J(u^eps))``.
    """
    eps_list = [float(e) for e in epsilons]
    if not eps_list or any(not 0 < e <= 1 for e in eps_list):
        raise ValueError("epsilons must lie in (0, 1]")
    eps_list.sort(reverse=True)

    def J(eps):
        up = spike_perturb(u_star, v, s, eps, controls)
        return cost(model, tree, up, solve_newton(model, tree, up, **newton))

    central = all(_admissible(u_star, v, s, -e, controls) for e in eps_list)
    J0 = J(0.0)
    curve = [(0.0, J0)]
    diffs = []
    for e in eps_list:
        jp = J(e)
        curve.append((e, jp))
        if central:
            jm = J(-e)
            curve.append((-e, jm))
            diffs.append((jp - jm) / (2 * e))
        else:
            diffs.append((jp - J0) / e)
    order = 2 if central else 1
    extrap = []
    for (e1, d1), (e2, d2) in zip(zip(eps_list, diffs), zip(eps_list[1:], diffs[1:])):
        ratio = (e1 / e2) ** order
        extrap.append((ratio * d2 - d1) / (ratio - 1))
    if extrap:
        slope = extrap[-1]
        err = abs(extrap[-1] - extrap[-2]) if len(extrap) > 1 else abs(diffs[-1] - diffs[-2])
    else:
        slope, err = diffs[0], float("nan")
    curve.sort()
    return FDEstimate(float(slope), float(err), "central" if central else "one-sided", curve)


@dataclass(frozen=True)
class VariationReport:
    s: int
    analytic: float
    numeric: float
    abs_gap: float
    rel_gap: float
    epsilon_schedule: list
    error_estimate: float
    mode: str
    curve: list

    def to_dict(self) -> dict:
        return {"s": self.s, "analytic": self.analytic, "numeric": self.numeric, "abs_gap": self.abs_gap,
                "rel_gap": self.rel_gap, "epsilon_schedule": list(self.epsilon_schedule),
                "error_estimate": self.error_estimate, "mode": self.mode}


def variation_report(model: ModelSpec, tree: ScenarioTree, u_star: AdaptedProcess, v: AdaptedProcess, s: int,
                     epsilons=DEFAULT_EPSILONS, controls: ControlSet | None = None) -> VariationReport:
    analytic = gateaux_derivative(model, tree, u_star, v, s)
    est = fd_derivative(model, tree, u_star, v, s, epsilons, controls)
    gap = abs(analytic - est.slope)
    return VariationReport(s, analytic, est.slope, gap, gap / max(1.0, abs(analytic)), list(epsilons),
                           est.error_estimate, est.mode, est.curve)


# --------------------------------------------------------------------------
# necessary condition


@dataclass(frozen=True)
class NecessityReport:
    """Per-node minima of ``<H_u(k), u - u_k>`` over sampled admissible ``u``.

    ``hu_norm`` holds ``|H_u|`` per node. Where ``U_k`` is the whole space the
    minimum over directions is exactly ``-|H_u|`` and that is what is stored.
    """

    node_min: list
    hu_norm: list
    minimum: float
    witness: dict
    max_hu_norm: float
    interior_hu_norm: float

    def to_dict(self) -> dict:
        return {"minimum": self.minimum, "witness": self.witness, "max_hu_norm": self.max_hu_norm,
                "interior_hu_norm": self.interior_hu_norm,
                "node_min": [np.asarray(a).tolist() for a in self.node_min]}


def _box_candidates(lo, hi, centre, rng, samples):
    lo = np.where(np.isfinite(lo), lo, centre - 1.0)
    hi = np.where(np.isfinite(hi), hi, centre + 1.0)
    m = lo.size
    verts = np.array(list(itertools.product(*zip(lo, hi)))) if m <= 10 else np.empty((0, m))
    inner = lo + (hi - lo) * rng.random((samples, m))
    return np.vstack([verts, inner])


def check_necessary(model: ModelSpec, tree: ScenarioTree, u_star: AdaptedProcess,
                    controls: ControlSet | None = None, samples: int = 64, seed: int = 0, *,
                    solved: tuple[FBSolution, AdjointSolution] | None = None,
                    interior_margin: float = 1e-9) -> NecessityReport:
    controls = controls if controls is not None else ControlSet.all_space(model.m)
    fb, adj = solved if solved is not None else solve_state_and_adjoint(model, tree, u_star)
    hu = hamiltonian_gradient_process(model, tree, u_star, fb, adj)
    rng = np.random.default_rng(stream(seed, "check_necessary"))
    node_min, norms = [], []
    best, witness, interior = np.inf, {}, 0.0
    for k in range(tree.horizon):
        lo, hi = controls.bounds(k)
        mins = np.empty(tree.sizes[k])
        norm_k = np.linalg.norm(hu[k], axis=1)
        for i in range(tree.sizes[k]):
            g, us = hu[k][i], u_star[k][i]
            if controls.is_all_space(k):
                dirs = rng.normal(size=(samples, model.m))
                dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-300)
                if norm_k[i] > 0:
                    dirs = np.vstack([dirs, -g / norm_k[i]])
                cands = us + dirs
                vals = dirs @ g
            else:
                cands = _box_candidates(lo, hi, us, rng, samples)
                vals = (cands - us) @ g
                if np.all(us > lo + interior_margin) and np.all(us < hi - interior_margin):
                    interior = max(interior, float(norm_k[i]))
            j = int(np.argmin(vals))
            mins[i] = vals[j]
            if vals[j] < best:
                best = float(vals[j])
                witness = {"k": k, "node": i, "history": tree.history(k, i), "u": cands[j].tolist(),
                           "u_star": us.tolist(), "H_u": g.tolist(), "value": best}
        if controls.is_all_space(k):
            interior = max(interior, float(np.max(norm_k, initial=0.0)))
        node_min.append(mins)
        norms.append(norm_k)
    max_norm = max(float(np.max(nk, initial=0.0)) for nk in norms)
    return NecessityReport(node_min, norms, float(best), witness, max_norm, interior)


# --------------------------------------------------------------------------
# sufficiency audit

EXACT, HOLDS, VIOLATED = "structurally-exact", "holds-on-samples", "violated"


@dataclass(frozen=True)
class Condition:
    status: str
    margin: float | None = None
    witness: dict | None = None

    def to_dict(self) -> dict:
        return {"status": self.status, "margin": self.margin, "witness": self.witness}


@dataclass(frozen=True)
class SufficiencyAudit:
    boundary_structure: str
    structure: Condition
    phi_convexity: Condition
    gamma_convexity: Condition
    hamiltonian_convexity: Condition
    pointwise_minimum: Condition

    @property
    def conditions(self) -> dict:
        return {"i": self.structure, "ii_phi": self.phi_convexity, "ii_gamma": self.gamma_convexity,
                "iii": self.hamiltonian_convexity, "iv": self.pointwise_minimum}

    @property
    def holds(self) -> bool:
        return all(c.status != VIOLATED for c in self.conditions.values())

    def to_dict(self) -> dict:
        out = {name: c.to_dict() for name, c in self.conditions.items()}
        out["boundary_structure"] = self.boundary_structure
        out["holds"] = self.holds
        return out


def _structure(model: ModelSpec) -> tuple[str, Condition]:
    kinds = (model.phi_kind, model.lambda_kind)
    if kinds == ("linear", "constant"):
        return "PhiLinear_LambdaConstant", Condition(EXACT)
    if kinds == ("constant", "linear"):
        return "PhiConstant_LambdaLinear", Condition(EXACT)
    return "NeitherViolated", Condition(VIOLATED, witness={"phi_kind": kinds[0], "lambda_kind": kinds[1]})


def _midpoint(fun, a, b, extra: dict) -> Condition:
    fa, fb_, fm = fun(a), fun(b), fun(0.5 * (a + b))
    gap = 0.5 * (fa + fb_) - fm
    tol = AUDIT_TOL * np.maximum(1.0, np.maximum(np.abs(fa), np.abs(fb_)))
    slack = gap + tol
    j = int(np.argmin(slack))
    if slack[j] < 0:
        wit = {"a": a[j].tolist(), "b": b[j].tolist(), "gap": float(gap[j])}
        wit.update({key: (val[j].tolist() if hasattr(val, "__len__") else val) for key, val in extra.items()})
        return Condition(VIOLATED, float(gap[j]), wit)
    return Condition(HOLDS, float(np.min(gap)))


def _sample_u(controls, k, centre, rng, box):
    lo, hi = controls.bounds(k)
    lo = np.where(np.isfinite(lo), lo, centre - box)
    hi = np.where(np.isfinite(hi), hi, centre + box)
    return lo + (hi - lo) * rng.random(centre.shape)


def audit_sufficient(model: ModelSpec, tree: ScenarioTree, u_star: AdaptedProcess, samples: int = 10_000,
                     seed: int = 0, *, box: float = 1.0, controls: ControlSet | None = None,
                     solved: tuple[FBSolution, AdjointSolution] | None = None) -> SufficiencyAudit:
    """Sample-based check of the sufficient-condition hypotheses around the solution at ``u_star``."""
    controls = controls if controls is not None else ControlSet.all_space(model.m)
    fb, adj = solved if solved is not None else solve_state_and_adjoint(model, tree, u_star)
    rng = np.random.default_rng(stream(seed, "audit_sufficient"))
    n, m, N = model.n, model.m, tree.horizon
    label, structure = _structure(model)

    leaves = rng.integers(0, tree.sizes[N], samples)
    xa = fb.x[N][leaves] + box * rng.uniform(-1, 1, (samples, n))
    xb = fb.x[N][leaves] + box * rng.uniform(-1, 1, (samples, n))
    phi_c = _midpoint(lambda x: model.phi(leaves, x), xa, xb, {"leaf": leaves})
    ya = fb.y[0] + box * rng.uniform(-1, 1, (samples, n))
    yb = fb.y[0] + box * rng.uniform(-1, 1, (samples, n))
    gamma_c = _midpoint(model.gamma, ya, yb, {})

    ks = rng.integers(0, N, samples)
    h_cond, min_cond = Condition(HOLDS, np.inf), Condition(HOLDS, np.inf)
    for k in range(N):
        sel = np.flatnonzero(ks == k)
        if sel.size == 0:
            continue
        nodes = rng.integers(0, tree.sizes[k], sel.size)
        x, yp, zp, u, pp, qp, r = (a[nodes] for a in adj.point(fb, u_star, k))
        adjoints = (pp, qp, r)

        def pert(c):
            return c + box * rng.uniform(-1, 1, c.shape)

        ua = _sample_u(controls, k, u, rng, box)
        ub = _sample_u(controls, k, u, rng, box)
        pa = np.hstack([pert(x), pert(yp), pert(zp), ua])
        pb = np.hstack([pert(x), pert(yp), pert(zp), ub])

        def H(z):
            parts = np.split(z, [n, 2 * n, 3 * n], axis=1)
            return hamiltonian_batch(model, k, nodes, *parts, *adjoints)

        cond = _midpoint(H, pa, pb, {"k": k, "node": nodes})
        h_cond = _worse(h_cond, cond)

        h_star = hamiltonian_batch(model, k, nodes, x, yp, zp, u, *adjoints)
        h_alt = hamiltonian_batch(model, k, nodes, x, yp, zp, ua, *adjoints)
        gap = h_alt - h_star
        slack = gap + AUDIT_TOL * np.maximum(1.0, np.abs(h_star))
        j = int(np.argmin(slack))
        if slack[j] < 0:
            cond = Condition(VIOLATED, float(gap[j]), {"k": k, "node": int(nodes[j]), "u": ua[j].tolist(),
                                                       "u_star": u[j].tolist(), "gap": float(gap[j])})
        else:
            cond = Condition(HOLDS, float(np.min(gap)))
        min_cond = _worse(min_cond, cond)
    return SufficiencyAudit(label, structure, phi_c, gamma_c, h_cond, min_cond)


def _worse(a: Condition, b: Condition) -> Condition:
    if a.status == VIOLATED and b.status != VIOLATED:
        return a
    if b.status == VIOLATED and a.status != VIOLATED:
        return b
    return a if a.margin <= b.margin else b


# --------------------------------------------------------------------------
# cost-difference representation and duality identities


def _level_terms(model, tree, k, fb, u):
    nodes = np.arange(tree.sizes[k])
    args = (fb.x[k], fb.yp[k], fb.zp[k], u[k])
    return nodes, args, model.b(k, nodes, *args), model.sigma(k, nodes, *args), model.f(k, nodes, *args)


def difference_terms(model: ModelSpec, tree: ScenarioTree, u_star: AdaptedProcess, u_eps: AdaptedProcess,
                     *, solved=None, solved_eps: FBSolution | None = None) -> dict:
    """Both sides of the exact cost-difference representation at the pair ``(u_star, u_eps)``.

    Returns the direct difference ``J(u_eps) - J(u_star)``, each term of the
    Hamiltonian-based representation (Hamiltonians use the adjoints at
    ``u_star``) and their sum.
    """
    fb, adj = solved if solved is not None else solve_state_and_adjoint(model, tree, u_star)
    fe = solved_eps if solved_eps is not None else solve_newton(model, tree, u_eps)
    N = tree.horizon
    ham = 0.0
    for k in range(N):
        nodes = np.arange(tree.sizes[k])
        pp, qp, r = adj.pp[k], adj.qp[k], adj.r[k]
        h_eps = hamiltonian_batch(model, k, nodes, fe.x[k], fe.yp[k], fe.zp[k], u_eps[k], pp, qp, r)
        h_star = hamiltonian_batch(model, k, nodes, fb.x[k], fb.yp[k], fb.zp[k], u_star[k], pp, qp, r)
        hx, hy, hz, _ = hamiltonian_grads_batch(model, k, nodes, *adj.point(fb, u_star, k))
        term = (h_eps - h_star - _dot(fe.x[k] - fb.x[k], hx) - _dot(fe.yp[k] - fb.yp[k], hy)
                - _dot(fe.zp[k] - fb.zp[k], hz))
        ham += float(tree.expectation(term, k))
    leaves = np.arange(tree.sizes[N])
    dxN = fe.x[N] - fb.x[N]
    phi_t = model.phi(leaves, fe.x[N]) - model.phi(leaves, fb.x[N]) - _dot(dxN, model.phi_grad(leaves, fb.x[N]))
    dy0 = fe.y[0] - fb.y[0]
    gamma_t = model.gamma(fe.y[0]) - model.gamma(fb.y[0]) - _dot(dy0, model.gamma_grad(fb.y[0]))
    Phi_lin = np.einsum("mij,mj->mi", model.Phi_jac(leaves, fb.x[N]), dxN)
    Phi_t = _dot(Phi_lin - (model.Phi(leaves, fe.x[N]) - model.Phi(leaves, fb.x[N])), adj.r[N])
    Lam_lin = np.einsum("mij,mj->mi", model.Lambda_jac(fb.y[0]), dy0)
    Lam_t = _dot(model.Lambda(fe.y[0]) - model.Lambda(fb.y[0]) - Lam_lin, adj.p[0])
    terms = {"hamiltonian": ham,
             "phi": float(tree.expectation(phi_t, N)),
             "gamma": float(gamma_t[0]),
             "Phi": float(tree.expectation(Phi_t, N)),
             "Lambda": float(Lam_t[0])}
    direct = cost(model, tree, u_eps, fe) - cost(model, tree, u_star, fb)
    total = sum(terms.values())
    return {"direct": direct, "terms": terms, "representation": total, "gap": abs(direct - total)}


def duality_residuals(model: ModelSpec, tree: ScenarioTree, u_star: AdaptedProcess, u_other: AdaptedProcess,
                      *, solved=None, solved_other: FBSolution | None = None) -> dict:
    """Residuals of the summation-by-parts identities pairing state differences with the adjoints.

    ``x_step`` / ``y_step`` compare each one-step increment of ``E<dx, p>`` and
    ``E<dy, r>`` with its expression through the coefficients and Hamiltonian
    gradients; ``x_total`` / ``y_total`` do the same for the telescoped sums.
    """
    fb, adj = solved if solved is not None else solve_state_and_adjoint(model, tree, u_star)
    fo = solved_other if solved_other is not None else solve_newton(model, tree, u_other)
    N = tree.horizon

    def pair(a, b, k):
        return float(tree.expectation(_dot(a, b), k))

    dx = [fo.x[k] - fb.x[k] for k in tree.levels]
    dy = [fo.y[k] - fb.y[k] for k in tree.levels]
    x_step = y_step = 0.0
    x_lhs = x_rhs = y_lhs = y_rhs = 0.0
    tele_x = tele_y = 0.0
    for k in range(N):
        nodes, args_s, b_s, s_s, f_s = _level_terms(model, tree, k, fb, u_star)
        _, _, b_o, s_o, f_o = _level_terms(model, tree, k, fo, u_other)
        hx, hy, hz, _ = hamiltonian_grads_batch(model, k, nodes, *adj.point(fb, u_star, k))
        inc_x = pair(dx[k + 1], adj.p[k + 1], k + 1) - pair(dx[k], adj.p[k], k)
        rhs_x = pair(b_o - b_s, adj.pp[k], k) + pair(s_o - s_s, adj.qp[k], k) - pair(dx[k], hx, k)
        inc_y = pair(dy[k + 1], adj.r[k + 1], k + 1) - pair(dy[k], adj.r[k], k)
        dyp, dzp = fo.yp[k] - fb.yp[k], fo.zp[k] - fb.zp[k]
        rhs_y = -pair(dyp, hy, k) - pair(dzp, hz, k) + pair(f_o - f_s, adj.r[k], k)
        x_step = max(x_step, abs(inc_x - rhs_x))
        y_step = max(y_step, abs(inc_y - rhs_y))
        tele_x += inc_x
        tele_y += inc_y
        x_rhs += rhs_x
        y_rhs += rhs_y
    x_lhs = pair(dx[N], adj.p[N], N) - pair(dx[0], adj.p[0], 0)
    y_lhs = pair(dy[N], adj.r[N], N) - pair(dy[0], adj.r[0], 0)
    return {"x_step": x_step, "y_step": y_step,
            "x_total": abs(x_lhs - x_rhs), "y_total": abs(y_lhs - y_rhs),
            "x_telescope": abs(x_lhs - tele_x), "y_telescope": abs(y_lhs - tele_y),
            "max": max(x_step, y_step, abs(x_lhs - x_rhs), abs(y_lhs - y_rhs),
                       abs(x_lhs - tele_x), abs(y_lhs - tele_y))}


def perturbation_energy(model: ModelSpec, tree: ScenarioTree, u_star: AdaptedProcess, v: AdaptedProcess, s: int,
                        epsilons=(1e-1, 1e-2, 1e-3)) -> tuple[float, list]:
    """Log-log slope of the state-difference energy against ``eps``, plus the ``(eps, energy)`` pairs."""
    base = solve_newton(model, tree, u_star)
    pts = []
    for e in epsilons:
        sol = solve_newton(model, tree, spike_perturb(u_star, v, s, e), init=base)
        pts.append((float(e), state_energy(tree, sol.x - base.x, sol.y - base.y)))
    logs = np.log([[e, en] for e, en in pts])
    slope = float(np.polyfit(logs[:, 0], logs[:, 1], 1)[0])
    return slope, pts
