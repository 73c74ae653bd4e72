"""Hamiltonian evaluation and the coupled linear adjoint system.

With ``H = b.p' + sigma.q' + f.r + l`` the adjoint pair ``(p, r)`` solves::

    p_k       = H_x(k)                                  k = 0..N-1
    r_{k+1}   = -H_y(k) - w_k H_z(k)    (at each child)  k = 0..N-1
    r_0       = -gamma_y(y_0) - Lambda_y(y_0)^T p_0
    p_N       = phi_x(x_N) - Phi_x(x_N)^T r_N

where ``p'`` and ``q'`` are the one-step conditional expectations of ``p``
and ``p w``. ``r`` runs forward from ``r_0`` while ``p`` runs backward from
``p_N``, so the whole thing is assembled and solved as one sparse system.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _sparse
from .errors import ShapeMismatch, UncertifiedSolution
from .fbsde_solver import CERT_TOL, FBSolution, Layout, _check_control
from .model import ModelSpec
from .scenario_tree import AdaptedProcess, ScenarioTree


@dataclass(frozen=True)
class HamiltonianPoint:
    k: int
    node: int
    x: np.ndarray
    yp: np.ndarray
    zp: np.ndarray
    u: np.ndarray
    pp: np.ndarray
    qp: np.ndarray
    r: np.ndarray

    def batched(self, model: ModelSpec):
        n, m = model.n, model.m
        out = []
        for label, size in (("x", n), ("yp", n), ("zp", n), ("u", m), ("pp", n), ("qp", n), ("r", n)):
            v = np.atleast_1d(np.asarray(getattr(self, label), dtype=float))
            if v.shape != (size,):
                raise ShapeMismatch(f"Hamiltonian argument {label} has shape {v.shape}, expected ({size},)")
            out.append(v[None, :])
        return np.array([self.node]), out


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def _tmul(jac, vec):
    """``jac^T vec`` for batches: jac (M, n, a), vec (M, n) -> (M, a)."""
    return np.einsum("mia,mi->ma", jac, vec)


def hamiltonian_batch(model: ModelSpec, k, nodes, x, yp, zp, u, pp, qp, r) -> np.ndarray:
    args = (x, yp, zp, u)
    return (_dot(model.b(k, nodes, *args), pp) + _dot(model.sigma(k, nodes, *args), qp)
            + _dot(model.f(k, nodes, *args), r) + model.l(k, nodes, *args))


def hamiltonian_grads_batch(model: ModelSpec, k, nodes, x, yp, zp, u, pp, qp, r):
    """``(H_x, H_y, H_z, H_u)``, each of shape (M, n) or (M, m)."""
    args = (x, yp, zp, u)
    bj = model.b_jac(k, nodes, *args)
    sj = model.sigma_jac(k, nodes, *args)
    fj = model.f_jac(k, nodes, *args)
    lg = model.l_grad(k, nodes, *args)
    return tuple(_tmul(bj[i], pp) + _tmul(sj[i], qp) + _tmul(fj[i], r) + lg[i] for i in range(4))


def hamiltonian(model: ModelSpec, pt: HamiltonianPoint) -> float:
    nodes, (x, yp, zp, u, pp, qp, r) = pt.batched(model)
    return float(hamiltonian_batch(model, pt.k, nodes, x, yp, zp, u, pp, qp, r)[0])


def hamiltonian_grads(model: ModelSpec, pt: HamiltonianPoint):
    nodes, (x, yp, zp, u, pp, qp, r) = pt.batched(model)
    return tuple(g[0] for g in hamiltonian_grads_batch(model, pt.k, nodes, x, yp, zp, u, pp, qp, r))


@dataclass(frozen=True, eq=False)
class AdjointSolution:
    p: AdaptedProcess
    r: AdaptedProcess
    pp: AdaptedProcess
    qp: AdaptedProcess
    residual_norm: float

    def point(self, fbsol: FBSolution, u: AdaptedProcess, k: int):
        """Level-k batched Hamiltonian arguments ``(x, y', z', u, p', q', r)``."""
        return (fbsol.x[k], fbsol.yp[k], fbsol.zp[k], u[k], self.pp[k], self.qp[k], self.r[k])


def _derived(tree: ScenarioTree, p):
    pp = [tree.expect_next(p[k + 1], k) for k in range(tree.horizon)]
    qp = [tree.expect_weighted(p[k + 1], k) for k in range(tree.horizon)]
    return pp, qp


def adjoint_residual(model: ModelSpec, tree: ScenarioTree, u: AdaptedProcess, fbsol: FBSolution,
                     p, r) -> tuple[np.ndarray, float]:
    """Replay every adjoint equation at ``(p, r)``; returns the stacked residual and its sup norm."""
    N, n = tree.horizon, model.n
    p = [np.asarray(v) for v in (p.values if isinstance(p, AdaptedProcess) else p)]
    r = [np.asarray(v) for v in (r.values if isinstance(r, AdaptedProcess) else r)]
    pp, qp = _derived(tree, p)
    y0 = fbsol.y[0]
    res_p = [None] * (N + 1)
    res_r = [r[0] + model.gamma_grad(y0) + _tmul(model.Lambda_jac(y0), p[0])]
    for k in range(N):
        nodes = np.arange(tree.sizes[k])
        hx, hy, hz, _ = hamiltonian_grads_batch(model, k, nodes, fbsol.x[k], fbsol.yp[k], fbsol.zp[k],
                                                u[k], pp[k], qp[k], r[k])
        res_p[k] = p[k] - hx
        w = tree.noise(k + 1)[:, None]
        res_r.append(r[k + 1] + tree.spread(hy, k) + w * tree.spread(hz, k))
    leaves = np.arange(tree.sizes[N])
    xN = fbsol.x[N]
    res_p[N] = p[N] - model.phi_grad(leaves, xN) + _tmul(model.Phi_jac(leaves, xN), r[N])
    vec = Layout(tree, n).join(res_p, res_r)
    return vec, float(np.max(np.abs(vec), initial=0.0))


def adjoint_matrix(model: ModelSpec, tree: ScenarioTree, u: AdaptedProcess, fbsol: FBSolution):
    """Sparse matrix and right-hand side of the adjoint system in the ``[p_0..p_N, r_0..r_N]`` layout."""
    N, n = tree.horizon, model.n
    lay = Layout(tree, n)
    trip = _sparse.Triplets(lay.size)
    rhs = np.zeros(lay.size)
    trip.add_identity(0, lay.size)

    def put(start, values):
        rhs[start:start + values.size] = values.reshape(-1)

    y0 = fbsol.y[0]
    trip.add(lay.second(0), lay.first(0), np.swapaxes(model.Lambda_jac(y0), -1, -2))
    put(lay.second(0), -model.gamma_grad(y0))
    for k in range(N):
        M = tree.sizes[k]
        nodes = np.arange(M)
        args = (fbsol.x[k], fbsol.yp[k], fbsol.zp[k], u[k])
        bj = [np.swapaxes(a, -1, -2) for a in model.b_jac(k, nodes, *args)]
        sj = [np.swapaxes(a, -1, -2) for a in model.sigma_jac(k, nodes, *args)]
        fj = [np.swapaxes(a, -1, -2) for a in model.f_jac(k, nodes, *args)]
        lx, ly, lz, _ = model.l_grad(k, nodes, *args)
        kids = tree.children(k)
        spec = tree.branches[k]
        # p_k rows: p_k - b_x^T p' - sigma_x^T q' - f_x^T r_k = l_x
        prow = lay.first(k) + nodes * n
        for jj, (vjj, pjj) in enumerate(spec.points):
            trip.add(prow, lay.first(k + 1) + kids[:, jj] * n, -pjj * (bj[0] + vjj * sj[0]))
        trip.add(prow, lay.second(k) + nodes * n, -fj[0])
        put(lay.first(k), lx)
        # r_{k+1} rows at child j: r + (H_y + v_j H_z) = 0, linear part moved left
        for j, (vj, _) in enumerate(spec.points):
            rrow = lay.second(k + 1) + kids[:, j] * n
            by, sy, fy = bj[1] + vj * bj[2], sj[1] + vj * sj[2], fj[1] + vj * fj[2]
            for jj, (vjj, pjj) in enumerate(spec.points):
                trip.add(rrow, lay.first(k + 1) + kids[:, jj] * n, pjj * (by + vjj * sy))
            trip.add(rrow, lay.second(k) + nodes * n, fy)
            src = -(ly + vj * lz)
            for i in range(M):
                put(lay.second(k + 1) + int(kids[i, j]) * n, src[i])
    leaves = np.arange(tree.sizes[N])
    xN = fbsol.x[N]
    trip.add(lay.first(N) + leaves * n, lay.second(N) + leaves * n, np.swapaxes(model.Phi_jac(leaves, xN), -1, -2))
    put(lay.first(N), model.phi_grad(leaves, xN))
    return trip.tocsc(), rhs


def solve_adjoint(model: ModelSpec, tree: ScenarioTree, u: AdaptedProcess, fbsol: FBSolution,
                  cert_tol: float = CERT_TOL) -> AdjointSolution:
    """Solve the adjoint system at a certified forward-backward solution."""
    _check_control(model, tree, u, None)
    if not fbsol.residual_norm <= cert_tol:
        raise UncertifiedSolution(f"forward-backward residual {fbsol.residual_norm:.3e} above {cert_tol:.1e}",
                                  witness={"residual_norm": fbsol.residual_norm})
    lay = Layout(tree, model.n)
    matrix, rhs = adjoint_matrix(model, tree, u, fbsol)
    sol = _sparse.solve(matrix, rhs, what="adjoint system")
    p, r = lay.split(sol)
    _, norm = adjoint_residual(model, tree, u, fbsol, p, r)
    scale = max(1.0, float(np.max(np.abs(sol), initial=0.0)))
    if not norm <= cert_tol * scale:
        raise UncertifiedSolution(f"adjoint residual {norm:.3e} failed certification",
                                  witness={"residual_norm": norm})
    pp, qp = _derived(tree, p)
    return AdjointSolution(AdaptedProcess(p), AdaptedProcess(r), AdaptedProcess(pp), AdaptedProcess(qp), norm)


def hamiltonian_gradient_process(model: ModelSpec, tree: ScenarioTree, u: AdaptedProcess,
                                 fbsol: FBSolution, adj: AdjointSolution) -> AdaptedProcess:
    """``H_u`` at every level-k node, k = 0..N-1."""
    out = []
    for k in range(tree.horizon):
        nodes = np.arange(tree.sizes[k])
        out.append(hamiltonian_grads_batch(model, k, nodes, *adj.point(fbsol, u, k))[3])
    return AdaptedProcess(out)


def cost_gradient(model: ModelSpec, tree: ScenarioTree, u: AdaptedProcess, fbsol: FBSolution,
                  adj: AdjointSolution) -> AdaptedProcess:
    """Gradient of the cost with respect to every node value of ``u`` (node probability times ``H_u``)."""
    hu = hamiltonian_gradient_process(model, tree, u, fbsol, adj)
    return AdaptedProcess([tree.path_prob[k][:, None] * hu[k] for k in range(tree.horizon)])
