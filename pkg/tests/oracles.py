"""Independent reference computations used by the tests.

Nothing here calls the tree's reshape kernels: expectations are formed by
walking every full path explicitly.
"""

from __future__ import annotations

import itertools

import numpy as np

from fbsdelta.scenario_tree import BranchSpec, build_tree


def random_branch(rng, size: int) -> BranchSpec:
    """Random finite law standardized to mean 0 and variance 1."""
    probs = rng.uniform(0.2, 1.0, size)
    probs /= probs.sum()
    raw = rng.normal(size=size)
    mean = probs @ raw
    sd = np.sqrt(probs @ (raw - mean) ** 2)
    return BranchSpec(values=(raw - mean) / sd, probs=probs)


def random_tree(rng, max_leaves: int = 1024, max_horizon: int = 6):
    while True:
        horizon = int(rng.integers(1, max_horizon + 1))
        sizes = [int(rng.integers(2, 5)) for _ in range(horizon)]
        if np.prod(sizes) <= max_leaves:
            return build_tree(horizon, [random_branch(rng, s) for s in sizes])


def paths(tree):
    """Every full path as ``(branch_indices, probability, noise_values)``."""
    ranges = [range(spec.size) for spec in tree.branches]
    for idx in itertools.product(*ranges):
        prob, noise = 1.0, []
        for spec, j in zip(tree.branches, idx):
            prob *= spec.probs[j]
            noise.append(spec.values[j])
        yield idx, prob, noise


def node_of(tree, prefix) -> int:
    """Mixed-radix index of a history prefix (independent of the tree's own lookup)."""
    i = 0
    for level, j in enumerate(prefix):
        i = i * tree.branches[level].size + j
    return i


def enum_cond_next(tree, values_next, k, weighted=False):
    """E[v_{k+1} (w_k) | F_{k-1}] at every level-k node by summing over full paths."""
    dim = values_next.shape[1]
    num = np.zeros((tree.sizes[k], dim))
    den = np.zeros(tree.sizes[k])
    for idx, prob, noise in paths(tree):
        node = node_of(tree, idx[:k])
        child = node_of(tree, idx[:k + 1])
        w = noise[k] if weighted else 1.0
        num[node] += prob * w * values_next[child]
        den[node] += prob
    return num / den[:, None]


def enum_expectation(tree, values, k):
    out = np.zeros(values.shape[1])
    for idx, prob, _ in paths(tree):
        out += prob * values[node_of(tree, idx[:k])]
    return out


def lq_scalar_one_step(A, B, Q, L, C1, C2, C3, C4, D, R, S, M0, MN, Nm, eta):
    """Closed-form optimum of the scalar one-step LQ problem on the +-1 tree.

    With y_1 = eta at both leaves, y' = eta and z' = 0. Every other unknown is
    affine in u_0, so the stationarity condition is one scalar equation.
    Affine quantities are carried as (constant, slope) pairs.
    """
    def aff(c, s):
        return np.array([c, s], dtype=float)

    y0 = aff(A * eta, C3)
    x0 = -Nm * y0
    u = aff(0.0, 1.0)
    drift = A * x0 + aff(-Q * eta, 0.0) + C1 * u
    vol = B * x0 + C2 * u
    x1p, x1m = drift + vol, drift - vol
    p1p, p1m = MN * x1p, MN * x1m
    pp = 0.5 * (p1p + p1m)
    qp = 0.5 * (p1p - p1m)
    p0 = A * pp + B * qp + D * x0
    r0 = -M0 * y0 + Nm * p0
    stat = C1 * pp + C2 * qp - C3 * r0 + C4 * u
    u0 = -stat[0] / stat[1]

    def at(a):
        return a[0] + a[1] * u0

    xs = {"x0": at(x0), "x1+": at(x1p), "x1-": at(x1m), "y0": at(y0), "u0": u0,
          "p0": at(p0), "p1+": at(p1p), "p1-": at(p1m), "r0": at(r0)}
    # z' = 0, so the S term drops out of r_1
    r_mean = Q * at(pp) + A * at(r0) - R * eta
    r_vol = L * at(qp) + B * at(r0)
    xs["r1+"], xs["r1-"] = r_mean + r_vol, r_mean - r_vol
    xs["J"] = 0.5 * (0.5 * MN * (xs["x1+"] ** 2 + xs["x1-"] ** 2) + M0 * xs["y0"] ** 2
                     + D * xs["x0"] ** 2 + R * eta ** 2 + C4 * u0 ** 2)
    return xs


def enum_lq_cost(coeffs, tree, x, y, u):
    """Quadratic cost summed path by path (scalar-or-vector, shared coefficients)."""
    N = tree.horizon
    total = 0.0
    for idx, prob, noise in paths(tree):
        acc = 0.0
        for k in range(N):
            node = node_of(tree, idx[:k])
            kids = [node_of(tree, idx[:k] + (j,)) for j in range(tree.branches[k].size)]
            spec = tree.branches[k]
            yp = sum(spec.probs[j] * y[k + 1][c] for j, c in enumerate(kids))
            zp = sum(spec.probs[j] * spec.values[j] * y[k + 1][c] for j, c in enumerate(kids))
            c = {name: coeffs.steps[name][k] for name in ("D", "R", "S", "C4")}
            c = {key: (val[node] if val.ndim == 3 else val) for key, val in c.items()}
            xk, uk = x[k][node], u[k][node]
            acc += xk @ c["D"] @ xk + yp @ c["R"] @ yp + zp @ c["S"] @ zp + uk @ c["C4"] @ uk
        leaf = node_of(tree, idx)
        acc += x[N][leaf] @ coeffs.M_N @ x[N][leaf]
        total += prob * acc
    return 0.5 * (total + y[0][0] @ coeffs.M_0 @ y[0][0])
