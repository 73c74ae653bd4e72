import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbsdelta.adjoint import hamiltonian_gradient_process, solve_adjoint
from fbsdelta.errors import InvariantViolation, ShapeMismatch, SingularC4
from fbsdelta.fbsde_solver import cost, solve_newton
from fbsdelta.lq import (LQCoefficients, as_model, explicit_control, explicit_control_process,
                         random_lq, solve_lq, storage_preset, summary_table)
from fbsdelta.model import check_derivatives, evaluate
from fbsdelta.scenario_tree import AdaptedProcess, BranchSpec, build_tree

import oracles

SKEWED = BranchSpec([(2.0, 0.2), (-0.5, 0.8)])


def _J(model, tree, u):
    return cost(model, tree, u, solve_newton(model, tree, u))


def test_as_model_examples():
    coeffs = LQCoefficients.from_params({"horizon": 1, "A": 2.0, "C4": 1.0})
    assert evaluate(as_model(coeffs), "b", x=[1.0])[0] == 2.0
    coeffs = LQCoefficients.from_params({"horizon": 1, "D": 1.0, "R": 1.0, "S": 1.0, "C4": 1.0})
    assert evaluate(as_model(coeffs), "l", x=[1.0], yp=[1.0], zp=[1.0], u=[1.0]) == 2.0


def test_as_model_derivatives_exact():
    model = as_model(random_lq(n=2, m=2, horizon=3, seed=1))
    assert check_derivatives(model, 100, seed=0).max_error <= 1e-9


def test_boundary_maps():
    coeffs = storage_preset({"N_mat": 0.0})
    model = as_model(coeffs)
    assert np.all(model.Lambda(np.array([[3.0]])) == 0.0)
    tree = build_tree(4)
    assert np.all(solve_lq(coeffs, tree).x[0] == 0.0)
    np.testing.assert_array_equal(model.Phi(np.arange(2), np.array([[1.0], [-4.0]])), [[0.5], [0.5]])


def test_storage_defaults_are_valid():
    coeffs = storage_preset()
    assert coeffs.diagnostics() == []
    assert (coeffs.n, coeffs.m, coeffs.horizon) == (1, 1, 4)
    assert coeffs.steps["A"][0][0, 0] == 0.98 and coeffs.steps["C4"][0][0, 0] == 0.1


@pytest.mark.parametrize("override, error", [
    ({"C4": 1e-9}, SingularC4),
    ({"M_N": 0.0}, InvariantViolation),
    ({"D": -1.0}, InvariantViolation),
    ({"n": 2, "N_mat": [[0.0, 1.0], [0.0, 0.0]]}, InvariantViolation),
])
def test_invalid_coefficients_rejected(override, error):
    with pytest.raises(error):
        storage_preset(override)


def test_unknown_parameter_rejected():
    with pytest.raises(ShapeMismatch):
        storage_preset({"retention": 0.9})


def test_homogeneous_problem_has_zero_solution():
    coeffs = storage_preset({"eta": 0.0})
    tree = build_tree(4)
    sol = solve_lq(coeffs, tree)
    zero = AdaptedProcess.zeros(tree, 1)
    assert sol.u.sup_distance(AdaptedProcess.zeros(tree, 1, 4)) == 0.0
    assert sol.x.sup_distance(zero) == 0.0 and sol.y.sup_distance(zero) == 0.0
    assert sol.cost == 0.0


def test_scalar_one_step_hand_elimination():
    vals = dict(A=0.9, B=0.3, Q=0.2, L=0.1, C1=1.0, C2=0.4, C3=0.5, C4=0.8, D=0.6, R=0.3, S=0.2,
                M_0=0.7, M_N=1.2, N_mat=0.4, eta=0.3)
    sol = solve_lq(LQCoefficients.from_params({"horizon": 1, **vals}), build_tree(1))
    hand = oracles.lq_scalar_one_step(*(vals[k] for k in ("A", "B", "Q", "L", "C1", "C2", "C3", "C4", "D",
                                                           "R", "S", "M_0", "M_N", "N_mat", "eta")))
    got = [sol.u[0][0, 0], sol.x[0][0, 0], sol.x[1][0, 0], sol.x[1][1, 0], sol.y[0][0, 0], sol.cost]
    want = [hand["u0"], hand["x0"], hand["x1+"], hand["x1-"], hand["y0"], hand["J"]]
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_optimum_beats_random_perturbations(seed):
    tree = build_tree(3, SKEWED)
    coeffs = random_lq(n=2, m=2, horizon=3, seed=seed)
    model = as_model(coeffs)
    sol = solve_lq(coeffs, tree)
    rng = np.random.default_rng(seed)
    j_star = _J(model, tree, sol.u)
    assert j_star == pytest.approx(sol.cost, abs=1e-10)
    for _ in range(100):
        dv = AdaptedProcess([rng.normal(scale=10 ** rng.uniform(-3, 0), size=v.shape) for v in sol.u.values])
        assert j_star <= _J(model, tree, sol.u + dv) + 1e-10


def test_explicit_control_examples():
    coeffs = LQCoefficients.from_params({"horizon": 1, "C1": 1.0, "C2": 0.0, "C3": 0.0, "C4": 2.0})
    assert explicit_control(coeffs, 0, 0, [4.0], [0.0], [0.0])[0] == -2.0
    assert explicit_control(coeffs, 0, 0, [0.0], [0.0], [0.0])[0] == 0.0


def test_explicit_control_refuses_weak_c4():
    coeffs = LQCoefficients.from_params({"horizon": 1, "C4": 1e-9}, check=False)
    with pytest.raises(SingularC4):
        explicit_control(coeffs, 0, 0, [1.0], [0.0], [0.0])


def test_explicit_control_reproduces_solution():
    tree = build_tree(3, SKEWED)
    coeffs = random_lq(n=2, m=2, horizon=3, seed=7, node_varying=True, tree=tree)
    sol = solve_lq(coeffs, tree)
    u = explicit_control_process(coeffs, tree, sol.pp, sol.qp, sol.r)
    assert u.sup_distance(sol.u) <= 1e-10


def test_cross_validation_with_generic_solvers():
    tree = build_tree(4)
    coeffs = storage_preset()
    sol = solve_lq(coeffs, tree)
    model = as_model(coeffs)
    fb = solve_newton(model, tree, sol.u)
    adj = solve_adjoint(model, tree, sol.u, fb)
    assert fb.x.sup_distance(sol.x) <= 1e-9 and fb.y.sup_distance(sol.y) <= 1e-9
    assert adj.p.sup_distance(sol.p) <= 1e-9 and adj.r.sup_distance(sol.r) <= 1e-9
    hu = hamiltonian_gradient_process(model, tree, sol.u, fb, adj)
    assert max(np.abs(v).max() for v in hu.values) <= 1e-8


def test_horizon_mismatch():
    with pytest.raises(ShapeMismatch):
        solve_lq(storage_preset(), build_tree(3))


def test_summary_table_expectations():
    tree = build_tree(4)
    sol = solve_lq(storage_preset(), tree)
    rows = summary_table(tree, sol.x, sol.y, sol.u)
    assert [r["time"] for r in rows] == [0, 1, 2, 3, 4]
    assert rows[-1]["Eu0"] is None
    assert rows[-1]["Ey0"] == pytest.approx(0.5)
    assert rows[2]["Ex0"] == pytest.approx(float(oracles.enum_expectation(tree, sol.x[2], 2)[0]), abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.floats(0.0, 1.0))
def test_cost_is_convex_in_control(seed, t):
    tree = build_tree(2, SKEWED)
    model = as_model(random_lq(n=2, m=1, horizon=2, seed=seed % 5))
    rng = np.random.default_rng(seed)
    u = AdaptedProcess([rng.normal(size=(tree.sizes[k], 1)) for k in range(2)])
    v = AdaptedProcess([rng.normal(size=(tree.sizes[k], 1)) for k in range(2)])
    mix = u.scale(t) + v.scale(1 - t)
    assert _J(model, tree, mix) <= t * _J(model, tree, u) + (1 - t) * _J(model, tree, v) + 1e-10
