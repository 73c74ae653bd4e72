import numpy as np
import pytest

from fbsdelta.errors import ControlOutsideSet
from fbsdelta.lq import as_model, random_lq, solve_lq, storage_preset
from fbsdelta.maximum_principle import (EXACT, HOLDS, VIOLATED, audit_sufficient, check_necessary,
                                        difference_terms, directional_derivative, duality_residuals,
                                        fd_derivative, gateaux_derivative, perturbation_energy,
                                        solve_state_and_adjoint, spike_perturb, variation_report)
from fbsdelta.adjoint import hamiltonian_gradient_process
from fbsdelta.model import ControlSet
from fbsdelta.registry import LinearMonotone, SineCoupled, TanhDrift
from fbsdelta.scenario_tree import AdaptedProcess, BranchSpec, build_tree

SKEWED = BranchSpec([(2.0, 0.2), (-0.5, 0.8)])


def rand_proc(tree, m, rng, scale=1.0):
    return AdaptedProcess([scale * rng.normal(size=(tree.sizes[k], m)) for k in range(tree.horizon)])


def test_spike_examples():
    tree = build_tree(2)
    u = AdaptedProcess.constant(tree, [2.0], 2)
    v = AdaptedProcess.constant(tree, [4.0], 2)
    assert spike_perturb(u, v, 1, 0.0).sup_distance(u) == 0.0
    out = spike_perturb(u, v, 1, 0.5)
    assert np.all(out[1] == 4.0) and np.all(out[0] == 2.0)
    ubar = AdaptedProcess.constant(tree, [-1.0], 2)
    end = spike_perturb(u, ubar - u, 0, 1.0)
    assert np.all(end[0] == -1.0) and np.all(end[1] == 2.0)
    with pytest.raises(ControlOutsideSet):
        spike_perturb(u, v, 0, 1.0, ControlSet.box([0.0], [3.0]))


def test_zero_direction_has_zero_derivative():
    tree = build_tree(3)
    model = TanhDrift()
    u = rand_proc(tree, 1, np.random.default_rng(0), 0.5)
    zero = AdaptedProcess.zeros(tree, 1, 3)
    assert gateaux_derivative(model, tree, u, zero, 1) == 0.0
    assert fd_derivative(model, tree, u, zero, 1).slope == 0.0


def test_lq_optimum_is_stationary():
    tree = build_tree(3, SKEWED)
    coeffs = random_lq(n=2, m=2, horizon=3, seed=2)
    sol = solve_lq(coeffs, tree)
    rng = np.random.default_rng(1)
    for s in range(3):
        assert abs(gateaux_derivative(as_model(coeffs), tree, sol.u, rand_proc(tree, 2, rng), s)) <= 1e-8


def test_lq_central_difference_is_exact():
    tree = build_tree(3)
    model = as_model(storage_preset({"horizon": 3}))
    rng = np.random.default_rng(3)
    u, v = rand_proc(tree, 1, rng), rand_proc(tree, 1, rng)
    est = fd_derivative(model, tree, u, v, 1)
    assert est.mode == "central"
    assert est.error_estimate <= 1e-8
    rep = variation_report(model, tree, u, v, 1)
    assert rep.rel_gap <= 1e-6
    assert rep.rel_gap == rep.abs_gap / max(1.0, abs(rep.analytic))


def test_nonlinear_successive_slopes_agree_to_second_order():
    tree = build_tree(3)
    model = TanhDrift()
    rng = np.random.default_rng(4)
    u, v = rand_proc(tree, 1, rng, 0.5), rand_proc(tree, 1, rng)
    coarse = fd_derivative(model, tree, u, v, 0, epsilons=(1e-2,)).slope
    fine = fd_derivative(model, tree, u, v, 0, epsilons=(1e-3,)).slope
    assert abs(coarse - fine) <= 1e-3 * max(1.0, abs(fine))
    assert abs(coarse - fine) > 0.0


def test_one_sided_difference_at_box_boundary():
    tree = build_tree(2)
    model = as_model(random_lq(horizon=2, seed=5))
    u = AdaptedProcess.zeros(tree, 1, 2)
    v = AdaptedProcess.constant(tree, [1.0], 2)
    box = ControlSet.box([0.0], [1.0])
    est = fd_derivative(model, tree, u, v, 1, controls=box)
    assert est.mode == "one-sided"
    assert est.slope == pytest.approx(gateaux_derivative(model, tree, u, v, 1), abs=1e-7)


def test_necessary_condition_at_lq_optimum():
    tree = build_tree(4)
    coeffs = storage_preset()
    sol = solve_lq(coeffs, tree)
    rep = check_necessary(as_model(coeffs), tree, sol.u)
    assert rep.max_hu_norm <= 1e-8
    assert rep.minimum == pytest.approx(-rep.max_hu_norm, abs=1e-15)


def test_necessary_condition_detects_suboptimal_control():
    tree = build_tree(4)
    coeffs = storage_preset()
    sol = solve_lq(coeffs, tree)
    bumped = sol.u.replace_level(2, sol.u[2] + np.eye(4, 1, -1))
    rep = check_necessary(as_model(coeffs), tree, bumped, samples=32)
    assert rep.minimum < -1e-3
    w = rep.witness
    assert w["value"] == rep.minimum
    assert rep.node_min[w["k"]][w["node"]] == rep.minimum
    assert tree.history(w["k"], w["node"]) == w["history"]


def test_box_with_interior_optimum():
    coeffs = storage_preset({"horizon": 1, "eta": 2.0})
    tree = build_tree(1)
    sol = solve_lq(coeffs, tree)
    assert 0.0 < sol.u[0][0, 0] < 1.0
    rep = check_necessary(as_model(coeffs), tree, sol.u, ControlSet.box([0.0], [1.0]))
    assert rep.interior_hu_norm <= 1e-8
    assert rep.minimum >= -1e-8


def test_necessary_metric_sign_consistency():
    tree = build_tree(3)
    model = SineCoupled()
    u = rand_proc(tree, 1, np.random.default_rng(6), 0.5)
    solved = solve_state_and_adjoint(model, tree, u)
    hu = hamiltonian_gradient_process(model, tree, u, *solved)
    for s in range(3):
        d = gateaux_derivative(model, tree, u, hu.scale(-1.0), s, solved=solved)
        expected = -float(tree.expectation(np.sum(hu[s] ** 2, -1), s))
        assert d <= 0.0
        assert d == pytest.approx(expected, rel=1e-12)


def test_directional_derivative_sums_spikes():
    tree = build_tree(2)
    model = TanhDrift()
    rng = np.random.default_rng(7)
    u, v = rand_proc(tree, 1, rng, 0.5), rand_proc(tree, 1, rng)
    total = directional_derivative(model, tree, u, v)
    assert total == pytest.approx(sum(gateaux_derivative(model, tree, u, v, s) for s in range(2)), abs=1e-14)


def test_audit_lq_holds_with_exact_structure():
    tree = build_tree(3)
    coeffs = random_lq(n=2, m=1, horizon=3, seed=8)
    sol = solve_lq(coeffs, tree)
    audit = audit_sufficient(as_model(coeffs), tree, sol.u, samples=5000)
    assert audit.structure.status == EXACT
    assert audit.boundary_structure == "PhiConstant_LambdaLinear"
    assert audit.holds
    for c in (audit.phi_convexity, audit.gamma_convexity, audit.hamiltonian_convexity, audit.pointwise_minimum):
        assert c.status == HOLDS and c.margin >= 0.0


def test_audit_concave_running_cost_violates_convexity():
    tree = build_tree(2)
    model = TanhDrift(wu=-1.0)
    u = AdaptedProcess.zeros(tree, 1, 2)
    audit = audit_sufficient(model, tree, u, samples=2000)
    cond = audit.hamiltonian_convexity
    assert cond.status == VIOLATED
    assert cond.margin < 0 and {"a", "b", "k", "node"} <= set(cond.witness)


def test_audit_structure_labels():
    tree = build_tree(2)
    u = AdaptedProcess.zeros(tree, 1, 2)
    audit = audit_sufficient(LinearMonotone(), tree, u, samples=200)
    assert audit.structure.status == EXACT
    assert audit.boundary_structure == "PhiLinear_LambdaConstant"
    audit = audit_sufficient(TanhDrift(), tree, u, samples=200)
    assert audit.structure.status == VIOLATED
    assert audit.boundary_structure == "NeitherViolated"


@pytest.mark.parametrize("seed", range(3))
def test_difference_representation_lq(seed):
    tree = build_tree(3, SKEWED)
    model = as_model(random_lq(n=2, m=2, horizon=3, seed=seed))
    rng = np.random.default_rng(seed)
    u, v = rand_proc(tree, 2, rng), rand_proc(tree, 2, rng)
    for eps in (0.1, 0.5, 1.0):
        out = difference_terms(model, tree, u, spike_perturb(u, v, seed % 3, eps))
        assert out["gap"] <= 1e-9


def test_duality_identities():
    tree = build_tree(3, SKEWED)
    rng = np.random.default_rng(9)
    for model in (TanhDrift(), SineCoupled(), as_model(random_lq(horizon=3, seed=1))):
        u, ub = rand_proc(tree, 1, rng, 0.5), rand_proc(tree, 1, rng, 0.5)
        assert duality_residuals(model, tree, u, ub)["max"] <= 1e-10


def test_perturbation_energy_is_quadratic():
    tree = build_tree(3)
    model = TanhDrift()
    rng = np.random.default_rng(10)
    u, v = rand_proc(tree, 1, rng, 0.5), rand_proc(tree, 1, rng)
    slope, pts = perturbation_energy(model, tree, u, v, 1)
    assert abs(slope - 2.0) <= 0.1
    assert [e for e, _ in pts] == [1e-1, 1e-2, 1e-3]
