import json
from dataclasses import replace

import numpy as np
import pytest

from network import VoltageState, branch_flows, build_admittance, derivatives, injections
from opf_solver import (ConstraintSet, OpfSolution, OpfVariables, SolverConfig, SolveStatus,
                        check_violations, kkt_residuals, label_activity, solution_to_json, solve_opf)
from scenario import ScenarioConfig, apply_demand, perturb_demand

MULTIPLIER_ACTIVE = 1e-4
GRID_STEP = 1e-3


@pytest.fixture(scope='module')
def case9_full(case9):
    return solve_opf(case9)


@pytest.fixture(scope='module')
def toy_full(toy):
    return solve_opf(toy)


def fake_solution(case, vm) -> OpfSolution:
    vars = OpfVariables(np.zeros(case.nb), np.asarray(vm, dtype=float), np.zeros(case.ng), np.zeros(case.ng))
    return OpfSolution(vars, 0.0, {}, {}, {}, SolveStatus.CONVERGED, 0, 0.0, 0, ConstraintSet.full(case))


def test_case9_objective(case9_full):
    assert case9_full.converged
    assert case9_full.objective == pytest.approx(5296.69, rel=1e-4)
    assert 0 < case9_full.iterations <= 150
    assert case9_full.feval_count > case9_full.iterations


def test_case9_kkt_residuals(case9, case9_full):
    cfg = SolverConfig()
    res = kkt_residuals(case9, case9_full)
    assert res['feascond'] <= cfg.feastol
    assert res['gradcond'] <= cfg.gradtol
    assert res['compcond'] <= cfg.comptol


def test_case9_full_solution_is_feasible(case9, case9_full):
    assert check_violations(case9, case9_full.vars) == []
    sv = case9_full.vars
    assert np.all(sv.pg >= case9.pg_bounds_pu[0] - 1e-6)
    assert np.all(sv.pg <= case9.pg_bounds_pu[1] + 1e-6)
    assert sv.theta[case9.ref_index] == 0.0


def test_explicit_full_set_gives_identical_solution(case9, case9_full):
    again = solve_opf(case9, ConstraintSet.full(case9))
    assert again.objective == pytest.approx(case9_full.objective, rel=1e-8)


def test_multipliers_are_nonnegative(case9_full):
    for name, mu in case9_full.mult_ineq.items():
        assert np.all(mu >= -1e-9), name


def test_labels_have_case_shape(case9, case9_full):
    labels = label_activity(case9_full, case9)
    assert labels.v_active.shape == (case9.nb,)
    assert labels.l_active.shape == (case9.nl,)


def test_dropping_binding_flow_limit_is_reported(toy, toy_full):
    labels = label_activity(toy_full, toy)
    assert labels.l_active[1]
    cs = ConstraintSet(frozenset(range(toy.nb)), frozenset())
    relaxed = solve_opf(toy, cs)
    assert relaxed.converged
    assert relaxed.objective < toy_full.objective
    kinds = {(v.kind, v.index) for v in check_violations(toy, relaxed.vars)}
    assert ('flow_f', 1) in kinds or ('flow_t', 1) in kinds


def test_active_set_alone_reproduces_full_optimum(toy, toy_full):
    labels = label_activity(toy_full, toy)
    cs = ConstraintSet(frozenset(np.flatnonzero(labels.v_active).tolist()),
                       frozenset(np.flatnonzero(labels.l_active).tolist()))
    assert ConstraintSet.full(toy).issuperset(cs)
    sol = solve_opf(toy, cs)
    assert sol.converged
    assert sol.objective == pytest.approx(toy_full.objective, rel=1e-5)
    assert check_violations(toy, sol.vars, tol=1e-5) == []


def test_each_inactive_constraint_can_be_dropped(toy, toy_full):
    labels = label_activity(toy_full, toy)
    full = ConstraintSet.full(toy)
    for i in np.flatnonzero(~labels.v_active):
        cs = ConstraintSet(full.voltage_buses - {int(i)}, full.flow_branches)
        assert solve_opf(toy, cs).objective == pytest.approx(toy_full.objective, rel=1e-5)


def test_warm_start_converges(case9, case9_full):
    sol = solve_opf(case9, start=case9_full.vars)
    assert sol.converged
    assert sol.objective == pytest.approx(case9_full.objective, rel=1e-6)


def test_iteration_cap_reports_max_iter(case9):
    sol = solve_opf(case9, config=SolverConfig(max_iter=1))
    assert sol.status is SolveStatus.MAX_ITER
    assert not sol.converged
    with pytest.raises(ValueError):
        label_activity(sol, case9)


def test_start_must_have_positive_voltage(case2):
    start = replace(OpfVariables.flat_start(case2), vm=np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        solve_opf(case2, start=start)


def test_flow_limit_on_unlimited_branch_rejected(toy):
    with pytest.raises(ValueError, match='unlimited'):
        solve_opf(toy, ConstraintSet(frozenset(), frozenset({0})))


def test_inequality_count(toy):
    assert ConstraintSet.full(toy).inequality_count(toy) == 16
    assert ConstraintSet.empty().inequality_count(toy) == 8


def test_label_thresholds(toy):
    labels = label_activity(fake_solution(toy, [1.05, 1.05 - 1e-3, 1.05 - 1e-3]), toy)
    assert labels.v_active.tolist() == [True, False, False]
    assert not labels.l_active.any()
    assert labels.counts == (1, 0)


def test_lower_bound_within_tolerance_is_active(toy):
    labels = label_activity(fake_solution(toy, np.full(toy.nb, 0.95 + 1e-6)), toy)
    assert labels.v_active.all()
    # equal magnitudes at flat angles carry charging only
    assert not labels.l_active.any()


def test_check_violations_amounts(toy):
    vars = fake_solution(toy, [1.06, 1.0, 0.93]).vars
    voltages = ConstraintSet(frozenset(range(toy.nb)), frozenset())
    found = {(v.kind, v.index): v.amount for v in check_violations(toy, vars, voltages)}
    assert set(found) == {('vmax', 0), ('vmin', 2)}
    assert found[('vmax', 0)] == pytest.approx(0.01)
    assert found[('vmin', 2)] == pytest.approx(0.02)


def test_check_violations_only_looks_at_requested_set(toy):
    vars = fake_solution(toy, [1.06, 1.0, 0.93]).vars
    assert check_violations(toy, vars, ConstraintSet(frozenset({1}), frozenset())) == []


def test_solution_json(case9, case9_full):
    doc = json.loads(solution_to_json(case9_full, case9, label_activity(case9_full, case9)))
    assert doc['status'] == 'converged'
    assert len(doc['pg_mw']) == case9.ng
    assert len(doc['labels']['v_active']) == case9.nb
    assert doc['flow_branches'] == list(range(case9.nl))


# -- convergence on the toy case and its scenarios -----------------------------

def toy_scenarios(toy, count: int = 12) -> list:
    cfg = ScenarioConfig(seed=5, stream=7, count=count)
    return [apply_demand(toy, perturb_demand(toy, cfg, k)) for k in range(count)]


def scaled_load(case, factor: float):
    return case.with_demand([b.Pd * factor for b in case.buses], [b.Qd * factor for b in case.buses])


def assert_labels_cover_multipliers(sol, case):
    labels = label_activity(sol, case)
    for family, flags in (('vmin', labels.v_active), ('vmax', labels.v_active),
                          ('flow_f', labels.l_active), ('flow_t', labels.l_active)):
        strong = np.flatnonzero(sol.mult_ineq[family] >= MULTIPLIER_ACTIVE)
        assert flags[strong].all(), f'{family} multipliers {sol.mult_ineq[family][strong]} on inactive limits'


def test_toy_base_load_converges(toy, toy_full):
    assert toy_full.converged, toy_full.status
    res = kkt_residuals(toy, toy_full)
    assert res['gradcond'] <= SolverConfig().gradtol
    assert toy_full.vars.theta[toy.ref_index] == 0.0


@pytest.mark.parametrize('factor', [0.9, 1.0, 1.1])
def test_toy_uniform_load_factors_converge(toy, factor):
    case = scaled_load(toy, factor)
    sol = solve_opf(case)
    assert sol.converged, sol.status
    assert check_violations(case, sol.vars, tol=1e-5) == []


def test_toy_scenarios_converge(toy):
    for k, case in enumerate(toy_scenarios(toy)):
        sol = solve_opf(case)
        assert sol.converged, f'scenario {k}: {sol.status.value}'
        assert check_violations(case, sol.vars, tol=1e-5) == []


def test_reference_angle_is_exactly_zero(toy, case9_full, case9):
    assert case9_full.vars.theta[case9.ref_index] == 0.0
    sol = solve_opf(toy, start=replace(OpfVariables.flat_start(toy), theta=np.full(toy.nb, 0.2)))
    assert sol.vars.theta[toy.ref_index] == 0.0


def test_labels_cover_multiplier_positive_limits(toy, case9, case9_full, toy_full):
    assert_labels_cover_multipliers(case9_full, case9)
    assert_labels_cover_multipliers(toy_full, toy)
    for case in toy_scenarios(toy, 6):
        assert_labels_cover_multipliers(solve_opf(case), case)


def test_binding_flow_limit_carries_multiplier(toy, toy_full):
    mu = np.maximum(toy_full.mult_ineq['flow_f'], toy_full.mult_ineq['flow_t'])
    assert mu[1] >= MULTIPLIER_ACTIVE
    assert mu[0] == 0.0 and mu[2] == 0.0


def test_labels_are_deterministic(toy):
    case = toy_scenarios(toy, 3)[2]
    a, b = solve_opf(case), solve_opf(case)
    la, lb = label_activity(a, case), label_activity(b, case)
    assert np.array_equal(la.v_active, lb.v_active)
    assert np.array_equal(la.l_active, lb.l_active)
    assert a.objective == b.objective
    assert a.iterations == b.iterations


def test_restriction_is_monotone(toy):
    full = ConstraintSet.full(toy)
    voltage_only = ConstraintSet(full.voltage_buses, frozenset())
    for case in toy_scenarios(toy, 6):
        f_full = solve_opf(case, full)
        f_volt = solve_opf(case, voltage_only)
        assert f_full.converged and f_volt.converged
        assert f_volt.objective <= f_full.objective * (1 + 1e-6)
        labels = label_activity(f_full, case)
        active = ConstraintSet(frozenset(np.flatnonzero(labels.v_active).tolist()),
                               frozenset(np.flatnonzero(labels.l_active).tolist()))
        f_active = solve_opf(case, active)
        assert f_active.converged
        assert f_active.objective <= f_full.objective * (1 + 1e-6)


# -- brute-force oracle on two buses -------------------------------------------

def load_bus_power_flow(model, vm1: float, pd2: float, qd2: float):
    """Newton solve of bus 2 for a fixed sending-end voltage; returns the state and generator output."""
    th2, vm2 = 0.0, vm1
    for _ in range(50):
        v = VoltageState(np.array([0.0, th2]), np.array([vm1, vm2]))
        P, Q = injections(model, v)
        mis = np.array([P[1] + pd2, Q[1] + qd2])
        if np.max(np.abs(mis)) < 1e-12:
            return v, P[0], Q[0]
        jac = derivatives(model, v)
        J = np.array([[jac.dP[1, 1], jac.dP[1, 3]], [jac.dQ[1, 1], jac.dQ[1, 3]]])
        dth, dvm = np.linalg.solve(J, -mis)
        th2, vm2 = th2 + dth, vm2 + dvm
    raise AssertionError(f'load bus power flow did not converge at vm1={vm1}')


def grid_search(case):
    """Cheapest feasible point on a GRID_STEP grid of the sending-end voltage.

    Returns (cost, binding buses, binding branches). A limit binds when a
    cheaper neighbouring grid point breaks it.
    """
    model = build_admittance(case)
    pd2, qd2 = case.pd_pu[1], case.qd_pu[1]
    (pmin,), (pmax,) = case.pg_bounds_pu
    (qmin,), (qmax,) = case.qg_bounds_pu
    a, b, c = case.cost_coeffs[0]
    n = int(round((case.vmax[0] - case.vmin[0]) / GRID_STEP))
    # one point past each bound so the sending-end limits show up as neighbours
    grid = case.vmin[0] + GRID_STEP * np.arange(-1, n + 2)

    costs, broken = [], []
    for vm1 in grid:
        v, pg, qg = load_bus_power_flow(model, vm1, pd2, qd2)
        ff, ft = branch_flows(model, v)
        bad = {('bus', i) for i in range(2) if not case.vmin[i] <= v.vm[i] <= case.vmax[i]}
        fmax = case.rate_a_pu[0]
        if fmax > 0 and max(ff[0], ft[0]) > fmax:
            bad.add(('branch', 0))
        if not (pmin <= pg <= pmax and qmin <= qg <= qmax):
            bad.add(('gen', 0))
        P = pg * case.base_mva
        costs.append(a * P ** 2 + b * P + c)
        broken.append(bad)

    feasible = [j for j in range(len(grid)) if not broken[j]]
    best = min(feasible, key=costs.__getitem__)
    binding = set()
    for j in (best - 1, best + 1):
        if 0 <= j < len(grid) and costs[j] < costs[best]:
            binding |= broken[j]
    return (costs[best], {i for kind, i in binding if kind == 'bus'},
            {i for kind, i in binding if kind == 'branch'})


@pytest.mark.parametrize('b_chg, expected_bus', [(0.02, 0), (0.5, 1)])
def test_two_bus_labels_match_grid_search(case2, b_chg, expected_bus):
    base = replace(case2, branches=(replace(case2.branches[0], b_chg=b_chg),))
    factors = np.random.default_rng(42).uniform(0.7, 1.3, 20)
    for factor in factors:
        case = scaled_load(base, factor)
        cost, buses, branches = grid_search(case)
        assert buses == {expected_bus}

        sol = solve_opf(case)
        assert sol.converged
        labels = label_activity(sol, case)
        assert set(np.flatnonzero(labels.v_active).tolist()) == buses, factor
        assert set(np.flatnonzero(labels.l_active).tolist()) == branches, factor
        assert sol.objective <= cost + 1e-6
        assert cost - sol.objective < 0.05
