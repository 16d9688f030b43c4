import numpy as np
import pytest

from conftest import two_bus_case
from network import (VoltageState, branch_flows, build_admittance, complex_flows, derivatives,
                     flow_jacobian, injections)


def random_state(nb: int, seed: int = 7) -> VoltageState:
    rng = np.random.default_rng(seed)
    return VoltageState(rng.uniform(-0.3, 0.3, nb), rng.uniform(0.9, 1.1, nb))


def test_two_bus_admittance():
    model = build_admittance(two_bus_case())
    assert np.allclose(model.Ybus.toarray(), [[-10j, 10j], [10j, -10j]])


def test_nominal_taps_give_symmetric_ybus(case9):
    Y = build_admittance(case9).Ybus.toarray()
    assert np.allclose(Y, Y.T)


def test_lossless_line_injections():
    model = build_admittance(two_bus_case())
    P, Q = injections(model, VoltageState(np.array([0.0, -0.1]), np.ones(2)))
    assert P[0] == pytest.approx(10 * np.sin(0.1))
    assert Q[0] == pytest.approx(10 * (1 - np.cos(0.1)))
    assert P.sum() == pytest.approx(0.0, abs=1e-12)


def test_flat_start_without_charging_has_no_injection():
    model = build_admittance(two_bus_case())
    P, Q = injections(model, VoltageState(np.zeros(2), np.ones(2)))
    assert np.allclose(P, 0) and np.allclose(Q, 0)


def test_lossless_flow_magnitudes():
    model = build_admittance(two_bus_case())
    v = VoltageState(np.array([0.0, -0.1]), np.ones(2))
    ff, ft = branch_flows(model, v)
    assert ff[0] == pytest.approx(np.hypot(10 * np.sin(0.1), 10 * (1 - np.cos(0.1))))
    Sf, St = complex_flows(model, v)
    assert Sf.real[0] == pytest.approx(-St.real[0])


def test_flat_start_flow_is_charging_only(case2):
    ff, ft = branch_flows(build_admittance(case2), VoltageState(np.zeros(2), np.ones(2)))
    assert ff[0] == pytest.approx(0.01)
    assert ft[0] == pytest.approx(0.01)


def test_flat_start_angle_derivative():
    jac = derivatives(build_admittance(two_bus_case()), VoltageState(np.zeros(2), np.ones(2)))
    dP = jac.dP.toarray()
    assert dP[0, 0] == pytest.approx(10.0)
    assert dP[0, 1] == pytest.approx(-10.0)


def test_voltage_state_rejects_nonpositive_magnitude():
    with pytest.raises(ValueError):
        VoltageState(np.zeros(2), np.array([1.0, 0.0]))


def _stacked(model, theta, vm):
    v = VoltageState(theta, vm)
    P, Q = injections(model, v)
    ff, ft = branch_flows(model, v)
    return np.concatenate([P, Q, ff ** 2, ft ** 2])


@pytest.mark.parametrize('seed', range(100))
def test_jacobian_matches_central_differences(case9, seed):
    model = build_admittance(case9)
    v = random_state(case9.nb, seed)
    jac = derivatives(model, v)
    analytic = np.vstack([jac.dP.toarray(), jac.dQ.toarray(), jac.dAf.toarray(), jac.dAt.toarray()])

    x = np.concatenate([v.theta, v.vm])
    nb, h = case9.nb, 1e-6
    numeric = np.zeros_like(analytic)
    for j in range(2 * nb):
        up, down = x.copy(), x.copy()
        up[j] += h
        down[j] -= h
        numeric[:, j] = (_stacked(model, up[:nb], up[nb:]) - _stacked(model, down[:nb], down[nb:])) / (2 * h)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-6)


def test_hessian_matches_differenced_gradient(case9):
    model = build_admittance(case9)
    nb, nl = case9.nb, case9.nl
    rng = np.random.default_rng(3)
    lam_p, lam_q = rng.normal(size=nb), rng.normal(size=nb)
    mu_f, mu_t = rng.uniform(size=nl), rng.uniform(size=nl)
    v = random_state(nb, seed=11)

    def gradient(x):
        jac = derivatives(model, VoltageState(x[:nb], x[nb:]))
        return jac.dP.T @ lam_p + jac.dQ.T @ lam_q + jac.dAf.T @ mu_f + jac.dAt.T @ mu_t

    H = derivatives(model, v, order='hessian', lam_p=lam_p, lam_q=lam_q, mu_f=mu_f, mu_t=mu_t).toarray()
    x = np.concatenate([v.theta, v.vm])
    h = 1e-6
    numeric = np.zeros_like(H)
    for j in range(2 * nb):
        up, down = x.copy(), x.copy()
        up[j] += h
        down[j] -= h
        numeric[:, j] = (gradient(up) - gradient(down)) / (2 * h)
    np.testing.assert_allclose(H, numeric, rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(H, H.T, atol=1e-9)


def test_hessian_with_zero_multipliers_is_zero(case9):
    H = derivatives(build_admittance(case9), random_state(case9.nb), order='hessian')
    assert np.allclose(H.toarray(), 0.0)


def test_unknown_derivative_order(case2):
    with pytest.raises(ValueError):
        derivatives(build_admittance(case2), VoltageState(np.zeros(2), np.ones(2)), order='third')


def test_flow_jacobian_without_branches(case2):
    model = build_admittance(case2).subset(np.array([], dtype=int))
    Sf, St, dAf, dAt = flow_jacobian(model, np.ones(2, dtype=complex))
    assert Sf.size == 0 and dAf.shape == (0, 4)


@pytest.mark.parametrize('seed', range(100))
def test_net_injection_equals_series_losses(case9, seed):
    model = build_admittance(case9)
    v = random_state(case9.nb, seed)
    P, _ = injections(model, v)
    Sf, St = complex_flows(model, v)
    losses = Sf.real + St.real
    assert np.all(losses >= -1e-12)
    assert P.sum() == pytest.approx(losses.sum(), abs=1e-9)
    assert P.sum() >= 0.0


@pytest.mark.parametrize('b_chg', [0.0, 0.2])
def test_lossless_line_conserves_active_power(b_chg):
    model = build_admittance(two_bus_case(b_chg=b_chg))
    for seed in range(100):
        P, _ = injections(model, random_state(2, seed))
        assert abs(P.sum()) <= 1e-10
