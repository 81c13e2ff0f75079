"""Characteristic-flow tests against closed-form and matrix-exponential oracles."""

import numpy as np
import pytest
from scipy.linalg import expm

from zvlab.fields import GridSpec, GridFunction
from zvlab.flow import (FlowEscape, apply_J, composition_check,
                        gradient_identity_check, gronwall_bound, solve_flow,
                        solve_inverse_flow)

A = np.array([[-1.0, 0.3], [0.2, -0.5]])  # eigenvalues -1.1, -0.4


def linear_drift(t, x):
    return x @ A.T


def linear_jac(t, x):
    return np.broadcast_to(A, x.shape[:-1] + (2, 2))


@pytest.fixture(scope="module")
def linear_flow():
    grid = GridSpec(d=2, n=21, m=40, L=3.0, T=0.5)
    fm = solve_flow(linear_drift, grid, jac=linear_jac, lip=1.1)
    solve_inverse_flow(fm, linear_drift, jac=linear_jac)
    return grid, fm


def test_matrix_exponential_oracle(linear_flow):
    grid, fm = linear_flow
    nodes = grid.nodes()
    worst = {"psi": 0.0, "grad": 0.0, "psi_inv": 0.0, "grad_inv": 0.0}
    for k in range(grid.m + 1):
        E_back = expm(A * (grid.ts[k] - grid.T))     # psi(t_k, x) = E_back x
        E_fwd = expm(A * (grid.T - grid.ts[k]))
        worst["psi"] = max(worst["psi"], np.abs(fm.psi[k] - nodes @ E_back.T).max())
        worst["grad"] = max(worst["grad"], np.abs(fm.grad_psi[k] - E_back).max())
        worst["psi_inv"] = max(worst["psi_inv"], np.abs(fm.psi_inv[k] - nodes @ E_fwd.T).max())
        worst["grad_inv"] = max(worst["grad_inv"], np.abs(fm.grad_psi_inv[k] - E_fwd).max())
    for name, err in worst.items():
        assert err <= 1e-6, f"{name} defect {err:.3e} exceeds 1e-6"


def test_composition_and_gradient_identity(linear_flow):
    grid, fm = linear_flow
    comp = composition_check(fm, linear_drift, jac=linear_jac)
    assert comp <= 10 * fm.tol_flow
    res = gradient_identity_check(fm, linear_drift, jac=linear_jac)
    assert res["grad_defect"] <= 10 * fm.tol_flow
    assert res["composition_defect"] <= 10 * fm.tol_flow


def test_fd_jacobian_matches_analytic(linear_flow):
    # same solve without the analytic jacobian must agree to integrator accuracy
    grid, fm = linear_flow
    fm2 = solve_flow(linear_drift, grid, lip=1.1)
    assert np.abs(fm2.psi - fm.psi).max() <= 1e-8
    assert np.abs(fm2.grad_psi - fm.grad_psi).max() <= 1e-6


def test_ou_closed_form_and_gronwall():
    grid = GridSpec(d=1, n=201, m=50, L=4.0, T=0.5)
    fm = solve_flow(lambda t, x: -x, grid, lip=1.0)
    xs = grid.nodes()
    for k in (0, grid.m // 2, grid.m):
        factor = np.exp(grid.T - grid.ts[k])     # backward flow of dx = -x dt
        assert np.abs(fm.psi[k] - xs * factor).max() <= 1e-9
        assert np.abs(fm.grad_psi[k] - factor).max() <= 1e-9
    assert fm.sup_grad() <= np.exp(grid.T) * (1 + 1e-9)
    assert gronwall_bound(fm, lip=1.0)
    assert not gronwall_bound(fm, lip=0.5)


def test_flow_escape_raises():
    grid = GridSpec(d=1, n=101, m=50, L=4.0, T=1.0)
    with pytest.raises(FlowEscape):
        solve_flow(lambda t, x: -x, grid, lip=1.0)   # 4*e > 2L = 8


def const_drift(t, x):
    return np.full_like(x, 0.8)


@pytest.fixture(scope="module")
def translation_flow():
    grid = GridSpec(d=1, n=201, m=20, L=4.0, T=1.0)
    fm = solve_flow(const_drift, grid, lip=0.0)
    solve_inverse_flow(fm, const_drift)
    return grid, fm


def test_apply_J_translates(translation_flow):
    grid, fm = translation_flow
    xs = grid.xs
    g = GridFunction(grid, np.broadcast_to(np.sin(xs), (grid.m + 1, grid.n)).copy(), "scalar")
    Jg, clamps = apply_J(g, fm)
    assert clamps > 0          # right edge reads beyond the box and is counted
    interior = np.abs(xs) <= 3.0
    for k in range(grid.m + 1):
        shift = 0.8 * (grid.T - grid.ts[k])   # psi^{-1}(t, x) = x + c (T - t)
        expected = np.sin(np.clip(xs + shift, -grid.L, grid.L))
        assert np.abs(Jg.values[k][interior] - expected[interior]).max() <= 5e-4


def test_J_round_trip(translation_flow):
    grid, fm = translation_flow
    xs = grid.xs
    g = GridFunction(grid, np.broadcast_to(np.sin(xs), (grid.m + 1, grid.n)).copy(), "scalar")
    Jinv_g, _ = apply_J(g, fm, inverse=True)
    back, _ = apply_J(Jinv_g, fm)
    interior = np.abs(xs) <= 2.2
    assert np.abs(back.values[:, interior] - g.values[:, interior]).max() <= 1e-3


def test_chain_rule_identity():
    # grad(J g)(t,x) = grad psi^{-1}(t,x)^T  grad g(t, psi^{-1}(t,x))
    grid = GridSpec(d=1, n=201, m=50, L=4.0, T=0.5)
    fm = solve_flow(lambda t, x: -x, grid, lip=1.0)
    solve_inverse_flow(fm, lambda t, x: -x)
    xs = grid.xs
    g = GridFunction(grid, np.broadcast_to(np.sin(xs), (grid.m + 1, grid.n)).copy(), "scalar")
    Jg, _ = apply_J(g, fm)
    interior = np.abs(xs) <= 2.0
    for k in (0, grid.m // 2):
        num = np.gradient(Jg.values[k], grid.h)
        factor = np.exp(-(grid.T - grid.ts[k]))   # grad psi^{-1} for dx = -x dt
        analytic = factor * np.cos(xs * factor)
        assert np.abs(num[interior] - analytic[interior]).max() <= 2e-3


def cubic_drift(t, x):
    return -x ** 3 / (1.0 + x ** 2)


def test_inverse_matches_root_finding():
    from scipy.optimize import brentq
    grid = GridSpec(d=1, n=241, m=40, L=3.0, T=0.5)
    fm = solve_flow(cubic_drift, grid, lip=1.125)
    solve_inverse_flow(fm, cubic_drift)
    k = grid.m // 2
    from zvlab.flow import _fd_jacobian, _rk4_pair
    jac = _fd_jacobian(cubic_drift, 1)

    def psi_at(x):
        pos = np.array([[x]])
        J = np.ones((1, 1, 1))
        for j in range(grid.m, k, -1):
            pos, J = _rk4_pair(cubic_drift, jac, grid.ts[j], grid.ts[j - 1],
                               pos, J, fm.n_sub, 2 * grid.L)
        return float(pos[0, 0])

    from zvlab.fields import interp_space
    for y in (-1.5, -0.3, 0.2, 0.9, 1.4):
        x_root = brentq(lambda x: psi_at(x) - y, -3.0, 3.0, xtol=1e-12)
        stored, _ = interp_space(grid, fm.psi_inv[k][:, 0], np.array([[y]]))
        assert abs(x_root - float(stored[0])) <= 1e-3
