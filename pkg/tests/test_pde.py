import math

import numpy as np
import pytest

from zvlab.fields import CoefficientSet, GridSpec, NormSpec
from zvlab.pde import (
    DecayPrediction,
    PdeProblem,
    lambda_sweep,
    solve_backward,
    solve_phi_system,
    verify_apriori,
)


def unit_sigma(d=1):
    eye = np.eye(d)

    def sigma(t, x):
        x = np.asarray(x)
        return np.broadcast_to(eye, x.shape[:-1] + (d, d)).copy()

    return sigma


def gaussian_problem(n, m, L=8.0, T=1.0):
    """Manufactured solution G = (T-t) exp(-x^2/4) for a = 1/2, no drift.

    f = dG/dt + a G'' = -g + (T-t)(x^2-2)/8 * g with g = exp(-x^2/4);
    terminal slice is exactly zero.
    """

    def f(t, x):
        r = np.asarray(x)[..., 0]
        g = np.exp(-r ** 2 / 4.0)
        return -g + (T - t) * (r ** 2 - 2.0) / 8.0 * g

    coeffs = CoefficientSet(sigma=unit_sigma(1), f=f, kappa1=0.5, kappa2=0.5)
    grid = GridSpec(d=1, n=n, m=m, L=L, T=T)
    return grid, coeffs


def gaussian_exact(grid):
    xs = grid.xs
    ts = grid.ts
    return (grid.T - ts)[:, None] * np.exp(-xs[None, :] ** 2 / 4.0)


def solve_gaussian(n, m):
    grid, coeffs = gaussian_problem(n, m)
    sol = solve_backward(PdeProblem(grid=grid, coeffs=coeffs, lam=0.0))
    err = np.max(np.abs(sol.u[..., 0] - gaussian_exact(grid)))
    return sol, float(err)


def test_manufactured_gaussian_sup_error():
    _, err = solve_gaussian(161, 200)
    assert err <= 1e-3


def test_manufactured_gaussian_self_convergence():
    _, e_coarse = solve_gaussian(81, 50)
    _, e_fine = solve_gaussian(161, 200)
    assert e_coarse / e_fine >= 2.5


def test_constant_source_matches_ode_oracle():
    # spatially constant source, drift -x: the solution away from the walls
    # follows u' = lam*u + 1, u(T)=0, so sup|u| = (1 - exp(-lam*T))/lam
    def b1(t, x):
        return -np.asarray(x)

    def f(t, x):
        return np.ones(np.asarray(x).shape[:-1])

    coeffs = CoefficientSet(sigma=unit_sigma(1), b1=b1, f=f,
                            kappa1=0.5, kappa2=0.5, lip_b1=1.0)
    grid = GridSpec(d=1, n=161, m=200, L=4.0, T=1.0)
    for lam in (10.0, 1e4):
        sol = solve_backward(PdeProblem(grid=grid, coeffs=coeffs, lam=lam))
        sup = float(np.max(np.abs(sol.u)))
        exact = (1.0 - math.exp(-lam * grid.T)) / lam
        assert sup == pytest.approx(exact, rel=0.03)


def test_discrete_max_principle_with_upwinding():
    # strong constant convection so the cell Peclet number exceeds 2;
    # f <= 0 must give u >= 0 without node-to-node oscillation
    def b2(t, x):
        out = np.zeros_like(np.asarray(x, dtype=float))
        out[..., 0] = 30.0
        return out

    def f(t, x):
        return -np.ones(np.asarray(x).shape[:-1])

    coeffs = CoefficientSet(sigma=unit_sigma(1), b2=b2, f=f,
                            kappa1=0.5, kappa2=0.5, sup_b2=30.0)
    grid = GridSpec(d=1, n=41, m=100, L=1.0, T=1.0)
    assert 30.0 * grid.h / 0.5 > 2.0  # the switch is actually exercised
    sol = solve_backward(PdeProblem(grid=grid, coeffs=coeffs, lam=5.0))
    assert sol.u.min() >= -1e-12 * max(1.0, sol.u.max())


def test_solution_linear_in_source():
    grid = GridSpec(d=1, n=81, m=40, L=2.0, T=0.5)

    def f1(t, x):
        return np.sin(np.asarray(x)[..., 0]) * (1 + t)

    def f2(t, x):
        return np.cos(2 * np.asarray(x)[..., 0])

    def f12(t, x):
        return f1(t, x) + 2.0 * f2(t, x)

    def solve_with(fev):
        co = CoefficientSet(sigma=unit_sigma(1), f=fev, kappa1=0.5, kappa2=0.5)
        return solve_backward(PdeProblem(grid=grid, coeffs=co, lam=3.0)).u

    u1, u2, u12 = solve_with(f1), solve_with(f2), solve_with(f12)
    scale = np.max(np.abs(u12))
    assert np.max(np.abs(u12 - u1 - 2 * u2)) <= 1e-11 * max(scale, 1e-30)


def test_phi_system_scales_linearly_without_gradient_coupling():
    grid = GridSpec(d=1, n=101, m=50, L=2.0, T=1.0)

    def b0(t, x):
        return 0.3 * np.sin(2 * np.asarray(x, dtype=float))

    def b0_double(t, x):
        return 2.0 * b0(t, x)

    co1 = CoefficientSet(sigma=unit_sigma(1), b0=b0, kappa1=0.5, kappa2=0.5)
    co2 = CoefficientSet(sigma=unit_sigma(1), b0=b0_double, kappa1=0.5, kappa2=0.5)
    p1 = solve_phi_system(co1, grid, lam=20.0, include_singular_gradient=False)
    p2 = solve_phi_system(co2, grid, lam=20.0, include_singular_gradient=False)
    scale = np.max(np.abs(p2.u))
    assert np.max(np.abs(p2.u - 2 * p1.u)) <= 1e-11 * scale

    # with the gradient coupling on, doubling the drift is no longer linear
    q1 = solve_phi_system(co1, grid, lam=20.0, include_singular_gradient=True)
    q2 = solve_phi_system(co2, grid, lam=20.0, include_singular_gradient=True)
    assert np.max(np.abs(q2.u - 2 * q1.u)) > 1e-7 * np.max(np.abs(q2.u))


def test_apriori_ratio_stable_under_refinement():
    def b1(t, x):
        return -np.asarray(x)

    def f(t, x):
        r = np.asarray(x)[..., 0]
        return np.exp(-r ** 2) * np.sin(3 * r)

    ns = NormSpec(p=4, q=4, d=1)
    ratios = []
    for n, m in [(101, 50), (201, 100)]:
        grid = GridSpec(d=1, n=n, m=m, L=4.0, T=1.0)
        co = CoefficientSet(sigma=unit_sigma(1), b1=b1, f=f,
                            kappa1=0.5, kappa2=0.5, lip_b1=1.0)
        prob = PdeProblem(grid=grid, coeffs=co, lam=10.0)
        sol = solve_backward(prob)
        rep = verify_apriori(sol, prob, ns)
        assert rep["ratio"] > 0
        ratios.append(rep["ratio"])
    assert abs(ratios[1] - ratios[0]) / ratios[0] <= 0.25


def test_lambda_sweep_envelope_and_slope():
    def b1(t, x):
        return -np.asarray(x)

    def f(t, x):
        return np.ones(np.asarray(x).shape[:-1])

    co = CoefficientSet(sigma=unit_sigma(1), b1=b1, f=f,
                        kappa1=0.5, kappa2=0.5, lip_b1=1.0)
    grid = GridSpec(d=1, n=81, m=100, L=4.0, T=1.0)
    pred = DecayPrediction(d=1, p=4, q=4)   # sup-norm target
    assert pred.beta0 == pytest.approx(0.625)
    res = lambda_sweep(co, grid, [10.0, 100.0, 1000.0], pred)
    assert res.passed
    assert res.slope <= -0.9


def test_manufactured_gaussian_2d():
    T = 1.0

    def f(t, x):
        x = np.asarray(x)
        r2 = x[..., 0] ** 2 + x[..., 1] ** 2
        g = np.exp(-r2 / 4.0)
        return -g + (T - t) * (r2 - 4.0) / 8.0 * g

    co = CoefficientSet(sigma=unit_sigma(2), f=f, kappa1=0.5, kappa2=0.5)
    grid = GridSpec(d=2, n=41, m=40, L=6.0, T=T)
    sol = solve_backward(PdeProblem(grid=grid, coeffs=co, lam=0.0))
    xs = grid.xs
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    exact = (T - grid.ts)[:, None, None] * np.exp(-(X ** 2 + Y ** 2) / 4.0)
    err = np.max(np.abs(sol.u[..., 0] - exact))
    assert err <= 5e-3


def test_boundary_shell_diagnostic():
    grid, coeffs = gaussian_problem(81, 20)
    sol = solve_backward(PdeProblem(grid=grid, coeffs=coeffs, lam=0.0))
    assert sol.boundary_shell_fraction() < 1e-3
    # a flat profile has about 10% of its mass in the shell
    sol.u = np.ones_like(sol.u)
    sol._cache.clear()
    assert sol.boundary_shell_fraction() > 0.05


def test_decay_prediction_validates_exponents():
    with pytest.raises(ValueError):
        DecayPrediction(d=1, p=4, q=4, p2=2)
    # the shipped sup-norm target: beta0 = (2 - 1/2 - 1/4)/2
    assert DecayPrediction(d=1, p=4, q=4).beta0 == pytest.approx(0.625)
