"""Characteristic flow of the Lipschitz drift and the conjugation operator.

psi(t, x) follows dz/ds = b1(s, z) backward from z(T) = x; its gradient
rides along through the variational system d(grad psi)/ds =
grad b1(z) grad psi.  The inverse map psi^{-1}(t, y) is the same ODE
integrated forward from (t, y) up to T, so both directions share one
integrator and accuracy budget.  Conjugation moves fields along the
stream:

    (J g)(t, x)      = g(t, psi^{-1}(t, x)),
    (J^{-1} g)(t, x) = g(t, psi(t, x)),

which turns the material derivative (d_t + b1 . grad) into a plain d_t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fields import Evaluator, GridFunction, GridSpec, interp_space
from . import rng as _rng

TOL_FLOW = 1e-7


class FlowEscape(RuntimeError):
    """A characteristic left the doubled box before reaching its endpoint."""


def _fd_jacobian(b1: Evaluator, d: int):
    """Central finite-difference Jacobian of the drift, step 1e-5."""
    delta = 1e-5

    def jac(t, x):
        x = np.asarray(x, dtype=float)
        cols = []
        for j in range(d):
            e = np.zeros(d)
            e[j] = delta
            cols.append((np.asarray(b1(t, x + e)) - np.asarray(b1(t, x - e))) / (2 * delta))
        return np.stack(cols, axis=-1)

    return jac


def _rk4_pair(b1, jac, t0, t1, pos, J, n_sub, box_limit):
    """RK4 for (position, jacobian) from t0 to t1 (either direction)."""
    dt = (t1 - t0) / n_sub
    t = t0
    for _ in range(n_sub):
        k1p = np.asarray(b1(t, pos))
        k1j = np.einsum("...ij,...jk->...ik", jac(t, pos), J)
        p2 = pos + 0.5 * dt * k1p
        k2p = np.asarray(b1(t + 0.5 * dt, p2))
        k2j = np.einsum("...ij,...jk->...ik", jac(t + 0.5 * dt, p2), J + 0.5 * dt * k1j)
        p3 = pos + 0.5 * dt * k2p
        k3p = np.asarray(b1(t + 0.5 * dt, p3))
        k3j = np.einsum("...ij,...jk->...ik", jac(t + 0.5 * dt, p3), J + 0.5 * dt * k2j)
        p4 = pos + dt * k3p
        k4p = np.asarray(b1(t + dt, p4))
        k4j = np.einsum("...ij,...jk->...ik", jac(t + dt, p4), J + dt * k3j)
        pos = pos + dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
        J = J + dt / 6.0 * (k1j + 2 * k2j + 2 * k3j + k4j)
        t += dt
    if box_limit is not None and np.any(np.abs(pos) > box_limit):
        raise FlowEscape("characteristic escaped the doubled box")
    return pos, J


@dataclass
class FlowMap:
    grid: GridSpec
    psi: np.ndarray                     # (m+1, N, d)
    grad_psi: np.ndarray                # (m+1, N, d, d)
    n_sub: int
    tol_flow: float
    psi_inv: np.ndarray | None = None
    grad_psi_inv: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def sup_grad(self) -> float:
        """Largest operator norm of grad psi over the whole grid."""
        g = self.grad_psi
        if self.grid.d == 1:
            return float(np.abs(g).max())
        s = np.linalg.svd(g.reshape(-1, self.grid.d, self.grid.d), compute_uv=False)
        return float(s.max())

    def psi_field(self) -> GridFunction:
        shape = (self.grid.m + 1,) + (self.grid.n,) * self.grid.d + (self.grid.d,)
        return GridFunction(self.grid, self.psi.reshape(shape), "vector")

    def psi_inv_field(self) -> GridFunction:
        if self.psi_inv is None:
            raise ValueError("inverse flow not solved yet")
        shape = (self.grid.m + 1,) + (self.grid.n,) * self.grid.d + (self.grid.d,)
        return GridFunction(self.grid, self.psi_inv.reshape(shape), "vector")


def solve_flow(b1: Evaluator, grid: GridSpec, jac=None, lip: float | None = None,
               tol: float = TOL_FLOW) -> FlowMap:
    """Integrate the backward flow and its gradient on every grid node.

    Substep count starts from a Lipschitz-based guess and doubles until
    a whole-solve Richardson comparison lands below tol.
    """
    d = grid.d
    if jac is None:
        jac = _fd_jacobian(b1, d)
    nodes = grid.nodes()
    N = nodes.shape[0]
    lip_guess = lip if lip is not None else 1.0
    n_sub = max(1, math.ceil(grid.dt * (lip_guess + 1.0) / 0.02))
    box_limit = 2.0 * grid.L

    def integrate(ns):
        psi = np.empty((grid.m + 1, N, d))
        grad = np.empty((grid.m + 1, N, d, d))
        pos = nodes.copy()
        J = np.broadcast_to(np.eye(d), (N, d, d)).copy()
        psi[grid.m] = pos
        grad[grid.m] = J
        for k in range(grid.m, 0, -1):
            pos, J = _rk4_pair(b1, jac, grid.ts[k], grid.ts[k - 1], pos, J, ns, box_limit)
            psi[k - 1] = pos
            grad[k - 1] = J
        return psi, grad

    psi, grad = integrate(n_sub)
    achieved = None
    for _ in range(8):
        psi2, grad2 = integrate(2 * n_sub)
        diff = float(np.max(np.abs(psi2 - psi)))
        if diff <= tol / 4.0:
            achieved = diff
            psi, grad = psi2, grad2
            n_sub *= 2
            break
        psi, grad = psi2, grad2
        n_sub *= 2
    if achieved is None:
        raise RuntimeError("flow integrator could not reach the accuracy target")
    return FlowMap(grid=grid, psi=psi, grad_psi=grad, n_sub=n_sub, tol_flow=tol,
                   info={"richardson_defect": achieved})


def solve_inverse_flow(fm: FlowMap, b1: Evaluator, jac=None) -> FlowMap:
    """Fill psi_inv, grad_psi_inv by integrating every time slice forward to T.

    Slice k is born at the nodes at time t_k; all live slices advance
    together through each grid interval, so the whole inverse field costs
    the same number of vectorized RK4 sweeps as the forward field.
    """
    grid = fm.grid
    d = grid.d
    if jac is None:
        jac = _fd_jacobian(b1, d)
    nodes = grid.nodes()
    N = nodes.shape[0]
    Z = np.tile(nodes, (grid.m + 1, 1, 1))
    M = np.tile(np.eye(d), (grid.m + 1, N, 1, 1))
    box_limit = 2.0 * grid.L
    for j in range(grid.m):
        live = Z[:j + 1].reshape(-1, d)
        liveM = M[:j + 1].reshape(-1, d, d)
        pos, J = _rk4_pair(b1, jac, grid.ts[j], grid.ts[j + 1], live, liveM,
                           fm.n_sub, box_limit)
        Z[:j + 1] = pos.reshape(j + 1, N, d)
        M[:j + 1] = J.reshape(j + 1, N, d, d)
    fm.psi_inv = Z
    fm.grad_psi_inv = M
    return fm


def composition_check(fm: FlowMap, b1: Evaluator, n_samples: int = 64,
                      seed: int = 11, jac=None) -> float:
    """sup |psi^{-1}(t, psi(t,x)) - x| via fresh forward integration.

    Uses the stored psi values and re-integrates forward, so the defect
    measures pure integrator error, not interpolation."""
    grid = fm.grid
    if jac is None:
        jac = _fd_jacobian(b1, grid.d)
    N = fm.psi.shape[1]
    ks = np.floor(_rng.uniform_points(seed, 6, n_samples, 0, grid.m + 1)).astype(int)
    ks = np.minimum(ks, grid.m)
    iis = np.floor(_rng.uniform_points(seed, 7, n_samples, 0, N)).astype(int)
    iis = np.minimum(iis, N - 1)
    worst = 0.0
    for k in np.unique(ks):
        sel = iis[ks == k]
        pos = fm.psi[k, sel].copy()
        J = np.tile(np.eye(grid.d), (len(sel), 1, 1))
        for j in range(k, grid.m):
            pos, J = _rk4_pair(b1, jac, grid.ts[j], grid.ts[j + 1], pos, J,
                               fm.n_sub, 2.0 * grid.L)
        target = fm.grid.nodes()[sel]
        worst = max(worst, float(np.max(np.sqrt(np.sum((pos - target) ** 2, axis=-1)))))
    return worst


def gradient_identity_check(fm: FlowMap, b1: Evaluator, n_samples: int = 32,
                            seed: int = 12, jac=None) -> dict:
    """Defect of inv(grad psi)(t,x) = (grad psi^{-1})(t, psi(t,x)).

    Both sides are produced by fresh variational integrations at off-node
    sample points, so the defect reflects integrator accuracy only.
    """
    grid = fm.grid
    d = grid.d
    if jac is None:
        jac = _fd_jacobian(b1, d)
    lo = -0.5 * grid.L * np.ones(d)
    hi = 0.5 * grid.L * np.ones(d)
    xs = _rng.uniform_points(seed, 8, n_samples, lo, hi)
    if d == 1:
        xs = xs.reshape(-1, 1)
    ks = np.floor(_rng.uniform_points(seed, 9, n_samples, 0, grid.m)).astype(int)
    worst_grad = 0.0
    worst_comp = 0.0
    for k in np.unique(ks):
        sel = xs[ks == k]
        pos = sel.copy()
        J = np.tile(np.eye(d), (len(sel), 1, 1))
        for j in range(grid.m, k, -1):
            pos, J = _rk4_pair(b1, jac, grid.ts[j], grid.ts[j - 1], pos, J,
                               fm.n_sub, 2.0 * grid.L)
        back_pos, back_J = pos, J      # psi(t_k, x), grad psi(t_k, x)
        pos2 = back_pos.copy()
        M = np.tile(np.eye(d), (len(sel), 1, 1))
        for j in range(k, grid.m):
            pos2, M = _rk4_pair(b1, jac, grid.ts[j], grid.ts[j + 1], pos2, M,
                                fm.n_sub, 2.0 * grid.L)
        inv_grad = np.linalg.inv(back_J)
        worst_grad = max(worst_grad, float(np.max(np.abs(inv_grad - M))))
        worst_comp = max(worst_comp, float(np.max(np.abs(pos2 - sel))))
    return {"grad_defect": worst_grad, "composition_defect": worst_comp}


def apply_J(g: GridFunction, fm: FlowMap, inverse: bool = False):
    """Conjugate a field along the stream; returns (field, clamp_count).

    inverse=False gives J g (evaluate at psi^{-1}), inverse=True gives
    J^{-1} g (evaluate at psi).  Points carried outside the box read the
    clamped boundary value and are counted.
    """
    grid = g.grid
    src = fm.psi if inverse else fm.psi_inv
    if src is None:
        raise ValueError("inverse flow not available; run solve_inverse_flow first")
    out = np.empty_like(g.values)
    clamps = 0
    for k in range(grid.m + 1):
        vals, c = interp_space(grid, g.values[k], src[k])
        out[k] = vals.reshape(out[k].shape)
        clamps += c
    return GridFunction(grid, out, g.kind), clamps


def gronwall_bound(fm: FlowMap, lip: float) -> bool:
    """sup ||grad psi|| <= exp(lip * T) within a 1e-6 slack factor."""
    return fm.sup_grad() <= math.exp(lip * fm.grid.T) * (1.0 + 1e-6)
