"""Forward Picard solver for FBSDE whose driver reads delayed solution values.

The backward pair (Y, Z) is built by sweeps: starting from the zero iterate,
each sweep freezes the previous (Y, Z) inside the driver's delayed
convolutions and solves the resulting explicit equation node by node,

    Y_{t_i} <- E[ g(X_T) + sum_{j>=i} f(t_j, Theta_j) dt_j | F_{t_i} ],
    Z_{t_i} <- E[ (dW_i / dt_i) (g(X_T) + sum_{j>=i+1} f(t_j, Theta_j) dt_j)
                 | F_{t_i} ],

with every conditional expectation estimated by cross-sectional regression.
The control regression is evaluated in its tower form
(dW_i/dt_i)(Yhat_{i+1} - Yhat_i + f_i dt_i), which has the same conditional
expectation as the raw tail sum but removes the O(T/dt) variance of the
far-future noise; without it the control estimate drowns at desk-scale path
counts.

Delayed convolutions are discretized with shifted cell weights
m([t_j - t_i, t_{j+1} - t_i)), so that the node sum approximates the integral
of the path against the measure translated to current time, with nodes before
time 0 contributing zero.

The same sweep engine solves the linear backward equation satisfied by the
state-derivative pair (first-variation of Y and Z), whose coefficients are
the driver gradients frozen along the base solution.  Combining it with the
forward flow yields the control process through
Z_t = grad_Y_t (grad_X_t)^{-1} sigma(t, X_t).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .constants import StructuralParams, constants_report
from .forward import simulate_forward
from .measures import DelayMeasure, cell_weights
from .regression import BasisSpec, DesignSolver, expand_features

__all__ = [
    "DelayFbsdeProblem",
    "SolutionBundle",
    "VariationalBundle",
    "FdReport",
    "discrete_theta",
    "picard_solve",
    "variational_solve",
    "representation_z",
    "fd_directional_check",
]


@dataclass(frozen=True)
class DelayFbsdeProblem:
    """Coefficients, delay measures and structural data of one problem."""

    horizon: float
    dim_x: int
    dim_y: int
    x0: np.ndarray
    forward: object
    driver: object
    terminal: object
    alpha_x: DelayMeasure
    alpha_y: DelayMeasure
    alpha_z: DelayMeasure
    p: float = 2.0
    beta: float = 1.0
    gamma: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        if self.x0.shape != (self.dim_x,):
            raise ValueError("x0 must be a dim_x vector")

    def with_x0(self, x0):
        return replace(self, x0=np.asarray(x0, dtype=float))

    def structural_params(self):
        return StructuralParams(
            lipschitz=self.driver.lipschitz,
            horizon=self.horizon,
            p=self.p,
            dim_y=self.dim_y,
            alpha_y=self.alpha_y,
            alpha_z=self.alpha_z,
            beta=self.beta,
            gamma=self.gamma,
        )


@dataclass(frozen=True)
class SolutionBundle:
    """Converged (or truncated) Picard output plus per-sweep diagnostics.

    y: (M, N+1, m); z: (M, N+1, m, d).  y at the last node equals the terminal
    payoff per path; z at the last node is zero by convention (no scheme term
    reads it).  diffs_* hold the max-node RMS change of each sweep.
    """

    grid: np.ndarray
    y: np.ndarray
    z: np.ndarray
    diffs_y: tuple
    diffs_z: tuple
    sweeps: int
    tol: float
    feasibility: dict | None = None


@dataclass(frozen=True)
class VariationalBundle:
    """Directional state-derivative of the solution along direction h."""

    direction: np.ndarray
    grad_x_h: np.ndarray
    p: np.ndarray
    q: np.ndarray
    diffs_p: tuple
    diffs_q: tuple
    sweeps: int


def _convolve_nodes(weights, values):
    """Node-wise delayed convolution of per-path node values.

    weights: (N+1, N) cell weights; values: (M, N+1, ...).  Returns
    (M, N+1, ...) where entry i sums weights[i, j] * values[:, j].
    """
    n = weights.shape[1]
    flat = values[:, :n].reshape(values.shape[0], n, -1)
    out = np.einsum("ij,pjk->pik", weights, flat)
    return out.reshape(values.shape[0], weights.shape[0], *values.shape[2:])


def discrete_theta(i, forward, y, z, alpha_x, alpha_y, alpha_z):
    """Delayed convolutions (xdel, ydel, zdel) at node i, per path.

    Weights are interval masses over grid cells shifted by -t_i; nodes whose
    cell lies before time 0 contribute zero (zero extension of all paths).
    """
    grid = forward.grid
    wx = cell_weights(alpha_x, grid)[i]
    wy = cell_weights(alpha_y, grid)[i]
    wz = cell_weights(alpha_z, grid)[i]
    n = len(wx)
    xdel = np.tensordot(wx, forward.x[:, :n], axes=(0, 1))
    ydel = np.tensordot(wy, y[:, :n], axes=(0, 1))
    zdel = np.tensordot(wz, z[:, :n], axes=(0, 1))
    return xdel, ydel, zdel


class _FeatureBuilder:
    """Assembles the regression features for one node.

    Selected features with zero-mass delay measures are dropped: their
    convolutions vanish identically and would only burn basis size.
    """

    def __init__(self, spec, forward, xdel_all, alpha_x, alpha_y, alpha_z):
        self.spec = spec
        self.forward = forward
        self.xdel_all = xdel_all
        self.active = []
        for name in spec.features:
            if name == "x":
                self.active.append("x")
            elif name == "xdel" and not alpha_x.is_zero:
                self.active.append("xdel")
            elif name == "ydel" and not alpha_y.is_zero:
                self.active.append("ydel")
            elif name == "zdel" and not alpha_z.is_zero:
                self.active.append("zdel")
            elif name == "x_lags" and alpha_x.atoms:
                self.active.append("x_lags")
        if not self.active:
            self.active = ["x"]
        self._lag_index = None
        if "x_lags" in self.active:
            grid = forward.grid
            self._lag_index = []
            for loc, _ in alpha_x.atoms:
                idx = np.searchsorted(grid, grid + loc + 1e-12, side="right") - 1
                self._lag_index.append(idx)

    def at(self, i, ydel_all, zdel_all):
        m_paths = self.forward.x.shape[0]
        cols = []
        for name in self.active:
            if name == "x":
                cols.append(self.forward.x[:, i])
            elif name == "xdel":
                cols.append(self.xdel_all[:, i])
            elif name == "ydel":
                cols.append(ydel_all[:, i])
            elif name == "zdel":
                cols.append(zdel_all[:, i].reshape(m_paths, -1))
            elif name == "x_lags":
                for idx in self._lag_index:
                    j = idx[i]
                    if j < 0:
                        cols.append(np.zeros((m_paths, self.forward.x.shape[2])))
                    else:
                        cols.append(self.forward.x[:, j])
        return np.concatenate(cols, axis=1)


def _run_sweeps(grid, dw, terminal_vals, dim_ctrl, conv, driver_all, features_at, basis,
                max_sweeps, tol):
    """Shared Picard engine for the base and the variational solves.

    conv(y, z) -> (ydel_all, zdel_all); driver_all(ydel_all, zdel_all) ->
    per-node driver values (M, N+1, m); features_at(i, ydel_all, zdel_all) ->
    (M, F).  Sweeps stop once the max-node RMS update of both components
    drops below tol.
    """
    n = len(grid) - 1
    dt = np.diff(grid)
    m_paths, dim_y = terminal_vals.shape
    y = np.zeros((m_paths, n + 1, dim_y))
    z = np.zeros((m_paths, n + 1, dim_y, dim_ctrl))
    diffs_y, diffs_z = [], []
    sweeps = 0
    for _ in range(max_sweeps):
        ydel_all, zdel_all = conv(y, z)
        f_all = driver_all(ydel_all, zdel_all)
        suffix = np.zeros((m_paths, n + 1, dim_y))
        suffix[:, n] = terminal_vals
        for i in range(n - 1, -1, -1):
            suffix[:, i] = suffix[:, i + 1] + f_all[:, i] * dt[i]
        y_new = np.zeros_like(y)
        z_new = np.zeros_like(z)
        y_new[:, n] = terminal_vals
        yhat_next = terminal_vals
        for i in range(n - 1, -1, -1):
            feats = features_at(i, ydel_all, zdel_all)
            try:
                solver = DesignSolver(expand_features(feats, basis.degree), basis.ridge)
            except ValueError as exc:
                raise ValueError(f"regression failed at node {i}, sweep {sweeps + 1}: {exc}") from exc
            coeff_y = solver.solve(suffix[:, i])
            y_i = solver.fitted(coeff_y)
            innovation = yhat_next - y_i + f_all[:, i] * dt[i]
            ctrl_target = innovation[:, :, None] * dw[:, i, None, :] / dt[i]
            coeff_z = solver.solve(ctrl_target.reshape(m_paths, -1))
            z_new[:, i] = solver.fitted(coeff_z).reshape(m_paths, dim_y, dim_ctrl)
            y_new[:, i] = y_i
            yhat_next = y_i
        with np.errstate(over="ignore", invalid="ignore"):
            diff_y = float(np.max(np.sqrt(np.mean(np.sum((y_new - y) ** 2, axis=-1), axis=0))))
            dz = np.sum((z_new - z) ** 2, axis=(-2, -1))
            diff_z = float(np.max(np.sqrt(np.mean(dz, axis=0))))
        y, z = y_new, z_new
        sweeps += 1
        diffs_y.append(diff_y)
        diffs_z.append(diff_z)
        if not (np.isfinite(diff_y) and np.isfinite(diff_z)):
            raise FloatingPointError(
                f"non-finite Picard update at sweep {sweeps}: "
                f"diff_y={diff_y}, diff_z={diff_z}"
            )
        if max(diff_y, diff_z) < tol:
            break
    return y, z, tuple(diffs_y), tuple(diffs_z), sweeps


def picard_solve(problem, forward, basis=None, max_sweeps=8, tol=1e-3):
    """Solve the delay FBSDE on the bundle's grid by forward Picard sweeps.

    Feasibility of the smallness conditions is advisory: the verdict is
    recorded on the bundle but an infeasible problem is still solved (the
    conditions are sufficient, not necessary).
    """
    basis = basis or BasisSpec()
    grid = forward.grid
    wx = cell_weights(problem.alpha_x, grid)
    wy = cell_weights(problem.alpha_y, grid)
    wz = cell_weights(problem.alpha_z, grid)
    xdel_all = _convolve_nodes(wx, forward.x)
    terminal_vals = problem.terminal.value(forward.x[:, -1])
    driver = problem.driver
    n = len(grid) - 1

    def conv(y, z):
        return _convolve_nodes(wy, y), _convolve_nodes(wz, z)

    def driver_all(ydel_all, zdel_all):
        out = np.zeros((forward.n_paths, n + 1, problem.dim_y))
        for j in range(n):
            out[:, j] = driver.value(grid[j], xdel_all[:, j], ydel_all[:, j], zdel_all[:, j])
        return out

    builder = _FeatureBuilder(basis, forward, xdel_all,
                              problem.alpha_x, problem.alpha_y, problem.alpha_z)
    y, z, diffs_y, diffs_z, sweeps = _run_sweeps(
        grid, forward.dw, terminal_vals, problem.dim_x, conv, driver_all,
        builder.at, basis, max_sweeps, tol,
    )
    report = constants_report(problem.structural_params())
    feasibility = {
        "l2": report.feasible_l2,
        "energy": report.feasible_energy,
        "contraction": report.feasible_contraction,
        "l2_lhs_max": max(report.l2_lhs_y, report.l2_lhs_z),
    }
    return SolutionBundle(
        grid=grid, y=y, z=z, diffs_y=diffs_y, diffs_z=diffs_z,
        sweeps=sweeps, tol=tol, feasibility=feasibility,
    )


def variational_solve(problem, forward, base, h, basis=None, max_sweeps=8, tol=1e-3):
    """Directional derivative of (Y, Z) in the initial state, direction h.

    Solves, by the same sweep engine, the linear delay BSDE with terminal
    grad_g(X_T) grad_X_T h and driver
    <grad f(t, Theta_base(t)), (conv(grad_X h), pdel, qdel)>, where the base
    solution stays frozen inside the gradient coefficients.
    """
    basis = basis or BasisSpec()
    h = np.asarray(h, dtype=float)
    grid = forward.grid
    n = len(grid) - 1
    wx = cell_weights(problem.alpha_x, grid)
    wy = cell_weights(problem.alpha_y, grid)
    wz = cell_weights(problem.alpha_z, grid)
    xdel_all = _convolve_nodes(wx, forward.x)
    ydel_base = _convolve_nodes(wy, base.y)
    zdel_base = _convolve_nodes(wz, base.z)
    grad_x_h = np.einsum("pijk,k->pij", forward.grad_x, h)
    xdel_dir = _convolve_nodes(wx, grad_x_h)

    driver = problem.driver
    const_all = np.zeros((forward.n_paths, n + 1, problem.dim_y))
    grad_y_all = np.zeros((forward.n_paths, n + 1, problem.dim_y, problem.dim_y))
    grad_z_all = np.zeros((forward.n_paths, n + 1, problem.dim_y, problem.dim_y, problem.dim_x))
    for j in range(n):
        args = (grid[j], xdel_all[:, j], ydel_base[:, j], zdel_base[:, j])
        const_all[:, j] = np.einsum("pmd,pd->pm", driver.grad_x(*args), xdel_dir[:, j])
        grad_y_all[:, j] = driver.grad_y(*args)
        grad_z_all[:, j] = driver.grad_z(*args)

    terminal_vals = np.einsum(
        "pmd,pdk,k->pm", problem.terminal.grad(forward.x[:, -1]), forward.grad_x[:, -1], h
    )

    def conv(p, q):
        return _convolve_nodes(wy, p), _convolve_nodes(wz, q)

    def driver_all(pdel_all, qdel_all):
        out = const_all.copy()
        out += np.einsum("pjmk,pjk->pjm", grad_y_all, pdel_all)
        out += np.einsum("pjmkd,pjkd->pjm", grad_z_all, qdel_all)
        return out

    builder = _FeatureBuilder(basis, forward, xdel_all,
                              problem.alpha_x, problem.alpha_y, problem.alpha_z)
    p, q, diffs_p, diffs_q, sweeps = _run_sweeps(
        grid, forward.dw, terminal_vals, problem.dim_x, conv, driver_all,
        builder.at, basis, max_sweeps, tol,
    )
    return VariationalBundle(
        direction=h, grad_x_h=grad_x_h, p=p, q=q,
        diffs_p=diffs_p, diffs_q=diffs_q, sweeps=sweeps,
    )


def representation_z(forward, variationals, coeffs):
    """Control process from the flow formula grad_Y (grad_X)^{-1} sigma.

    variationals: one directional bundle per coordinate direction; their
    value components form the columns of grad_Y.
    """
    dim = coeffs.dim
    if len(variationals) != dim:
        raise ValueError(f"need {dim} directional bundles, got {len(variationals)}")
    for axis, bundle in enumerate(variationals):
        expected = np.zeros(dim)
        expected[axis] = 1.0
        if not np.allclose(bundle.direction, expected):
            raise ValueError("variational bundles must use the coordinate directions in order")
    grad_y = np.stack([b.p for b in variationals], axis=-1)
    n = forward.x.shape[1] - 1
    out = np.zeros_like(grad_y)
    for i in range(n + 1):
        sig = coeffs.diffusion(forward.grid[i], forward.x[:, i])
        out[:, i] = np.einsum(
            "pmd,pdk,pkl->pml", grad_y[:, i], forward.grad_x_inv[:, i], sig
        )
    return out


@dataclass(frozen=True)
class FdReport:
    """Finite-difference check of the state-derivative solve.

    errors[k] is the RMS over paths and nodes of
    (Y(x0 + eps_k h) - Y(x0)) / eps_k - grad_Y h, with all solves coupled to
    the same noise.  noise_floor repeats the measurement at a tiny step where
    the difference-quotient bias is negligible; richardson_error removes the
    first-order bias from the two smallest steps.
    """

    epsilons: tuple
    errors: tuple
    block_ses: tuple
    noise_floor: float
    noise_floor_se: float
    richardson_error: float


def _fd_error(diff, blocks=10):
    flat = np.sqrt(np.mean(np.sum(diff**2, axis=-1), axis=1))
    err = float(np.sqrt(np.mean(flat**2)))
    m = len(flat)
    edges = np.linspace(0, m, blocks + 1, dtype=int)
    vals = [np.sqrt(np.mean(flat[a:b] ** 2)) for a, b in zip(edges[:-1], edges[1:]) if b > a]
    se = float(np.std(vals, ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return err, se


def fd_directional_check(problem, h, epsilons, n_paths, n_steps, seed,
                         basis=None, max_sweeps=8, tol=1e-3, floor_epsilon=1e-3):
    """Compare difference quotients of Y in the initial state with grad_Y h.

    All solves share one noise bundle, so the quotient errors isolate the
    finite-difference bias; they shrink with the step until the regression
    noise floor.
    """
    h = np.asarray(h, dtype=float)
    grid = np.linspace(0.0, problem.horizon, n_steps + 1)
    forward = simulate_forward(problem.forward, problem.x0, grid, n_paths, seed)
    base = picard_solve(problem, forward, basis, max_sweeps, tol)
    var = variational_solve(problem, forward, base, h, basis, max_sweeps, tol)

    def quotient(eps):
        shifted = problem.with_x0(problem.x0 + eps * h)
        fwd = simulate_forward(shifted.forward, shifted.x0, grid, n_paths, seed)
        sol = picard_solve(shifted, fwd, basis, max_sweeps, tol)
        return (sol.y - base.y) / eps

    errors, ses, quotients = [], [], {}
    for eps in epsilons:
        fd = quotient(eps)
        quotients[eps] = fd
        err, se = _fd_error(fd - var.p)
        errors.append(err)
        ses.append(se)
    floor_err, floor_se = _fd_error(quotient(floor_epsilon) - var.p)

    richardson = float("nan")
    eps_sorted = sorted(epsilons)
    for eps in eps_sorted:
        if any(abs(other - 2 * eps) < 1e-12 for other in eps_sorted):
            fd1, fd2 = quotients[eps], quotients[2 * eps]
            richardson, _ = _fd_error((2 * fd1 - fd2) - var.p)
            break
    return FdReport(
        epsilons=tuple(float(e) for e in epsilons),
        errors=tuple(errors),
        block_ses=tuple(ses),
        noise_floor=floor_err,
        noise_floor_se=floor_se,
        richardson_error=richardson,
    )
