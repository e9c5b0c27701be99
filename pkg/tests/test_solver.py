import numpy as np
import pytest

from delaybsde.forward import make_forward, simulate_forward
from delaybsde.generators import make_driver, make_terminal
from delaybsde.measures import DelayMeasure, cell_weights
from delaybsde.regression import BasisSpec
from delaybsde.solver import (
    DelayFbsdeProblem,
    discrete_theta,
    fd_directional_check,
    picard_solve,
    representation_z,
    variational_solve,
)

T = 0.5


def zero_measure():
    return DelayMeasure(T)


def lag_atom(loc=-0.25, w=1.0):
    return DelayMeasure(T, atoms=((loc, w),))


def problem(driver, terminal, alpha_x=None, alpha_y=None, alpha_z=None, x0=0.0,
            forward=None):
    return DelayFbsdeProblem(
        horizon=T,
        dim_x=1,
        dim_y=1,
        x0=[x0],
        forward=forward or make_forward("brownian"),
        driver=driver,
        terminal=terminal,
        alpha_x=alpha_x or zero_measure(),
        alpha_y=alpha_y or zero_measure(),
        alpha_z=alpha_z or zero_measure(),
        p=2.0,
        beta=1.0,
        gamma=0.5,
    )


def solve(prob, n_steps=20, n_paths=4000, seed=3, basis=None, sweeps=8, tol=1e-4):
    grid = np.linspace(0.0, T, n_steps + 1)
    fwd = simulate_forward(prob.forward, prob.x0, grid, n_paths, seed)
    sol = picard_solve(prob, fwd, basis or BasisSpec(), sweeps, tol)
    return fwd, sol


class TestDiscreteTheta:
    def test_zero_measures_give_zero(self):
        prob = problem(make_driver("zero"), make_terminal("identity"))
        fwd, sol = solve(prob, n_steps=8, n_paths=64)
        xdel, ydel, zdel = discrete_theta(
            4, fwd, sol.y, sol.z, prob.alpha_x, prob.alpha_y, prob.alpha_z
        )
        assert not xdel.any() and not ydel.any() and not zdel.any()

    def test_atom_lands_in_one_shifted_cell(self):
        # unit atom at one grid lag reads the constant control one step back
        grid = np.linspace(0.0, T, 3)  # step 0.25
        measure = lag_atom(-0.25)
        weights = cell_weights(measure, grid)
        assert weights[0].tolist() == [0.0, 0.0]
        assert weights[1].tolist() == [1.0, 0.0]
        assert weights[2].tolist() == [0.0, 1.0]

    def test_density_mass_times_constant_value(self):
        measure = DelayMeasure(T, density_pieces=((-0.5, 0.0, 1.0),))
        grid = np.linspace(0.0, T, 21)
        weights = cell_weights(measure, grid)
        # at the terminal node the full density window is reachable
        assert weights[-1].sum() == pytest.approx(0.5)
        const_y = np.ones((8, 21, 1))
        fwd, _ = (None, None)
        total = weights[-1] @ const_y[0, :20, 0]
        assert total == pytest.approx(0.5)

    def test_one_step_lag_weights_are_subdiagonal(self):
        n = 10
        grid = np.linspace(0.0, T, n + 1)
        dt = T / n
        weights = cell_weights(DelayMeasure(T, atoms=((-dt, 1.0),)), grid)
        expected = np.zeros((n + 1, n))
        for i in range(1, n + 1):
            expected[i, i - 1] = 1.0
        assert np.array_equal(weights, expected)


class TestPicardSolve:
    def test_martingale_baseline(self):
        prob = problem(make_driver("zero"), make_terminal("identity"))
        fwd, sol = solve(prob, n_steps=20, n_paths=10_000, seed=5)
        rms = np.sqrt(np.mean((sol.y[:, :, 0] - fwd.x[:, :, 0]) ** 2, axis=0))
        assert rms.max() < 0.05
        z_mean = sol.z[:, 1:-1, 0, 0].mean(axis=0)
        assert z_mean.min() > 0.9 and z_mean.max() < 1.1

    def test_terminal_consistency_every_sweep(self):
        prob = problem(make_driver("linear_zdel", {"coeff": 0.1}),
                       make_terminal("identity"), alpha_z=lag_atom())
        fwd, sol = solve(prob, n_steps=8, n_paths=500, sweeps=3, tol=1e-12)
        assert np.array_equal(sol.y[:, -1], prob.terminal.value(fwd.x[:, -1]))
        assert not sol.z[:, -1].any()

    def test_delayed_control_fixture(self):
        prob = problem(
            make_driver("linear_zdel", {"coeff": 0.1, "lipschitz": 0.1}),
            make_terminal("identity"),
            alpha_z=lag_atom(),
        )
        fwd, sol = solve(prob, n_steps=20, n_paths=10_000, seed=5, tol=1e-3)
        assert sol.y[:, 0].mean() == pytest.approx(0.025, abs=0.01)
        z_mean = sol.z[:, 1:-1, 0, 0].mean(axis=0)
        assert z_mean.min() > 0.9 and z_mean.max() < 1.1
        # deterministic shift on top of the state: Y_t - W_t
        shift = (sol.y[:, :, 0] - fwd.x[:, :, 0]).mean(axis=0)
        expected = 0.1 * (T - np.maximum(fwd.grid, 0.25))
        assert np.allclose(shift, expected, atol=0.02)

    def test_delayed_value_fixture_matches_fixed_point(self):
        prob = problem(
            make_driver("linear_ydel", {"coeff": 0.1, "lipschitz": 0.1}),
            make_terminal("constant", {"value": 1.0}),
            alpha_y=lag_atom(),
        )
        fwd, sol = solve(prob, n_steps=20, n_paths=2000, sweeps=12, tol=1e-10)
        assert sol.y[:, 0].mean() == pytest.approx(1.0 / 0.975, abs=2e-3)
        assert np.sqrt((sol.z**2).mean()) < 0.02

    def test_backward_quadrature_oracle_for_delay_value_fixture(self):
        # independent oracle: solve y(t) = 1 + c * int_t^T y(s - lag) ds by
        # fine backward quadrature and compare the initial value
        c, lag, n = 0.1, 0.25, 4000
        dt = T / n
        lag_cells = int(round(lag / dt))
        y = np.ones(n + 1)
        for i in range(n - 1, -1, -1):
            j = i - lag_cells
            lagged = y[j] if j >= 0 else 0.0
            y[i] = y[i + 1] + c * dt * lagged
        assert y[0] == pytest.approx(1.0 / 0.975, abs=1e-3)

    def test_geometric_picard_diffs_under_contraction(self):
        prob = problem(
            make_driver("linear_zdel", {"coeff": 0.1, "lipschitz": 0.1}),
            make_terminal("identity"),
            alpha_z=lag_atom(),
        )
        fwd, sol = solve(prob, n_steps=20, n_paths=10_000, seed=5, tol=1e-3)
        assert sol.feasibility["l2"]
        diffs = [max(dy, dz) for dy, dz in zip(sol.diffs_y, sol.diffs_z)]
        ratios = [diffs[k] / diffs[k - 1] for k in range(2, len(diffs))]
        assert all(r < 1.0 for r in ratios)

    def test_scaling_homogeneity_for_linear_driver(self):
        # with a state-only basis the whole pipeline is linear in the data
        basis = BasisSpec(features=("x",))
        lam = 3.0
        base = problem(
            make_driver("linear_zdel", {"coeff": 0.1, "lipschitz": 0.1}),
            make_terminal("affine", {"slope": 1.0}),
            alpha_z=lag_atom(),
        )
        scaled = problem(
            make_driver("linear_zdel", {"coeff": 0.1, "lipschitz": 0.1}),
            make_terminal("affine", {"slope": lam}),
            alpha_z=lag_atom(),
        )
        _, sol_a = solve(base, n_steps=10, n_paths=2000, basis=basis, sweeps=6, tol=1e-12)
        _, sol_b = solve(scaled, n_steps=10, n_paths=2000, basis=basis, sweeps=6, tol=1e-12)
        assert np.allclose(sol_b.y, lam * sol_a.y, atol=1e-8)
        assert np.allclose(sol_b.z, lam * sol_a.z, atol=1e-8)

    def test_one_step_lag_reduces_to_lagged_euler_scheme(self):
        # a driver reading only the one-step-lagged control must see exactly
        # the previous node's control values inside the sweep
        n = 10
        dt = T / n
        prob = problem(
            make_driver("linear_zdel", {"coeff": 0.2, "lipschitz": 0.2}),
            make_terminal("identity"),
            alpha_z=DelayMeasure(T, atoms=((-dt, 1.0),)),
        )
        fwd, sol = solve(prob, n_steps=n, n_paths=3000, sweeps=6, tol=1e-12)
        _, _, zdel = discrete_theta(
            5, fwd, sol.y, sol.z, prob.alpha_x, prob.alpha_y, prob.alpha_z
        )
        assert np.array_equal(zdel, sol.z[:, 4])

    def test_infeasible_constants_do_not_block_solving(self):
        prob = problem(
            make_driver("linear_zdel", {"coeff": 0.9, "lipschitz": 10.0}),
            make_terminal("identity"),
            alpha_z=lag_atom(),
        )
        fwd, sol = solve(prob, n_steps=10, n_paths=2000, sweeps=3, tol=1e-6)
        assert not sol.feasibility["l2"]
        assert np.isfinite(sol.y).all()

    def test_non_finite_update_aborts_with_context(self):
        prob = problem(
            make_driver("affine", {"coeff_z": 1e200, "lipschitz": 1.0}),
            make_terminal("identity"),
            alpha_z=lag_atom(),
        )
        with pytest.raises(FloatingPointError, match="sweep"):
            solve(prob, n_steps=10, n_paths=500, sweeps=6, tol=1e-12)

    def test_regression_failure_carries_node_and_sweep(self):
        prob = problem(make_driver("zero"), make_terminal("identity"))
        with pytest.raises(ValueError, match=r"node \d+, sweep 1"):
            # zero ridge plus constant features at the initial node makes the
            # design rank-deficient
            solve(prob, n_steps=4, n_paths=400,
                  basis=BasisSpec(degree=2, ridge=0.0), sweeps=2)

    def test_atom_lag_features_are_usable(self):
        prob = problem(
            make_driver("zero"),
            make_terminal("identity"),
            alpha_x=lag_atom(),
        )
        fwd, sol = solve(prob, n_steps=10, n_paths=1000,
                         basis=BasisSpec(features=("x", "x_lags")), sweeps=3)
        assert np.isfinite(sol.y).all()


class TestVariational:
    def test_identity_terminal_gives_unit_derivative(self):
        prob = problem(make_driver("zero"), make_terminal("identity"))
        fwd, sol = solve(prob, n_steps=10, n_paths=2000)
        var = variational_solve(prob, fwd, sol, [1.0], BasisSpec(), 4, 1e-6)
        assert np.allclose(var.p, 1.0, atol=1e-6)
        assert np.allclose(var.q, 0.0, atol=1e-6)

    def test_delay_linear_control_keeps_unit_derivative(self):
        prob = problem(
            make_driver("linear_zdel", {"coeff": 0.1, "lipschitz": 0.1}),
            make_terminal("identity"),
            alpha_z=lag_atom(),
        )
        fwd, sol = solve(prob, n_steps=20, n_paths=4000)
        var = variational_solve(prob, fwd, sol, [1.0], BasisSpec(), 6, 1e-6)
        assert np.allclose(var.p, 1.0, atol=1e-5)

    def test_quadratic_terminal_derivative_tracks_state(self):
        prob = problem(make_driver("zero"), make_terminal("quadratic"), x0=1.0)
        fwd, sol = solve(prob, n_steps=20, n_paths=10_000, seed=5)
        var = variational_solve(prob, fwd, sol, [1.0], BasisSpec(), 4, 1e-6)
        err = np.sqrt(np.mean((var.p[:, :, 0] - 2.0 * fwd.x[:, :, 0]) ** 2))
        se = np.std(2.0 * fwd.x[:, -1, 0]) / np.sqrt(fwd.n_paths)
        assert err < 3 * se + 0.05

    def test_terminal_identity_of_derivative(self):
        prob = problem(make_driver("zero"), make_terminal("quadratic"), x0=0.5)
        fwd, sol = solve(prob, n_steps=10, n_paths=2000, seed=5)
        var = variational_solve(prob, fwd, sol, [1.0], BasisSpec(), 4, 1e-6)
        expected = np.einsum(
            "pmd,pdk,k->pm",
            prob.terminal.grad(fwd.x[:, -1]),
            fwd.grad_x[:, -1],
            np.array([1.0]),
        )
        assert np.allclose(var.p[:, -1], expected)


class TestRepresentation:
    def test_unit_control_for_identity_terminal(self):
        prob = problem(make_driver("zero"), make_terminal("identity"))
        fwd, sol = solve(prob, n_steps=10, n_paths=2000)
        var = variational_solve(prob, fwd, sol, [1.0], BasisSpec(), 4, 1e-6)
        z_rep = representation_z(fwd, [var], prob.forward)
        assert np.allclose(z_rep, 1.0, atol=1e-6)

    def test_quadratic_terminal_control_is_twice_state(self):
        prob = problem(make_driver("zero"), make_terminal("quadratic"), x0=1.0)
        fwd, sol = solve(prob, n_steps=20, n_paths=10_000, seed=5)
        var = variational_solve(prob, fwd, sol, [1.0], BasisSpec(), 4, 1e-6)
        z_rep = representation_z(fwd, [var], prob.forward)
        err = np.sqrt(np.mean((z_rep[:, :, 0, 0] - 2.0 * fwd.x[:, :, 0]) ** 2))
        assert err < 0.06

    def test_regression_and_representation_controls_agree(self):
        prob = problem(
            make_driver("linear_zdel", {"coeff": 0.1, "lipschitz": 0.1}),
            make_terminal("identity"),
            alpha_z=lag_atom(),
        )
        fwd, sol = solve(prob, n_steps=20, n_paths=10_000, seed=5, tol=1e-3)
        var = variational_solve(prob, fwd, sol, [1.0], BasisSpec(), 6, 1e-3)
        z_rep = representation_z(fwd, [var], prob.forward)
        for i in range(1, 20):
            num = np.sqrt(np.mean((sol.z[:, i] - z_rep[:, i]) ** 2))
            den = np.sqrt(np.mean(z_rep[:, i] ** 2))
            assert num / den <= 0.10

    def test_wrong_direction_count_rejected(self):
        prob = problem(make_driver("zero"), make_terminal("identity"))
        fwd, sol = solve(prob, n_steps=6, n_paths=500)
        with pytest.raises(ValueError, match="directional bundles"):
            representation_z(fwd, [], prob.forward)


class TestDelayedStateDriver:
    """Driver reading the lagged forward state: closed forms are available.

    For f = c * xdel with a unit atom at lag d, additive noise and a linear
    terminal, the state-derivative of Y is 1 + c (T - max(t, d)) and the true
    control is 1 + c (T - d - t)^+.  The two differ where lags reach behind
    current time, so the flow-formula control is checked against its own
    closed form, not against the regressed control.
    """

    T1 = 1.0
    CX = 0.2
    LAG = 0.25

    def fixture(self):
        return DelayFbsdeProblem(
            horizon=self.T1, dim_x=1, dim_y=1, x0=[0.3],
            forward=make_forward("brownian"),
            driver=make_driver("affine", {"coeff_x": self.CX,
                                          "lipschitz": 3 * self.CX**2}),
            terminal=make_terminal("identity"),
            alpha_x=DelayMeasure(self.T1, atoms=((-self.LAG, 1.0),)),
            alpha_y=DelayMeasure(self.T1),
            alpha_z=DelayMeasure(self.T1),
            p=2.0, beta=1.0, gamma=0.5,
        )

    def run(self, n_paths=8000):
        prob = self.fixture()
        grid = np.linspace(0.0, self.T1, 21)
        fwd = simulate_forward(prob.forward, prob.x0, grid, n_paths, 5)
        sol = picard_solve(prob, fwd, BasisSpec(), 6, 1e-5)
        var = variational_solve(prob, fwd, sol, [1.0], BasisSpec(), 6, 1e-5)
        return prob, grid, fwd, sol, var

    def test_state_derivative_matches_closed_form(self):
        prob, grid, fwd, sol, var = self.run()
        closed = 1.0 + self.CX * (self.T1 - np.maximum(grid, self.LAG))
        assert np.abs(var.p[:, :, 0] - closed).max() < 1e-5

    def test_difference_quotient_is_exact_for_linear_problem(self):
        rep = fd_directional_check(self.fixture(), [1.0], [0.5, 0.25],
                                   n_paths=2000, n_steps=20, seed=5)
        assert max(rep.errors) < 1e-5

    def test_regressed_control_tracks_true_not_flow(self):
        prob, grid, fwd, sol, var = self.run(n_paths=20_000)
        z_true = 1.0 + self.CX * np.maximum(self.T1 - self.LAG - grid, 0.0)
        z_flow = 1.0 + self.CX * (self.T1 - np.maximum(grid, self.LAG))
        z_mean = sol.z[:, 1:-1, 0, 0].mean(axis=0)
        rms_true = np.sqrt(np.mean((z_mean - z_true[1:-1]) ** 2))
        rms_flow = np.sqrt(np.mean((z_mean - z_flow[1:-1]) ** 2))
        assert rms_true < 0.03
        assert rms_true < rms_flow
        zr = representation_z(fwd, [var], prob.forward)
        assert np.abs(zr[:, :, 0, 0] - z_flow).max() < 1e-5


class TestMultidimensional:
    def test_sum_terminal_in_two_dimensions(self):
        zero = DelayMeasure(T)
        prob = DelayFbsdeProblem(
            horizon=T, dim_x=2, dim_y=1, x0=[0.2, -0.1],
            forward=make_forward("brownian", {}, 2),
            driver=make_driver("zero", {}, 2, 1),
            terminal=make_terminal("affine", {"slope": 1.0}, 2, 1),
            alpha_x=zero, alpha_y=zero, alpha_z=zero,
            p=2.0, beta=1.0, gamma=0.5,
        )
        grid = np.linspace(0.0, T, 11)
        fwd = simulate_forward(prob.forward, prob.x0, grid, 4000, 7)
        sol = picard_solve(prob, fwd, BasisSpec(), 4, 1e-6)
        truth = fwd.x[:, :, 0] + fwd.x[:, :, 1]
        rms = np.sqrt(np.mean((sol.y[:, :, 0] - truth) ** 2, axis=0))
        assert rms.max() < 0.1
        z_cols = sol.z[:, 1:-1, 0, :].mean(axis=(0, 1))
        assert np.allclose(z_cols, 1.0, atol=0.05)
        variationals = [
            variational_solve(prob, fwd, sol, h, BasisSpec(), 4, 1e-6)
            for h in ([1.0, 0.0], [0.0, 1.0])
        ]
        z_rep = representation_z(fwd, variationals, prob.forward)
        assert np.allclose(z_rep, 1.0, atol=1e-6)

    def test_identity_terminal_with_matrix_control(self):
        zero = DelayMeasure(T)
        prob = DelayFbsdeProblem(
            horizon=T, dim_x=2, dim_y=2, x0=[0.2, -0.1],
            forward=make_forward("brownian", {}, 2),
            driver=make_driver("zero", {}, 2, 2),
            terminal=make_terminal("identity", {}, 2, 2),
            alpha_x=zero, alpha_y=zero, alpha_z=zero,
            p=2.0, beta=1.0, gamma=0.5,
        )
        grid = np.linspace(0.0, T, 11)
        fwd = simulate_forward(prob.forward, prob.x0, grid, 4000, 7)
        sol = picard_solve(prob, fwd, BasisSpec(), 4, 1e-6)
        rms = np.sqrt(np.mean(np.sum((sol.y - fwd.x) ** 2, axis=-1), axis=0))
        assert rms.max() < 0.1
        z_mean = sol.z[:, 1:-1].mean(axis=(0, 1))
        assert np.allclose(z_mean, np.eye(2), atol=0.05)


class TestMultiplicativeNoiseOracle:
    def test_gbm_forward_closed_form(self):
        # Y_t = X_t e^{mu (T - t)} and Z_t = nu X_t e^{mu (T - t)}
        mu, nu = 0.3, 0.4
        zero = DelayMeasure(T)
        prob = DelayFbsdeProblem(
            horizon=T, dim_x=1, dim_y=1, x0=[1.0],
            forward=make_forward("gbm", {"mu": mu, "nu": nu}),
            driver=make_driver("zero"), terminal=make_terminal("identity"),
            alpha_x=zero, alpha_y=zero, alpha_z=zero,
            p=2.0, beta=1.0, gamma=0.5,
        )
        grid = np.linspace(0.0, T, 21)
        fwd = simulate_forward(prob.forward, prob.x0, grid, 10_000, 5)
        sol = picard_solve(prob, fwd, BasisSpec(), 4, 1e-6)
        var = variational_solve(prob, fwd, sol, [1.0], BasisSpec(), 4, 1e-6)
        z_rep = representation_z(fwd, [var], prob.forward)
        decay = np.exp(mu * (T - grid))
        y_true = fwd.x[:, :, 0] * decay
        z_true = nu * y_true
        rel_y = np.sqrt(np.mean((sol.y[:, :, 0] - y_true) ** 2)) / np.sqrt(np.mean(y_true**2))
        rel_z = np.sqrt(np.mean((z_rep[:, 1:-1, 0, 0] - z_true[:, 1:-1]) ** 2)) / np.sqrt(
            np.mean(z_true**2)
        )
        assert rel_y < 0.02
        assert rel_z < 0.02
        z_mean_err = np.abs(
            sol.z[:, 1:-1, 0, 0].mean(axis=0) - z_true[:, 1:-1].mean(axis=0)
        ).max()
        assert z_mean_err < 0.05


class TestDensityDelayOracle:
    def test_density_delay_matches_independent_quadrature(self):
        # deterministic fixture: f = c * ydel with a uniform density on
        # [-0.5, 0), constant terminal; oracle solves the delayed integral
        # equation on its own fine grid with midpoint sums
        c, lo = 0.2, -0.5
        t_end = 1.0
        prob = DelayFbsdeProblem(
            horizon=t_end, dim_x=1, dim_y=1, x0=[0.0],
            forward=make_forward("brownian"),
            driver=make_driver("linear_ydel", {"coeff": c, "lipschitz": c}),
            terminal=make_terminal("constant", {"value": 1.0}),
            alpha_x=DelayMeasure(t_end),
            alpha_y=DelayMeasure(t_end, density_pieces=((lo, 0.0, 1.0),)),
            alpha_z=DelayMeasure(t_end),
            p=2.0, beta=1.0, gamma=0.5,
        )
        grid = np.linspace(0.0, t_end, 21)
        fwd = simulate_forward(prob.forward, prob.x0, grid, 500, 3)
        sol = picard_solve(prob, fwd, BasisSpec(), 12, 1e-11)

        n = 2000
        dt = t_end / n
        times = np.linspace(0.0, t_end, n + 1)
        vmids = (np.arange(int(-lo / dt)) + 0.5) * dt  # midpoints of [0, -lo)
        y = np.ones(n + 1)
        for _ in range(100):
            prev = y
            conv = np.array([
                np.sum(np.interp(t - vmids, times, prev) * (t - vmids >= -1e-12)) * dt
                for t in times
            ])
            y = np.ones(n + 1)
            for i in range(n - 1, -1, -1):
                y[i] = y[i + 1] + c * dt * conv[i]
            if np.max(np.abs(y - prev)) < 1e-12:
                break
        assert sol.y[:, 0].mean() == pytest.approx(y[0], abs=0.01)
        assert np.sqrt((sol.z**2).mean()) < 0.02


class TestFdCheck:
    def test_linear_terminal_exact_for_all_steps(self):
        prob = problem(make_driver("zero"), make_terminal("identity"))
        rep = fd_directional_check(prob, [1.0], [0.5, 0.25], 2000, 10, seed=3)
        assert max(rep.errors) < 1e-6

    def test_quadratic_terminal_first_order_bias(self):
        prob = problem(make_driver("zero"), make_terminal("quadratic"), x0=1.0)
        rep = fd_directional_check(prob, [1.0], [0.5, 0.25, 0.125], 4000, 10, seed=5)
        assert rep.errors[1] == pytest.approx(0.5 * rep.errors[0], rel=1e-3)
        assert rep.errors[2] == pytest.approx(0.5 * rep.errors[1], rel=1e-3)
        assert rep.richardson_error < rep.noise_floor + 3 * rep.noise_floor_se

    def test_deterministic_delay_fixture_matches_derivative(self):
        prob = problem(
            make_driver("linear_ydel", {"coeff": 0.1, "lipschitz": 0.1}),
            make_terminal("constant", {"value": 1.0}),
            alpha_y=lag_atom(),
        )
        rep = fd_directional_check(prob, [1.0], [0.5, 0.25], 1000, 20, seed=3,
                                   tol=1e-10, max_sweeps=12)
        assert max(rep.errors) < 1e-4
