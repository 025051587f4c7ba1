"""Stage solvers, oracle, Lipschitz estimation, residuals, F* transform."""

import numpy as np
import pytest

from mcbsde import (
    Driver,
    LipschitzBox,
    DegenerateBox,
    NoConvergence,
    build_driver,
    conditional_expectation,
    contraction_diagnostics,
    estimate_lipschitz,
    fstar_inverse,
    fstar_transform,
    pathwise_residual,
    representation_integrand,
    route_stage,
    simulate_path,
    solve,
    solve_general,
    solve_ode_oracle,
    solve_stage1,
    solve_stage2,
)

from catalog import (
    asymmetric_2state,
    build_catalog,
    symmetric_2state,
    three_state_two_piece,
)

Q2 = np.array([[1.0], [0.0]])
X0 = np.array([1.0, 0.0])


class TestStage1:
    def test_pure_terminal_reduces_to_conditional_expectation(self):
        sch = three_state_two_piece()
        q = np.array([[1.0], [0.0], [-0.5]])
        sol = solve_stage1(None, None, q, sch, 400)
        l = conditional_expectation(q, sch, 400)
        assert np.array_equal(sol.z.values, l.values)
        gamma = representation_integrand(l)
        assert np.array_equal(sol.y.values, gamma.values)

    def test_constant_f_zero_terminal(self):
        # F0 = r, q = 0  =>  z(t, e_i) = -r (T - t), y = canonical(-G0)
        sch = symmetric_2state()
        r = 0.7
        g0c = np.array([[0.4, -0.2]])  # already canonical at neither state
        sol = solve_stage1(lambda t, i: np.array([r]),
                           lambda t, i: g0c, np.zeros((2, 1)), sch, 300)
        expected = -r * (1.0 - sol.grid.times)
        for i in range(2):
            np.testing.assert_allclose(sol.z.values[:, i, 0], expected, atol=1e-12)
        # canonical representative of -G0: subtract the current column
        for i in range(2):
            want = np.broadcast_to(-(g0c - g0c[:, i:i + 1]), sol.y.values[:, i].shape)
            np.testing.assert_allclose(sol.y.values[:, i], want, atol=1e-12)

    def test_worked_example_against_oracle_and_closed_form(self):
        sch = symmetric_2state()
        f0 = lambda t, i: np.array([float(i + 1)])
        sol = solve_stage1(f0, None, Q2, sch, 2000)
        driver = build_driver("constant", {"f0": [[1.0], [2.0]]}, 2, 1, sch)
        oracle = solve_ode_oracle(driver, Q2, sch, 2000)
        assert np.max(np.abs(sol.z.values - oracle.z.values)) <= 1e-8
        # hand quadrature: z(0,e0) = P00(0,1) - int_0^1 (3/2 - e^{-2u}/2) du
        closed = (1 + np.exp(-2)) / 2 - (1.5 - (1 - np.exp(-2)) / 4)
        assert sol.z.values[0, 0, 0] == pytest.approx(closed, abs=1e-12)

    def test_terminal_exact(self):
        sch = three_state_two_piece()
        q = np.array([[0.3], [2.0], [-1.0]])
        sol = solve_stage1(lambda t, i: np.array([np.sin(3 * t)]), None, q, sch, 150)
        assert np.array_equal(sol.z.values[-1], q)

    def test_non_finite_driver_rejected(self):
        sch = symmetric_2state()
        from mcbsde import NonFiniteDriver
        with pytest.raises(NonFiniteDriver):
            solve_stage1(lambda t, i: np.array([np.inf]), None, Q2, sch, 50)


class TestOracle:
    def test_zero_driver_solves_backward_equation(self):
        sch = three_state_two_piece()
        q = np.array([[1.0], [-1.0], [0.5]])
        driver = build_driver("zero", {}, 3, 1, sch)
        oracle = solve_ode_oracle(driver, q, sch, 1000)
        l = conditional_expectation(q, sch, 1000)
        assert np.max(np.abs(oracle.z.values - l.values)) <= 1e-10

    def test_linear_decay_closed_form(self):
        # F = alpha Z: z(t) = exp(-alpha (T-t)) P(t,T)^T q, both signs
        sch = symmetric_2state()
        for alpha in (1.0, -1.0):
            driver = build_driver("linear_z", {"alpha": [[alpha]]}, 2, 1, sch)
            oracle = solve_ode_oracle(driver, Q2, sch, 1000)
            l = conditional_expectation(Q2, sch, 1000)
            closed = np.exp(-alpha * (1.0 - oracle.grid.times))[:, None, None] * l.values
            assert np.max(np.abs(oracle.z.values - closed)) <= 1e-10


class TestStage2:
    def test_y_independent_converges_immediately(self):
        sch = symmetric_2state()
        f0 = np.array([[0.2], [-0.4]])
        sol2, rep = solve_stage2(lambda t, i, Y: f0[i], None, Q2, sch, 300,
                                 lipschitz_c=0.0, f_depends_y=False)
        sol1 = solve_stage1(lambda t, i: f0[i], None, Q2, sch, 300)
        assert rep.iterations == 1 and rep.converged
        np.testing.assert_allclose(sol2.z.values, sol1.z.values, atol=1e-14)

    def test_linear_y_matches_oracle(self):
        sch = symmetric_2state()
        driver = build_driver("linear_y",
                              {"beta": [[[0.8]], [[-0.8]]], "f0": [[0.1], [-0.2]]},
                              2, 1, sch)
        sol, rep = solve(driver, Q2, sch, 1000, x0_dist=X0)
        oracle = solve_ode_oracle(driver, Q2, sch, 1000)
        assert np.max(np.abs(sol.z.values - oracle.z.values)) <= 1e-6
        assert rep.converged

    def test_contraction_ratio_bound_with_true_c(self):
        for prob in [p for p in build_catalog() if p.name.startswith("linear_y")]:
            assert prob.driver.lipschitz_c is not None
            sol, rep = solve(prob.driver, prob.q, prob.schedule, 600, x0_dist=prob.x0_dist)
            ratios = [r for r in rep.y_increment_ratios if np.isfinite(r)]
            assert ratios, prob.name
            assert max(ratios) <= 0.55, prob.name
            assert contraction_diagnostics(rep).passed

    def test_no_convergence_carries_report_and_solution(self):
        sch = symmetric_2state()
        driver = build_driver("linear_y", {"beta": [[[0.9]], [[-0.9]]]}, 2, 1, sch)
        with pytest.raises(NoConvergence) as exc:
            solve_stage2(lambda t, i, Y: driver.F(t, i, np.zeros(1), Y), None,
                         Q2, sch, 200, tol=1e-12, max_iter=2,
                         lipschitz_c=driver.lipschitz_c)
        assert exc.value.report.iterations == 2
        assert exc.value.solution is not None
        assert np.array_equal(exc.value.solution.z.values[-1], Q2)

    def test_two_seed_uniqueness(self):
        sch = symmetric_2state()
        driver = build_driver("linear_y", {"beta": [[[0.8]], [[-0.8]]]}, 2, 1, sch)
        tol = 1e-10
        f = lambda t, i, Y: driver.F(t, i, np.zeros(1), Y)
        sol_zero, _ = solve_stage2(f, None, Q2, sch, 300, tol=tol,
                                   lipschitz_c=driver.lipschitz_c)
        rng = np.random.default_rng(77)
        y0 = rng.uniform(-1, 1, size=sol_zero.y.values.shape)
        sol_rand, _ = solve_stage2(f, None, Q2, sch, 300, tol=tol,
                                   lipschitz_c=driver.lipschitz_c, y0=y0)
        assert np.max(np.abs(sol_zero.z.values - sol_rand.z.values)) <= 10 * tol


class TestGeneral:
    def test_degenerate_outer_equals_stage2(self):
        sch = symmetric_2state()
        driver = build_driver("linear_y",
                              {"beta": [[[0.6]], [[-0.6]]], "f0": [[0.3], [0.0]]},
                              2, 1, sch)
        sol3, rep3 = solve_general(driver, Q2, sch, 400, x0_dist=X0)
        zeros1 = np.zeros(1)
        sol2, _ = solve_stage2(lambda t, i, Y: driver.F(t, i, zeros1, Y), None,
                               Q2, sch, 400, lipschitz_c=driver.lipschitz_c, x0_dist=X0)
        assert np.array_equal(sol3.grid.times, sol2.grid.times)
        assert np.max(np.abs(sol3.z.values - sol2.z.values)) <= 1e-12

    def test_linear_z_closed_form_both_signs(self):
        sch = symmetric_2state()
        l = conditional_expectation(Q2, sch, 800)
        for alpha in (1.0, -1.0):
            driver = build_driver("linear_z", {"alpha": [[alpha]]}, 2, 1, sch)
            sol, _ = solve(driver, Q2, sch, 800, x0_dist=X0)
            closed = np.exp(-alpha * (1.0 - sol.grid.times))[:, None, None] * l.values
            assert np.max(np.abs(sol.z.values - closed)) <= 1e-8

    def test_z_dependent_g_matches_oracle(self):
        sch = symmetric_2state()
        driver = build_driver("linear_full",
                              {"alpha": [[0.3]], "beta": [[[0.4]], [[-0.4]]],
                               "eps": 0.1, "ghat": [[1.0, -0.5]]}, 2, 1, sch)
        sol, rep = solve(driver, Q2, sch, 1000, x0_dist=X0)
        oracle = solve_ode_oracle(driver, Q2, sch, 1000)
        assert np.max(np.abs(sol.z.values - oracle.z.values)) <= 1e-6
        assert contraction_diagnostics(rep).passed

    def test_factorial_bound_dominates(self):
        sch = symmetric_2state()
        driver = build_driver("linear_full",
                              {"alpha": [[0.8]], "beta": [[[0.5]], [[-0.5]]],
                               "eps": 0.2, "ghat": [[0.8, -0.8]]}, 2, 1, sch)
        _, rep = solve(driver, Q2, sch, 300, x0_dist=X0)
        assert len(rep.z_increment_integrals) >= 2
        for inc, bound in zip(rep.z_increment_integrals, rep.factorial_bounds):
            assert inc <= bound * (1 + 1e-9) + 1e-300

    def test_two_z_seeds_agree(self):
        sch = symmetric_2state()
        driver = build_driver("linear_full",
                              {"alpha": [[0.5]], "beta": [[[0.3]], [[-0.3]]],
                               "eps": 0.1, "ghat": [[0.5, -0.2]]}, 2, 1, sch)
        tol = 1e-10
        sol_a, _ = solve_general(driver, Q2, sch, 300, tol=tol, x0_dist=X0)
        rng = np.random.default_rng(5)
        z0 = Q2[None] + rng.uniform(-1, 1, size=sol_a.z.values.shape)
        sol_b, _ = solve_general(driver, Q2, sch, 300, tol=tol, x0_dist=X0, z0=z0)
        assert np.max(np.abs(sol_a.z.values - sol_b.z.values)) <= 10 * tol

    def test_grid_refinement_shrinks_oracle_gap(self):
        sch = symmetric_2state()
        driver = build_driver("soft_nonlinear",
                              {"alpha": [[0.5]], "beta": [[[0.4]], [[-0.4]]],
                               "f0": [[0.2], [-0.1]], "f0_amp": [1.0], "f0_freq": 5.0,
                               "squash": [1.5]}, 2, 1, sch)

        def gap(steps):
            sol, _ = solve(driver, Q2, sch, steps, tol=1e-12, x0_dist=X0)
            oracle = solve_ode_oracle(driver, Q2, sch, steps)
            return np.max(np.abs(sol.z.values - oracle.z.values))

        g_coarse, g_fine = gap(100), gap(200)
        assert g_fine > 0
        assert g_coarse / g_fine >= 8.0


class TestMartingaleConsistency:
    def test_lemma3_compensated_value_process(self):
        # Z_t - int_0^t F du is a martingale: Monte Carlo mean increments ~ 0
        sch = symmetric_2state()
        driver = build_driver("constant", {"f0": [[1.0], [2.0]]}, 2, 1, sch)
        sol, _ = solve(driver, Q2, sch, 500)
        checkpoints = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
        n_paths = 20_000
        incs = np.empty((n_paths, checkpoints.size - 1))
        f0 = np.array([1.0, 2.0])
        for k in range(n_paths):
            path = simulate_path(sch, 0, 360_000 ^ k)
            z_on_path = [sol.z.eval(t)[path.state_at(t), 0] for t in checkpoints]
            occ = np.zeros(checkpoints.size - 1)
            for t0, t1, s, _ in path.cells(sch):
                for m in range(checkpoints.size - 1):
                    lo, hi = checkpoints[m], checkpoints[m + 1]
                    overlap = max(0.0, min(t1, hi) - max(t0, lo))
                    occ[m] += overlap * f0[s]
            lvals = np.array(z_on_path) - np.concatenate(([0.0], np.cumsum(occ)))
            incs[k] = np.diff(lvals)
        mean = incs.mean(axis=0)
        se = incs.std(axis=0, ddof=1) / np.sqrt(n_paths)
        assert np.all(np.abs(mean) <= 3 * se + 1e-12)


class TestCatalogOracleEquivalence:
    def test_catalog_at_grid_2000(self):
        for prob in build_catalog():
            sol, _ = solve(prob.driver, prob.q, prob.schedule, 2000,
                           x0_dist=prob.x0_dist)
            oracle = solve_ode_oracle(prob.driver, prob.q, prob.schedule, 2000)
            gap = np.max(np.abs(sol.z.values - oracle.z.values))
            assert gap <= 1e-6, f"{prob.name}: {gap:.2e}"


class TestRouting:
    def test_stage_selection(self):
        sch = symmetric_2state()
        assert route_stage(build_driver("zero", {}, 2, 1, sch)) == 1
        assert route_stage(build_driver("constant", {}, 2, 1, sch)) == 1
        assert route_stage(build_driver("linear_y", {"beta": [[[0.1]], [[-0.1]]]}, 2, 1, sch)) == 2
        assert route_stage(build_driver("linear_z", {"alpha": [[0.5]]}, 2, 1, sch)) == 3
        assert route_stage(build_driver("linear_full",
                                        {"alpha": [[0.1]], "eps": 0.1,
                                         "ghat": [[1.0, 0.0]]}, 2, 1, sch)) == 3


class TestEstimateLipschitz:
    def test_constant_driver_zero(self):
        sch = symmetric_2state()
        driver = build_driver("constant", {"f0": [[1.0], [2.0]]}, 2, 1, sch)
        est = estimate_lipschitz(driver, LipschitzBox.cube(1, 2, 1.0), 2000, 0, sch)
        assert est.c == 0.0

    def test_linear_z_recovers_alpha(self):
        sch = symmetric_2state()
        alpha = 0.73
        driver = build_driver("linear_z", {"alpha": [[alpha]]}, 2, 1, sch)
        est = estimate_lipschitz(driver, LipschitzBox.cube(1, 2, 1.0), 6000, 1, sch)
        assert est.c <= alpha + 1e-12
        assert est.c >= alpha * 0.999  # pure-Z pairs attain the ratio exactly

    def test_linear_y_operator_norm(self):
        sch = asymmetric_2state(lam01=1.2, lam10=0.6)
        b0 = np.array([[0.5, 0.2], [-0.1, 0.4]])
        driver = build_driver("linear_y", {"beta": np.stack([b0, -b0])}, 2, 2, sch)
        true_c = np.linalg.norm(b0, 2) / np.sqrt(0.6)
        assert driver.lipschitz_c == pytest.approx(true_c, rel=1e-12)
        est = estimate_lipschitz(driver, LipschitzBox.cube(2, 2, 1.0), 100_000, 2, sch)
        assert est.c <= true_c + 1e-12
        assert est.c >= 0.95 * true_c

    def test_degenerate_box_rejected(self):
        sch = symmetric_2state()
        driver = build_driver("zero", {}, 2, 1, sch)
        box = LipschitzBox(np.zeros(1), np.zeros(1), np.zeros((1, 2)), np.zeros((1, 2)))
        with pytest.raises(DegenerateBox):
            estimate_lipschitz(driver, box, 100, 0, sch)


class TestPathwiseResidual:
    def test_constant_terminal_zero_driver(self):
        sch = symmetric_2state()
        driver = build_driver("zero", {}, 2, 1, sch)
        q = np.full((2, 1), 0.9)
        sol, _ = solve(driver, q, sch, 200)
        path = simulate_path(sch, 0, 9)
        assert pathwise_residual(sol, driver, q, path) <= 1e-13

    def test_stage1_residual_small(self):
        sch = symmetric_2state()
        driver = build_driver("constant", {"f0": [[1.0], [2.0]]}, 2, 1, sch)
        sol, _ = solve(driver, Q2, sch, 1000)
        worst = max(
            pathwise_residual(sol, driver, Q2, simulate_path(sch, 0, 40 ^ k))
            for k in range(20)
        )
        assert worst <= 1e-6

    def test_corrupted_y_detected(self):
        sch = symmetric_2state()
        driver = build_driver("constant", {"f0": [[1.0], [2.0]]}, 2, 1, sch)
        sol, _ = solve(driver, Q2, sch, 500)
        from mcbsde import IntegrandField, Solution
        bad_vals = np.array(sol.y.values)
        bad_vals[:, 0, :, 1] = 0.0  # zero out the 0 -> 1 jump column
        bad = Solution(sol.grid, sol.z, IntegrandField(sol.grid, bad_vals), sol.metadata)
        found = 0
        for k in range(30):
            path = simulate_path(sch, 0, 600 ^ k)
            prev = np.concatenate(([0], path.jump_states[:-1]))
            if np.any((prev == 0) & (np.asarray(path.jump_states) == 1)):
                found += 1
                assert pathwise_residual(bad, driver, Q2, path) > 1e-2
        assert found >= 5

    def test_dx_form_agrees_with_dm_form(self):
        for prob in build_catalog():
            sol, _ = solve(prob.driver, prob.q, prob.schedule, 200, x0_dist=prob.x0_dist)
            path = simulate_path(prob.schedule, 0, 1234)
            r_dm = pathwise_residual(sol, prob.driver, prob.q, path, form="dM")
            r_dx = pathwise_residual(sol, prob.driver, prob.q, path, form="dX")
            assert abs(r_dm - r_dx) <= 1e-10


class TestFstarTransform:
    def test_g_zero_y_zero_is_identity(self):
        sch = symmetric_2state()
        driver = build_driver("linear_z", {"alpha": [[0.7]]}, 2, 1, sch)
        star = fstar_transform(driver, sch)
        z = np.array([0.4])
        y0 = np.zeros((1, 2))
        for t in (0.1, 0.6):
            for i in range(2):
                np.testing.assert_allclose(star.F(t, i, z, y0), driver.F(t, i, z, y0),
                                           atol=1e-15)

    def test_round_trip_pointwise(self):
        sch = three_state_two_piece()
        driver = build_driver("linear_full",
                              {"alpha": [[0.4]], "beta": [[[0.2]], [[0.1]], [[-0.3]]],
                               "eps": 0.15, "ghat": [[1.0, -0.4, 0.3]]}, 3, 1, sch)
        back = fstar_inverse(fstar_transform(driver, sch), sch)
        rng = np.random.default_rng(3)
        for _ in range(50):
            t = float(rng.uniform(0, 1))
            i = int(rng.integers(0, 3))
            z = rng.uniform(-1, 1, size=1)
            y = rng.uniform(-1, 1, size=(1, 3))
            assert np.max(np.abs(np.asarray(back.F(t, i, z, y))
                                 - np.asarray(driver.F(t, i, z, y)))) <= 1e-14
