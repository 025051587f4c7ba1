"""Conditional expectations, representation integrands, reconstruction."""

import numpy as np
import pytest

from mcbsde import (
    IntegrandField,
    NotAMartingale,
    RateSchedule,
    StateFunction,
    conditional_expectation,
    integrability_diagnostic,
    reconstruct,
    representation_integrand,
    simulate_path,
    transition_matrix,
)
from mcbsde.grids import build_time_grid

from catalog import symmetric_2state, three_state_two_piece


class TestConditionalExpectation:
    def test_constant_terminal_is_constant(self):
        sch = three_state_two_piece()
        l = conditional_expectation(np.full(3, 0.7), sch, 200)
        np.testing.assert_allclose(l.values, 0.7, atol=1e-13)
        assert l.harmonicity_residual() <= 1e-8

    def test_two_state_closed_form(self):
        sch = symmetric_2state()
        l = conditional_expectation(np.array([1.0, 0.0]), sch, 1000)
        assert l.values[0, 0, 0] == pytest.approx((1 + np.exp(-2)) / 2, abs=1e-12)
        assert l.values[0, 1, 0] == pytest.approx((1 - np.exp(-2)) / 2, abs=1e-12)
        # terminal row is exact
        assert np.array_equal(l.values[-1, :, 0], [1.0, 0.0])

    def test_matches_transition_matrix_everywhere(self):
        sch = three_state_two_piece()
        q = np.array([[0.3], [-1.0], [2.0]])
        l = conditional_expectation(q, sch, 500)
        for t in (0.0, 0.2, 0.4, 0.77):
            expected = transition_matrix(sch, t, 1.0).T @ q
            np.testing.assert_allclose(l.eval(t), expected, atol=1e-11)

    def test_tower_property(self):
        sch = three_state_two_piece()
        q = np.array([[1.0], [0.0], [-0.5]])
        l = conditional_expectation(q, sch, 600)
        s = 0.7
        inner = conditional_expectation(l.eval(s), sch.truncate(s), 400)
        for t in (0.0, 0.25, 0.5):
            np.testing.assert_allclose(inner.eval(t), l.eval(t), atol=1e-10)

    def test_harmonicity_residual_small(self):
        sch = three_state_two_piece()
        l = conditional_expectation(np.array([1.0, -2.0, 0.5]), sch, 1000)
        assert l.harmonicity_residual() <= 1e-8


class TestRepresentationIntegrand:
    def test_constant_martingale_zero_integrand(self):
        sch = symmetric_2state()
        l = conditional_expectation(np.array([0.4, 0.4]), sch, 300)
        y = representation_integrand(l)
        assert np.max(np.abs(y.values)) <= 1e-13

    def test_two_state_definition_unrolled(self):
        sch = symmetric_2state()
        l = conditional_expectation(np.array([1.0, 0.0]), sch, 500)
        y = representation_integrand(l)
        p, r = l.values[:, 0, 0], l.values[:, 1, 0]
        np.testing.assert_allclose(y.values[:, 0, 0, 1], r - p, atol=1e-15)
        np.testing.assert_allclose(y.values[:, 1, 0, 0], p - r, atol=1e-15)
        assert np.all(y.values[:, 0, 0, 0] == 0.0)
        assert np.all(y.values[:, 1, 0, 1] == 0.0)

    def test_gamma_value_at_zero(self):
        # gamma^{01}(0) = l(0,e1) - l(0,e0) = -e^{-2}
        sch = symmetric_2state()
        y = representation_integrand(conditional_expectation(np.array([1.0, 0.0]), sch, 1000))
        assert y.values[0, 0, 0, 1] == pytest.approx(-np.exp(-2), abs=1e-12)

    def test_rejects_non_martingale(self):
        sch = symmetric_2state()
        grid = build_time_grid(sch, 200)
        vals = np.zeros((grid.times.size, 2, 1))
        vals[:, 0, 0] = np.sin(grid.times)  # not harmonic for this chain
        with pytest.raises(NotAMartingale):
            representation_integrand(StateFunction(grid, vals))


class TestReconstruct:
    def test_constant_surface_exact_zero(self):
        sch = symmetric_2state()
        grid = build_time_grid(sch, 200)
        vals = np.full((grid.times.size, 2, 1), 0.3)
        l = StateFunction(grid, vals)
        y = IntegrandField(grid, np.zeros((grid.times.size, 2, 1, 2)))
        path = simulate_path(sch, 0, 17)
        rep = reconstruct(l, y, path)
        assert rep.max_residual == 0.0

    def test_conditional_expectation_residual(self):
        sch = three_state_two_piece()
        l = conditional_expectation(np.array([[1.0], [0.0], [-1.0]]), sch, 1000)
        y = representation_integrand(l)
        worst = max(
            reconstruct(l, y, simulate_path(sch, k % 3, 300 ^ k)).max_residual
            for k in range(30)
        )
        assert worst <= 1e-6

    def test_fault_injection_detected(self):
        sch = symmetric_2state()
        l = conditional_expectation(np.array([1.0, 0.0]), sch, 800)
        y = representation_integrand(l)
        bad = np.array(y.values)
        bad[:, 0, :, 1] += 0.1  # corrupt the 0 -> 1 jump coefficient
        y_bad = IntegrandField(y.grid, bad)
        seen = 0
        for k in range(40):
            path = simulate_path(sch, 0, 900 ^ k)
            prev = np.concatenate(([0], path.jump_states[:-1]))
            witnessing = np.any((prev == 0) & (np.asarray(path.jump_states) == 1))
            if witnessing:
                seen += 1
                assert reconstruct(l, y_bad, path).max_residual >= 1e-2
        assert seen >= 5

    def test_current_column_is_never_read(self):
        # two integrands agreeing off the current-state column reconstruct identically
        sch = symmetric_2state()
        l = conditional_expectation(np.array([1.0, 0.0]), sch, 400)
        y = representation_integrand(l)
        tampered = np.array(y.values)
        tampered[:, 0, :, 0] += 5.0  # current-state column at state 0
        y2 = IntegrandField(y.grid, tampered)
        path = simulate_path(sch, 0, 23)
        r1 = reconstruct(l, y, path)
        r2 = reconstruct(l, y2, path)
        assert np.array_equal(r1.residuals, r2.residuals)


class TestIntegrabilityDiagnostic:
    def test_zero_integrand(self):
        sch = symmetric_2state()
        grid = build_time_grid(sch, 100)
        y = IntegrandField(grid, np.zeros((grid.times.size, 2, 1, 2)))
        assert integrability_diagnostic(y, sch, [1.0, 0.0]) == 0.0

    def test_isometry_closed_form(self):
        # E int ||Y||^2 du = Var(q(X_T)) = p(1-p) for the Bernoulli benchmark
        sch = symmetric_2state()
        l = conditional_expectation(np.array([1.0, 0.0]), sch, 1000)
        y = representation_integrand(l)
        diag = integrability_diagnostic(y, sch, [1.0, 0.0])
        p = (1 + np.exp(-2)) / 2
        assert diag == pytest.approx(p * (1 - p), abs=1e-8)
        assert diag == pytest.approx((1 - np.exp(-4)) / 4, abs=1e-8)

    def test_quadratic_homogeneity(self):
        sch = three_state_two_piece()
        l = conditional_expectation(np.array([[1.0], [2.0], [0.0]]), sch, 400)
        y = representation_integrand(l)
        doubled = IntegrandField(y.grid, 2.0 * y.values)
        d1 = integrability_diagnostic(y, sch, [1 / 3] * 3)
        d4 = integrability_diagnostic(doubled, sch, [1 / 3] * 3)
        assert d4 == pytest.approx(4.0 * d1, rel=1e-12)

    def test_monte_carlo_isometry(self):
        sch = symmetric_2state()
        q = np.array([1.0, 0.0])
        l = conditional_expectation(q, sch, 500)
        y = representation_integrand(l)
        diag = integrability_diagnostic(y, sch, [1.0, 0.0])
        n_paths = 40_000
        samples = np.empty(n_paths)
        l0 = l.values[0, 0, 0]
        for k in range(n_paths):
            path = simulate_path(sch, 0, 31337 ^ k)
            samples[k] = (q[path.state_at(1.0)] - l0) ** 2
        se = samples.std(ddof=1) / np.sqrt(n_paths)
        assert abs(samples.mean() - diag) <= 3 * se
