from dataclasses import replace

import numpy as np
import pytest

from fbverify import ControlProblem, ControlSet, EvaluatorError, builtin, lipschitz_probe


def _problem(drift=lambda t, x, u: u, diffusion=lambda t, x, u: 1.0, generator=lambda t, x, y, z, u: u[..., 0] ** 2,
             terminal=lambda x: x[..., 0] ** 2, controls=None, lipschitz_bound=None):
    return ControlProblem(
        state_dim=1, control_dim=1, horizon=1.0, drift=drift, diffusion=diffusion, generator=generator,
        terminal=terminal, control_set=controls or ControlSet.lattice(-3, 3, 121), lipschitz_bound=lipschitz_bound,
    )


class TestControlSet:
    def test_lattice_count_and_order(self):
        cs = ControlSet.lattice([-1, 0], [1, 2], [3, 5])
        assert len(cs) == 15
        pts = cs.points
        assert np.all(np.lexsort(pts.T[::-1]) == np.arange(15))
        lo, hi = cs.box
        assert np.all(pts >= lo) and np.all(pts <= hi)

    def test_lattice_contains_zero_exactly(self):
        cs = ControlSet.lattice(-3, 3, 121)
        assert 0.0 in cs.points[:, 0]
        assert cs.step[0] == pytest.approx(0.05)

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            ControlSet.from_points([0.0, 1.0, 0.0])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            ControlSet.from_points(np.empty((0, 1)))

    def test_nearest_index_prefers_first_on_ties(self):
        cs = ControlSet.from_points([-1.0, 1.0])
        assert cs.nearest_index([0.0]) == 0


class TestProblem:
    def test_rejects_bad_horizon(self):
        with pytest.raises(ValueError):
            replace(builtin("lq1d"), horizon=0.0)

    def test_control_dim_mismatch(self):
        with pytest.raises(ValueError):
            replace(builtin("lq1d"), control_set=ControlSet.lattice([0, 0], [1, 1], 2))

    def test_broadcasting_wrappers(self):
        p = builtin("lq1d")
        x = np.zeros((4, 3, 1))
        u = np.ones((5, 1, 1, 1))
        assert p.b(0.0, x, u).shape == (5, 4, 3, 1)
        assert p.sigma(0.0, x, u).shape == (5, 4, 3, 1, 1)
        assert p.f(0.0, x, 0.0, x, u).shape == (5, 4, 3)

    def test_no_exact_value(self):
        with pytest.raises(ValueError, match="closed-form"):
            _problem().value(0.0, np.zeros(1))


class TestBuiltins:
    def test_unknown_lists_available(self):
        with pytest.raises(ValueError, match="kink1d.*lq1d.*martingale1d"):
            builtin("nope")

    def test_lq_value_at_origin(self):
        assert float(builtin("lq1d").value(0.0, [0.0])) == pytest.approx(np.log(2), abs=1e-12)

    def test_lq_value_by_riccati_integration(self):
        # v = a(t) x^2 + c(t) with a' = a^2, c' = -a, a(T) = 1, c(T) = 0
        from scipy.integrate import solve_ivp

        sol = solve_ivp(lambda t, y: [y[0] ** 2, -y[0]], (1.0, 0.0), [1.0, 0.0], rtol=1e-11, atol=1e-12)
        a0, c0 = sol.y[:, -1]
        p = builtin("lq1d")
        for x in (0.0, 0.7, -1.9):
            assert float(p.value(0.0, [x])) == pytest.approx(a0 * x * x + c0, abs=1e-8)

    def test_kink_value_at_origin(self):
        assert float(builtin("kink1d").value(0.0, [0.0])) == -1.0

    def test_martingale_value(self):
        assert float(builtin("martingale1d").value(0.5, [2.0])) == 2.0

    @pytest.mark.parametrize("name", ["lq1d", "kink1d", "martingale1d"])
    def test_terminal_condition(self, name, rng):
        p = builtin(name)
        x = rng.uniform(-5, 5, (200, 1))
        np.testing.assert_array_equal(p.value(p.horizon, x), p.phi(x))

    def test_lq_hjb_residual_analytic(self, rng):
        p = builtin("lq1d")
        t = rng.uniform(0, 1, 1000)
        x = rng.uniform(-3, 3, 1000)
        tau = 2.0 - t
        v_t = x**2 / tau**2 - 1 / tau
        v_x = 2 * x / tau
        v_xx = 2 / tau
        u = -v_x / 2  # interior minimiser of u^2 + u v_x
        assert np.all(np.abs(u) <= 3)
        res = v_t + 0.5 * v_xx + u * v_x + u**2
        assert np.abs(res).max() < 1e-10

    def test_lq_feedback(self):
        p = builtin("lq1d")
        assert float(p.exact_feedback(0.5, np.array([1.5]))[0]) == pytest.approx(-1.0)


class TestLipschitzProbe:
    def test_terminal_ratio_on_box(self):
        rep = lipschitz_probe(_problem(), samples=1000, seed=0, box=(-2, 2))
        assert rep.ratios["terminal"] <= 4.0
        assert rep.ratios["terminal"] > 3.0

    def test_zero_coefficients(self):
        zero = lambda *a: 0.0
        rep = lipschitz_probe(_problem(zero, zero, zero, zero), samples=100, seed=1)
        assert all(r == 0.0 for r in rep.ratios.values())
        assert not rep.violated

    def test_violation_flagged(self):
        p = _problem(drift=lambda t, x, u: 2 * x, lipschitz_bound=1.0)
        rep = lipschitz_probe(p, samples=1000, seed=7)
        assert rep.violated
        assert rep.violations["drift"] >= 1.9

    def test_linear_drift_ratio_is_its_slope(self):
        # x-only pairs give exactly |2dx|/|dx|; mixed pairs give less
        p = _problem(drift=lambda t, x, u: 2 * x, lipschitz_bound=2.0)
        rep = lipschitz_probe(p, samples=999, seed=7)
        assert rep.ratios["drift"] == pytest.approx(2.0, rel=1e-9)
        assert "drift" not in rep.violations

    def test_declared_bound_respected(self):
        rep = lipschitz_probe(replace(builtin("kink1d"), lipschitz_bound=1.0), samples=500, seed=3)
        assert not rep.violated

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            lipschitz_probe(_problem(), samples=1)

    def test_evaluator_failure_reports_input(self):
        def bad_phi(x):
            x = np.asarray(x)
            out = x[..., 0] ** 2
            return np.where(x[..., 0] > 4.0, np.nan, out)

        with pytest.raises(EvaluatorError, match="terminal evaluator failed at") as exc:
            lipschitz_probe(_problem(terminal=bad_phi), samples=200, seed=0)
        assert float(np.asarray(exc.value.inputs["x"])[0]) > 4.0
