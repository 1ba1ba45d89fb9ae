from dataclasses import replace

import numpy as np
import pytest

from fbverify import (
    CFLViolation,
    ControlProblem,
    ControlSet,
    FeedbackPolicy,
    Grid,
    SolverBreakdown,
    ValueField,
    builtin,
    hamiltonian,
    hamiltonian_min,
    query,
    solve_hjb,
    synthesize_policy,
)
from fbverify.hjb import check_cfl, hamiltonian_argmin


def _zero_problem(d=1, controls=None):
    return ControlProblem(
        state_dim=d, control_dim=1, horizon=1.0,
        drift=lambda t, x, u: 0.0, diffusion=lambda t, x, u: 0.0,
        generator=lambda t, x, y, z, u: 0.0, terminal=lambda x: 0.0 * x[..., 0],
        control_set=controls or ControlSet.lattice(-1, 1, 5),
    )


def _control_free(terminal=lambda x: x[..., 0] ** 2):
    # heat equation with a running cost that ignores u
    return ControlProblem(
        state_dim=1, control_dim=1, horizon=1.0,
        drift=lambda t, x, u: 0.0, diffusion=lambda t, x, u: 1.0,
        generator=lambda t, x, y, z, u: 0.1 * x[..., 0] ** 2, terminal=terminal,
        control_set=ControlSet.lattice(-1, 1, 5),
    )


class TestGrid:
    def test_spacing_and_shapes(self):
        g = Grid(-4, 4, 161, 10, 1.0)
        assert g.spacing[0] == pytest.approx(0.05)
        assert g.points().shape == (161, 1)
        assert g.times[-1] == 1.0 and len(g.times) == 11

    @pytest.mark.parametrize("kw", [dict(lo=1, hi=0), dict(nodes=2), dict(time_steps=0)])
    def test_invalid(self, kw):
        args = dict(lo=-1, hi=1, nodes=5, time_steps=4, horizon=1.0) | kw
        with pytest.raises(ValueError):
            Grid(**args)

    def test_dimension_cap(self):
        with pytest.raises(ValueError, match="d <= 3"):
            Grid([0] * 4, [1] * 4, 3, 1, 1.0)

    def test_trust_region(self):
        g = Grid(-4, 4, 161, 10, 1.0)
        lo, hi = g.trust_box()
        assert lo[0] == pytest.approx(-2.8) and hi[0] == pytest.approx(2.8)
        assert g.trust_mask().sum() == 113

    def test_auto_dt_satisfies_cfl(self, lq, lq_grid):
        assert check_cfl(lq, lq_grid) <= 1.0
        # lq1d: 1/h^2 + 3/h = 460, so dt * 460 <= 0.9
        assert lq_grid.dt == pytest.approx(1 / 512)

    def test_cfl_violation_reports_bound(self, lq):
        g = Grid(-4, 4, 161, 100, 1.0)
        with pytest.raises(CFLViolation, match=r"CFL bound violated.*need dt <= "):
            solve_hjb(lq, g)


class TestHamiltonian:
    def test_lq_hand_value(self, lq):
        assert hamiltonian(lq, 0.0, [0.0], 0.0, [2.0], [[2.0]], [1.0]) == pytest.approx(4.0)

    def test_zero_problem(self, rng):
        p = _zero_problem()
        h = hamiltonian(p, 0.3, rng.normal(size=(50, 1)), rng.normal(size=50), rng.normal(size=(50, 1)),
                        np.ones((50, 1, 1)), rng.uniform(-1, 1, (50, 1)))
        assert np.all(h == 0.0)

    def test_kink_value(self, kink):
        assert hamiltonian(kink, 0.5, [0.3], 7.0, [-1.0], [[0.0]], [1.0]) == pytest.approx(-1.0)

    def test_asymmetric_theta(self):
        p = _zero_problem(d=2)
        with pytest.raises(ValueError, match="symmetric"):
            hamiltonian(p, 0.0, [0.0, 0.0], 0.0, [0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]], [0.0])

    def test_min_lq_vertex(self, lq):
        val, u = hamiltonian_min(lq, 0.0, [0.0], 0.0, [2.0], [[0.0]])
        assert val == pytest.approx(-1.0) and u[0] == pytest.approx(-1.0)

    def test_min_tie_break(self, kink):
        val, u = hamiltonian_min(kink, 0.0, [0.0], 0.0, [0.0], [[0.0]])
        assert val == 0.0 and u[0] == kink.control_set.points[0, 0]

    def test_min_lq_diffusion(self, lq):
        val, u = hamiltonian_min(lq, 0.0, [0.0], 0.0, [0.0], [[2.0]])
        assert val == pytest.approx(1.0) and u[0] == 0.0

    def test_batched_min_matches_scalar(self, lq, rng):
        x = rng.normal(size=(7, 1))
        q = rng.normal(size=(7, 1))
        vals, idx = hamiltonian_argmin(lq, 0.2, x, 0.0, q, np.ones((7, 1, 1)))
        for i in range(7):
            v, u = hamiltonian_min(lq, 0.2, x[i], 0.0, q[i], [[1.0]])
            assert vals[i] == v and lq.control_set.points[idx[i], 0] == u[0]


class TestSolve:
    def test_terminal_slice_is_phi(self, lq, lq_grid, lq_field):
        np.testing.assert_array_equal(lq_field.values[-1], lq.phi(lq_grid.points()))

    def test_martingale_linear_invariance(self, martingale):
        g = Grid.for_problem(martingale, -6, 6, 241)
        f = solve_hjb(martingale, g)
        x = g.points()[..., 0]
        inner = np.abs(x) <= 3
        assert np.abs(f.values[0][inner] - x[inner]).max() <= 1e-8

    def test_lq_origin(self, lq_field):
        assert query(lq_field, 0.0, [0.0]) == pytest.approx(np.log(2), abs=0.02)

    def test_kink_origin(self, kink):
        g = Grid.for_problem(kink, -2, 2, 401)
        assert query(solve_hjb(kink, g), 0.0, [0.0]) == pytest.approx(-1.0, abs=0.02)

    def test_kink_exact_on_trust_region(self, kink, kink_grid, kink_field):
        mask = kink_grid.trust_mask()
        exact = kink.value(0.0, kink_grid.points())
        assert np.abs(kink_field.values[0] - exact)[mask].max() < 1e-12

    def test_refinement_reduces_error(self, lq):
        errs = []
        for nodes in (81, 161):
            g = Grid.for_problem(lq, -4, 4, nodes)
            f = solve_hjb(lq, g)
            pts = g.points()
            sel = np.abs(pts[..., 0]) <= 2
            errs.append(max(np.abs(f.values[k] - lq.value(t, pts))[sel].max() for k, t in enumerate(g.times)))
        assert errs[0] / errs[1] >= 1.5

    def test_constant_shift(self, rng):
        base = _control_free()
        shifted = replace(base, generator=lambda t, x, y, z, u: 0.0)
        g = Grid.for_problem(shifted, -3, 3, 61)
        c = 2.75
        v1 = solve_hjb(shifted, g)
        v2 = solve_hjb(shifted, g, terminal=shifted.phi(g.points()) + c)
        np.testing.assert_allclose(v2.values, v1.values + c, rtol=0, atol=1e-12)

    def test_comparison_random_terminal_pairs(self, lq, rng):
        g = Grid.for_problem(lq, -3, 3, 41)
        for _ in range(20):
            phi1 = rng.normal(size=g.shape) * 3
            phi2 = phi1 + np.abs(rng.normal(size=g.shape)) * rng.integers(0, 2, g.shape)
            v1 = solve_hjb(lq, g, terminal=phi1)
            v2 = solve_hjb(lq, g, terminal=phi2)
            assert np.all(v1.values <= v2.values + 1e-12)

    def test_nan_breakdown_location(self):
        p = replace(_control_free(), generator=lambda t, x, y, z, u: np.where(x[..., 0] > 2.9, np.inf, 0.0),
                    lipschitz_bound=0.0)
        g = Grid.for_problem(p, -3, 3, 61)
        with pytest.raises(SolverBreakdown, match=r"time index \d+, node \(\d+,\)"):
            solve_hjb(p, g)

    def test_two_dimensional_quadratic(self):
        # v = x1 x2 + |x|^2 + (tr a)(T - t) + a12 (T - t) with a = s s^T
        s = np.array([[1.0, 0.0], [0.5, 1.0]])
        a = s @ s.T
        p = ControlProblem(
            state_dim=2, control_dim=1, horizon=0.5,
            drift=lambda t, x, u: 0.0, diffusion=lambda t, x, u: s,
            generator=lambda t, x, y, z, u: 0.0,
            terminal=lambda x: x[..., 0] * x[..., 1] + (x**2).sum(-1),
            control_set=ControlSet.from_points([0.0]),
        )
        g = Grid.for_problem(p, [-4, -4], [4, 4], 81)
        f = solve_hjb(p, g)
        pts = g.points()
        exact = pts[..., 0] * pts[..., 1] + (pts**2).sum(-1) + (np.trace(a) + a[0, 1]) * 0.5
        centre = np.all(np.abs(pts) <= 0.5, axis=-1)
        assert np.abs(f.values[0] - exact)[centre].max() < 1e-4

    def test_dominance_warning(self):
        s = np.array([[1.0, 0.0], [2.0, 0.2]])
        p = ControlProblem(
            state_dim=2, control_dim=1, horizon=0.1,
            drift=lambda t, x, u: 0.0, diffusion=lambda t, x, u: s,
            generator=lambda t, x, y, z, u: 0.0, terminal=lambda x: x[..., 0] * x[..., 1],
            control_set=ControlSet.from_points([0.0]),
        )
        g = Grid.for_problem(p, [-1, -1], [1, 1], 11)
        with pytest.warns(RuntimeWarning, match="diagonally dominant"):
            solve_hjb(p, g)


class TestQuery:
    def test_nodes_exact(self, lq_grid, lq_field):
        pts = lq_grid.points()
        k = 100
        np.testing.assert_array_equal(query(lq_field, lq_grid.times[k], pts), lq_field.values[k])

    def test_linear_midpoint(self):
        g = Grid(-1, 1, 5, 2, 1.0)
        f = ValueField.from_function(g, lambda t, x: 3 * x[..., 0] + t)
        assert query(f, 0.25, [0.25]) == pytest.approx(1.0)

    def test_lq_solved_value(self, lq_field):
        assert query(lq_field, 0.5, [1.0]) == pytest.approx(1 / 1.5 + np.log(1.5), abs=0.02)

    def test_clamp_flag(self, lq_field):
        v, clamped = query(lq_field, 0.0, [5.0], with_clamp=True)
        assert clamped and v == query(lq_field, 0.0, [4.0])

    def test_field_validation(self, lq_grid):
        with pytest.raises(ValueError):
            ValueField(lq_grid, np.zeros((3, 3)))
        bad = np.zeros((lq_grid.time_steps + 1,) + lq_grid.shape)
        bad[0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            ValueField(lq_grid, bad)

    def test_field_is_read_only_copy(self, lq_grid):
        arr = np.zeros((lq_grid.time_steps + 1,) + lq_grid.shape)
        f = ValueField(lq_grid, arr)
        arr[0, 0] = 1.0
        assert f.values[0, 0] == 0.0
        with pytest.raises(ValueError):
            f.values[0, 0] = 2.0


class TestPolicy:
    def test_from_exact_field(self, lq, lq_grid, lq_exact_field):
        pol = synthesize_policy(lq, lq_grid, lq_exact_field)
        pts = lq_grid.points()
        sel = np.abs(pts[..., 0]) <= 2
        step = lq.control_set.step[0]
        for k, t in enumerate(lq_grid.times):
            if t > 0.9:
                break
            u = pol.values()[k][..., 0]
            assert np.abs(u - (-pts[..., 0] / (2 - t)))[sel].max() <= step + 1e-12

    def test_kink_signs(self, kink, kink_grid, kink_exact_field):
        pol = synthesize_policy(kink, kink_grid, kink_exact_field)
        x = kink_grid.points()[..., 0]
        u = pol.values()[0][..., 0]
        assert np.all(u[x > 0.05] == 1.0) and np.all(u[x < -0.05] == -1.0)

    def test_control_independent_is_first_control(self):
        p = _control_free()
        g = Grid.for_problem(p, -2, 2, 41)
        pol = synthesize_policy(p, g, solve_hjb(p, g))
        assert np.all(pol.controls == 0)

    def test_invariant_under_constant_shift(self, lq, lq_grid, lq_field, lq_policy):
        pol2 = synthesize_policy(lq, lq_grid, lq_field.shifted(3.5))
        np.testing.assert_array_equal(pol2.controls, lq_policy.controls)

    def test_invalid_indices(self, lq, lq_grid):
        idx = np.full((lq_grid.time_steps + 1,) + lq_grid.shape, len(lq.control_set))
        with pytest.raises(ValueError, match="outside the control set"):
            FeedbackPolicy(lq_grid, idx, lq.control_set)

    def test_lookup_nearest_node_and_clamp(self, lq, lq_grid, lq_policy):
        idx, clamped = lq_policy.lookup(0.5, np.array([[1.01], [9.0]]))
        k = int(0.5 / lq_grid.dt)
        j = int(round((1.0 + 4) / 0.05))
        assert idx[0] == lq_policy.controls[k, j]
        assert list(clamped) == [False, True]
