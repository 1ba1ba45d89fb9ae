"""Verification of candidate controls against a value field.

Three checks are combined:

* the HJB residual of the field (``p + min_u H`` on the grid);
* the superjet inequality ``p + min_u H(t, x, v, q, theta, u) >= 0`` for
  supplied jets;
* the Hamiltonian gap ``H(..., u_t) - min_u H(...)`` integrated along
  simulated trajectories, which must vanish (in expectation) for an
  optimal pair and, for a smooth value function, equals J - v.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .fbsde import Estimate, _stderr, simulate_forward, solve_bsde
from .hjb import (
    FeedbackPolicy,
    Grid,
    ValueField,
    _interp,
    discrete_hamiltonians,
    hamiltonian,
    hamiltonian_argmin,
    jets,
    min_discrete_hamiltonian,
    query,
)
from .model import ControlProblem
from .subdiff import JetCandidate, NeighborhoodSchedule, test_superjet


class Verdict(str, enum.Enum):
    CERTIFIED_OPTIMAL = "CERTIFIED_OPTIMAL"
    SUBOPTIMAL = "SUBOPTIMAL"
    INCONCLUSIVE = "INCONCLUSIVE"


# HJB residual


@dataclass
class ResidualResult:
    residual: np.ndarray  # (N_t, *nodes); NaN where not evaluated
    max_abs: float  # over the trust region (and evaluated slices)
    trust_mask: np.ndarray


def pointwise_hjb_residual(
    problem: ControlProblem,
    field: ValueField,
    trust_margin: float = 0.15,
    time_indices=None,
    exclude=None,
) -> ResidualResult:
    """(v_{k+1} - v_k)/dt + min_u Hhat(t_k, x, v_k) with the solver's stencils.

    ``exclude`` is an optional boolean mask over the spatial nodes left out
    of the maximum (e.g. a known kink column).
    """
    g = field.grid
    ks = range(g.time_steps) if time_indices is None else time_indices
    res = np.full((g.time_steps,) + g.shape, np.nan)
    for k in ks:
        H0, _, _ = min_discrete_hamiltonian(problem, g, g.times[k], field.values[k])
        res[k] = (field.values[k + 1] - field.values[k]) / g.dt + H0.reshape(g.shape)
    mask = g.trust_mask(trust_margin)
    if exclude is not None:
        mask = mask & ~np.asarray(exclude, dtype=bool)
    sel = res[:, mask]
    sel = sel[np.isfinite(sel)]
    return ResidualResult(res, float(np.abs(sel).max(initial=0.0)), mask)


# Superjet inequality


@dataclass
class InequalityReport:
    values: list  # (point, jet, p + min_u H)
    violations: int
    worst: float
    tolerance: float
    skipped: int = 0

    @property
    def ok(self) -> bool:
        return self.violations == 0


def superjet_inequality_check(
    problem: ControlProblem,
    v,
    points,
    jets_per_point,
    tolerance: float | None = None,
    require_accepted: bool = False,
    schedule: NeighborhoodSchedule | None = None,
) -> InequalityReport:
    """Evaluate p + min_u H(t, x, v(t, x), q, theta, u) for every supplied jet.

    ``v`` is a ValueField or a callable ``v(t, x)``. With
    ``require_accepted`` each jet is first run through the superjet test
    and rejected jets are skipped (counted in ``skipped``). The default
    tolerance is 0.05 for grid fields and 1e-8 for exact callables.
    """
    if tolerance is None:
        tolerance = 0.05 if isinstance(v, ValueField) else 1e-8
    values = []
    violations = 0
    worst = np.inf
    skipped = 0
    for (t, x), cands in zip(points, jets_per_point):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        vx = float(query(v, t, x)) if isinstance(v, ValueField) else float(np.reshape(v(t, x[None]), -1)[0])
        for jet in cands:
            if require_accepted and not test_superjet(v, (t, x), jet, schedule, horizon=problem.horizon):
                skipped += 1
                continue
            hmin, _ = hamiltonian_argmin(problem, t, x, vx, jet.q, jet.theta)
            val = jet.p + float(hmin)
            values.append(((t, x), jet, val))
            worst = min(worst, val)
            if val < -tolerance:
                violations += 1
    return InequalityReport(values, violations, float(worst), tolerance, skipped)


# Kink detection


def kink_mask(grid: Grid, v_slice, jump: float = 0.5, width: int = 2) -> np.ndarray:
    """Nodes within ``width`` cells of a slope jump larger than ``jump``."""
    v = np.asarray(v_slice, dtype=float).reshape(grid.shape)
    h = grid.spacing
    spike = np.zeros(grid.shape, dtype=bool)
    for i in range(grid.dim):
        vv = np.moveaxis(v, i, 0)
        sd = np.abs(vv[2:] - 2 * vv[1:-1] + vv[:-2]) / h[i]
        s = np.moveaxis(spike, i, 0)
        s[1:-1] |= sd > jump
    out = spike.copy()
    for i in range(grid.dim):
        grown = out.copy()
        for sh in range(1, width + 1):
            grown |= np.roll(out, sh, axis=i) & _not_wrapped(grid.shape, i, sh)
            grown |= np.roll(out, -sh, axis=i) & _not_wrapped(grid.shape, i, -sh)
        out = grown
    return out


def _not_wrapped(shape, axis, shift):
    m = np.ones(shape, dtype=bool)
    mv = np.moveaxis(m, axis, 0)
    if shift > 0:
        mv[:shift] = False
    else:
        mv[shift:] = False
    return m


class _JetCache:
    """Central jets, time derivative and kink mask per field slice, built lazily."""

    def __init__(self, field: ValueField, kink_jump: float):
        self.field = field
        self.kink_jump = kink_jump
        self._cache = {}

    def slice(self, k):
        if k not in self._cache:
            g = self.field.grid
            v = self.field.values
            q, theta = jets(g, v[k])
            kk = min(k, g.time_steps - 1)
            p = (v[kk + 1] - v[kk]) / g.dt
            kinks = kink_mask(g, v[k], self.kink_jump)
            if len(self._cache) > 8:
                self._cache.clear()
            self._cache[k] = (p, q, theta, kinks)
        return self._cache[k]

    def at(self, t, x):
        """Interpolated (p, q, theta) and kink flag at time t for points x (M, d)."""
        g = self.field.grid
        k0 = int(np.clip(np.floor(t / g.dt + 1e-9), 0, g.time_steps))
        k1 = min(k0 + 1, g.time_steps)
        w = 0.0 if k1 == k0 else (t - g.times[k0]) / g.dt
        out = []
        for comp in range(3):
            a0 = self.slice(k0)[comp]
            a1 = self.slice(k1)[comp]
            stacked = np.stack([a0, a1])
            sub = Grid(g.lo, g.hi, g.nodes, 1, g.dt)
            vals, _ = _interp(sub, stacked, w * g.dt, x)
            out.append(vals)
        idx = tuple(np.clip(np.rint((x - g.lo) / g.spacing).astype(int), 0, np.asarray(g.nodes) - 1).T)
        kink = self.slice(k0)[3][idx] | self.slice(k1)[3][idx]
        return out[0], out[1], out[2], kink


# Pair verification


@dataclass
class VerificationReport:
    value_at_start: float
    cost_estimate: Estimate
    optimality_gap: float
    hamiltonian_gap_integral: Estimate
    identity_difference: Estimate  # optimality gap minus gap integral, common random numbers
    pointwise_inequality_violations: tuple[int, float]
    verdict: Verdict
    tolerances: dict
    diagnostics: dict = field(default_factory=dict)

    @property
    def lower_bound_ok(self) -> bool:
        tol = 3 * self.cost_estimate.stderr + self.tolerances["value"]
        return self.optimality_gap >= -tol

    def metrics(self) -> list[tuple[str, float, float, float, bool]]:
        """Rows ``(metric, value, stderr, tolerance, pass)``."""
        tol = self.tolerances
        J = self.cost_estimate
        gap = self.hamiltonian_gap_integral
        vt = 3 * J.stderr + tol["value"]
        return [
            ("value_at_start", self.value_at_start, 0.0, float("nan"), True),
            ("cost", J.mean, J.stderr, float("nan"), True),
            ("optimality_gap", self.optimality_gap, J.stderr, vt, abs(self.optimality_gap) <= vt),
            ("lower_bound", self.optimality_gap, J.stderr, vt, self.lower_bound_ok),
            ("hamiltonian_gap_integral", gap.mean, gap.stderr, tol["gap"], gap.mean <= tol["gap"]),
            (
                "identity_difference",
                self.identity_difference.mean,
                self.identity_difference.stderr,
                3 * self.identity_difference.stderr + tol["identity"],
                abs(self.identity_difference.mean) <= 3 * self.identity_difference.stderr + tol["identity"],
            ),
            (
                "pointwise_inequality_violations",
                float(self.pointwise_inequality_violations[0]),
                0.0,
                tol["pointwise"],
                self.pointwise_inequality_violations[0] == 0,
            ),
            ("escape_fraction", self.diagnostics.get("escape_fraction", 0.0), 0.0, tol["escape"],
             self.diagnostics.get("escape_fraction", 0.0) <= tol["escape"]),
        ]

    def to_text(self) -> str:
        J = self.cost_estimate
        gap = self.hamiltonian_gap_integral
        ident = self.identity_difference
        n_viol, worst = self.pointwise_inequality_violations
        rows = [
            ("verdict", self.verdict.value),
            ("v(s, y)", f"{self.value_at_start:.6f}"),
            ("J(s, y; u)", f"{J.mean:.6f} +/- {J.stderr:.6f}"),
            ("optimality gap J - v", f"{self.optimality_gap:.6f}"),
            ("hamiltonian gap integral", f"{gap.mean:.6f} +/- {gap.stderr:.6f}"),
            ("identity difference", f"{ident.mean:.6f} +/- {ident.stderr:.6f}"),
            ("superjet inequality", f"{n_viol} violations (worst {worst:.4g})"),
            ("tolerances", ", ".join(f"{k}={v:g}" for k, v in self.tolerances.items())),
        ]
        rows += [(k, str(v)) for k, v in self.diagnostics.items()]
        width = max(len(k) for k, _ in rows) + 2
        lines = [f"{k:<{width}}{v}" for k, v in rows]
        return "\n".join(lines)


def verify_pair(
    problem: ControlProblem,
    field: ValueField,
    control,
    s: float,
    y,
    M: int = 10_000,
    dt: float = 0.01,
    seed: int = 0,
    gap_tol: float = 0.05,
    value_tol: float = 0.03,
    identity_tol: float = 0.05,
    pointwise_tol: float = 0.05,
    trust_margin: float = 0.15,
    escape_fraction: float = 0.05,
    kink_jump: float = 0.5,
    **regression,
) -> VerificationReport:
    """Simulate the pair, estimate J and integrate the Hamiltonian gap along paths.

    The gap at step k is H(u_k) - min(H(u) over the control set, H(u_k)),
    which is non-negative by construction; including u_k itself keeps the
    minimum honest for controls that are not lattice points. Steps within
    two cells of a detected kink of the field contribute no gap.
    """
    g = field.grid
    d = problem.state_dim
    y = np.broadcast_to(np.asarray(y, dtype=float), (d,))
    tlo, thi = g.trust_box(trust_margin)
    start_inside = bool(np.all(y >= tlo - 1e-12) and np.all(y <= thi + 1e-12))

    bundle = simulate_forward(problem, control, s, y, M, dt, seed)
    bundle, J = solve_bsde(problem, bundle, **regression)

    cache = _JetCache(field, kink_jump)
    ctrl = problem.control_set.points
    gap_path = np.zeros(M)
    escaped = np.zeros(M, dtype=bool)
    kink_steps = 0
    viol = 0
    worst_ineq = np.inf
    for k in range(bundle.steps):
        t = bundle.times[k]
        X = bundle.X[:, k]
        u = bundle.U[:, k]
        inside = np.all((X >= tlo - 1e-12) & (X <= thi + 1e-12), axis=1)
        escaped |= ~inside
        v = query(field, t, X)
        p, q, theta, kink = cache.at(t, X)
        theta = 0.5 * (theta + np.swapaxes(theta, -1, -2))
        h_u = hamiltonian(problem, t, X, v, q, theta, u, check=False)
        h_min, _ = hamiltonian_argmin(problem, t, X, v, q, theta)
        h_min = np.minimum(h_min, h_u)
        gap = h_u - h_min
        gap = np.where(kink, 0.0, gap)
        kink_steps += int(kink.sum())
        gap_path += dt * gap
        ineq = p + h_min
        use = inside & ~kink
        if use.any():
            worst_ineq = min(worst_ineq, float(ineq[use].min()))
            viol += int((ineq[use] < -pointwise_tol).sum())

    v0 = float(query(field, s, y))
    opt_gap = J.mean - v0
    gap_est = Estimate(float(gap_path.mean()), _stderr(gap_path))
    diff = bundle.Y_path[:, 0] - v0 - gap_path
    ident = Estimate(float(opt_gap - gap_est.mean), _stderr(diff))
    esc = float(escaped.mean())

    tol = {
        "gap": gap_tol,
        "value": value_tol,
        "identity": identity_tol,
        "pointwise": pointwise_tol,
        "escape": escape_fraction,
    }
    if not start_inside or esc > escape_fraction:
        verdict = Verdict.INCONCLUSIVE
    elif gap_est.mean <= gap_tol and abs(opt_gap) <= 3 * J.stderr + value_tol:
        verdict = Verdict.CERTIFIED_OPTIMAL
    elif gap_est.mean > 3 * gap_tol:
        verdict = Verdict.SUBOPTIMAL
    else:
        verdict = Verdict.INCONCLUSIVE
    diagnostics = {
        "start_inside_trust_region": start_inside,
        "escape_fraction": esc,
        "kink_skipped_steps": kink_steps,
        "feedback_clamps": int(bundle.clamps.sum()),
        "regression_fallbacks": bundle.regression_fallbacks,
        "paths": M,
        "dt": dt,
        "seed": seed,
    }
    return VerificationReport(
        value_at_start=v0,
        cost_estimate=J,
        optimality_gap=float(opt_gap),
        hamiltonian_gap_integral=gap_est,
        identity_difference=ident,
        pointwise_inequality_violations=(viol, float(worst_ineq)),
        verdict=verdict,
        tolerances=tol,
        diagnostics=diagnostics,
    )


# Feedback verification


@dataclass
class FeedbackReport:
    points: np.ndarray  # (n, 1 + d) sampled (t, x)
    residual: np.ndarray  # p + Hhat(policy)
    excess: np.ndarray  # Hhat(policy) - min Hhat
    passed: np.ndarray
    tolerance: float
    tie_tolerance: float
    superjet_accepted: float | None = None

    @property
    def pass_fraction(self) -> float:
        return float(self.passed.mean()) if len(self.passed) else 1.0


def verify_feedback(
    problem: ControlProblem,
    field: ValueField,
    policy: FeedbackPolicy,
    samples: int = 500,
    seed: int = 0,
    tolerance: float = 0.05,
    tie_tolerance: float = 0.05,
    trust_margin: float = 0.15,
    superjet_samples: int = 0,
    schedule: NeighborhoodSchedule | None = None,
) -> FeedbackReport:
    """Check p + H(t, x, v, q, theta, policy(t, x)) ~ 0 and argmin attainment at sampled nodes.

    The jet at a node is the solver's discrete one: forward time difference
    for p and the monotone spatial stencils inside H. Optionally, the
    central jets at ``superjet_samples`` of the points are run through the
    superjet test; the accepted fraction is reported. On a grid the jet
    remainder carries O(r) cross terms, so the default schedule for this
    diagnostic uses a slack linear in the radius.
    """
    g = field.grid
    if policy.grid.shape != g.shape or policy.grid.time_steps != g.time_steps:
        raise ValueError("policy and field live on different grids")
    mask = g.trust_mask(trust_margin)
    cand = np.argwhere(np.broadcast_to(mask, (g.time_steps,) + g.shape))
    rng = np.random.default_rng(seed)
    pick = cand[rng.choice(len(cand), size=min(samples, len(cand)), replace=False)]
    pick = pick[np.lexsort(pick.T[::-1])]
    pts_all = g.points()

    residual = np.empty(len(pick))
    excess = np.empty(len(pick))
    for k in np.unique(pick[:, 0]):
        rows = np.flatnonzero(pick[:, 0] == k)
        flat = np.ravel_multi_index(tuple(pick[rows, 1:].T), g.shape)
        chosen = policy.controls[k].ravel()[flat]
        best = np.full(len(rows), np.inf)
        h_pol = np.full(len(rows), np.nan)
        for c0, H, _ in discrete_hamiltonians(problem, g, g.times[k], field.values[k]):
            Hs = H[:, flat]
            best = np.minimum(best, Hs.min(axis=0))
            inside = (chosen >= c0) & (chosen < c0 + H.shape[0])
            h_pol[inside] = Hs[chosen[inside] - c0, np.flatnonzero(inside)]
        p = (field.values[k + 1].ravel()[flat] - field.values[k].ravel()[flat]) / g.dt
        residual[rows] = p + h_pol
        excess[rows] = h_pol - best
    passed = (np.abs(residual) <= tolerance) & (excess <= tie_tolerance)
    points = np.concatenate(
        [g.times[pick[:, 0]][:, None], pts_all[tuple(pick[:, 1:].T)]], axis=1
    )

    accepted = None
    if superjet_samples > 0:
        if schedule is None:
            schedule = NeighborhoodSchedule.for_grid(g, slack_scale=4.0, slack_power=1.0)
        sub = rng.choice(len(pick), size=min(superjet_samples, len(pick)), replace=False)
        ok = 0
        tested = 0
        for i in sub:
            k = int(pick[i, 0])
            j = tuple(pick[i, 1:])
            q, theta = jets(g, field.values[k])
            p = (field.values[k + 1][j] - field.values[k][j]) / g.dt
            jet = JetCandidate(p, q[j], 0.5 * (theta[j] + theta[j].T))
            try:
                ok += bool(test_superjet(field, (g.times[k], pts_all[j]), jet, schedule, trust_margin=0.0))
                tested += 1
            except ValueError:
                continue
        accepted = ok / tested if tested else float("nan")
    return FeedbackReport(points, residual, excess, passed, tolerance, tie_tolerance, accepted)
