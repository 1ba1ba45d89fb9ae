"""Second-order one-sided super/sub-jets and regularity diagnostics.

A triple (p, q, theta) is a superjet of v at (t0, x0) when

    limsup_{t -> t0+, x -> x0}  R(t, x) / (|t - t0| + |x - x0|^2) <= 0,
    R = v(t, x) - v(t0, x0) - p (t - t0) - <q, x - x0> - 1/2 (x - x0)' theta (x - x0)

(subjets: liminf >= 0). The limit is replaced by a finite schedule of
shrinking parabolic shells {r/2 <= max(|x - x0|, sqrt(t - t0)) <= r}; at
each radius the worst ratio over quasi-random samples must stay below a
slack that decays with r.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .hjb import ValueField, query


@dataclass(frozen=True)
class JetCandidate:
    p: float
    q: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        d = q.shape[0]
        theta = np.asarray(self.theta, dtype=float)
        if theta.ndim < 2:
            theta = np.broadcast_to(theta, (d, d)) * np.eye(d) if theta.size == 1 else theta.reshape(d, d)
        if theta.shape != (d, d):
            raise ValueError(f"theta must be {d}x{d}")
        asym = np.abs(theta - theta.T).max()
        if asym > 1e-12 * max(np.abs(theta).max(), 1e-300) and asym > 0:
            raise ValueError("theta must be symmetric")
        object.__setattr__(self, "p", float(self.p))
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "theta", np.array(theta))

    @property
    def dim(self) -> int:
        return self.q.shape[0]

    def shifted(self, dp: float = 0.0, dtheta: float = 0.0) -> "JetCandidate":
        return JetCandidate(self.p + dp, self.q, self.theta + dtheta * np.eye(self.dim))


@dataclass(frozen=True)
class NeighborhoodSchedule:
    radii: tuple[float, ...]
    samples_per_radius: int = 200
    slack_scale: float = 1e-2
    slack_power: float = 0.5

    def __post_init__(self):
        r = tuple(float(x) for x in self.radii)
        if not r or any(x <= 0 for x in r) or any(b >= a for a, b in zip(r, r[1:])):
            raise ValueError("radii must be positive and strictly decreasing")
        object.__setattr__(self, "radii", r)

    @classmethod
    def geometric(cls, largest: float, count: int = 4, ratio: float = 0.25, **kw) -> "NeighborhoodSchedule":
        return cls(tuple(largest * ratio**i for i in range(count)), **kw)

    @classmethod
    def for_grid(cls, grid, **kw) -> "NeighborhoodSchedule":
        return cls.geometric(8.0 * float(grid.spacing.max()), **kw)

    def slack(self, r: float) -> float:
        return self.slack_scale * r**self.slack_power


DEFAULT_ANALYTIC_SCHEDULE = NeighborhoodSchedule.geometric(1e-2)


@dataclass
class JetTestResult:
    accepted: bool
    worst_ratio: float
    worst_point: tuple[float, np.ndarray]
    per_radius: list[tuple[float, float, float]] = field(default_factory=list)  # (r, extreme ratio, slack)
    skipped_radii: tuple[float, ...] = ()

    def __bool__(self) -> bool:
        return self.accepted


def _shell_samples(d: int, n: int) -> np.ndarray:
    """Fixed quasi-random points (dt_scaled in [0,1], dx_scaled in [-1,1]^d) on the unit parabolic shell."""
    sob = qmc.Halton(d=d + 1, scramble=False).random(n + 1)[1:]
    dts = sob[:, 0]
    dxs = 2.0 * sob[:, 1:] - 1.0
    # push each point out to the shell max(|dx|, sqrt(dt)) >= 1/2
    size = np.maximum(np.sqrt(np.sum(dxs**2, axis=1)), np.sqrt(dts))
    size = np.where(size > 0, size, 1.0)
    scale = np.where(size < 0.5, 0.5 / size, 1.0)
    dts = np.minimum(dts * scale**2, 1.0)
    dxs = dxs * scale[:, None]
    norm = np.sqrt(np.sum(dxs**2, axis=1))
    over = norm > 1.0
    dxs[over] /= norm[over, None]
    return np.concatenate([dts[:, None], dxs], axis=1)


def _evaluator(v, horizon):
    if isinstance(v, ValueField):
        g = v.grid

        def fn(t, x):
            return query(v, t, x)

        return fn, g, g.horizon
    return v, None, horizon


def _jet_ratios(fn, point, jet: JetCandidate, r: float, unit: np.ndarray):
    t0 = float(point[0])
    x0 = np.atleast_1d(np.asarray(point[1], dtype=float))
    dt = unit[:, 0] * r**2
    dx = unit[:, 1:] * r
    t = t0 + dt
    x = x0 + dx
    v = np.asarray(fn(t, x), dtype=float)
    v0 = float(np.asarray(fn(t0, x0[None]), dtype=float).reshape(-1)[0])
    quad = 0.5 * np.einsum("ni,ij,nj->n", dx, jet.theta, dx)
    rem = v - v0 - jet.p * dt - dx @ jet.q - quad
    den = np.abs(dt) + np.sum(dx**2, axis=1)
    return rem / den, t, x


def _test(v, point, jet, schedule, horizon, trust_margin, sign):
    fn, grid, T = _evaluator(v, horizon)
    t0 = float(point[0])
    x0 = np.atleast_1d(np.asarray(point[1], dtype=float))
    if x0.shape[0] != jet.dim:
        raise ValueError("point and jet dimensions differ")
    if schedule is None:
        schedule = NeighborhoodSchedule.for_grid(grid) if grid is not None else DEFAULT_ANALYTIC_SCHEDULE
    radii = list(schedule.radii)
    skipped = []
    if grid is not None:
        floor = 2.0 * float(grid.spacing.max())
        skipped = [r for r in radii if r < floor]
        radii = [r for r in radii if r >= floor]
        if not radii:
            raise ValueError("every radius is below the grid resolution floor (2 spacings)")
        lo, hi = grid.trust_box(trust_margin)
        r0 = radii[0]
        if np.any(x0 - r0 < lo - 1e-12) or np.any(x0 + r0 > hi + 1e-12):
            raise ValueError(f"neighbourhood of {x0.tolist()} leaves the trust region")
    if T is not None and not t0 + radii[0] ** 2 <= T + 1e-15:
        raise ValueError("time samples would pass the horizon (need t0 + r^2 <= T)")
    if t0 < 0:
        raise ValueError("t0 must be non-negative")

    unit = _shell_samples(jet.dim, schedule.samples_per_radius)
    accepted = True
    worst = -np.inf
    worst_at = (t0, x0)
    per_radius = []
    for r in radii:
        ratios, t, x = _jet_ratios(fn, (t0, x0), jet, r, unit)
        score = sign * ratios  # superjet: max ratio; subjet: max of -ratio
        i = int(np.argmax(score))
        ext = float(ratios[i])
        per_radius.append((r, ext, schedule.slack(r)))
        if score[i] > schedule.slack(r):
            accepted = False
        if score[i] > worst:
            worst = float(score[i])
            worst_at = (float(t[i]), x[i].copy())
    return JetTestResult(accepted, sign * worst, worst_at, per_radius, tuple(skipped))


def test_superjet(v, point, jet: JetCandidate, schedule: NeighborhoodSchedule | None = None,
                  horizon: float | None = None, trust_margin: float = 0.15) -> JetTestResult:
    """Accept ``jet`` as an element of the right-in-time superdifferential of v at ``point``.

    ``v`` is a ValueField or a vectorised callable ``v(t, x)`` with x of
    shape (n, d). ``point`` is ``(t0, x0)``. Samples only look forward in
    time (t >= t0), so jets of the two-sided definition form a subset of
    the accepted ones.
    """
    return _test(v, point, jet, schedule, horizon, trust_margin, +1.0)


def test_subjet(v, point, jet: JetCandidate, schedule: NeighborhoodSchedule | None = None,
                horizon: float | None = None, trust_margin: float = 0.15) -> JetTestResult:
    """Mirror of :func:`test_superjet`: accept when the liminf of the ratio is >= 0."""
    return _test(v, point, jet, schedule, horizon, trust_margin, -1.0)


# these are library functions, not pytest tests
test_superjet.__test__ = False
test_subjet.__test__ = False


def semiconcavity_constant(field: ValueField, k: int, segments: int = 64, seed: int = 0) -> float:
    """Smallest C0 with axis second differences of v(t_k, .) - C0|x|^2 all <= 0.

    In d > 1 the estimate is also raised by second differences along random
    line segments through interior nodes.
    """
    g = field.grid
    v = field.values[k]
    h = g.spacing
    worst = -np.inf
    for i in range(g.dim):
        vv = np.moveaxis(v, i, 0)
        sd = (vv[2:] - 2 * vv[1:-1] + vv[:-2]) / h[i] ** 2
        worst = max(worst, float(sd.max()))
    if g.dim > 1 and segments > 0:
        rng = np.random.default_rng(seed)
        lo, hi = g.lo + h, g.hi - h
        step = float(h.min())
        centres = rng.uniform(lo + step, hi - step, (segments, g.dim))
        dirs = rng.normal(size=(segments, g.dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        t = g.times[k]
        vc = query(field, t, centres)
        vp = query(field, t, centres + step * dirs)
        vm = query(field, t, centres - step * dirs)
        worst = max(worst, float(((vp - 2 * vc + vm) / step**2).max()))
    return max(0.0, 0.5 * worst)


@dataclass(frozen=True)
class GrowthResult:
    constant: float
    coarse_constant: float
    passed: bool


def _growth_constant(values, pts, times, m, stride):
    v = values[::stride]
    tt = times[::stride]
    dt = np.diff(tt)
    weight = 1.0 + np.linalg.norm(pts, axis=-1) ** m
    incr = (v[1:] - v[:-1]) / dt.reshape((-1,) + (1,) * weight.ndim)
    return max(0.0, float((incr / weight).max()))


def growth_check(field: ValueField, m: float) -> GrowthResult:
    """Estimate C in v(t + h, x) - v(t, x) <= C (1 + |x|^m) h.

    Stability is judged by recomputing with every other time slice
    (doubled step): the two estimates must agree within a factor 2.
    """
    if m < 0:
        raise ValueError("growth exponent must be >= 0")
    g = field.grid
    pts = g.points()
    fine = _growth_constant(field.values, pts, g.times, m, 1)
    if g.time_steps >= 2:
        coarse = _growth_constant(field.values, pts, g.times, m, 2)
    else:
        coarse = fine
    finite = np.isfinite(fine) and np.isfinite(coarse)
    tiny = 1e-12
    if fine <= tiny and coarse <= tiny:
        stable = True
    else:
        lo_, hi_ = sorted((fine, coarse))
        stable = lo_ > 0 and hi_ / lo_ <= 2.0
    return GrowthResult(fine, coarse, bool(finite and stable))


@dataclass(frozen=True)
class Regularity:
    lipschitz_x: float
    holder_t: float


def regularity_check(field: ValueField, trust_margin: float = 0.15) -> Regularity:
    """Largest |dv|/|dx| (fixed t) and |dv|/|dt|^(1/2) (fixed x) over the trust region.

    Time lags run over powers of two up to the horizon, so the Hölder
    constant does not shrink artificially as the time step is refined.
    """
    g = field.grid
    mask = g.trust_mask(trust_margin)
    v = field.values
    h = g.spacing
    lip = 0.0
    for i in range(g.dim):
        dv = np.abs(np.diff(v, axis=1 + i)) / h[i]
        m = np.moveaxis(mask, i, 0)
        both = np.moveaxis(m[1:] & m[:-1], 0, i)
        if both.any():
            lip = max(lip, float(dv[:, both].max()))
    hol = 0.0
    lag = 1
    while lag <= g.time_steps:
        dv = np.abs(v[lag:] - v[:-lag])[:, mask]
        hol = max(hol, float(dv.max()) / np.sqrt(lag * g.dt))
        lag *= 2
    return Regularity(float(lip), float(hol))
