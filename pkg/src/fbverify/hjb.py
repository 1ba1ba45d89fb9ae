"""Explicit monotone finite-difference solver for the HJB equation.

The backward recursion is

    v_k = v_{k+1} + dt * min_u Hhat(t_{k+1}, x_j, v_{k+1}; u)

where ``Hhat`` upwinds the transport term by the sign of the drift (or
differences it centrally where diffusion dominates, |b_i| h_i <= a_ii,
which is still monotone), uses
central second differences (and the 7-point cross stencil for mixed
derivatives) for the diffusion term, and feeds the central-difference
gradient times sigma into the generator's z argument.

Boundary rows use a linearly extrapolated ghost node for the diffusion
term (so the second difference vanishes there) and zero-gradient outflow
for transport pointing out of the box. Both keep the scheme monotone and
reproduce linear profiles exactly; the price is an O(1) truncation error
on the boundary that only reaches the interior through diffusion, which
is why comparisons are restricted to a trust region.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .model import ControlProblem

MAX_DIM = 3
_CHUNK = 2_000_000  # max (controls x nodes) entries evaluated at once


class CFLViolation(ValueError):
    pass


class SolverBreakdown(FloatingPointError):
    pass


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform tensor grid on a truncated box times a uniform time mesh."""

    lo: np.ndarray
    hi: np.ndarray
    nodes: tuple[int, ...]
    time_steps: int
    horizon: float

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        nodes = tuple(int(n) for n in np.broadcast_to(np.atleast_1d(self.nodes), lo.shape))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lo and hi must be vectors of equal length")
        if len(lo) > MAX_DIM:
            raise ValueError(f"grids are limited to d <= {MAX_DIM}")
        if np.any(hi <= lo):
            raise ValueError("grid needs lo < hi componentwise")
        if min(nodes) < 3:
            raise ValueError("grid needs at least 3 nodes per axis")
        if int(self.time_steps) < 1 or not self.horizon > 0:
            raise ValueError("grid needs time_steps >= 1 and a positive horizon")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "time_steps", int(self.time_steps))
        object.__setattr__(self, "horizon", float(self.horizon))

    @property
    def dim(self) -> int:
        return len(self.nodes)

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.asarray(self.nodes) - 1)

    @property
    def dt(self) -> float:
        return self.horizon / self.time_steps

    @property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(a, b, n) for a, b, n in zip(self.lo, self.hi, self.nodes)]

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.time_steps + 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.nodes

    @property
    def size(self) -> int:
        return int(np.prod(self.nodes))

    def points(self) -> np.ndarray:
        """All nodes as an array of shape ``(*nodes, d)`` in C order."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    def trust_mask(self, margin: float = 0.15) -> np.ndarray:
        """Boolean ``nodes``-shaped mask of the interior trust region."""
        lo, hi = self.trust_box(margin)
        pts = self.points()
        eps = 1e-12 * (self.hi - self.lo)
        return np.all((pts >= lo - eps) & (pts <= hi + eps), axis=-1)

    def trust_box(self, margin: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
        width = self.hi - self.lo
        return self.lo + margin * width, self.hi - margin * width

    def with_time_steps(self, n: int) -> "Grid":
        return Grid(self.lo, self.hi, self.nodes, n, self.horizon)

    @classmethod
    def for_problem(
        cls,
        problem: ControlProblem,
        lo,
        hi,
        nodes,
        time_steps: int | None = None,
        safety: float = 0.9,
    ) -> "Grid":
        """Build a grid; with ``time_steps=None`` the step is picked from the CFL bound."""
        grid = cls(lo, hi, nodes, time_steps or 1, problem.horizon)
        if time_steps is None:
            rate = cfl_rate(problem, grid)
            n = max(1, int(np.ceil(problem.horizon * rate / safety)))
            grid = grid.with_time_steps(n)
        return grid


def generator_y_lipschitz(problem: ControlProblem, grid: Grid) -> float:
    """Declared Lipschitz constant, or a probe of |df/dy| on the grid."""
    if problem.lipschitz_bound is not None:
        return float(problem.lipschitz_bound)
    pts = grid.points().reshape(-1, grid.dim)
    phi = problem.phi(pts)
    y_lo, y_hi = float(phi.min()) - 1.0, float(phi.max()) + 1.0
    ys = np.linspace(y_lo, y_hi, 9)
    ctrl = problem.control_set.points
    z = np.zeros(grid.dim)
    worst = 0.0
    for t in (0.0, 0.5 * grid.horizon, grid.horizon):
        for u in ctrl[:: max(1, len(ctrl) // 16)]:
            fv = problem.f(t, pts[:, None, :], ys[None, :], z, u)
            slope = np.abs(np.diff(fv, axis=1)) / np.diff(ys)
            worst = max(worst, float(slope.max()))
    return worst


def _coefficient_bounds(problem, grid, t_values):
    """Max of diag(sigma sigma^T) and |b| over grid x controls, per axis."""
    pts = grid.points().reshape(-1, grid.dim)
    ctrl = problem.control_set.points
    a_max = np.zeros(grid.dim)
    b_max = np.zeros(grid.dim)
    step = max(1, _CHUNK // max(1, len(pts)))
    for t in t_values:
        for c0 in range(0, len(ctrl), step):
            u = ctrl[c0 : c0 + step][:, None, :]
            b = problem.b(t, pts[None], u)
            s = problem.sigma(t, pts[None], u)
            a_diag = np.einsum("...ij,...ij->...i", s, s)
            a_max = np.maximum(a_max, a_diag.reshape(-1, grid.dim).max(axis=0))
            b_max = np.maximum(b_max, np.abs(b).reshape(-1, grid.dim).max(axis=0))
    return a_max, b_max


def cfl_rate(problem: ControlProblem, grid: Grid, t_values=None) -> float:
    """The rate R with the CFL condition reading dt * R <= 1."""
    if t_values is None:
        t_values = np.linspace(0.0, grid.horizon, 5)
    a_max, b_max = _coefficient_bounds(problem, grid, t_values)
    h = grid.spacing
    return float(np.sum(a_max / h**2) + np.sum(b_max / h) + generator_y_lipschitz(problem, grid))


def check_cfl(problem: ControlProblem, grid: Grid) -> float:
    """Return dt * rate; raise CFLViolation when it exceeds one."""
    number = grid.dt * cfl_rate(problem, grid)
    if number > 1.0 + 1e-12:
        raise CFLViolation(
            f"CFL bound violated: dt * (sum a_ii/h_i^2 + sum |b_i|/h_i + L_f) = {number:.6g} > 1 "
            f"(dt = {grid.dt:.6g}; need dt <= {grid.dt / number:.6g})"
        )
    return number


@dataclass(frozen=True, eq=False)
class ValueField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        expected = (self.grid.time_steps + 1,) + self.grid.shape
        if vals.shape != expected:
            raise ValueError(f"values have shape {vals.shape}, expected {expected}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("value field contains non-finite entries")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "ValueField":
        """Sample ``fn(t, x)`` (x of shape (..., d)) at every grid node."""
        pts = grid.points()
        vals = np.stack([np.broadcast_to(fn(t, pts), grid.shape) for t in grid.times])
        return cls(grid, vals)

    def query(self, t, x, with_clamp: bool = False):
        return query(self, t, x, with_clamp=with_clamp)

    def shifted(self, c: float) -> "ValueField":
        return ValueField(self.grid, self.values + c)


@dataclass(frozen=True, eq=False)
class FeedbackPolicy:
    grid: Grid
    controls: np.ndarray  # int indices, shape (N_t + 1, *nodes)
    control_set: object

    def __post_init__(self):
        idx = np.asarray(self.controls)
        expected = (self.grid.time_steps + 1,) + self.grid.shape
        if idx.shape != expected:
            raise ValueError(f"controls have shape {idx.shape}, expected {expected}")
        if not np.issubdtype(idx.dtype, np.integer):
            raise ValueError("policy stores integer control indices")
        if idx.min() < 0 or idx.max() >= len(self.control_set):
            raise ValueError("policy refers to controls outside the control set")
        idx = idx.astype(np.int64)
        idx.setflags(write=False)
        object.__setattr__(self, "controls", idx)

    def values(self) -> np.ndarray:
        """Control values, shape (N_t + 1, *nodes, m)."""
        return self.control_set.points[self.controls]

    def lookup(self, t, x):
        """Nearest-node control at the time slice containing t.

        Returns ``(indices, clamped)`` for points ``x`` of shape (..., d).
        """
        g = self.grid
        x = np.asarray(x, dtype=float)
        k = np.floor(np.asarray(t, dtype=float) / g.dt + 1e-9).astype(int)
        k = np.clip(k, 0, g.time_steps)
        h = g.spacing
        raw = np.rint((x - g.lo) / h).astype(int)
        nodes = np.asarray(g.nodes)
        j = np.clip(raw, 0, nodes - 1)
        clamped = np.any((x < g.lo - 1e-12) | (x > g.hi + 1e-12), axis=-1)
        k = np.broadcast_to(k, x.shape[:-1])
        idx = self.controls[(k,) + tuple(j[..., i] for i in range(g.dim))]
        return idx, clamped

    def __call__(self, t, x) -> np.ndarray:
        idx, _ = self.lookup(t, x)
        return self.control_set.points[idx]


# Interpolation


def _snap(s):
    # node coordinates reproduce stored values exactly
    r = np.rint(s)
    return np.where(np.abs(s - r) < 1e-9, r, s)


def _interp(grid: Grid, arr: np.ndarray, t, x):
    """Multilinear interpolation of ``arr`` (time axis first, then space).

    ``arr`` may carry trailing component axes. Points outside the box are
    clamped to it; the returned mask marks them.
    """
    x = np.asarray(x, dtype=float)
    d = grid.dim
    if x.shape[-1] != d:
        raise ValueError(f"points must have trailing dimension {d}")
    batch = np.broadcast_shapes(x.shape[:-1], np.shape(t))
    x = np.broadcast_to(x, batch + (d,))
    t = np.broadcast_to(np.asarray(t, dtype=float), batch)
    tail = arr.shape[1 + d :]

    clamped = np.any((x < grid.lo - 1e-12) | (x > grid.hi + 1e-12), axis=-1)
    xc = np.clip(x, grid.lo, grid.hi)
    h = grid.spacing
    nodes = np.asarray(grid.nodes)
    s = _snap((xc - grid.lo) / h)
    i0 = np.clip(np.floor(s).astype(int), 0, nodes - 2)
    w = s - i0

    tc = np.clip(t, 0.0, grid.horizon)
    st = _snap(tc / grid.dt)
    k0 = np.clip(np.floor(st).astype(int), 0, max(grid.time_steps - 1, 0))
    wt = st - k0

    out = np.zeros(batch + tail)
    for dk, tw in ((0, 1.0 - wt), (1, wt)):
        kk = np.minimum(k0 + dk, grid.time_steps)
        for corner in np.ndindex(*(2,) * d):
            weight = tw.copy()
            idx = [kk]
            for ax, c in enumerate(corner):
                weight = weight * (w[..., ax] if c else 1.0 - w[..., ax])
                idx.append(i0[..., ax] + c)
            out = out + weight.reshape(batch + (1,) * len(tail)) * arr[tuple(idx)]
    return out, clamped


def query(field: ValueField, t, x, with_clamp: bool = False):
    """Interpolate a value field: multilinear in space, linear in time.

    ``x`` has trailing dimension d. Scalars come back as floats. Points
    outside the box are clamped; pass ``with_clamp=True`` to get the mask.
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 1 and np.ndim(t) == 0
    vals, clamped = _interp(field.grid, field.values, t, x)
    if scalar:
        vals, clamped = float(vals), bool(clamped)
    return (vals, clamped) if with_clamp else vals


# Finite-difference stencils


@dataclass
class Stencils:
    """Discrete derivatives of one time slice, each flattened over nodes."""

    fwd: np.ndarray  # (N, d) forward differences, 0 on outflow boundary
    interior: np.ndarray  # (N, d) node is not on a boundary face of axis i
    bwd: np.ndarray  # (N, d)
    central: np.ndarray  # (N, d)
    second: np.ndarray  # (N, d) pure second differences, 0 on boundary
    mixed_pos: dict  # (i, j) -> (N,) 7-point stencil for a_ij >= 0
    mixed_neg: dict  # (i, j) -> (N,) 7-point stencil for a_ij < 0


def _shift(v, axis, k):
    """v shifted by k along axis with edge padding (v[j + k])."""
    n = v.shape[axis]
    idx = np.clip(np.arange(n) + k, 0, n - 1)
    return np.take(v, idx, axis=axis)


def _edge_mask(shape, axis, which):
    m = np.zeros(shape, dtype=bool)
    sl = [slice(None)] * len(shape)
    sl[axis] = 0 if which == "lo" else -1
    m[tuple(sl)] = True
    return m


def stencils(grid: Grid, v: np.ndarray) -> Stencils:
    v = np.asarray(v, dtype=float).reshape(grid.shape)
    h = grid.spacing
    d = grid.dim
    shape = grid.shape
    fwd, bwd, cen, sec = [], [], [], []
    on_boundary = []
    for i in range(d):
        vp, vm = _shift(v, i, 1), _shift(v, i, -1)
        lo_edge, hi_edge = _edge_mask(shape, i, "lo"), _edge_mask(shape, i, "hi")
        f = (vp - v) / h[i]
        b = (v - vm) / h[i]
        f[hi_edge] = 0.0
        b[lo_edge] = 0.0
        c = (vp - vm) / (2 * h[i])
        c[lo_edge] = ((vp - v) / h[i])[lo_edge]
        c[hi_edge] = ((v - vm) / h[i])[hi_edge]
        s = (vp - 2 * v + vm) / h[i] ** 2
        s[lo_edge | hi_edge] = 0.0
        fwd.append(f)
        bwd.append(b)
        cen.append(c)
        sec.append(s)
        on_boundary.append(lo_edge | hi_edge)

    mixed_pos, mixed_neg = {}, {}
    for i in range(d):
        for j in range(i + 1, d):
            pi, mi = _shift(v, i, 1), _shift(v, i, -1)
            pj, mj = _shift(v, j, 1), _shift(v, j, -1)
            pp = _shift(_shift(v, i, 1), j, 1)
            mm = _shift(_shift(v, i, -1), j, -1)
            pm = _shift(_shift(v, i, 1), j, -1)
            mp = _shift(_shift(v, i, -1), j, 1)
            den = 2 * h[i] * h[j]
            pos = (2 * v + pp + mm - pi - mi - pj - mj) / den
            neg = -(2 * v + pm + mp - pi - mi - pj - mj) / den
            bnd = on_boundary[i] | on_boundary[j]
            pos[bnd] = 0.0
            neg[bnd] = 0.0
            mixed_pos[(i, j)] = pos.ravel()
            mixed_neg[(i, j)] = neg.ravel()

    flat = lambda arrs: np.stack([a.ravel() for a in arrs], axis=-1)  # noqa: E731
    interior = ~flat(on_boundary).astype(bool)
    return Stencils(flat(fwd), interior, flat(bwd), flat(cen), flat(sec), mixed_pos, mixed_neg)


def jets(grid: Grid, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central gradient and Hessian of one slice: shapes (*nodes, d), (*nodes, d, d).

    Pure second derivatives at the boundary reuse the adjacent interior
    value (the one-sided three-point formula).
    """
    v = np.asarray(v, dtype=float).reshape(grid.shape)
    h = grid.spacing
    d = grid.dim
    grads = np.gradient(v, *h, edge_order=1) if d > 1 else [np.gradient(v, h[0], edge_order=1)]
    hess = np.empty(grid.shape + (d, d))
    for i in range(d):
        s = (_shift(v, i, 1) - 2 * v + _shift(v, i, -1)) / h[i] ** 2
        sv = np.moveaxis(s, i, 0)
        sv[0], sv[-1] = sv[1], sv[-2]
        hess[..., i, i] = s
        for j in range(i + 1, d):
            m = np.gradient(grads[j], h[i], axis=i, edge_order=1)
            hess[..., i, j] = m
            hess[..., j, i] = m
    return np.stack(grads, axis=-1), hess


# Hamiltonian


def _check_symmetric(theta):
    theta = np.asarray(theta, dtype=float)
    asym = np.abs(theta - np.swapaxes(theta, -1, -2)).max(initial=0.0)
    scale = np.abs(theta).max(initial=0.0)
    if asym > 1e-12 * max(scale, 1e-300) and asym > 0:
        raise ValueError(f"theta must be symmetric (asymmetry {asym:.3g})")
    return theta


def hamiltonian(problem: ControlProblem, t, x, psi, q, theta, u, check: bool = True):
    """H = 1/2 tr(sigma sigma^T theta) + <q, b> + f(t, x, psi, q . sigma, u).

    Broadcasts over leading axes: x, q of shape (..., d), theta (..., d, d),
    u (..., m), psi (...).
    """
    d = problem.state_dim
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x[None]
    q = np.asarray(q, dtype=float)
    if q.ndim == 0:
        q = q[None]
    theta = np.asarray(theta, dtype=float)
    if theta.ndim < 2:
        theta = np.reshape(theta, theta.shape + (1, 1)) if d == 1 else theta
    if check:
        _check_symmetric(theta)
    u = np.asarray(u, dtype=float)
    if u.ndim == 0:
        u = u[None]
    b = problem.b(t, x, u)
    s = problem.sigma(t, x, u)
    a = s @ np.swapaxes(s, -1, -2)
    diff = 0.5 * np.einsum("...ij,...ji->...", a, theta)
    drift = np.einsum("...i,...i->...", q, b)
    z = np.einsum("...i,...ij->...j", q, s)
    out = diff + drift + problem.f(t, x, psi, z, u)
    return float(out) if np.ndim(out) == 0 else out


def hamiltonian_min(problem: ControlProblem, t, x, psi, q, theta):
    """Minimum of H over the control set and the first minimising control.

    Returns ``(value, control)``; with batched inputs, arrays of both plus
    the control indices are available via :func:`hamiltonian_argmin`.
    """
    value, idx = hamiltonian_argmin(problem, t, x, psi, q, theta)
    ctrl = problem.control_set.points[idx]
    if np.ndim(value) == 0:
        return float(value), ctrl
    return value, ctrl


def hamiltonian_argmin(problem: ControlProblem, t, x, psi, q, theta):
    """Batched minimum of H over the control set; returns (values, indices)."""
    d = problem.state_dim
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x[None]
    q = np.asarray(q, dtype=float)
    if q.ndim == 0:
        q = q[None]
    theta = np.asarray(theta, dtype=float)
    if theta.ndim < 2 and d == 1:
        theta = np.reshape(theta, theta.shape + (1, 1))
    _check_symmetric(theta)
    batch = np.broadcast_shapes(np.shape(t), x.shape[:-1], np.shape(psi), q.shape[:-1], theta.shape[:-2])
    ctrl = problem.control_set.points
    best = np.full(batch, np.inf)
    arg = np.zeros(batch, dtype=np.int64)
    n = max(1, int(np.prod(batch, dtype=np.int64)))
    step = max(1, _CHUNK // n)
    nb = len(batch)
    for c0 in range(0, len(ctrl), step):
        u = ctrl[c0 : c0 + step].reshape((-1,) + (1,) * nb + (ctrl.shape[1],))
        h = hamiltonian(problem, t, x, psi, q, theta, u, check=False)
        h = np.broadcast_to(h, (u.shape[0],) + batch)
        loc = np.argmin(h, axis=0)
        val = np.take_along_axis(h, loc[None], axis=0)[0]
        better = val < best
        best = np.where(better, val, best)
        arg = np.where(better, loc + c0, arg)
    return best, arg


def discrete_hamiltonians(problem: ControlProblem, grid: Grid, t: float, v_slice, st=None, controls=None):
    """Yield ``(c0, H)`` chunks of the upwinded discrete Hamiltonian.

    ``H`` has shape (chunk, N) for the controls ``controls[c0:c0+chunk]``.
    Also yields per-chunk CFL numbers via the third tuple element.
    """
    if st is None:
        st = stencils(grid, v_slice)
    pts = grid.points().reshape(-1, grid.dim)
    v = np.asarray(v_slice, dtype=float).ravel()
    ctrl = problem.control_set.points if controls is None else controls
    h = grid.spacing
    d = grid.dim
    step = max(1, _CHUNK // len(pts))
    for c0 in range(0, len(ctrl), step):
        u = ctrl[c0 : c0 + step][:, None, :]
        b = problem.b(t, pts[None], u)
        s = problem.sigma(t, pts[None], u)
        a = s @ np.swapaxes(s, -1, -2)
        a_diag = np.diagonal(a, axis1=-2, axis2=-1)
        upwind = np.maximum(b, 0.0) * st.fwd + np.minimum(b, 0.0) * st.bwd
        # central transport stays monotone while diffusion dominates the cell Peclet number
        use_central = st.interior & (np.abs(b) * h <= a_diag)
        H = np.where(use_central, b * st.central, upwind).sum(-1)
        H += 0.5 * np.einsum("cni,ni->cn", a_diag, st.second)
        for (i, j), pos in st.mixed_pos.items():
            aij = a[..., i, j]
            H += np.where(aij >= 0, aij * pos, -aij * st.mixed_neg[(i, j)])
        z = np.einsum("ni,cnij->cnj", st.central, s)
        H += problem.f(t, pts[None], v[None], z, u)
        rate = (a_diag / h**2).sum(-1) + (np.abs(b) / h).sum(-1)
        yield c0, H, rate


def _dominance_warning(problem, grid, t, v_slice):
    if grid.dim < 2:
        return
    pts = grid.points().reshape(-1, grid.dim)
    h = grid.spacing
    ctrl = problem.control_set.points
    s = problem.sigma(t, pts[None], ctrl[:, None, :])
    a = s @ np.swapaxes(s, -1, -2)
    for i in range(grid.dim):
        off = sum(np.abs(a[..., i, j]) / (h[i] * h[j]) for j in range(grid.dim) if j != i)
        if np.any(a[..., i, i] / h[i] ** 2 < off - 1e-12):
            warnings.warn(
                "diffusion matrix is not diagonally dominant on this grid; "
                "the cross-derivative stencil is not monotone",
                RuntimeWarning,
                stacklevel=3,
            )
            return


def min_discrete_hamiltonian(problem, grid, t, v_slice):
    """Min over controls of the discrete Hamiltonian, with first argmin and max CFL rate."""
    best = None
    arg = None
    max_rate = 0.0
    for c0, H, rate in discrete_hamiltonians(problem, grid, t, v_slice):
        loc = np.argmin(H, axis=0)
        val = H[loc, np.arange(H.shape[1])]
        if best is None:
            best, arg = val, loc + c0
        else:
            better = val < best
            best = np.where(better, val, best)
            arg = np.where(better, loc + c0, arg)
        max_rate = max(max_rate, float(rate.max()))
    return best, arg, max_rate


def solve_hjb(problem: ControlProblem, grid: Grid, terminal=None) -> ValueField:
    """Backward sweep of the monotone explicit scheme.

    ``terminal`` optionally overrides Phi on the nodes (an array of the
    grid's spatial shape); used for comparison experiments.
    """
    if problem.state_dim != grid.dim:
        raise ValueError("grid dimension does not match the problem")
    check_cfl(problem, grid)
    L_f = generator_y_lipschitz(problem, grid)
    pts = grid.points()
    dt = grid.dt
    times = grid.times
    vals = np.empty((grid.time_steps + 1,) + grid.shape)
    vals[-1] = problem.phi(pts) if terminal is None else np.asarray(terminal, float).reshape(grid.shape)
    _dominance_warning(problem, grid, times[-1], vals[-1])
    for k in range(grid.time_steps - 1, -1, -1):
        H0, _, rate = min_discrete_hamiltonian(problem, grid, times[k + 1], vals[k + 1])
        if dt * (rate + L_f) > 1.0 + 1e-12:
            raise CFLViolation(
                f"CFL bound violated at t = {times[k + 1]:.6g}: dt * rate = {dt * (rate + L_f):.6g} > 1"
            )
        new = vals[k + 1].ravel() + dt * H0
        bad = ~np.isfinite(new)
        if bad.any():
            j = tuple(int(i) for i in np.unravel_index(int(np.flatnonzero(bad)[0]), grid.shape))
            raise SolverBreakdown(f"non-finite value at time index {k}, node {j}")
        vals[k] = new.reshape(grid.shape)
    return ValueField(grid, vals)


def synthesize_policy(problem: ControlProblem, grid: Grid, field: ValueField) -> FeedbackPolicy:
    """Feedback by pointwise minimisation of H at the field's central jets."""
    if field.grid is not grid and (
        field.grid.shape != grid.shape or field.grid.time_steps != grid.time_steps
    ):
        raise ValueError("field is not defined on this grid")
    pts = grid.points()
    idx = np.empty((grid.time_steps + 1,) + grid.shape, dtype=np.int64)
    for k, t in enumerate(grid.times):
        v = field.values[k]
        q, theta = jets(grid, v)
        _, arg = hamiltonian_argmin(problem, t, pts, v, q, theta)
        idx[k] = arg
    return FeedbackPolicy(grid, idx, problem.control_set)
