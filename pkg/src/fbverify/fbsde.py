"""Monte Carlo simulation of the controlled forward-backward system.

Forward: Euler-Maruyama, X_{k+1} = X_k + b dt + sigma dW_k.
Backward: least-squares Monte Carlo,

    Z_k = E[Y_{k+1} dW_k | X_k] / dt
    Y_k = E[Y_{k+1} + dt f(t_k, X_k, Y_{k+1}, Z_k, u_k) | X_k]

with the conditional expectations projected on a piecewise-linear basis
over a hypercube partition of the occupied state range (or on a global
polynomial basis).

Brownian increments are drawn from ``numpy.random.default_rng(seed)`` as
one ``standard_normal((M, N, d))`` array, i.e. path-major order: all steps
of path 0, then path 1, and so on.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .hjb import FeedbackPolicy, ValueField, query
from .model import ControlProblem


class Estimate(NamedTuple):
    mean: float
    stderr: float


@dataclass(frozen=True, eq=False)
class PathBundle:
    s: float
    y: np.ndarray
    times: np.ndarray  # (N + 1,)
    X: np.ndarray  # (M, N + 1, d)
    dW: np.ndarray  # (M, N, d)
    U: np.ndarray  # (M, N, m) applied controls
    seed: int
    clamps: np.ndarray  # (M,) feedback lookups outside the policy grid
    Y: np.ndarray | None = None  # (M, N + 1) projected values
    Z: np.ndarray | None = None  # (M, N, d)
    Y_path: np.ndarray | None = None  # (M, N + 1) pathwise accumulated values
    regression_fallbacks: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def paths(self) -> int:
        return self.X.shape[0]

    @property
    def steps(self) -> int:
        return self.X.shape[1] - 1

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def has_backward(self) -> bool:
        return self.Y is not None


def _control_fn(problem: ControlProblem, control, N: int, M: int):
    """Turn any accepted control description into ``(k, t, X) -> (U, clamped)``."""
    m = problem.control_dim
    if isinstance(control, FeedbackPolicy):
        pts = control.control_set.points

        def fn(k, t, X):
            idx, clamped = control.lookup(t, X)
            return pts[idx], clamped

        return fn
    if callable(control):

        def fn(k, t, X):
            u = np.asarray(control(t, X), dtype=float)
            if u.size == M * m:
                u = u.reshape(M, m)
            return np.broadcast_to(u, (M, m)), None

        return fn
    arr = np.asarray(control, dtype=float)
    if arr.ndim == 0 or (arr.ndim == 1 and arr.shape[0] == m):
        const = np.broadcast_to(arr, (m,))
        return lambda k, t, X: (np.broadcast_to(const, (M, m)), None)
    if arr.ndim == 1 and m == 1 and arr.shape[0] == N:
        arr = arr[:, None]
    if arr.ndim == 2 and arr.shape == (N, m):
        return lambda k, t, X: (np.broadcast_to(arr[k], (M, m)), None)
    if arr.ndim == 3 and arr.shape == (M, N, m):
        return lambda k, t, X: (arr[:, k], None)
    raise ValueError(f"cannot interpret control of shape {arr.shape} for m={m}, N={N}, M={M}")


def time_mesh(problem: ControlProblem, s: float, dt: float) -> np.ndarray:
    T = problem.horizon
    if not s < T:
        raise ValueError("start time must precede the horizon")
    n = int(round((T - s) / dt))
    if n < 1 or abs(n * dt - (T - s)) > 1e-12 * max(1.0, T):
        raise ValueError(f"dt = {dt} does not divide T - s = {T - s}")
    return s + dt * np.arange(n + 1)


def simulate_forward(
    problem: ControlProblem,
    control,
    s: float,
    y,
    M: int,
    dt: float,
    seed: int,
) -> PathBundle:
    """Euler-Maruyama paths under a feedback policy, callable, open-loop or constant control."""
    if M < 1:
        raise ValueError("need at least one path")
    d = problem.state_dim
    times = time_mesh(problem, s, dt)
    N = len(times) - 1
    y = np.broadcast_to(np.asarray(y, dtype=float), (d,)).copy()
    rng = np.random.default_rng(seed)
    dW = rng.standard_normal((M, N, d)) * np.sqrt(dt)
    ufn = _control_fn(problem, control, N, M)

    X = np.empty((M, N + 1, d))
    X[:, 0] = y
    U = np.empty((M, N, problem.control_dim))
    clamps = np.zeros(M, dtype=np.int64)
    for k in range(N):
        t = times[k]
        u, clamped = ufn(k, t, X[:, k])
        if clamped is not None:
            clamps += clamped
        U[:, k] = u
        b = problem.b(t, X[:, k], U[:, k])
        sig = problem.sigma(t, X[:, k], U[:, k])
        X[:, k + 1] = X[:, k] + b * dt + np.einsum("mij,mj->mi", sig, dW[:, k])
    return PathBundle(s=float(s), y=y, times=times, X=X, dW=dW, U=U, seed=seed, clamps=clamps)


# Regression


class Regressor:
    """Least-squares projection of path targets on functions of X_k."""

    def __init__(self, basis: str = "cells", cells_per_axis: int = 32, poly_degree: int = 2, max_cells: int = 4096):
        if basis not in ("cells", "poly"):
            raise ValueError(f"unknown regression basis {basis!r}")
        self.basis = basis
        self.cells_per_axis = cells_per_axis
        self.poly_degree = poly_degree
        self.max_cells = max_cells
        self.fallbacks = 0

    def project(self, x: np.ndarray, targets: np.ndarray) -> np.ndarray:
        """x: (M, d); targets: (M, r). Returns fitted values (M, r)."""
        if self.basis == "cells":
            return self._cells(x, targets)
        return self._poly(x, targets)

    def _cells(self, x, targets):
        M, d = x.shape
        per_axis = max(1, min(self.cells_per_axis, int(np.floor(self.max_cells ** (1.0 / d) + 1e-9))))
        lo, hi = x.min(axis=0), x.max(axis=0)
        width = np.where(hi > lo, (hi - lo) / per_axis, 1.0)
        n_axis = np.where(hi > lo, per_axis, 1)
        ij = np.clip(np.floor((x - lo) / width).astype(int), 0, n_axis - 1)
        cell = np.ravel_multi_index(tuple(ij.T), tuple(n_axis))
        n_cells = int(np.prod(n_axis))
        centre = lo + (ij + 0.5) * width
        feats = np.concatenate([np.ones((M, 1)), (x - centre) / width], axis=1)
        p = d + 1

        G = np.zeros((n_cells, p, p))
        B = np.zeros((n_cells, p, targets.shape[1]))
        np.add.at(G, cell, feats[:, :, None] * feats[:, None, :])
        np.add.at(B, cell, feats[:, :, None] * targets[:, None, :])
        counts = G[:, 0, 0]
        occupied = counts > 0
        good = occupied & (counts > p)
        if good.any():
            sv = np.linalg.svd(G[good], compute_uv=False)
            ok = sv[:, -1] > 1e-10 * sv[:, 0]
            idx = np.flatnonzero(good)
            good[idx[~ok]] = False
        coef = np.zeros_like(B)
        if good.any():
            coef[good] = np.linalg.solve(G[good], B[good])
        bad = occupied & ~good
        self.fallbacks += int(bad.sum())
        coef[bad, 0, :] = B[bad, 0, :] / counts[bad, None]
        return np.einsum("mp,mpr->mr", feats, coef[cell])

    def _poly(self, x, targets):
        M, d = x.shape
        mu, sd = x.mean(axis=0), x.std(axis=0)
        xs = (x - mu) / np.where(sd > 0, sd, 1.0)
        cols = [np.ones(M)]
        for deg in range(1, self.poly_degree + 1):
            for combo in itertools.combinations_with_replacement(range(d), deg):
                cols.append(np.prod(xs[:, combo], axis=1))
        A = np.stack(cols, axis=1)
        coef, _, rank, _ = np.linalg.lstsq(A, targets, rcond=None)
        if rank < A.shape[1]:
            self.fallbacks += 1
            return np.broadcast_to(targets.mean(axis=0), targets.shape).copy()
        return A @ coef


def _is_deterministic(problem: ControlProblem, bundle: PathBundle) -> bool:
    for k in range(bundle.steps):
        sig = problem.sigma(bundle.times[k], bundle.X[:, k], bundle.U[:, k])
        if np.any(sig != 0.0):
            return False
    return True


def solve_bsde(
    problem: ControlProblem,
    bundle: PathBundle,
    basis: str = "cells",
    cells_per_axis: int = 32,
    poly_degree: int = 2,
    max_cells: int = 4096,
) -> tuple[PathBundle, Estimate]:
    """Backward regression pass; returns the completed bundle and Y0.

    The standard error of Y0 is that of the pathwise accumulated cost
    ``Phi(X_N) + sum_k dt f(...)`` (with f evaluated at the projected Y, Z),
    whose mean matches the projected Y0 when f does not depend on y, z.
    """
    M, N, d = bundle.paths, bundle.steps, problem.state_dim
    dt = bundle.dt
    times = bundle.times
    X, U, dW = bundle.X, bundle.U, bundle.dW
    Y = np.empty((M, N + 1))
    Yp = np.empty((M, N + 1))
    Z = np.zeros((M, N, d))
    Y[:, N] = problem.phi(X[:, N])
    Yp[:, N] = Y[:, N]
    reg = Regressor(basis, cells_per_axis, poly_degree, max_cells)
    deterministic = _is_deterministic(problem, bundle)

    for k in range(N - 1, -1, -1):
        t = times[k]
        if deterministic:
            Z[:, k] = 0.0
            drive = problem.f(t, X[:, k], Y[:, k + 1], Z[:, k], U[:, k])
            Y[:, k] = Y[:, k + 1] + dt * drive
        else:
            Z[:, k] = reg.project(X[:, k], Y[:, k + 1, None] * dW[:, k]) / dt
            drive = problem.f(t, X[:, k], Y[:, k + 1], Z[:, k], U[:, k])
            Y[:, k] = reg.project(X[:, k], (Y[:, k + 1] + dt * drive)[:, None])[:, 0]
        Yp[:, k] = Yp[:, k + 1] + dt * drive

    out = replace(bundle, Y=Y, Z=Z, Y_path=Yp, regression_fallbacks=reg.fallbacks)
    return out, Estimate(float(Y[:, 0].mean()), _stderr(Yp[:, 0]))


def _stderr(samples) -> float:
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    if n < 2:
        return float("nan")
    return float(samples.std(ddof=1) / np.sqrt(n))


def estimate_cost(
    problem: ControlProblem,
    control,
    s: float,
    y,
    M: int,
    dt: float,
    seed: int,
    **regression,
) -> Estimate:
    """J(s, y; u) = Y(s), estimated by forward simulation plus backward regression."""
    bundle = simulate_forward(problem, control, s, y, M, dt, seed)
    _, y0 = solve_bsde(problem, bundle, **regression)
    return y0


def dpp_consistency(problem: ControlProblem, field: ValueField, bundle: PathBundle) -> float:
    """max_k of the cross-path mean |Y_k - v(t_k, X_k)|."""
    if not bundle.has_backward:
        raise ValueError("run solve_bsde on the bundle first")
    if abs(field.grid.horizon - problem.horizon) > 1e-12:
        raise ValueError("field and problem have different horizons")
    worst = 0.0
    for k, t in enumerate(bundle.times):
        v = query(field, t, bundle.X[:, k])
        worst = max(worst, float(np.mean(np.abs(bundle.Y[:, k] - v))))
    return worst


def bundle_summary(bundle: PathBundle) -> list[dict]:
    """Per-step means used for the CSV summary."""
    rows = []
    d = bundle.X.shape[2]
    for k, t in enumerate(bundle.times):
        row = {"k": k, "t": float(t)}
        mx = bundle.X[:, k].mean(axis=0)
        for i in range(d):
            row["meanX" if d == 1 else f"meanX{i + 1}"] = float(mx[i])
        if bundle.has_backward:
            row["meanY"] = float(bundle.Y[:, k].mean())
            mz = bundle.Z[:, min(k, bundle.steps - 1)].mean(axis=0) if k < bundle.steps else np.full(d, np.nan)
            for i in range(d):
                row["meanZ" if d == 1 else f"meanZ{i + 1}"] = float(mz[i])
            row["stderrY"] = _stderr(bundle.Y_path[:, k])
        rows.append(row)
    return rows
