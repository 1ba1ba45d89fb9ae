"""Controlled forward-backward problems, control sets and benchmark fixtures.

Evaluators are vectorised numpy callables:

* ``drift(t, x, u)`` with ``x`` of shape ``(..., d)`` and ``u`` of shape
  ``(..., m)`` returns ``(..., d)``;
* ``diffusion(t, x, u)`` returns ``(..., d, d)``;
* ``generator(t, x, y, z, u)`` with ``y`` of shape ``(...)`` and ``z`` of
  shape ``(..., d)`` returns ``(...)``;
* ``terminal(x)`` returns ``(...)``.

Outputs are broadcast to the batch shape of the inputs, so constant
coefficients may simply return a scalar.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Evaluator = Callable[..., np.ndarray]


class EvaluatorError(ValueError):
    """A coefficient evaluator failed or returned a non-finite value."""

    def __init__(self, name: str, inputs: dict, reason: str):
        self.name = name
        self.inputs = inputs
        shown = ", ".join(f"{k}={np.asarray(v).tolist()}" for k, v in inputs.items())
        super().__init__(f"{name} evaluator failed at ({shown}): {reason}")


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Finite, ordered, duplicate-free set of controls in R^m."""

    points: np.ndarray
    box: tuple[np.ndarray, np.ndarray] | None = None
    counts: tuple[int, ...] | None = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("control set must contain at least one point")
        if len(np.unique(pts, axis=0)) != len(pts):
            raise ValueError("control set contains duplicate points")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def lattice(cls, lo, hi, counts) -> "ControlSet":
        """Tensor lattice of an axis-aligned box, lexicographically sorted."""
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        counts = tuple(int(c) for c in np.broadcast_to(np.atleast_1d(counts), lo.shape))
        if np.any(hi < lo):
            raise ValueError("control box needs lo <= hi")
        axes = []
        for a, b, n in zip(lo, hi, counts):
            if n < 1:
                raise ValueError("control lattice needs at least one point per axis")
            if n == 1 or a == b:
                axes.append(np.array([0.5 * (a + b)]))
            else:
                ax = np.linspace(a, b, n)
                ax[np.abs(ax) < 1e-12 * max(abs(a), abs(b))] = 0.0
                axes.append(ax)
        pts = np.array(list(itertools.product(*axes)), dtype=float)
        return cls(pts, box=(lo, hi), counts=tuple(len(a) for a in axes))

    @classmethod
    def from_points(cls, points) -> "ControlSet":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        return cls(pts)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]

    def __getitem__(self, idx):
        return self.points[idx]

    @property
    def step(self) -> np.ndarray:
        """Per-axis lattice spacing (zero for degenerate axes or explicit sets)."""
        if self.box is None or self.counts is None:
            return np.zeros(self.dim)
        lo, hi = self.box
        n = np.asarray(self.counts)
        return np.where(n > 1, (hi - lo) / np.maximum(n - 1, 1), 0.0)

    def nearest_index(self, u) -> np.ndarray:
        """Index of the closest control (first one on ties)."""
        u = np.asarray(u, dtype=float)
        if u.ndim == 0:
            u = u[None]
        d2 = ((u[..., None, :] - self.points) ** 2).sum(-1)
        return np.argmin(d2, axis=-1)


@dataclass(frozen=True, eq=False)
class ControlProblem:
    state_dim: int
    control_dim: int
    horizon: float
    drift: Evaluator
    diffusion: Evaluator
    generator: Evaluator
    terminal: Evaluator
    control_set: ControlSet
    lipschitz_bound: float | None = None
    name: str = "custom"
    exact_value: Evaluator | None = field(default=None, repr=False)
    exact_feedback: Evaluator | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.state_dim < 1 or self.control_dim < 1:
            raise ValueError("state_dim and control_dim must be >= 1")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.control_set.dim != self.control_dim:
            raise ValueError(
                f"control set lives in R^{self.control_set.dim}, expected R^{self.control_dim}"
            )

    # Broadcasting wrappers around the raw evaluators.

    @staticmethod
    def _batch(*shapes) -> tuple[int, ...]:
        return np.broadcast_shapes(*shapes)

    def b(self, t, x, u) -> np.ndarray:
        x, u = np.asarray(x, float), np.asarray(u, float)
        batch = self._batch(np.shape(t), x.shape[:-1], u.shape[:-1])
        out = np.asarray(self.drift(t, x, u), dtype=float)
        return np.broadcast_to(out, batch + (self.state_dim,))

    def sigma(self, t, x, u) -> np.ndarray:
        x, u = np.asarray(x, float), np.asarray(u, float)
        batch = self._batch(np.shape(t), x.shape[:-1], u.shape[:-1])
        d = self.state_dim
        out = np.asarray(self.diffusion(t, x, u), dtype=float)
        if d == 1 and out.shape[-2:] != (1, 1):
            out = out[..., None, None] if out.ndim <= len(batch) else out[..., None]
        return np.broadcast_to(out, batch + (d, d))

    def f(self, t, x, y, z, u) -> np.ndarray:
        x, z, u = np.asarray(x, float), np.asarray(z, float), np.asarray(u, float)
        batch = self._batch(np.shape(t), x.shape[:-1], np.shape(y), z.shape[:-1], u.shape[:-1])
        out = np.asarray(self.generator(t, x, y, z, u), dtype=float)
        return np.broadcast_to(out, batch)

    def phi(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        out = np.asarray(self.terminal(x), dtype=float)
        return np.broadcast_to(out, x.shape[:-1])

    def value(self, t, x) -> np.ndarray:
        """Closed-form value function, when the fixture ships one."""
        if self.exact_value is None:
            raise ValueError(f"problem {self.name!r} has no closed-form value")
        x = np.asarray(x, float)
        batch = self._batch(np.shape(t), x.shape[:-1])
        return np.broadcast_to(np.asarray(self.exact_value(t, x), dtype=float), batch)


@dataclass(frozen=True)
class LipschitzReport:
    ratios: dict[str, float]
    declared: float | None
    slack: float
    samples: int

    @property
    def violations(self) -> dict[str, float]:
        if self.declared is None:
            return {}
        bound = self.declared * self.slack
        return {k: r for k, r in self.ratios.items() if r > bound}

    @property
    def violated(self) -> bool:
        return bool(self.violations)


def _checked(name, fn, inputs: dict):
    """Evaluate a batch; on failure, locate the first offending sample."""
    try:
        out = np.asarray(fn(*inputs.values()), dtype=float)
        if np.all(np.isfinite(out)):
            return out
    except Exception:  # noqa: BLE001 - re-raised with the offending input below
        pass
    n = len(next(iter(inputs.values())))
    for i in range(n):
        row = {k: np.asarray(v)[i] for k, v in inputs.items()}
        try:
            val = np.asarray(fn(*row.values()), dtype=float)
        except Exception as exc:  # noqa: BLE001
            raise EvaluatorError(name, row, repr(exc)) from exc
        if not np.all(np.isfinite(val)):
            raise EvaluatorError(name, row, "non-finite output")
    raise EvaluatorError(name, {}, "batch evaluation failed but no single sample did")


def lipschitz_probe(
    problem: ControlProblem,
    samples: int = 1000,
    seed: int = 0,
    box: tuple | None = None,
    slack: float = 1.01,
) -> LipschitzReport:
    """Largest observed difference quotients of b, sigma, f and Phi.

    Pairs are drawn in three flavours (x only, u only, both) so that a
    pure state- or control-Lipschitz defect is not diluted by the other
    coordinate. ``box`` is ``(lo, hi)`` for x, y and z; defaults to [-5, 5].
    """
    if samples < 2:
        raise ValueError("lipschitz_probe needs at least 2 samples")
    d, m = problem.state_dim, problem.control_dim
    lo, hi = (-5.0, 5.0) if box is None else box
    lo = np.broadcast_to(np.asarray(lo, float), (d,))
    hi = np.broadcast_to(np.asarray(hi, float), (d,))
    rng = np.random.default_rng(seed)
    n = samples
    T = problem.horizon
    ctrl = problem.control_set.points

    t = rng.uniform(0.0, T, n)
    x = rng.uniform(lo, hi, (n, d))
    x2 = rng.uniform(lo, hi, (n, d))
    u = ctrl[rng.integers(len(ctrl), size=n)]
    u2 = ctrl[rng.integers(len(ctrl), size=n)]
    ylo, yhi = float(lo.min()), float(hi.max())
    y = rng.uniform(ylo, yhi, n)
    y2 = rng.uniform(ylo, yhi, n)
    z = rng.uniform(ylo, yhi, (n, d))
    z2 = rng.uniform(ylo, yhi, (n, d))

    kind = np.arange(n) % 3  # 0: vary x only, 1: vary u only, 2: vary both
    x2 = np.where((kind == 1)[:, None], x, x2)
    u2 = np.where((kind == 0)[:, None], u, u2)
    y2 = np.where(kind == 1, y, y2)
    z2 = np.where((kind == 1)[:, None], z, z2)

    def ratio(g1, g2, *diffs):
        num = np.sqrt(((g1 - g2).reshape(n, -1) ** 2).sum(axis=1))
        den = np.sqrt(sum((dd.reshape(n, -1) ** 2).sum(axis=1) for dd in diffs))
        ok = den > 1e-12
        return float(np.max(num[ok] / den[ok], initial=0.0))

    ratios = {}
    b1 = _checked("drift", problem.b, {"t": t, "x": x, "u": u})
    b2 = _checked("drift", problem.b, {"t": t, "x": x2, "u": u2})
    ratios["drift"] = ratio(b1, b2, x - x2, u - u2)
    s1 = _checked("diffusion", problem.sigma, {"t": t, "x": x, "u": u})
    s2 = _checked("diffusion", problem.sigma, {"t": t, "x": x2, "u": u2})
    ratios["diffusion"] = ratio(s1, s2, x - x2, u - u2)
    f1 = _checked("generator", problem.f, {"t": t, "x": x, "y": y, "z": z, "u": u})
    f2 = _checked("generator", problem.f, {"t": t, "x": x2, "y": y2, "z": z2, "u": u2})
    ratios["generator"] = ratio(f1, f2, x - x2, y - y2, z - z2, u - u2)
    xt = np.where((kind == 1)[:, None], rng.uniform(lo, hi, (n, d)), x2)
    p1 = _checked("terminal", problem.phi, {"x": x})
    p2 = _checked("terminal", problem.phi, {"x": xt})
    ratios["terminal"] = ratio(p1, p2, x - xt)
    return LipschitzReport(ratios, problem.lipschitz_bound, slack, n)


# Benchmark fixtures


def _lq1d() -> ControlProblem:
    T = 1.0

    def value(t, x):
        tau = 1.0 + T - np.asarray(t, float)
        x = np.asarray(x, float)[..., 0]
        return x**2 / tau + np.log(tau)

    def feedback(t, x):
        tau = 1.0 + T - np.asarray(t, float)
        return -np.asarray(x, float) / np.asarray(tau)[..., None]

    return ControlProblem(
        state_dim=1,
        control_dim=1,
        horizon=T,
        drift=lambda t, x, u: u,
        diffusion=lambda t, x, u: 1.0,
        generator=lambda t, x, y, z, u: u[..., 0] ** 2,
        terminal=lambda x: x[..., 0] ** 2,
        control_set=ControlSet.lattice(-3.0, 3.0, 121),
        name="lq1d",
        exact_value=value,
        exact_feedback=feedback,
    )


def _kink1d() -> ControlProblem:
    T = 1.0

    def value(t, x):
        return -(np.abs(np.asarray(x, float)[..., 0]) + (T - np.asarray(t, float)))

    def feedback(t, x):
        return np.where(np.asarray(x, float) < 0, -1.0, 1.0)

    return ControlProblem(
        state_dim=1,
        control_dim=1,
        horizon=T,
        drift=lambda t, x, u: u,
        diffusion=lambda t, x, u: 0.0,
        generator=lambda t, x, y, z, u: 0.0,
        terminal=lambda x: -np.abs(x[..., 0]),
        control_set=ControlSet.lattice(-1.0, 1.0, 21),
        name="kink1d",
        exact_value=value,
        exact_feedback=feedback,
    )


def _martingale1d() -> ControlProblem:
    return ControlProblem(
        state_dim=1,
        control_dim=1,
        horizon=1.0,
        drift=lambda t, x, u: 0.0,
        diffusion=lambda t, x, u: 1.0,
        generator=lambda t, x, y, z, u: 0.0,
        terminal=lambda x: x[..., 0],
        control_set=ControlSet.from_points([0.0]),
        name="martingale1d",
        exact_value=lambda t, x: np.asarray(x, float)[..., 0] + 0.0 * np.asarray(t, float),
    )


BUILTINS = {"lq1d": _lq1d, "kink1d": _kink1d, "martingale1d": _martingale1d}


def builtin(name: str) -> ControlProblem:
    """Return one of the benchmark problems with a known solution."""
    try:
        return BUILTINS[name]()
    except KeyError:
        raise ValueError(
            f"unknown builtin problem {name!r}; available: {', '.join(sorted(BUILTINS))}"
        ) from None
