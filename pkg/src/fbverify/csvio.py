"""CSV readers and writers. Floats are written with ``repr`` so output is exact and deterministic."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .hjb import FeedbackPolicy, Grid, ValueField
from .model import ControlSet


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_rows(path: Path | str, header: list[str], rows) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
            n += 1
    return n


def _node_rows(grid: Grid, arr: np.ndarray):
    """Yield (t, x..., *arr[k, j]) in time-major, C order."""
    pts = grid.points().reshape(-1, grid.dim)
    for k, t in enumerate(grid.times):
        flat = arr[k].reshape(len(pts), -1)
        for x, vals in zip(pts, flat):
            yield (t, *x, *vals)


def write_field(path, field: ValueField) -> int:
    g = field.grid
    header = ["t"] + [f"x{i + 1}" for i in range(g.dim)] + ["v"]
    return write_rows(path, header, _node_rows(g, field.values[..., None]))


def write_policy(path, policy: FeedbackPolicy) -> int:
    g = policy.grid
    m = policy.control_set.dim
    header = ["t"] + [f"x{i + 1}" for i in range(g.dim)] + [f"u{i + 1}" for i in range(m)]
    return write_rows(path, header, _node_rows(g, policy.values()))


def read_policy(path, grid: Grid, control_set: ControlSet) -> FeedbackPolicy:
    """Load a policy CSV written on ``grid``; controls snap to the nearest set element."""
    d, m = grid.dim, control_set.dim
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    expected = (grid.time_steps + 1) * grid.size
    if data.shape != (expected, 1 + d + m):
        raise ValueError(
            f"{path}: expected {expected} rows of {1 + d + m} columns, got {data.shape[0]} x {data.shape[1]}"
        )
    ref = np.concatenate([np.repeat(grid.times, grid.size)[:, None], np.tile(grid.points().reshape(-1, d), (grid.time_steps + 1, 1))], 1)
    if not np.allclose(data[:, : 1 + d], ref, atol=1e-9):
        raise ValueError(f"{path}: node coordinates do not match the configured grid")
    idx = control_set.nearest_index(data[:, 1 + d :])
    return FeedbackPolicy(grid, idx.reshape((grid.time_steps + 1,) + grid.shape), control_set)


def write_metrics(path, rows) -> int:
    return write_rows(path, ["metric", "value", "stderr", "tolerance", "pass"], rows)


def read_jet_candidates(path, d: int) -> list[tuple[int, float, np.ndarray, np.ndarray]]:
    """Rows ``p, q1..qd, theta11..thetadd`` (or one scalar theta meaning theta * I).

    Blank lines and ``#`` comments are skipped, as is a leading header row
    starting with ``p``. Returns ``(line_number, p, q, theta)`` tuples.
    """
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            cells = [c.strip() for c in row]
            if not cells or not any(cells) or cells[0].startswith("#"):
                continue
            if not out and cells[0].lower() == "p":
                continue
            try:
                vals = [float(c) for c in cells]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric entry in {row!r}") from None
            if len(vals) == 1 + d + d * d:
                theta = np.array(vals[1 + d :]).reshape(d, d)
            elif len(vals) == 2 + d:
                theta = vals[-1] * np.eye(d)
            else:
                raise ValueError(
                    f"{path}:{lineno}: expected {1 + d + d * d} (or {2 + d}) values, got {len(vals)}"
                )
            out.append((lineno, vals[0], np.array(vals[1 : 1 + d]), theta))
    return out
