"""Command-line front end: ``fbverify {solve,policy,cost,verify,jets} --config run.ini``.

Exit status: 0 success (or CERTIFIED_OPTIMAL for ``verify``), 2 SUBOPTIMAL,
3 INCONCLUSIVE, 1 any error (bad config, CFL violation, malformed input).
"""
from __future__ import annotations

import argparse
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .csvio import read_jet_candidates, read_policy, write_field, write_metrics, write_policy, write_rows
from .fbsde import bundle_summary, simulate_forward, solve_bsde
from .hjb import CFLViolation, Grid, SolverBreakdown, check_cfl, hamiltonian_argmin, query, solve_hjb, synthesize_policy
from .model import EvaluatorError
from .subdiff import JetCandidate, NeighborhoodSchedule, test_subjet, test_superjet
from .verify import Verdict, verify_feedback, verify_pair

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CODES = {Verdict.CERTIFIED_OPTIMAL: 0, Verdict.SUBOPTIMAL: 2, Verdict.INCONCLUSIVE: 3}


class _Parser(argparse.ArgumentParser):
    # exit 2 is reserved for SUBOPTIMAL
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fbverify", description="Solve, simulate and verify stochastic control problems.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", required=True, help="INI run configuration")
        sp.add_argument("--seed", type=int, help="override [mc] seed")
        sp.add_argument("--paths", type=int, help="override [mc] paths")
        sp.add_argument("--out", help="override [output] directory")
        return sp

    common(sub.add_parser("solve", help="solve the HJB equation; writes field.csv"))
    common(sub.add_parser("policy", help="solve and synthesize the feedback policy; writes policy.csv"))
    common(sub.add_parser("cost", help="estimate J(s, y; u) by forward-backward simulation"))
    common(sub.add_parser("verify", help="run the verification test; exit status encodes the verdict"))
    jp = common(sub.add_parser("jets", help="test candidate jets at a point; writes jets.csv"))
    jp.add_argument("--point", help="t,x1,...,xd (overrides [jets] point)")
    jp.add_argument("--candidates", help="candidate CSV (overrides [jets] candidates)")
    return p


# Shared plumbing


def _setup(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.mc["seed"] = args.seed
    if args.paths is not None:
        if args.paths < 1:
            raise ConfigError("--paths must be positive")
        cfg.mc["paths"] = args.paths
    out = Path(args.out if args.out is not None else cfg.base_dir / cfg.output["directory"])
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _manifest(out: Path, command: str, cfg: RunConfig, args) -> None:
    overrides = " ".join(
        f"{k}={getattr(args, k)}" for k in ("seed", "paths", "out", "point", "candidates") if getattr(args, k, None) is not None
    )
    line = (
        f"command={command} config_sha256={cfg.digest} seed={cfg.mc['seed']} "
        f"fbverify={__version__} numpy={np.__version__} scipy={scipy.__version__} "
        f"python={platform.python_version()}"
    )
    if overrides:
        line += " overrides=" + overrides.replace(" ", ",")
    with open(out / "manifest.txt", "a") as fh:
        fh.write(line + "\n")


def _grid(cfg: RunConfig) -> Grid:
    prob = cfg.problem
    d = prob.state_dim
    g = cfg.grid
    try:
        lo, hi = (np.broadcast_to(np.asarray(g[k], float), (d,)) for k in ("lo", "hi"))
        nodes = np.broadcast_to(np.asarray(g["nodes"]), (d,))
    except ValueError:
        raise ConfigError(f"[grid] lo, hi and nodes need 1 or {d} entries") from None
    return Grid.for_problem(prob, lo, hi, tuple(nodes), g["time_steps"], g["safety"])


def _solve(cfg: RunConfig):
    grid = _grid(cfg)
    return grid, solve_hjb(cfg.problem, grid)


def _want(cfg, fmt):
    return fmt in cfg.output["formats"]


def _control(cfg: RunConfig, need_field: bool):
    """Resolve [mc] control; returns (control, grid, field, policy)."""
    kind, arg = cfg.mc["control"]
    prob = cfg.problem
    grid = field = policy = None
    if kind in ("policy", "csv") or need_field:
        grid, field = _solve(cfg)
    if kind == "policy":
        policy = synthesize_policy(prob, grid, field)
        control = policy
    elif kind == "csv":
        path = Path(arg) if Path(arg).is_absolute() else cfg.base_dir / arg
        policy = read_policy(path, grid, prob.control_set)
        control = policy
    elif kind == "exact":
        if prob.exact_feedback is None:
            raise ConfigError(f"problem {prob.name!r} has no closed-form feedback")
        control = prob.exact_feedback
    else:
        u = np.broadcast_to(np.asarray(arg, float), (prob.control_dim,))
        control = u.copy()
    return control, grid, field, policy


def _mc_args(cfg: RunConfig) -> dict:
    if cfg.mc["seed"] is None:
        raise ConfigError("Monte Carlo needs a seed ([mc] seed or --seed)")
    mc = cfg.mc
    d = cfg.problem.state_dim
    return {
        "s": mc["start_time"],
        "y": np.broadcast_to(np.asarray(mc["start_state"], float), (d,)).copy(),
        "M": mc["paths"],
        "dt": mc["dt"],
        "seed": mc["seed"],
    }


def _regression(cfg: RunConfig) -> dict:
    return {k: cfg.mc[k] for k in ("basis", "cells_per_axis", "poly_degree")}


# Commands


def cmd_solve(cfg: RunConfig, out: Path) -> int:
    prob = cfg.problem
    grid, field = _solve(cfg)
    lines = [
        f"problem        {prob.name}",
        f"box            {grid.lo.tolist()} .. {grid.hi.tolist()}",
        f"nodes          {list(grid.nodes)}",
        f"spacing        {grid.spacing.tolist()}",
        f"time_steps     {grid.time_steps}",
        f"dt             {grid.dt:.6g}",
        f"cfl_number     {check_cfl(prob, grid):.6g}",
        f"v(0, centre)   {float(query(field, 0.0, 0.5 * (grid.lo + grid.hi))):.8g}",
    ]
    if prob.exact_value is not None:
        mask = grid.trust_mask(cfg.verify["trust_margin"])
        err0 = np.abs(field.values[0] - prob.value(0.0, grid.points()))[mask].max()
        err = np.abs(field.values - np.stack([prob.value(t, grid.points()) for t in grid.times]))[:, mask].max()
        lines.append(f"max_err_t0     {err0:.6g}  (trust region, against the closed form)")
        lines.append(f"max_err        {err:.6g}")
    summary = "\n".join(lines)
    if _want(cfg, "csv"):
        n = write_field(out / "field.csv", field)
        summary += f"\nrows           {n}"
    if _want(cfg, "text"):
        (out / "solve_summary.txt").write_text(summary + "\n")
    print(summary)
    return EXIT_OK


def cmd_policy(cfg: RunConfig, out: Path) -> int:
    prob = cfg.problem
    grid, field = _solve(cfg)
    policy = synthesize_policy(prob, grid, field)
    lines = [f"problem        {prob.name}", f"controls       {len(prob.control_set)}"]
    if prob.exact_feedback is not None:
        mask = grid.trust_mask(cfg.verify["trust_margin"])
        ex = np.stack([np.asarray(prob.exact_feedback(t, grid.points()), float) for t in grid.times[:-1]])
        err = np.abs(policy.values()[:-1] - ex)[:, mask].max()
        lines.append(f"max_err        {err:.6g}  (trust region, t < T, against the closed form)")
    if _want(cfg, "csv"):
        n = write_policy(out / "policy.csv", policy)
        lines.append(f"rows           {n}")
    summary = "\n".join(lines)
    if _want(cfg, "text"):
        (out / "policy_summary.txt").write_text(summary + "\n")
    print(summary)
    return EXIT_OK


def cmd_cost(cfg: RunConfig, out: Path) -> int:
    mc = _mc_args(cfg)
    control, *_ = _control(cfg, need_field=False)
    bundle = simulate_forward(cfg.problem, control, **mc)
    bundle, J = solve_bsde(cfg.problem, bundle, **_regression(cfg))
    rows = bundle_summary(bundle)
    if _want(cfg, "csv"):
        header = list(rows[0])
        write_rows(out / "bundle.csv", header, ([r[h] for h in header] for r in rows))
    text = (
        f"J(s, y; u)     {J.mean:.8g} +/- {J.stderr:.3g}\n"
        f"paths          {mc['M']}\n"
        f"dt             {mc['dt']}\n"
        f"seed           {mc['seed']}\n"
        f"clamps         {int(bundle.clamps.sum())}\n"
        f"fallbacks      {bundle.regression_fallbacks}"
    )
    if _want(cfg, "text"):
        (out / "cost_summary.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_verify(cfg: RunConfig, out: Path) -> int:
    mc = _mc_args(cfg)
    v = cfg.verify
    control, grid, field, policy = _control(cfg, need_field=True)
    report = verify_pair(
        cfg.problem,
        field,
        control,
        gap_tol=v["gap_tol"],
        value_tol=v["value_tol"],
        identity_tol=v["identity_tol"],
        pointwise_tol=v["pointwise_tol"],
        trust_margin=v["trust_margin"],
        escape_fraction=v["escape_fraction"],
        kink_jump=v["kink_jump"],
        **mc,
        **_regression(cfg),
    )
    if policy is not None and v["feedback_samples"] > 0:
        fb = verify_feedback(
            cfg.problem,
            field,
            policy,
            samples=v["feedback_samples"],
            seed=mc["seed"],
            tolerance=v["pointwise_tol"],
            trust_margin=v["trust_margin"],
            superjet_samples=v["superjet_samples"],
        )
        report.diagnostics["feedback_pass_fraction"] = fb.pass_fraction
        if fb.superjet_accepted is not None:
            report.diagnostics["feedback_superjet_accepted"] = fb.superjet_accepted
    text = report.to_text()
    if _want(cfg, "text"):
        (out / "report.txt").write_text(text + "\n")
    if _want(cfg, "csv"):
        write_metrics(out / "report.csv", report.metrics())
    print(text)
    return EXIT_CODES[report.verdict]


def _parse_point(text: str, d: int) -> tuple[float, np.ndarray]:
    try:
        vals = [float(s) for s in text.split(",")]
    except ValueError:
        raise ConfigError(f"point must be t,x1,...,xd, got {text!r}") from None
    if len(vals) != 1 + d:
        raise ConfigError(f"point needs {1 + d} numbers (t and {d} coordinates)")
    return vals[0], np.array(vals[1:])


def cmd_jets(cfg: RunConfig, out: Path, point_arg=None, cand_arg=None) -> int:
    prob = cfg.problem
    d = prob.state_dim
    j = cfg.jets
    if point_arg is not None:
        t0, x0 = _parse_point(point_arg, d)
    elif j["point"] is not None:
        t0, x0 = _parse_point(",".join(map(str, j["point"])), d)
    else:
        raise ConfigError("jets needs a point ([jets] point or --point)")
    cand_path = cand_arg if cand_arg is not None else j["candidates"]
    if cand_path is None:
        raise ConfigError("jets needs a candidate file ([jets] candidates or --candidates)")
    cand_path = Path(cand_path)
    if cand_arg is None and not cand_path.is_absolute():
        cand_path = cfg.base_dir / cand_path
    rows = read_jet_candidates(cand_path, d)

    if j["field"] == "exact":
        if prob.exact_value is None:
            raise ConfigError(f"problem {prob.name!r} has no closed-form value; use [jets] field = solved")
        v = prob.value
        largest = j["largest_radius"] or 1e-2
        v0 = float(prob.value(t0, x0))
    else:
        _, v = _solve(cfg)
        largest = j["largest_radius"] or 8.0 * float(v.grid.spacing.max())
        v0 = float(query(v, t0, x0))
    sched = NeighborhoodSchedule.geometric(largest, count=j["radii"], samples_per_radius=j["samples"])

    header = (
        ["p"] + [f"q{i + 1}" for i in range(d)] + [f"theta{a + 1}{b + 1}" for a in range(d) for b in range(d)]
        + ["superjet", "superjet_worst_ratio", "subjet", "subjet_worst_ratio", "p_plus_min_h"]
    )
    out_rows = []
    for _, p, q, theta in rows:
        jet = JetCandidate(p, q, theta)
        sup = test_superjet(v, (t0, x0), jet, sched, horizon=prob.horizon, trust_margin=cfg.verify["trust_margin"])
        sub = test_subjet(v, (t0, x0), jet, sched, horizon=prob.horizon, trust_margin=cfg.verify["trust_margin"])
        hmin, _ = hamiltonian_argmin(prob, t0, x0, v0, jet.q, jet.theta)
        out_rows.append(
            [jet.p, *jet.q, *jet.theta.ravel(), sup.accepted, sup.worst_ratio, sub.accepted, sub.worst_ratio,
             jet.p + float(hmin)]
        )
    write_rows(out / "jets.csv", header, out_rows)
    acc = sum(r[1 + d + d * d] for r in out_rows)
    print(f"{len(out_rows)} candidates, {acc} accepted as superjets at t={t0:g}, x={x0.tolist()}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, out = _setup(args)
        if args.command == "jets":
            code = cmd_jets(cfg, out, args.point, args.candidates)
        else:
            code = {"solve": cmd_solve, "policy": cmd_policy, "cost": cmd_cost, "verify": cmd_verify}[args.command](cfg, out)
        _manifest(out, args.command, cfg, args)
        return code
    except (ConfigError, CFLViolation, SolverBreakdown, EvaluatorError, ValueError, OSError) as e:
        print(f"fbverify {args.command}: error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
