"""INI run configuration.

Sections and keys (unknown sections or keys are errors)::

    [problem]
    name = lq1d                 ; a builtin, or
    kind = custom               ; polynomial coefficients below
    state_dim = 1
    control_dim = 1
    horizon = 1.0
    control_lo = -3             ; scalar or comma list (one per control axis)
    control_hi = 3
    control_points = 121        ; lattice points per axis
    lipschitz_bound = 1.0       ; optional
    drift1 = 1 u1               ; b_i, one key per state axis
    diffusion11 = 1             ; sigma_ij, missing entries are 0
    generator = 1 u1^2          ; f(t, x, y, z, u)
    terminal = 1 x1^2           ; Phi(x)

    [grid]
    lo = -4
    hi = 4
    nodes = 161
    time_steps = auto           ; or an integer
    safety = 0.9

    [mc]
    paths = 10000
    dt = 0.01
    seed = 0
    basis = cells               ; or poly
    cells_per_axis = 32
    poly_degree = 2
    start_time = 0
    start_state = 0
    control = policy            ; policy | constant <u1,...> | csv <path> | exact

    [verify]
    gap_tol, value_tol, identity_tol, pointwise_tol = 0.05, 0.03, 0.05, 0.05
    trust_margin = 0.15
    escape_fraction = 0.05
    feedback_samples = 500
    superjet_samples = 0
    kink_jump = 0.5

    [jets]
    field = exact               ; or solved
    point = 0.5, 0              ; t, x1, ..., xd
    candidates = jets.csv
    largest_radius = 0.01       ; optional; default depends on the field
    radii = 4
    samples = 200

    [output]
    directory = out
    formats = csv, text

Polynomial grammar: a coefficient is a ``;``-separated list of terms. A
term is a number followed by whitespace-separated factors ``var`` or
``var^k`` with ``var`` in ``t, x1.., u1.., y, z1..`` (``y`` and ``z`` only
in the generator). Example: ``0.5 x1^2; -1 u1 z1; 2``.
"""
from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ControlProblem, ControlSet, builtin

SECTIONS = {
    "problem": {
        "name", "kind", "state_dim", "control_dim", "horizon", "control_lo", "control_hi",
        "control_points", "lipschitz_bound", "generator", "terminal",
    },
    "grid": {"lo", "hi", "nodes", "time_steps", "safety"},
    "mc": {
        "paths", "dt", "seed", "basis", "cells_per_axis", "poly_degree", "start_time",
        "start_state", "control",
    },
    "verify": {
        "gap_tol", "value_tol", "identity_tol", "pointwise_tol", "trust_margin",
        "escape_fraction", "feedback_samples", "superjet_samples", "kink_jump",
    },
    "jets": {"field", "point", "candidates", "largest_radius", "radii", "samples"},
    "output": {"directory", "formats"},
}
_INDEXED = {"problem": re.compile(r"^(drift\d+|diffusion\d+)$")}


class ConfigError(ValueError):
    pass


# Polynomial coefficients

_FACTOR = re.compile(r"^(t|y|[xuz]\d+)(?:\^(\d+))?$")


@dataclass(frozen=True)
class Polynomial:
    terms: tuple[tuple[float, tuple[tuple[str, int], ...]], ...]
    source: str = ""

    @classmethod
    def parse(cls, text: str, allowed: set[str], key: str) -> "Polynomial":
        terms = []
        for raw in text.split(";"):
            raw = raw.strip()
            if not raw:
                continue
            parts = raw.split()
            try:
                coef = float(parts[0])
            except ValueError:
                raise ConfigError(f"{key}: term {raw!r} must start with a number") from None
            factors = []
            for tok in parts[1:]:
                m = _FACTOR.match(tok)
                if not m:
                    raise ConfigError(f"{key}: cannot parse factor {tok!r}")
                var = m.group(1)
                if var not in allowed:
                    raise ConfigError(f"{key}: variable {var!r} is not allowed here")
                factors.append((var, int(m.group(2) or 1)))
            terms.append((coef, tuple(factors)))
        return cls(tuple(terms), text)

    def variables(self) -> set[str]:
        return {v for _, fs in self.terms for v, _ in fs}

    def __call__(self, env: dict) -> np.ndarray:
        shape = np.broadcast_shapes(*(np.shape(a) for a in env.values())) if env else ()
        out = np.zeros(shape)
        for coef, factors in self.terms:
            term = np.full(shape, coef)
            for var, k in factors:
                term = term * env[var] ** k
            out = out + term
        return out


def _env(t, x=None, u=None, y=None, z=None):
    env = {"t": np.asarray(t, float)}
    for name, arr in (("x", x), ("u", u), ("z", z)):
        if arr is not None:
            arr = np.asarray(arr, float)
            for i in range(arr.shape[-1]):
                env[f"{name}{i + 1}"] = arr[..., i]
    if y is not None:
        env["y"] = np.asarray(y, float)
    return env


def _names(prefix, n):
    return {f"{prefix}{i + 1}" for i in range(n)}


def _floats(text: str, key: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {text!r}") from None


def _custom_problem(sec) -> ControlProblem:
    try:
        d = int(sec.get("state_dim", "1"))
        m = int(sec.get("control_dim", "1"))
        T = float(sec["horizon"])
    except KeyError as e:
        raise ConfigError(f"[problem] kind = custom needs {e.args[0]}") from None
    except ValueError as e:
        raise ConfigError(f"[problem] {e}") from None
    xs, us, zs = _names("x", d), _names("u", m), _names("z", d)
    base = {"t"} | xs | us
    drift = []
    for i in range(d):
        drift.append(Polynomial.parse(sec.get(f"drift{i + 1}", "0"), base, f"drift{i + 1}"))
    diff = [
        [Polynomial.parse(sec.get(f"diffusion{i + 1}{j + 1}", "0"), base, f"diffusion{i + 1}{j + 1}") for j in range(d)]
        for i in range(d)
    ]
    for key in sec:
        m_ = _INDEXED["problem"].match(key)
        if m_:
            idx = key[len("drift"):] if key.startswith("drift") else key[len("diffusion"):]
            ok = (key.startswith("drift") and idx.isdigit() and 1 <= int(idx) <= d) or (
                key.startswith("diffusion") and len(idx) == 2 and all(1 <= int(c) <= d for c in idx)
            )
            if not ok:
                raise ConfigError(f"[problem] {key} is out of range for state_dim = {d}")
    gen = Polynomial.parse(sec.get("generator", "0"), base | {"y"} | zs, "generator")
    term = Polynomial.parse(sec.get("terminal", "0"), xs, "terminal")

    lo = _floats(sec.get("control_lo", "0"), "control_lo")
    hi = _floats(sec.get("control_hi", "0"), "control_hi")
    counts = [int(c) for c in _floats(sec.get("control_points", "1"), "control_points")]
    try:
        cs = ControlSet.lattice(np.broadcast_to(lo, m), np.broadcast_to(hi, m), np.broadcast_to(counts, m))
    except ValueError as e:
        raise ConfigError(f"[problem] control set: {e}") from None

    def b(t, x, u):
        env = _env(t, x, u)
        return np.stack([np.broadcast_to(p(env), np.broadcast_shapes(*(np.shape(a) for a in env.values()))) for p in drift], -1)

    def sigma(t, x, u):
        env = _env(t, x, u)
        shape = np.broadcast_shapes(*(np.shape(a) for a in env.values()))
        return np.stack([np.stack([np.broadcast_to(p(env), shape) for p in row], -1) for row in diff], -2)

    def f(t, x, y, z, u):
        return gen(_env(t, x, u, y, z))

    def phi(x):
        return term(_env(0.0, x))

    lip = sec.get("lipschitz_bound")
    return ControlProblem(
        state_dim=d,
        control_dim=m,
        horizon=T,
        drift=b,
        diffusion=sigma,
        generator=f,
        terminal=phi,
        control_set=cs,
        lipschitz_bound=None if lip is None else float(lip),
        name="custom",
    )


def problem_from_section(sec) -> ControlProblem:
    kind = sec.get("kind", "builtin")
    if kind == "custom":
        if "name" in sec:
            raise ConfigError("[problem] use either name (builtin) or kind = custom")
        return _custom_problem(sec)
    if kind != "builtin":
        raise ConfigError(f"[problem] kind must be builtin or custom, got {kind!r}")
    if "name" not in sec:
        raise ConfigError("[problem] needs name = <builtin> or kind = custom")
    extra = set(sec) - {"name", "kind", "control_lo", "control_hi", "control_points", "lipschitz_bound"}
    if extra:
        raise ConfigError(f"[problem] keys {sorted(extra)} only apply to kind = custom")
    try:
        prob = builtin(sec["name"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    from dataclasses import replace

    if {"control_lo", "control_hi", "control_points"} & set(sec):
        box = prob.control_set.box
        m = prob.control_dim
        lo = _floats(sec.get("control_lo", ",".join(map(str, box[0]))), "control_lo")
        hi = _floats(sec.get("control_hi", ",".join(map(str, box[1]))), "control_hi")
        counts = [int(c) for c in _floats(sec.get("control_points", ",".join(map(str, prob.control_set.counts))), "control_points")]
        prob = replace(prob, control_set=ControlSet.lattice(np.broadcast_to(lo, m), np.broadcast_to(hi, m), np.broadcast_to(counts, m)))
    if "lipschitz_bound" in sec:
        prob = replace(prob, lipschitz_bound=float(sec["lipschitz_bound"]))
    return prob


# Run configuration


def _control_spec(text: str):
    parts = text.split(None, 1)
    kind = parts[0] if parts else ""
    if kind in ("policy", "exact") and len(parts) == 1:
        return (kind, None)
    if kind == "constant" and len(parts) == 2:
        return ("constant", _floats(parts[1], "control"))
    if kind == "csv" and len(parts) == 2:
        return ("csv", parts[1].strip())
    raise ConfigError(f"[mc] control must be policy, exact, constant <u> or csv <path>, got {text!r}")


@dataclass
class RunConfig:
    problem: ControlProblem
    grid: dict = field(default_factory=dict)
    mc: dict = field(default_factory=dict)
    verify: dict = field(default_factory=dict)
    jets: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    digest: str = ""
    base_dir: Path = Path(".")

    @property
    def seed(self) -> int:
        return self.mc["seed"]


def _get(sec, key, conv, default):
    if sec is None or key not in sec:
        return default
    try:
        return conv(sec[key])
    except ConfigError:
        raise
    except ValueError:
        raise ConfigError(f"[{sec.name}] {key}: cannot parse {sec[key]!r}") from None


def parse_config(text: str, base_dir: Path | str = ".") -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed configuration: {e}") from None
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        allowed = SECTIONS[name]
        pattern = _INDEXED.get(name)
        for key in cp[name]:
            if key not in allowed and not (pattern and pattern.match(key)):
                raise ConfigError(f"unknown key {key!r} in [{name}]")
    if "problem" not in cp:
        raise ConfigError("missing [problem] section")
    problem = problem_from_section(cp["problem"])
    d = problem.state_dim
    g = cp["grid"] if "grid" in cp else None
    ts = _get(g, "time_steps", str, "auto")
    grid = {
        "lo": _get(g, "lo", lambda s: _floats(s, "lo"), [-4.0]),
        "hi": _get(g, "hi", lambda s: _floats(s, "hi"), [4.0]),
        "nodes": _get(g, "nodes", lambda s: [int(v) for v in _floats(s, "nodes")], [161]),
        "time_steps": None if ts.strip() == "auto" else _get(g, "time_steps", int, None),
        "safety": _get(g, "safety", float, 0.9),
    }
    m = cp["mc"] if "mc" in cp else None
    mc = {
        "paths": _get(m, "paths", int, 10_000),
        "dt": _get(m, "dt", float, 0.01),
        "seed": _get(m, "seed", int, None),
        "basis": _get(m, "basis", str, "cells"),
        "cells_per_axis": _get(m, "cells_per_axis", int, 32),
        "poly_degree": _get(m, "poly_degree", int, 2),
        "start_time": _get(m, "start_time", float, 0.0),
        "start_state": _get(m, "start_state", lambda s: _floats(s, "start_state"), [0.0] * d),
        "control": _get(m, "control", _control_spec, ("policy", None)),
    }
    if mc["basis"] not in ("cells", "poly"):
        raise ConfigError("[mc] basis must be cells or poly")
    if len(mc["start_state"]) not in (1, d):
        raise ConfigError(f"[mc] start_state needs {d} components")
    v = cp["verify"] if "verify" in cp else None
    verify = {
        "gap_tol": _get(v, "gap_tol", float, 0.05),
        "value_tol": _get(v, "value_tol", float, 0.03),
        "identity_tol": _get(v, "identity_tol", float, 0.05),
        "pointwise_tol": _get(v, "pointwise_tol", float, 0.05),
        "trust_margin": _get(v, "trust_margin", float, 0.15),
        "escape_fraction": _get(v, "escape_fraction", float, 0.05),
        "feedback_samples": _get(v, "feedback_samples", int, 500),
        "superjet_samples": _get(v, "superjet_samples", int, 0),
        "kink_jump": _get(v, "kink_jump", float, 0.5),
    }
    j = cp["jets"] if "jets" in cp else None
    jets = {
        "field": _get(j, "field", str, "exact"),
        "point": _get(j, "point", lambda s: _floats(s, "point"), None),
        "candidates": _get(j, "candidates", str, None),
        "largest_radius": _get(j, "largest_radius", float, None),
        "radii": _get(j, "radii", int, 4),
        "samples": _get(j, "samples", int, 200),
    }
    if jets["field"] not in ("exact", "solved"):
        raise ConfigError("[jets] field must be exact or solved")
    o = cp["output"] if "output" in cp else None
    formats = _get(o, "formats", lambda s: {f.strip() for f in s.split(",") if f.strip()}, {"csv", "text"})
    if formats - {"csv", "text"}:
        raise ConfigError(f"[output] unknown formats {sorted(formats - {'csv', 'text'})}")
    output = {"directory": _get(o, "directory", str, "out"), "formats": formats}
    digest = hashlib.sha256(text.encode()).hexdigest()
    return RunConfig(problem, grid, mc, verify, jets, output, digest, Path(base_dir))


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, path.parent)
