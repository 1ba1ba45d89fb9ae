import numpy as np
import pytest

from fbverify import Grid, builtin, solve_hjb
from fbverify.cli import main
from fbverify.config import ConfigError, Polynomial, parse_config

LQ = """
[problem]
name = lq1d
[grid]
lo = -4
hi = 4
nodes = {nodes}
[mc]
paths = {paths}
dt = 0.01
seed = 1
control = {control}
[verify]
feedback_samples = 100
"""

CUSTOM_LQ = """
[problem]
kind = custom
state_dim = 1
control_dim = 1
horizon = 1
control_lo = -3
control_hi = 3
control_points = 121
drift1 = 1 u1
diffusion11 = 1
generator = 1 u1^2
terminal = 1 x1^2
"""


def write_cfg(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def lq_cfg(tmp_path, nodes=161, paths=4000, control="policy"):
    return write_cfg(tmp_path, LQ.format(nodes=nodes, paths=paths, control=control))


class TestParsing:
    def test_defaults(self):
        cfg = parse_config("[problem]\nname = kink1d\n")
        assert cfg.problem.name == "kink1d"
        assert cfg.grid["nodes"] == [161] and cfg.grid["time_steps"] is None
        assert cfg.mc["paths"] == 10000 and cfg.mc["seed"] is None
        assert cfg.mc["control"][0] == "policy"
        assert cfg.output["formats"] == {"csv", "text"}

    def test_digest_tracks_text(self):
        a = parse_config("[problem]\nname = lq1d\n")
        b = parse_config("[problem]\nname = lq1d\n[mc]\nseed = 2\n")
        assert a.digest != b.digest and len(a.digest) == 64

    @pytest.mark.parametrize(
        "text,match",
        [
            ("[problem]\nname = lq1d\n[bogus]\n", "unknown section"),
            ("[problem]\nname = lq1d\nfoo = 1\n", "unknown key"),
            ("[grid]\nnodes = 3\n", "missing \\[problem\\]"),
            ("[problem]\nname = nope\n", "unknown builtin"),
            ("[problem]\nname = lq1d\nterminal = 1 x1\n", "only apply to kind = custom"),
            ("[problem]\nname = lq1d\n[mc]\ncontrol = maybe\n", "control must be"),
            ("[problem]\nname = lq1d\n[mc]\npaths = many\n", "cannot parse"),
            ("[problem]\nname = lq1d\n[output]\nformats = csv, pdf\n", "unknown formats"),
        ],
    )
    def test_errors(self, text, match):
        with pytest.raises(ConfigError, match=match):
            parse_config(text)

    def test_polynomial(self):
        poly = Polynomial.parse("0.5 x1^2; -1 u1 z1; 2", {"x1", "u1", "z1"}, "generator")
        env = {"x1": np.array(2.0), "u1": np.array(3.0), "z1": np.array(0.5)}
        assert float(poly(env)) == pytest.approx(0.5 * 4 - 1.5 + 2)

    @pytest.mark.parametrize("text", ["x1", "1 w", "1 x1^a"])
    def test_polynomial_errors(self, text):
        with pytest.raises(ConfigError):
            Polynomial.parse(text, {"x1"}, "terminal")

    def test_generator_variables_restricted_in_drift(self):
        with pytest.raises(ConfigError, match="not allowed"):
            parse_config(CUSTOM_LQ.replace("drift1 = 1 u1", "drift1 = 1 y"))

    def test_custom_matches_builtin(self):
        custom = parse_config(CUSTOM_LQ).problem
        lq = builtin("lq1d")
        g = Grid.for_problem(lq, -4, 4, 81)
        np.testing.assert_array_equal(solve_hjb(custom, g).values, solve_hjb(lq, g).values)

    def test_control_set_override(self):
        p = parse_config("[problem]\nname = lq1d\ncontrol_lo = -1\ncontrol_hi = 1\ncontrol_points = 5\n").problem
        np.testing.assert_allclose(p.control_set.points[:, 0], [-1, -0.5, 0, 0.5, 1])


class TestExitCodes:
    def test_certified(self, tmp_path, capsys):
        assert main(["verify", "--config", lq_cfg(tmp_path)]) == 0
        assert "CERTIFIED" in (tmp_path / "out" / "report.txt").read_text()

    def test_suboptimal(self, tmp_path):
        assert main(["verify", "--config", lq_cfg(tmp_path, control="constant 0")]) == 2

    def test_inconclusive(self, tmp_path):
        text = LQ.format(nodes=161, paths=500, control="policy").replace("[verify]", "start_state = 4\n[verify]")
        assert main(["verify", "--config", write_cfg(tmp_path, text)]) == 3

    def test_cfl_violation(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "[problem]\nname = lq1d\n[grid]\ntime_steps = 10\n")
        assert main(["solve", "--config", cfg]) == 1
        assert "need dt <=" in capsys.readouterr().err

    def test_bad_config(self, tmp_path, capsys):
        assert main(["solve", "--config", write_cfg(tmp_path, "[problem]\nname = lq1d\nnope = 1\n")]) == 1
        assert "unknown key" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert main(["solve", "--config", str(tmp_path / "absent.ini")]) == 1

    def test_usage_error(self):
        with pytest.raises(SystemExit) as e:
            main(["frobnicate"])
        assert e.value.code == 1

    def test_missing_seed(self, tmp_path, capsys):
        assert main(["cost", "--config", write_cfg(tmp_path, "[problem]\nname = lq1d\n")]) == 1
        assert "seed" in capsys.readouterr().err


class TestOutputs:
    def test_deterministic_csv(self, tmp_path):
        cfg = lq_cfg(tmp_path, nodes=81, paths=500)
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["cost", "--config", cfg, "--out", str(a)]) == 0
        assert main(["cost", "--config", cfg, "--out", str(b)]) == 0
        assert (a / "bundle.csv").read_bytes() == (b / "bundle.csv").read_bytes()
        assert main(["cost", "--config", cfg, "--out", str(b), "--seed", "9"]) == 0
        assert (a / "bundle.csv").read_bytes() != (b / "bundle.csv").read_bytes()

    def test_manifest(self, tmp_path):
        cfg = lq_cfg(tmp_path, nodes=81)
        main(["solve", "--config", cfg])
        main(["solve", "--config", cfg, "--seed", "4"])
        lines = (tmp_path / "out" / "manifest.txt").read_text().splitlines()
        assert len(lines) == 2
        assert lines[0].startswith("command=solve config_sha256=") and "seed=1" in lines[0]
        assert "numpy=" in lines[0] and "overrides=seed=4" in lines[1]

    def test_field_rows(self, tmp_path):
        cfg = lq_cfg(tmp_path, nodes=41)
        main(["solve", "--config", cfg])
        rows = (tmp_path / "out" / "field.csv").read_text().splitlines()
        g = Grid.for_problem(builtin("lq1d"), -4, 4, 41)
        assert rows[0] == "t,x1,v" and len(rows) - 1 == (g.time_steps + 1) * 41

    def test_martingale_solve_exact(self, tmp_path):
        cfg = write_cfg(tmp_path, "[problem]\nname = martingale1d\n[grid]\nnodes = 81\n")
        assert main(["solve", "--config", cfg]) == 0
        summary = (tmp_path / "out" / "solve_summary.txt").read_text()
        err = float(summary.split("max_err_t0")[1].split()[0])
        assert err <= 1e-6

    def test_policy_kink_signs(self, tmp_path):
        cfg = write_cfg(tmp_path, "[problem]\nname = kink1d\n[grid]\nnodes = 81\n")
        assert main(["policy", "--config", cfg]) == 0
        data = np.loadtxt(tmp_path / "out" / "policy.csv", delimiter=",", skiprows=1)
        t, x, u = data.T
        inner = (t < 1) & (np.abs(x) <= 3)
        assert np.all(u[inner & (x < -0.2)] == -1) and np.all(u[inner & (x > 0.2)] == 1)

    def test_policy_control_independent_constant(self, tmp_path):
        cfg = write_cfg(tmp_path, "[problem]\nname = martingale1d\n[grid]\nnodes = 41\n")
        main(["policy", "--config", cfg])
        u = np.loadtxt(tmp_path / "out" / "policy.csv", delimiter=",", skiprows=1)[:, 2]
        assert np.all(u == u[0])

    def test_policy_csv_roundtrip(self, tmp_path):
        cfg = lq_cfg(tmp_path, nodes=81, paths=300)
        main(["policy", "--config", cfg])
        main(["cost", "--config", cfg, "--out", str(tmp_path / "p")])
        csv_cfg = lq_cfg(tmp_path, nodes=81, paths=300, control=f"csv {tmp_path / 'out' / 'policy.csv'}")
        main(["cost", "--config", csv_cfg, "--out", str(tmp_path / "c")])
        a = (tmp_path / "p" / "bundle.csv").read_bytes()
        assert a == (tmp_path / "c" / "bundle.csv").read_bytes()

    def test_policy_csv_wrong_grid(self, tmp_path):
        main(["policy", "--config", lq_cfg(tmp_path, nodes=41)])
        cfg = lq_cfg(tmp_path, nodes=81, control=f"csv {tmp_path / 'out' / 'policy.csv'}")
        assert main(["cost", "--config", cfg]) == 1


class TestJets:
    def cfg(self, tmp_path):
        return write_cfg(tmp_path, "[problem]\nname = kink1d\n[jets]\npoint = 0.5, 0\n")

    def test_kink_candidates(self, tmp_path):
        cands = tmp_path / "c.csv"
        cands.write_text("p,q1,theta11\n# comment\n" + "".join(f"1,{q},0\n" for q in (-1, -0.5, 0, 0.5, 1)) + "\n1,1,-0.5\n1,1.2,0\n")
        assert main(["jets", "--config", self.cfg(tmp_path), "--candidates", str(cands)]) == 0
        rows = (tmp_path / "out" / "jets.csv").read_text().splitlines()
        assert rows[0].startswith("p,q1,theta11,superjet")
        flags = [r.split(",")[3] for r in rows[1:]]
        assert flags == ["true"] * 5 + ["false", "false"]
        assert all(r.split(",")[5] == "false" for r in rows[1:])

    def test_empty_file(self, tmp_path):
        cands = tmp_path / "c.csv"
        cands.write_text("")
        assert main(["jets", "--config", self.cfg(tmp_path), "--candidates", str(cands)]) == 0
        assert (tmp_path / "out" / "jets.csv").read_text().splitlines() == [
            "p,q1,theta11,superjet,superjet_worst_ratio,subjet,subjet_worst_ratio,p_plus_min_h"
        ]

    def test_malformed_row(self, tmp_path, capsys):
        cands = tmp_path / "c.csv"
        cands.write_text("1,0,0\n\n1,2\n")
        assert main(["jets", "--config", self.cfg(tmp_path), "--candidates", str(cands)]) == 1
        assert "c.csv:3" in capsys.readouterr().err

    def test_point_arity(self, tmp_path, capsys):
        cands = tmp_path / "c.csv"
        cands.write_text("1,0,0\n")
        assert main(["jets", "--config", self.cfg(tmp_path), "--candidates", str(cands), "--point", "0.5"]) == 1
