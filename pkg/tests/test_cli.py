import csv
import io
import json
import subprocess
import sys
from contextlib import redirect_stdout

import pytest

from nodeoed.cli import build_parser, run

SUBCOMMANDS = ["exp-single", "exp-sweep", "image", "ct", "ct-adaptive", "oracle-table", "gradcheck", "fetch-mnist", "plot"]


def capture(argv):
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = run(argv)
    return code, buf.getvalue()


class TestOracleTable:
    def test_stdout(self):
        code, out = capture(["oracle-table", "--m-max", "20"])
        assert code == 0
        rows = list(csv.DictReader(io.StringIO(out)))
        assert [int(r["m"]) for r in rows] == list(range(2, 21))
        row10 = next(r for r in rows if r["m"] == "10")
        assert int(row10["k_star"]) == 4
        assert float(row10["F_k_star"]) == pytest.approx(14 / 24)

    def test_file(self, tmp_path):
        code, _ = capture(["oracle-table", "--m-max", "5", "--out", str(tmp_path / "t" / "o.csv")])
        assert code == 0
        assert (tmp_path / "t" / "o.csv").read_text().startswith("m,k_star")


class TestUsage:
    def test_unknown_flag(self, capsys):
        assert run(["oracle-table", "--bogus"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_subcommand(self):
        assert run([]) == 1

    @pytest.mark.parametrize("cmd", SUBCOMMANDS)
    def test_help(self, cmd, capsys):
        assert run([cmd, "--help"]) == 0
        text = capsys.readouterr().out
        assert "usage" in text

    @pytest.mark.parametrize("cmd", ["exp-single", "image", "ct", "ct-adaptive"])
    def test_help_shows_defaults(self, cmd):
        sub = build_parser()._subparsers._group_actions[0].choices[cmd]
        for action in sub._actions:
            if action.option_strings and action.dest not in ("help", "config", "out", "paper_scale"):
                assert "default" in (action.help or ""), action.option_strings

    def test_config_error_exit(self, tmp_path):
        bad = tmp_path / "c.json"
        bad.write_text(json.dumps({"experiment": "exponential", "nonsense": 1}))
        assert run(["exp-single", "--config", str(bad), "--out", str(tmp_path / "r")]) == 1

    def test_wrong_experiment_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"experiment": "ct"}))
        assert run(["exp-single", "--config", str(cfg)]) == 1

    def test_invalid_value_exit(self, tmp_path):
        assert run(["exp-single", "--lr-theta", "0", "--out", str(tmp_path)]) == 1

    def test_runtime_failure_exit(self, tmp_path):
        assert run(["plot", str(tmp_path / "missing")]) == 2


class TestDefaults:
    def test_adaptive_desk_defaults(self):
        from nodeoed.experiments import default_config

        ct, ad = default_config("ct"), default_config("ct", adaptive=True)
        assert (ct.n_train, ct.epochs) == (1024, 30)
        assert (ad.n_train, ad.epochs) == (4096, 10)
        assert default_config("ct", paper_scale=True, adaptive=True).epochs == 150

    def test_adaptive_only_for_ct(self):
        from nodeoed.experiments import default_config
        from nodeoed.autodiff import ContractError

        with pytest.raises(ContractError):
            default_config("image", adaptive=True)

    def test_adaptive_help_shows_its_defaults(self, capsys):
        assert run(["ct-adaptive", "--help"]) == 0
        assert "training phantoms (default: 4096)" in capsys.readouterr().out


class TestRuns:
    def test_gradcheck(self):
        code, out = capture(["gradcheck"])
        assert code == 0
        assert "FAIL" not in out

    def test_config_echo_reproduces(self, tmp_path):
        argv = ["exp-single", "--m", "3", "--epochs", "40", "--batch", "32", "--hidden", "16", "--seed", "5"]
        code, _ = capture(argv + ["--out", str(tmp_path / "a")])
        assert code == 0
        for name in ("config.json", "trace.csv", "design_final.csv", "summary.json", "checkpoint.bin"):
            assert (tmp_path / "a" / name).exists()
        code, _ = capture(["exp-single", "--config", str(tmp_path / "a" / "config.json"), "--out", str(tmp_path / "b")])
        assert code == 0
        assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()

    def test_plot(self, tmp_path):
        assert capture(["exp-single", "--m", "2", "--epochs", "20", "--hidden", "8", "--out", str(tmp_path)])[0] == 0
        assert capture(["plot", str(tmp_path)])[0] == 0
        assert (tmp_path / "trace_design.svg").exists()

    def test_output_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("NODE_OUTPUT_ROOT", str(tmp_path))
        assert capture(["exp-single", "--m", "2", "--epochs", "10", "--hidden", "8"])[0] == 0
        assert (tmp_path / "exp-single-m2-seed0" / "summary.json").exists()

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "nodeoed", "oracle-table", "--m-max", "3"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert proc.stdout.splitlines()[0] == "m,k_star,F_k_star,fraction_at_1"

    @pytest.mark.slow
    def test_m3_long_run_reaches_endpoints(self, tmp_path):
        argv = ["exp-single", "--m", "3", "--epochs", "4000", "--batch", "1024", "--lr-design", "1e-1",
                "--lr-theta", "1e-3", "--out", str(tmp_path)]
        assert capture(argv)[0] == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["max_boundary_distance"] <= 0.05
