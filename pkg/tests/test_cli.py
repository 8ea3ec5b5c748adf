import json
import os
import subprocess
import sys
import textwrap

import pytest

from smallnoise.cli import load_config, run
from smallnoise.errors import UsageError

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
EXAMPLE = os.path.join(ROOT, "configs", "example.yaml")


def _cfg(tmp_path, body):
    p = tmp_path / "run.yaml"
    p.write_text(textwrap.dedent(body))
    return str(p)


def _run(capsys, argv):
    code = run(argv)
    out, err = capsys.readouterr()
    return code, out, err


LINEAR = """
command: kl-continuous
drift:
  name: linear
  params: {A: [[-1.0, 0.5], [0.0, -2.0]], b: [0.1, 0.0]}
Sigma: [[1.0, 0.2], [0.2, 0.5]]
eps: 0.01
initial: {type: dirac, v0: [1.0, -1.0]}
"""

DW = """
command: moments
drift: {name: double-well}
eps: 0.01
K: 20
initial: {type: dirac, v0: [0.5]}
estimator: {n: 2000}
"""


def test_linear_kl_is_zero(tmp_path, capsys):
    code, out, _ = _run(capsys, ["--config", _cfg(tmp_path, LINEAR), "--out", str(tmp_path / "o")])
    assert code == 0
    summary = json.loads(out)
    assert summary["kl_total"] == 0.0 and summary["seed"] == 0
    assert (tmp_path / "o" / "kl_continuous.json").exists()


def test_negative_eps_is_usage_error(tmp_path, capsys):
    code, out, err = _run(capsys, ["--config", _cfg(tmp_path, LINEAR), "--set", "eps=-1"])
    assert code == 2 and out == ""
    assert "'eps'" in err


@pytest.mark.parametrize("override", ["bogus=1", "estimator.bogus=1", "T=0", "K=2.5", "seed=-1",
                                      "estimator.space_method=simpson", "drift.name=nope"])
def test_validation_errors(tmp_path, capsys, override):
    code, _, err = _run(capsys, ["--config", _cfg(tmp_path, DW), "--set", override])
    assert code == 2 and err


def test_unknown_key_in_file(tmp_path):
    with pytest.raises(UsageError, match="unknown config key 'drift.colour'"):
        load_config(_cfg(tmp_path, DW + "\n" + "drift: {name: cubic, colour: red}\n"))


def test_missing_and_malformed_files(tmp_path, capsys):
    assert _run(capsys, ["--config", str(tmp_path / "none.yaml")])[0] == 2
    assert _run(capsys, ["--config", _cfg(tmp_path, "a: [1,")])[0] == 2


def test_dry_run_writes_nothing(tmp_path, capsys):
    out_dir = tmp_path / "dry"
    code, out, _ = _run(capsys, ["--config", EXAMPLE, "--dry-run", "--out", str(out_dir)])
    assert code == 0 and json.loads(out)["dry_run"] is True
    assert not out_dir.exists()


def test_outputs_byte_identical(tmp_path, capsys):
    cfg = _cfg(tmp_path, DW)
    for name in ("a", "b"):
        for cmd in ("simulate", "kl-discrete", "moments"):
            args = ["--config", cfg, cmd, "--out", str(tmp_path / name), "--set", "simulate.dump_paths=true",
                    "--set", "simulate.n_paths=50"]
            if name == "b":
                args += ["--threads", "4"]
            assert _run(capsys, args)[0] == 0
    files = sorted(os.listdir(tmp_path / "a"))
    assert files == sorted(os.listdir(tmp_path / "b"))
    assert "ensemble_paths.csv" in files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_paths_not_dumped_by_default(tmp_path, capsys):
    assert _run(capsys, ["--config", _cfg(tmp_path, DW), "simulate", "--out", str(tmp_path / "s")])[0] == 0
    assert os.listdir(tmp_path / "s") == ["ensemble_moments.csv"]


def test_blowup_exit_code(tmp_path, capsys):
    args = ["--config", _cfg(tmp_path, DW), "simulate", "--out", str(tmp_path / "x"),
            "--set", "initial.v0=[50.0]", "--set", "K=6"]
    code, _, err = _run(capsys, args)
    assert code == 3 and "step" in err


def test_rate_check(tmp_path, capsys):
    code, out, _ = _run(capsys, ["--config", _cfg(tmp_path, DW), "rate", "--check", "--out", str(tmp_path / "r")])
    assert code == 0 and json.loads(out)["check_passed"] is True
    code, out, _ = _run(capsys, ["--config", _cfg(tmp_path, DW), "rate", "--out", str(tmp_path / "r"),
                                 "--set", "rate.path=constant"])
    assert code == 0 and json.loads(out)["rate"] == pytest.approx(0.5 * 0.375**2, rel=1e-12)


def test_check_failure_exit_code(tmp_path, capsys):
    # a Δt sweep with ε too large for the excess to follow Δt²
    body = """
    command: sweep-dt
    drift: {name: double-well}
    initial: {type: dirac, v0: [0.5]}
    estimator: {space_method: gauss-hermite}
    sweep: {values: [0.1, 0.05, 0.025, 0.0125], eps: 1.0, tv_paths: 0}
    """
    code, out, err = _run(capsys, ["--config", _cfg(tmp_path, body), "--check", "--out", str(tmp_path / "c")])
    assert code == 4 and json.loads(out)["check_passed"] is False


def test_sweep_eps_check_passes(tmp_path, capsys):
    args = ["--config", EXAMPLE, "--check", "--out", str(tmp_path / "sw"),
            "--set", "estimator.space_method=gauss-hermite", "--set", "sweep.tv_paths=0"]
    code, out, _ = _run(capsys, args)
    summary = json.loads(out)
    assert code == 0 and summary["check_passed"]
    assert 0.85 <= summary["fits"]["continuous"]["slope"] <= 1.15
    saved = json.loads((tmp_path / "sw" / "sweep_eps_summary.json").read_text())
    assert saved["fits"]["discrete"]["slope"] == summary["fits"]["discrete"]["slope"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "smallnoise", "--config", EXAMPLE, "--dry-run"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["command"] == "sweep-eps"
