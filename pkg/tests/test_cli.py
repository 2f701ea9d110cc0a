import json
import subprocess
import sys
from pathlib import Path

import pytest

from ppdelab import ValidationError
from ppdelab.cli import COMMANDS, main
from ppdelab.config import ExperimentConfig, from_dict, load_config


def write_config(tmp_path: Path, text: str) -> Path:
    p = tmp_path / "exp.toml"
    p.write_text(text)
    return p


HEAT = """
[grid]
T = 1.0
n = 20
[payoff]
name = "square"
[driver]
name = "zero"
[solver]
N = 20000
seed = 3
"""


def run(tmp_path, command, text, *extra):
    cfg = write_config(tmp_path, text)
    out = tmp_path / "out"
    code = main([command, "--config", str(cfg), "--out", str(out), *extra])
    summary = json.loads((out / "summary.json").read_text()) if (out / "summary.json").exists() else None
    return code, summary, out


def test_heat_config(tmp_path):
    code, s, out = run(tmp_path, "bsde", HEAT)
    assert code == 0
    assert s["analytic"] == 1.0
    assert abs(s["estimate"] - 1.0) <= 3 * s["std_error"] + 0.01
    assert s["config"]["solver"]["N"] == 20000
    assert (out / "solution.csv").read_text().startswith("path,index,t,Y,Z0")
    timing = json.loads((out / "timing.json").read_text())
    assert timing["runtime_ms"] > 0


def test_degenerate_sigma_is_deterministic(tmp_path):
    text = HEAT + '\n[model]\nsigma = "constant"\nsigma_params = {value = 0.0}\n'
    code, s, _ = run(tmp_path, "bsde", text)
    assert code == 0
    assert s["estimate"] == 0.0 and s["std_error"] == 0.0


def test_zero_steps_names_the_field(tmp_path, capsys):
    code, _, _ = run(tmp_path, "bsde", HEAT.replace("n = 20", "n = 0"))
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["field"] == "grid.n"


@pytest.mark.parametrize(
    "patch,field",
    [
        (("N = 20000", "N = 0"), "solver.N"),
        (("T = 1.0", "T = -1.0"), "grid.T"),
        (('name = "square"', 'name = "nope"'), "payoff.name"),
    ],
)
def test_validation_fields(tmp_path, capsys, patch, field):
    code, _, _ = run(tmp_path, "bsde", HEAT.replace(*patch))
    assert code == 2
    assert json.loads(capsys.readouterr().err)["field"] == field


def test_unknown_keys_rejected():
    with pytest.raises(ValidationError) as info:
        from_dict({"solver": {"NN": 3}})
    assert info.value.field == "solver.NN"


def test_negative_L_rejected():
    with pytest.raises(ValidationError):
        from_dict({"model": {"L": -0.5}})


def test_bad_toml(tmp_path):
    with pytest.raises(ValidationError):
        load_config(write_config(tmp_path, "[grid\nT=1"))


def test_numerical_failure_exit_code(tmp_path, capsys):
    text = HEAT.replace('name = "zero"', 'name = "linear"\nparams = {a = 1e308}')
    code, _, _ = run(tmp_path, "bsde", text)
    assert code == 3
    assert json.loads(capsys.readouterr().err)["error"] == "NumericalError"


def test_expectation_and_snell(tmp_path):
    text = HEAT.replace('"square"', '"linear"') + "\n[model]\nL = 0.5\n"
    code, s, _ = run(tmp_path, "expectation", text)
    assert code == 0 and s["analytic"] == 0.5
    assert abs(s["estimate"] - 0.5) < 0.03
    code, s, out = run(tmp_path, "snell", text)
    assert code == 0 and abs(s["V0"] - 0.5) < 0.03
    assert "mean_tau" in s
    assert (out / "solution.csv").read_text().startswith("path,index,t,Y,X,dK,stopped")


def test_simulate(tmp_path):
    code, s, out = run(tmp_path, "simulate", HEAT)
    assert code == 0
    assert s["N"] == 20000
    assert (out / "ensemble.bin").exists() and (out / "ensemble.json").exists()
    assert (out / "paths.csv").read_text().count("\n") == 1 + 50 * 21


def test_viscosity_and_compare(tmp_path):
    text = HEAT + '\n[viscosity]\ncheck = "martingale"\nmode = "P-super"\ncandidate = "heat"\npoints = 4\ninner_N = 5000\n'
    code, s, out = run(tmp_path, "viscosity-check", text)
    assert code == 0 and s["passed"] is True and s["checks"] == 12
    assert (out / "report.json").exists() and (out / "checks.csv").exists()
    text = HEAT.replace('"square"', '"sine"').replace('"zero"', '"trig"') + "\n[compare]\npoints = 5\n"
    code, s, _ = run(tmp_path, "compare", text)
    assert code == 0 and s["passed"] is True and s["min_margin"] > 0


def test_tangency_via_cli(tmp_path):
    text = HEAT + '\n[model]\nL = 0.0\n[viscosity]\ncheck = "tangency"\ncandidate = "bump"\n'
    code, s, out = run(tmp_path, "viscosity-check", text.replace("N = 20000", "N = 500"))
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert abs(rep["checks"][0]["detail"]["t"] - 0.45) <= 0.05


def test_converge(tmp_path):
    text = HEAT.replace('"square"', '"linear"') + (
        '\n[model]\nL = 0.5\n[converge]\nexperiment = "expectation"\nlevels = [[20000, 10], [20000, 20]]\n'
    )
    code, s, out = run(tmp_path, "converge", text)
    assert code == 0
    assert [r["n"] for r in s["rows"]] == [10, 20]
    assert all("abs_error" in r for r in s["rows"])
    assert (out / "convergence.csv").exists()


def test_converge_deterministic_levels(tmp_path):
    text = HEAT.replace('"zero"', '"constant"\nparams = {c = 0.7}') + (
        '\n[model]\nsigma = "constant"\nsigma_params = {value = 0.0}\n'
        '[converge]\nexperiment = "bsde"\nlevels = [[100, 10], [200, 20], [300, 40]]\n'
    )
    code, s, _ = run(tmp_path, "converge", text)
    assert code == 0
    est = [r["estimate"] for r in s["rows"]]
    assert est == pytest.approx([0.7] * 3, abs=1e-12)


def test_converge_single_level(tmp_path, capsys):
    text = HEAT + '\n[converge]\nlevels = [[1000, 10]]\n'
    code, _, _ = run(tmp_path, "converge", text)
    assert code == 2
    assert json.loads(capsys.readouterr().err)["field"] == "converge.levels"


def test_seed_flag_overrides(tmp_path):
    text = HEAT.replace("N = 20000", "N = 2000")
    _, a, _ = run(tmp_path, "bsde", text, "--seed", "5")
    assert a["config"]["solver"]["seed"] == 5


def test_summary_records_full_config(tmp_path):
    _, s, _ = run(tmp_path, "bsde", HEAT.replace("N = 20000", "N = 1000"))
    defaults = ExperimentConfig().to_dict()
    defaults["output"].pop("directory")
    assert set(s["config"]) == set(defaults)
    for section, values in defaults.items():
        assert set(s["config"][section]) == set(values)


def test_module_entry_point(tmp_path):
    cfg = write_config(tmp_path, HEAT.replace("N = 20000", "N = 500"))
    res = subprocess.run(
        [sys.executable, "-m", "ppdelab", "bsde", "--config", str(cfg), "--out", str(tmp_path / "o")],
        capture_output=True, text=True, check=False,
    )
    assert res.returncode == 0, res.stderr
    assert json.loads(res.stdout)["command"] == "bsde"


def test_all_commands_listed():
    assert COMMANDS == ("simulate", "expectation", "bsde", "snell", "viscosity-check", "compare", "converge")
