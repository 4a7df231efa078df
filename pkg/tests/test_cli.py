import hashlib
import json
import subprocess
import sys

import pytest

from splitjko import cli
from splitjko import diagnostics as dg
from splitjko import scenarios as S
from splitjko import scheme as sc

HEAT = "[run]\nscenario = heat\n\n[scheme]\nh = 0.01\nT = 0.05\n\n[checks]\nmax_error = 0.01\n"


def _write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_minimal_heat_run(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", str(_write(tmp_path, HEAT)), "--out", str(out), "--quiet"]) == cli.EXIT_OK
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "pass" and man["exit_code"] == 0
    assert "diagnostics.csv" in man["files"] and "report.json" in man["files"]
    assert len(man["snapshots"]) == 6
    for rel, digest in man["files"].items():
        assert hashlib.sha256((out / rel).read_bytes()).hexdigest() == digest
    assert capsys.readouterr().err == ""


def test_failed_check_exits_one(tmp_path):
    text = HEAT.replace("max_error = 0.01", "max_error = 1e-9")
    out = tmp_path / "out"
    assert cli.main(["run", str(_write(tmp_path, text)), "--out", str(out), "--quiet"]) == cli.EXIT_FAIL
    assert json.loads((out / "report.json").read_text())["status"] == "fail"


@pytest.mark.parametrize("text,key,line", [
    ("[run]\nscenario = heat\n\n[scheme]\nh = 0.01\nepsilonn = 0.1\n", "epsilonn", 6),
    ("[scheme]\nh = -0.01\n", "h", 2),
])
def test_config_errors_exit_two(tmp_path, capsys, text, key, line):
    code = cli.main(["run", str(_write(tmp_path, text)), "--out", str(tmp_path / "o"), "--quiet"])
    assert code == cli.EXIT_CONFIG
    rec = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert rec["status"] == "config-error" and rec["key"] == key and rec["line"] == line
    assert not (tmp_path / "o").exists()


def test_step_above_cap_is_a_config_error(tmp_path):
    text = "[run]\nscenario = heat\n[scheme]\nh = 0.2\nT = 0.4\nh0 = 0.1\n"
    assert cli.main(["run", str(_write(tmp_path, text)), "--out", str(tmp_path / "o"), "--quiet"]) == 2


def test_solver_failure_exits_three(tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise sc.SchemeError(3, "Helmholtz solve failed")

    monkeypatch.setattr(cli.sh, "run_scheme", boom)
    out = tmp_path / "o"
    assert cli.main(["run", str(_write(tmp_path, HEAT)), "--out", str(out), "--quiet"]) == cli.EXIT_SOLVER
    rec = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert rec["status"] == "solver-failure" and rec["step"] == 3
    assert json.loads((out / "manifest.json").read_text())["exit_code"] == 3


def test_runs_are_byte_identical(tmp_path):
    cfg = _write(tmp_path, HEAT)
    for name in ("a", "b"):
        assert cli.main(["run", str(cfg), "--out", str(tmp_path / name), "--quiet"]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_sweep_outputs_and_determinism(tmp_path):
    text = ("[run]\nscenario = heat\nmode = sweep\nworkers = 3\nsnapshots = False\n[scenario]\ncells = 64\n"
            "[scheme]\nT = 0.04\n[sweep]\nhs = [0.01, 0.005, 0.0025]\nmin_order = 0.3\n")
    cfg = _write(tmp_path, text)
    for name in ("a", "b"):
        assert cli.main(["run", str(cfg), "--out", str(tmp_path / name), "--quiet"]) == 0
    a = tmp_path / "a"
    assert _tree(a) == _tree(tmp_path / "b")
    for rel in ("sweep.csv", "sweep.dat", "report.json", "manifest.json", "runs/h_0.005/diagnostics.csv"):
        assert (a / rel).exists()
    rows = (a / "sweep.csv").read_text().splitlines()
    assert rows[0].startswith("h,error") and len(rows) == 4


def test_two_species_decoupled_matches_single_runs(tmp_path):
    text = "[run]\nscenario = two-species\nsnapshots = False\n[scenario]\ncells = 64\ncross = 0.0\n" \
           "[scheme]\nh = 0.01\nT = 0.03\n"
    out = tmp_path / "o"
    assert cli.main(["run", str(_write(tmp_path, text)), "--out", str(out), "--quiet"]) == 0
    sys_ = S.two_species(cells=64, cross=0.0)
    for i in range(2):
        cfg = sc.SchemeConfig(h=0.01, T=0.03, energy=sys_["energies"][i])
        alone = sc.run_scheme(sys_["rho0"][i], cfg)
        assert (out / f"species{i}" / "diagnostics.csv").read_text() == dg.to_csv(alone.records)


def test_custom_and_transport_only(tmp_path):
    custom = ("[run]\nscenario = custom\nsnapshots = False\n[custom]\ndim = 1\ncells = 64\n"
              "density = exp(-(x - 1)**2)\ndrift = external\npotential = 0.5 * x**2\nenergy = power\nm = 2.0\n"
              "[scheme]\nh = 0.01\nT = 0.02\n")
    assert cli.main(["run", str(_write(tmp_path, custom)), "--out", str(tmp_path / "c"), "--quiet"]) == 0
    rot = ("[run]\nscenario = rotation-transport\nsnapshots = False\noracle_probes = 1\n[scenario]\ncells = 32\n"
           "[scheme]\nh = 0.01\nT = 0.05\ntransport_only = True\n[checks]\nenergy_tolerance = 1e-6\n"
           "cumulative_energy_tolerance = 1e-4\n")
    out = tmp_path / "r"
    assert cli.main(["run", str(_write(tmp_path, rot, "r.ini")), "--out", str(out), "--quiet"]) == 0
    names = {c["name"] for c in json.loads((out / "report.json").read_text())["checks"]}
    assert {"transport_energy_step", "transport_energy_cumulative", "mass"} <= names


def test_check_assumptions(tmp_path):
    text = "[run]\nscenario = mixed-drift\n[scenario]\ncells = 16\n[scheme]\nh = 0.05\n"
    out = tmp_path / "o"
    assert cli.main(["check-assumptions", str(_write(tmp_path, text)), "--out", str(out), "--quiet"]) == 0
    rep = json.loads((out / "assumptions.json").read_text())
    assert all(c["pass"] for c in rep["checks"])
    assert rep["reports"]["drift"]["semiconvexity"] == 0.0
    assert "manifest.json" in {p.name for p in out.iterdir()}


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "splitjko.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "splitjko" in res.stdout
    res = subprocess.run([sys.executable, "-m", "splitjko.cli", "run"], capture_output=True, text=True)
    assert res.returncode == 2
