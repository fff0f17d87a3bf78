import csv
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from hybres.cli import EXIT_BREAKDOWN, EXIT_INVALID, EXIT_OK, SUBCOMMANDS, main
from hybres.dynamics import TRAJECTORY_COLUMNS

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"

NETWORK = """[network]
buses = 1:grid, 2:gfm, 3:gfl, 4:passive
branches = 1-4:0.02+0.093j, 2-4:0.007+0.055j, 3-4:{z3}
"""
FAULT = """[fault]
enabled = {enabled}
bus = 4
resistance = 1.0
t_clear = {t_clear}
"""
RUN = """[run]
dt = 0.001
t_end = {t_end}
resolution = 41, 41
"""


def scenario(tmp_path, name="s.ini", z3="0.01+0.065j", enabled="true", t_clear=1.2, t_end=2.0,
             extra=""):
    p = tmp_path / name
    p.write_text(NETWORK.format(z3=z3) + FAULT.format(enabled=enabled, t_clear=t_clear)
                 + RUN.format(t_end=t_end) + extra)
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_no_fault_simulate_holds_equilibrium(tmp_path, capsys):
    sc = scenario(tmp_path, enabled="false", t_end=3.0)
    out = tmp_path / "out"
    assert main(["simulate", "--scenario", str(sc), "--out", str(out), "--no-svg"]) == EXIT_OK
    rows = read_csv(out / "trajectory.csv")
    assert rows[0] == [h for h, _ in TRAJECTORY_COLUMNS]
    d = np.array([[float(r[1]), float(r[3])] for r in rows[1:]])
    assert np.max(np.abs(d - d[0])) < 1e-8
    assert len(read_csv(out / "events.csv")) == 1
    err = capsys.readouterr().err
    assert "defaults applied" in err and "gfm.k_q" in err


def test_regions_byte_identical(tmp_path):
    sc = scenario(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["regions", "--scenario", str(sc), "--out", str(a), "--no-svg"]) == EXIT_OK
    assert main(["regions", "--scenario", str(sc), "--out", str(b), "--no-svg"]) == EXIT_OK
    csvs = sorted(p.name for p in a.glob("*.csv"))
    assert "regions_fault.csv" in csvs and "regions_postfault.csv" in csvs
    for name in csvs:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()


def test_manifest_hashes_and_scenario(tmp_path):
    sc = scenario(tmp_path)
    out = tmp_path / "out"
    assert main(["energy", "--scenario", str(sc), "--out", str(out)]) == EXIT_OK
    m = json.loads((out / "manifest.json").read_text())
    assert m["subcommand"] == "energy" and m["status"] == "ok"
    assert m["scenario"]["gfl"]["kp_pll"] == "10.0"
    assert "gfm.j" in m["defaults_applied"]
    assert set(m["files"]) == {"energy.csv", "energy.svg"}
    for name, digest in m["files"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    head = read_csv(out / "energy.csv")[0]
    assert head == ["t", "E_FM_k", "E_FM_p", "E_FM_d", "E_FM_residual",
                    "E_FL_k", "E_FL_p", "E_FL_d", "E_FL_residual"]


def test_invalid_scenario_exit_code(tmp_path, capsys):
    sc = scenario(tmp_path, extra="[gfl]\nu_lv = 1.2\nu_hv = 1.1\n")
    assert main(["simulate", "--scenario", str(sc), "--out", str(tmp_path / "o")]) == EXIT_INVALID
    assert "gfl.u_lv" in capsys.readouterr().err
    assert main(["regions", "--scenario", str(tmp_path / "missing.ini")]) == EXIT_INVALID


def test_breakdown_writes_diagnostic(tmp_path):
    # a weak, heavily loaded GFL link loses every consistent combination after the PLL slips
    sc = scenario(tmp_path, z3="0.02+0.2j", t_clear=0.3, t_end=1.0, extra="[gfl]\np_ref = 2.0\n")
    out = tmp_path / "out"
    assert main(["simulate", "--scenario", str(sc), "--out", str(out), "--no-svg"]) == EXIT_BREAKDOWN
    diag = json.loads((out / "diagnostic.json").read_text())
    assert diag["subcommand"] == "simulate"
    assert diag["kind"] == "no_solution"
    assert diag["t"] < 1.0
    assert "no self-consistent combination" in diag["message"]
    m = json.loads((out / "manifest.json").read_text())
    assert m["status"] == "breakdown"
    assert "trajectory.csv" in m["files"] and "diagnostic.json" in m["files"]
    rows = read_csv(out / "trajectory.csv")
    assert 1 < len(rows) and float(rows[-1][0]) < 1.0


def test_unsolvable_prefault_is_a_breakdown(tmp_path):
    sc = scenario(tmp_path, z3="0.03+0.35j", extra="[gfl]\np_ref = 2.0\n")
    out = tmp_path / "out"
    assert main(["simulate", "--scenario", str(sc), "--out", str(out), "--no-svg"]) == EXIT_BREAKDOWN
    diag = json.loads((out / "diagnostic.json").read_text())
    assert diag["kind"] == "no_solution"


@pytest.mark.parametrize("name", [n for n in SUBCOMMANDS if n not in ("regions", "energy")])
def test_every_subcommand_emits_headers(tmp_path, name):
    sc = scenario(tmp_path, t_clear=0.1, t_end=1.0)
    out = tmp_path / "out"
    assert main([name, "--scenario", str(sc), "--out", str(out)]) == EXIT_OK
    m = json.loads((out / "manifest.json").read_text())
    produced = [f for f in m["files"] if f.endswith(".csv")]
    assert produced
    for f in produced:
        head = read_csv(out / f)[0]
        assert head and all(h.strip() for h in head)
    svgs = [f for f in m["files"] if f.endswith(".svg")]
    assert svgs or name == "classify"
    for f in svgs:
        assert (out / f).read_text().startswith("<svg")


def test_classify_short_fault_is_stable(tmp_path):
    sc = scenario(tmp_path, t_clear=0.1, t_end=5.0)
    out = tmp_path / "out"
    assert main(["classify", "--scenario", str(sc), "--out", str(out), "--no-svg"]) == EXIT_OK
    v = json.loads((out / "verdict.json").read_text())
    assert v["flag"] == "STABLE"
    assert not v["truncated"]


@pytest.mark.slow
def test_classify_gfl_dominant_scenario(tmp_path):
    out = tmp_path / "out"
    sc = SCENARIOS / "gfl_dominant.ini"
    assert main(["classify", "--scenario", str(sc), "--out", str(out), "--no-svg"]) == EXIT_OK
    v = json.loads((out / "verdict.json").read_text())
    assert v["flag"] == "GFL"
    assert v["d_fl"] < 0.02 < v["d_fm"]


def test_console_script_runs(tmp_path):
    sc = scenario(tmp_path, enabled="false", t_end=0.5)
    r = subprocess.run([sys.executable, "-m", "hybres.cli", "simulate", "--scenario", str(sc),
                        "--out", str(tmp_path / "o"), "--no-svg"],
                       capture_output=True, text=True)
    assert r.returncode == 0
    assert "trajectory.csv" in r.stdout.split()
    r = subprocess.run([sys.executable, "-m", "hybres.cli", "bogus"], capture_output=True)
    assert r.returncode != 0
