"""Command-line entry point: one scenario file drives every subcommand.

Usage::

    hybres <subcommand> --scenario <path> [--out <dir>] [--no-svg]

Subcommands: regions, equilibria, simulate, damping-map, classify, energy.
Each run writes its CSV artifacts, optional SVG renderings and a
``manifest.json`` holding the resolved scenario and SHA-256 hashes of the
emitted files.  Model breakdowns write ``diagnostic.json`` and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    AmbiguityError,
    braking_masks,
    damping_map,
    dominant_instability,
    energy_decompose,
    equilibrium_sets,
    force_surfaces,
    wrap,
)
from .dynamics import DynamicState, Trajectory, integrate, write_events_csv, write_trajectory_csv
from .errors import ChatteringError, HybresError, NoSolutionError, ValidationError
from .regions import (
    RegionMap,
    region_map,
    write_boundaries_csv,
    write_region_csv,
    write_region_svg,
)
from .scenario import Resolved, parse_scenario, resolve, scenario_dict
from .svg import line_chart, plane_overlay, sign_map

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("regions", "equilibria", "simulate", "damping-map", "classify", "energy")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_BREAKDOWN = 2


@dataclass
class RunManifest:
    subcommand: str
    version: str
    scenario: dict
    defaults_applied: list[str]
    files: dict[str, str] = field(default_factory=dict)
    status: str = "ok"
    diagnostic: dict | None = None

    def write(self, out: Path) -> None:
        (out / "manifest.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True)
                                           + "\n")


class Breakdown(HybresError):
    """A model breakdown that still produced partial artifacts."""

    def __init__(self, info: dict):
        super().__init__(info.get("message", "model breakdown"))
        self.info = info


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _f(v) -> str:
    return f"{float(v):.12g}"


# --------------------------------------------------------------------------
# shared pieces


def _stage_net(res: Resolved, stage: str):
    if stage not in res.nets:
        raise ValidationError("run.map_stages", f"stage {stage!r} requires an enabled fault")
    return res.nets[stage]


def _map(res: Resolved, stage: str) -> RegionMap:
    return region_map(_stage_net(res, stage), res.params, res.scenario.run.grid,
                      sat=res.saturation())


def _analysis_stage(res: Resolved) -> str:
    return "postfault" if res.fault is not None else "prefault"


def _simulate(res: Resolved) -> Trajectory:
    run = res.scenario.run
    y0 = DynamicState(res.sep1.d12, 0.0, res.sep1.d13, 0.0)
    try:
        traj = integrate(y0, res.nets, res.params, res.fault, run.t_end, run.dt, initial_n=2)
    except ChatteringError as exc:
        raise Breakdown({"kind": "chattering", "message": str(exc),
                         "trajectory": getattr(exc, "trajectory", None)}) from None
    return traj


def _check_truncated(traj: Trajectory) -> None:
    if traj.truncated:
        last = traj.samples[-1]
        raise Breakdown({"kind": "no_solution", "message": traj.diagnostic or "trajectory truncated",
                         "t": last.t, "d12": last.state.d12, "d13": last.state.d13,
                         "n": last.alg.n})


def _write_polylines(path: Path, groups: dict[str, list[np.ndarray]], key: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([key, "polyline", "d12", "d13"])
        for name in groups:
            for j, line in enumerate(groups[name]):
                for p in line:
                    w.writerow([name, j, _f(p[0]), _f(p[1])])


# --------------------------------------------------------------------------
# subcommands; each returns the list of files written


def cmd_regions(res: Resolved, out: Path, svg: bool) -> list[Path]:
    files = []
    summary = {}
    for stage in res.scenario.run.map_stages:
        rm = _map(res, stage)
        p = out / f"regions_{stage}.csv"
        write_region_csv(p, rm)
        b = out / f"region_boundaries_{stage}.csv"
        write_boundaries_csv(b, rm)
        m = out / f"multiplicity_{stage}.csv"
        with open(m, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["d12", "d13", "combinations"])
            for d12, d13, ns in rm.multiple_cells():
                w.writerow([_f(d12), _f(d13), ";".join(str(k) for k in ns)])
        files += [p, b, m]
        summary[stage] = {"counts": {str(k): v for k, v in rm.counts().items()},
                          "recheck_failures": int(np.sum(~rm.recheck(res.params))),
                          "multiple_cells": int(np.sum(rm.multiplicity > 1))}
        if svg:
            s = out / f"regions_{stage}.svg"
            write_region_svg(s, rm)
            files.append(s)
    j = out / "regions_summary.json"
    j.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return files + [j]


def cmd_equilibria(res: Resolved, out: Path, svg: bool) -> list[Path]:
    stage = _analysis_stage(res)
    net = res.nets[stage]
    rm = _map(res, stage)
    sets = equilibrium_sets(rm, net, res.params, res.saturation())
    br = out / "equilibrium_branches.csv"
    _write_polylines(br, sets.branches(), "branch")
    pts = out / "equilibrium_points.csv"
    with open(pts, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "d12", "d13", "n", "P_FM", "u_FL_q"])
        for kind, group in (("SEP1", sets.sep1), ("SEP2", sets.sep2)):
            for st in group:
                w.writerow([kind, _f(st.d12), _f(st.d13), st.n, _f(st.p_fm), _f(st.u_fl_q)])
    forces = out / f"forces_{stage}.csv"
    f_fm, f_fl = force_surfaces(rm, res.params)
    b_fm, b_fl = braking_masks(rm, res.params)
    D12, D13 = rm.grid.mesh()
    with open(forces, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["d12", "d13", "n", "F_FM_p", "F_FL_p", "braking_fm", "braking_fl"])
        for r in range(D12.shape[0]):
            for c in range(D12.shape[1]):
                w.writerow([_f(D12[r, c]), _f(D13[r, c]), int(rm.n[r, c]), _f(f_fm[r, c]),
                            _f(f_fl[r, c]), int(b_fm[r, c]), int(b_fl[r, c])])
    files = [br, pts, forces]
    if svg:
        s = out / "equilibria.svg"
        plane_overlay(s, rm.grid, rm.n, sets.branches(),
                      {"SEP1": [(x.d12, x.d13) for x in sets.sep1],
                       "SEP2": [(x.d12, x.d13) for x in sets.sep2]},
                      title=f"equilibrium sets ({stage})")
        files.append(s)
    return files


def _trajectory_files(traj: Trajectory, out: Path, svg: bool) -> list[Path]:
    tp, ep = out / "trajectory.csv", out / "events.csv"
    write_trajectory_csv(tp, traj)
    write_events_csv(ep, traj)
    files = [tp, ep]
    if svg and traj.grid():
        t = traj.column("t")
        s1 = out / "angles.svg"
        line_chart(s1, [("delta12", t, traj.column("d12")), ("delta13", t, traj.column("d13"))],
                   title="rotor and PLL angles")
        s2 = out / "voltages.svg"
        line_chart(s2, [("U_FM", t, traj.column("u_fm")), ("U_FL", t, traj.column("u_fl")),
                        ("GFM phase", t, wrap(traj.column("d12")))],
                   title="terminal voltages and GFM voltage phase")
        s3 = out / "combination.svg"
        line_chart(s3, [("n", t, traj.column("n"))], title="control combination")
        files += [s1, s2, s3]
    return files


def cmd_simulate(res: Resolved, out: Path, svg: bool) -> list[Path]:
    try:
        traj = _simulate(res)
    except Breakdown as exc:
        partial = exc.info.pop("trajectory", None)
        if partial is not None:
            exc.info["files"] = [str(p.name) for p in _trajectory_files(partial, out, svg)]
        raise
    files = _trajectory_files(traj, out, svg)
    _check_truncated_with(traj, files)
    return files


def _check_truncated_with(traj: Trajectory, files: list[Path]) -> None:
    try:
        _check_truncated(traj)
    except Breakdown as exc:
        exc.info["files"] = [p.name for p in files]
        raise


def cmd_damping_map(res: Resolved, out: Path, svg: bool) -> list[Path]:
    stage = _analysis_stage(res)
    rm = _map(res, stage)
    dm = damping_map(rm, res.nets[stage], res.params)
    p = out / f"damping_{stage}.csv"
    D12, D13 = rm.grid.mesh()
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["d12", "d13", "n", "D_FL_12", "D_FL_13", "braking_fm", "braking_fl"])
        for r in range(D12.shape[0]):
            for c in range(D12.shape[1]):
                w.writerow([_f(D12[r, c]), _f(D13[r, c]), int(dm.n[r, c]), _f(dm.d_fl_12[r, c]),
                            _f(dm.d_fl_13[r, c]), int(dm.braking_fm[r, c]),
                            int(dm.braking_fl[r, c])])
    zc = dm.zero_contours()
    z = out / f"damping_zero_contours_{stage}.csv"
    _write_polylines(z, zc, "field")
    files = [p, z]
    if svg:
        for name, arr, hatch in (("d_fl_12", dm.d_fl_12, dm.braking_fm),
                                 ("d_fl_13", dm.d_fl_13, dm.braking_fl)):
            s = out / f"damping_{name}_{stage}.svg"
            sign_map(s, rm.grid, arr, zc[name], hatch, title=f"{name} sign ({stage})")
            files.append(s)
    return files


def cmd_classify(res: Resolved, out: Path, svg: bool) -> list[Path]:
    traj = _simulate(res)
    stage = _analysis_stage(res)
    rm = _map(res, stage)
    sets = equilibrium_sets(rm, res.nets[stage], res.params, res.saturation())
    run = res.scenario.run
    try:
        result = dominant_instability(traj, sets, eps_band=run.eps_band,
                                      capture=run.capture_radius)
        verdict = {"flag": result.verdict.name, "t": result.t, "d_fm": result.d_fm,
                   "d_fl": result.d_fl, "note": result.note}
    except AmbiguityError as exc:
        raise Breakdown({"kind": "ambiguous", "message": str(exc)}) from None
    verdict["truncated"] = traj.truncated
    v = out / "verdict.json"
    v.write_text(json.dumps(verdict, indent=2, sort_keys=True) + "\n")
    c = out / "verdict.csv"
    with open(c, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["flag", "t", "d_fm", "d_fl"])
        w.writerow([verdict["flag"], "" if result.t is None else _f(result.t),
                    "" if result.d_fm is None else _f(result.d_fm),
                    "" if result.d_fl is None else _f(result.d_fl)])
    files = [v, c]
    _check_truncated_with(traj, files)
    return files


def cmd_energy(res: Resolved, out: Path, svg: bool) -> list[Path]:
    traj = _simulate(res)
    led = energy_decompose(traj)
    p = out / "energy.csv"
    cols = (("t", led.t), ("E_FM_k", led.fm_k), ("E_FM_p", led.fm_p), ("E_FM_d", led.fm_d),
            ("E_FM_residual", led.fm_residual), ("E_FL_k", led.fl_k), ("E_FL_p", led.fl_p),
            ("E_FL_d", led.fl_d), ("E_FL_residual", led.fl_residual))
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([c[0] for c in cols])
        for i in range(led.t.size):
            w.writerow([_f(c[1][i]) for c in cols])
    files = [p]
    if svg:
        s = out / "energy.svg"
        line_chart(s, [("E_FM_k", led.t, led.fm_k), ("E_FM_p", led.t, led.fm_p),
                       ("E_FM_d", led.t, led.fm_d), ("E_FL_k", led.t, led.fl_k),
                       ("E_FL_p", led.t, led.fl_p), ("E_FL_d", led.t, led.fl_d)],
                   title="energy ledger")
        files.append(s)
    _check_truncated_with(traj, files)
    return files


COMMANDS = {
    "regions": cmd_regions,
    "equilibria": cmd_equilibria,
    "simulate": cmd_simulate,
    "damping-map": cmd_damping_map,
    "classify": cmd_classify,
    "energy": cmd_energy,
}


def run_subcommand(name: str, scenario_path: str | Path, out: str | Path | None = None,
                   svg: bool = True) -> RunManifest:
    """Run one subcommand and write its artifacts plus the manifest.

    Raises :class:`Breakdown` (after writing the diagnostic and manifest) when
    the model breaks down, and :class:`ValidationError` for bad scenarios.
    """
    if name not in COMMANDS:
        raise ValueError(f"unknown subcommand {name!r}")
    sc = parse_scenario(scenario_path)
    out = Path(out if out is not None else sc.run.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(name, __version__, scenario_dict(sc), list(sc.defaults_applied))
    failure = None
    try:
        files = COMMANDS[name](resolve(sc), out, svg)
    except ValidationError:
        raise
    except HybresError as exc:
        kind = "no_solution" if isinstance(exc, NoSolutionError) else type(exc).__name__
        info = exc.info if isinstance(exc, Breakdown) else {"kind": kind, "message": str(exc)}
        info = {"subcommand": name, **info}
        d = out / "diagnostic.json"
        d.write_text(json.dumps(info, indent=2, sort_keys=True, default=str) + "\n")
        files = [out / f for f in info.get("files", [])] + [d]
        manifest.status = "breakdown"
        manifest.diagnostic = info
        failure = exc if isinstance(exc, Breakdown) else Breakdown(info)
    manifest.files = {p.name: _sha256(p) for p in sorted(files, key=lambda p: p.name)}
    manifest.write(out)
    if failure is not None:
        raise failure
    return manifest


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hybres", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"hybres {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--scenario", required=True, help="scenario file")
        sp.add_argument("--out", default=None, help="output directory (default: run.out)")
        sp.add_argument("--no-svg", action="store_true", help="skip SVG renderings")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        m = run_subcommand(args.command, args.scenario, args.out, svg=not args.no_svg)
    except ValidationError as exc:
        print(f"hybres: invalid scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Breakdown as exc:
        print(f"hybres: model breakdown: {exc}", file=sys.stderr)
        return EXIT_BREAKDOWN
    if m.defaults_applied:
        print(f"hybres: defaults applied: {', '.join(m.defaults_applied)}", file=sys.stderr)
    for f in m.files:
        print(f)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
