"""Scenario files: sectioned key/value text with the published defaults.

A scenario has five sections. ``network`` and ``fault`` are required; any
omitted key in ``gfm``, ``gfl`` or ``run`` takes the default listed in
``DEFAULTS`` and is reported in ``Scenario.defaults_applied``.

Example (the reference case)::

    [network]
    buses = 1:grid, 2:gfm, 3:gfl, 4:passive
    branches = 1-4:0.02+0.093j, 2-4:0.007+0.055j, 3-4:0.01+0.065j

    [fault]
    bus = 4
    resistance = 1.0
    t_start = 0.0
    t_clear = 1.2

Current limits are given as ratios to the pre-fault terminal current
(``i_max_ratio``) unless an absolute ``i_max`` is supplied.  The GFL nominal
current and angle default to the values that deliver its power reference at
the pre-fault equilibrium voltage.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .algebraic import AlgebraicState, Saturation, solve_mode_field, state_from_field
from .analysis import initial_equilibrium, reference_saturation
from .devices import GflMode, GflParams, GfmMode, GfmParams, Params, gfl_nominal_injection
from .errors import NetworkError, ValidationError
from .network import Branch, FaultStage, NetworkModel, ReducedNetwork, Shunt, reduce_network
from .regions import GridSpec

SECTIONS = ("network", "gfm", "gfl", "fault", "run")

# Values from the published parameter table and system description.
DEFAULTS: dict[str, dict[str, object]] = {
    "network": {
        "s_base": 100.0,
        "v_base": 230.0,
        "f_base": 50.0,
        "u_sys": 1.0,
        "shunts": "",
    },
    "gfm": {
        "p_ref": 1.68,
        "q_ref": 0.21,
        "u0": 1.01,
        "j": 0.5,
        "d": 1.0,
        "k_q": 0.5,
        "i_max_ratio": 1.5,
        "i_max": None,
        "i_sa": None,
        "phi_sa_policy": "hold",
        "phi_sa": 0.0,
    },
    "gfl": {
        "p_ref": 1.39,
        "q_ref": 0.27,
        "i_max_ratio": 1.2,
        "i_max": None,
        "i0": None,
        "phi0": None,
        "k_i_lvrt": 0.5,
        "k_i_hvrt": 2.46,
        "k_phi_lvrt": None,
        "k_phi_hvrt": None,
        "u_lv": 0.9,
        "u_hv": 1.1,
        "kp_pll": 10.0,
        "ki_pll": 100.0,
    },
    "fault": {
        "enabled": True,
        "t_start": 0.0,
        "tripped_branches": "",
    },
    "run": {
        "dt": 1e-4,
        "t_end": 3.0,
        "d12_range": "-3.141592653589793, 3.141592653589793",
        "d13_range": "-3.141592653589793, 3.141592653589793",
        "resolution": "401, 401",
        "map_stages": "fault, postfault",
        "eps_band": 0.02,
        "capture_radius": 0.05,
        "out": "out",
    },
}
REQUIRED = {"network": ("buses", "branches"), "fault": ("bus", "resistance", "t_clear")}


@dataclass(frozen=True)
class GfmSettings:
    p_ref: float
    q_ref: float
    u0: float
    j: float
    d: float
    k_q: float
    i_max_ratio: float
    i_max: float | None
    i_sa: float | None
    phi_sa_policy: str
    phi_sa: float

    def __post_init__(self):
        if self.i_max_ratio <= 0:
            raise ValidationError("gfm.i_max_ratio", "must be positive")
        if self.phi_sa_policy not in ("hold", "fixed"):
            raise ValidationError("gfm.phi_sa_policy", "must be 'hold' or 'fixed'")
        if self.j <= 0:
            raise ValidationError("gfm.j", "virtual inertia must be positive")
        if self.d < 0:
            raise ValidationError("gfm.d", "virtual damping must be non-negative")


@dataclass(frozen=True)
class GflSettings:
    p_ref: float
    q_ref: float
    i_max_ratio: float
    i_max: float | None
    i0: float | None
    phi0: float | None
    k_i_lvrt: float
    k_i_hvrt: float
    k_phi_lvrt: float | None
    k_phi_hvrt: float | None
    u_lv: float
    u_hv: float
    kp_pll: float
    ki_pll: float

    def __post_init__(self):
        if not 0 < self.u_lv < self.u_hv:
            raise ValidationError("gfl.u_lv", f"requires 0 < u_lv < u_hv, got u_lv={self.u_lv}, "
                                              f"u_hv={self.u_hv}")
        if self.i_max_ratio < 1:
            raise ValidationError("gfl.i_max_ratio", "current limit below nominal current")
        if self.kp_pll <= 0 or self.ki_pll <= 0:
            raise ValidationError("gfl.kp_pll", "PLL gains must be positive")


@dataclass(frozen=True)
class RunSettings:
    dt: float
    t_end: float
    d12_range: tuple[float, float]
    d13_range: tuple[float, float]
    resolution: tuple[int, int]
    map_stages: tuple[str, ...]
    eps_band: float
    capture_radius: float
    out: str

    def __post_init__(self):
        if self.dt <= 0:
            raise ValidationError("run.dt", "must be positive")
        if self.t_end <= 0:
            raise ValidationError("run.t_end", "must be positive")
        if min(self.resolution) < 3:
            raise ValidationError("run.resolution", "at least 3 points per axis")
        for s in self.map_stages:
            if s not in ("prefault", "fault", "postfault"):
                raise ValidationError("run.map_stages", f"unknown stage {s!r}")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(*self.d12_range, *self.d13_range, *self.resolution)


@dataclass(frozen=True)
class Scenario:
    network: NetworkModel
    gfm: GfmSettings
    gfl: GflSettings
    fault: FaultStage
    fault_enabled: bool
    run: RunSettings
    defaults_applied: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.fault_enabled:
            if self.fault.bus not in self.network.buses:
                raise ValidationError("fault.bus", f"bus {self.fault.bus} does not exist")
            if self.run.t_end <= self.fault.t_clear:
                raise ValidationError("run.t_end", "must exceed the fault clear time")
            for k in self.fault.tripped_branches:
                if not 0 <= k < len(self.network.branches):
                    raise ValidationError("fault.tripped_branches", f"no branch with index {k}")


# --------------------------------------------------------------------------
# parsing


def _float(sec, key, raw):
    try:
        return float(raw)
    except ValueError:
        raise ValidationError(f"{sec}.{key}", f"not a number: {raw!r}") from None


def _opt_float(sec, key, raw):
    if raw is None or str(raw).strip().lower() in ("", "none", "auto"):
        return None
    return _float(sec, key, raw)


def _pairs(sec, key, raw):
    out = []
    for item in str(raw).split(","):
        item = item.strip()
        if not item:
            continue
        if ":" not in item:
            raise ValidationError(f"{sec}.{key}", f"expected 'a:b' entries, got {item!r}")
        a, b = item.split(":", 1)
        out.append((a.strip(), b.strip()))
    return out


def _complex(sec, key, raw):
    try:
        return complex(raw.replace(" ", ""))
    except ValueError:
        raise ValidationError(f"{sec}.{key}", f"not a complex number: {raw!r}") from None


def _bool(sec, key, raw):
    if isinstance(raw, bool):
        return raw
    v = str(raw).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"{sec}.{key}", f"not a boolean: {raw!r}")


def _floats(sec, key, raw, n, cast=float):
    parts = [p.strip() for p in str(raw).split(",") if p.strip()]
    if len(parts) != n:
        raise ValidationError(f"{sec}.{key}", f"expected {n} comma-separated values")
    try:
        return tuple(cast(p) for p in parts)
    except ValueError:
        raise ValidationError(f"{sec}.{key}", f"bad value list {raw!r}") from None


def parse_scenario_text(text: str) -> Scenario:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValidationError("scenario", f"malformed file: {exc}") from None
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ValidationError(sec, "unknown section")
    applied = []

    def get(sec, key):
        if cp.has_option(sec, key):
            return cp.get(sec, key)
        if key in REQUIRED.get(sec, ()):
            raise ValidationError(f"{sec}.{key}", "missing required key")
        applied.append(f"{sec}.{key}")
        return DEFAULTS[sec][key]

    for sec, keys in REQUIRED.items():
        if not cp.has_section(sec):
            raise ValidationError(sec, "missing required section")
    for sec in SECTIONS:
        if cp.has_section(sec):
            known = set(DEFAULTS.get(sec, {})) | set(REQUIRED.get(sec, ()))
            for key in cp.options(sec):
                if key not in known:
                    raise ValidationError(f"{sec}.{key}", "unknown key")

    # network
    try:
        buses = {int(a): b for a, b in _pairs("network", "buses", get("network", "buses"))}
    except ValueError:
        raise ValidationError("network.buses", "bus ids must be integers") from None
    branches = []
    for a, b in _pairs("network", "branches", get("network", "branches")):
        ends = a.split("-")
        if len(ends) != 2:
            raise ValidationError("network.branches", f"expected 'from-to:z', got {a!r}")
        branches.append(Branch(int(ends[0]), int(ends[1]), _complex("network", "branches", b)))
    shunts = tuple(Shunt(int(a), _complex("network", "shunts", b))
                   for a, b in _pairs("network", "shunts", get("network", "shunts")))
    try:
        model = NetworkModel(
            buses=buses, branches=tuple(branches), shunts=shunts,
            s_base=_float("network", "s_base", get("network", "s_base")),
            v_base=_float("network", "v_base", get("network", "v_base")),
            f_base=_float("network", "f_base", get("network", "f_base")),
            u_sys=_float("network", "u_sys", get("network", "u_sys")),
        )
    except NetworkError as exc:
        raise ValidationError("network", str(exc)) from None

    def section(sec, cls):
        kw = {}
        for f in fields(cls):
            raw = get(sec, f.name)
            if f.name == "phi_sa_policy":
                kw[f.name] = str(raw).strip()
            elif DEFAULTS[sec].get(f.name, 0.0) is None:
                kw[f.name] = _opt_float(sec, f.name, raw)
            else:
                kw[f.name] = _float(sec, f.name, raw)
        return cls(**kw)

    gfm = section("gfm", GfmSettings)
    gfl = section("gfl", GflSettings)

    tripped = tuple(int(v) for v in str(get("fault", "tripped_branches")).split(",") if v.strip())
    try:
        fault = FaultStage(
            bus=int(get("fault", "bus")),
            resistance=_float("fault", "resistance", get("fault", "resistance")),
            t_start=_float("fault", "t_start", get("fault", "t_start")),
            t_clear=_float("fault", "t_clear", get("fault", "t_clear")),
            tripped_branches=tripped,
        )
    except NetworkError as exc:
        raise ValidationError("fault", str(exc)) from None
    except ValueError:
        raise ValidationError("fault.bus", "must be an integer") from None
    enabled = _bool("fault", "enabled", get("fault", "enabled"))

    run = RunSettings(
        dt=_float("run", "dt", get("run", "dt")),
        t_end=_float("run", "t_end", get("run", "t_end")),
        d12_range=_floats("run", "d12_range", get("run", "d12_range"), 2),
        d13_range=_floats("run", "d13_range", get("run", "d13_range"), 2),
        resolution=_floats("run", "resolution", get("run", "resolution"), 2, int),
        map_stages=tuple(s.strip() for s in str(get("run", "map_stages")).split(",") if s.strip()),
        eps_band=_float("run", "eps_band", get("run", "eps_band")),
        capture_radius=_float("run", "capture_radius", get("run", "capture_radius")),
        out=str(get("run", "out")).strip(),
    )
    return Scenario(model, gfm, gfl, fault, enabled, run, tuple(applied))


def parse_scenario(path: str | Path) -> Scenario:
    p = Path(path)
    if not p.is_file():
        raise ValidationError("scenario", f"file not found: {p}")
    return parse_scenario_text(p.read_text())


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, complex):
        return repr(v).strip("()")
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def serialize_scenario(sc: Scenario) -> str:
    """Text that parses back to an equal scenario."""
    cp = configparser.ConfigParser(interpolation=None)
    net = sc.network
    cp["network"] = {
        "buses": ", ".join(f"{b}:{k}" for b, k in net.buses.items()),
        "branches": ", ".join(f"{br.from_bus}-{br.to_bus}:{_fmt(complex(br.z))}"
                              for br in net.branches),
        "shunts": ", ".join(f"{sh.bus}:{_fmt(complex(sh.y))}" for sh in net.shunts),
        "s_base": _fmt(float(net.s_base)),
        "v_base": _fmt(float(net.v_base)),
        "f_base": _fmt(float(net.f_base)),
        "u_sys": _fmt(float(net.u_sys)),
    }
    cp["gfm"] = {k: _fmt(v) for k, v in asdict(sc.gfm).items()}
    cp["gfl"] = {k: _fmt(v) for k, v in asdict(sc.gfl).items()}
    f = sc.fault
    cp["fault"] = {
        "enabled": _fmt(sc.fault_enabled),
        "bus": str(f.bus),
        "resistance": _fmt(float(f.resistance)),
        "t_start": _fmt(float(f.t_start)),
        "t_clear": _fmt(float(f.t_clear)),
        "tripped_branches": ", ".join(str(k) for k in f.tripped_branches),
    }
    cp["run"] = {k: _fmt(v) for k, v in asdict(sc.run).items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def scenario_dict(sc: Scenario) -> dict:
    """JSON-friendly view of a scenario."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(serialize_scenario(sc))
    return {s: dict(cp[s]) for s in cp.sections()}


TABLE_II_TEXT = """\
[network]
buses = 1:grid, 2:gfm, 3:gfl, 4:passive
branches = 1-4:0.02+0.093j, 2-4:0.007+0.055j, 3-4:0.01+0.065j

[fault]
bus = 4
resistance = 1.0
t_start = 0.0
t_clear = 1.2
"""


def table_ii() -> Scenario:
    """The reference scenario with every device default applied."""
    return parse_scenario_text(TABLE_II_TEXT)


# --------------------------------------------------------------------------
# resolution against the pre-fault equilibrium


@dataclass
class Resolved:
    scenario: Scenario
    params: Params
    nets: dict[str, ReducedNetwork]
    sep1: AlgebraicState
    i_fm0: float

    @property
    def fault(self) -> FaultStage | None:
        return self.scenario.fault if self.scenario.fault_enabled else None

    def saturation(self) -> Saturation:
        """Saturated current used for static maps (see ``reference_saturation``)."""
        net = self.nets.get("fault", self.nets["prefault"])
        return reference_saturation(net, self.params, self.sep1.d12, self.sep1.d13)


def _gfl_params(s: GflSettings, u_fl: float) -> GflParams:
    i0_nom, phi0_nom = gfl_nominal_injection(s.p_ref, s.q_ref, u_fl)
    i0 = s.i0 if s.i0 is not None else i0_nom
    phi0 = s.phi0 if s.phi0 is not None else phi0_nom
    # angle gains that reach the +-pi/2 clamp at the deepest sag / matching swell
    k_lv = s.k_phi_lvrt if s.k_phi_lvrt is not None else (math.pi / 2 + phi0) / s.u_lv
    k_hv = s.k_phi_hvrt if s.k_phi_hvrt is not None else (math.pi / 2 - phi0) / s.u_lv
    i_max = s.i_max if s.i_max is not None else s.i_max_ratio * i0
    try:
        return GflParams(s.p_ref, s.q_ref, float(i0), float(phi0), float(i_max), s.k_i_lvrt,
                         float(k_lv), s.k_i_hvrt, float(k_hv), s.u_lv, s.u_hv, s.kp_pll,
                         s.ki_pll)
    except ValidationError:
        raise
    except ValueError as exc:
        raise ValidationError("gfl", str(exc)) from None


def _gfm_params(s: GfmSettings, i_max: float) -> GfmParams:
    return GfmParams(s.p_ref, s.q_ref, s.u0, s.j, s.d, s.k_q, float(i_max),
                     None if s.i_sa is None else float(s.i_sa), s.phi_sa_policy, s.phi_sa)


def resolve(sc: Scenario) -> Resolved:
    """Solve the pre-fault equilibrium and fix every equilibrium-dependent parameter."""
    fault = sc.fault
    nets = {"prefault": reduce_network(sc.network, fault.at("prefault"))}
    if sc.fault_enabled:
        nets["fault"] = reduce_network(sc.network, fault.at("fault"))
        nets["postfault"] = reduce_network(sc.network, fault.at("postfault"))
    unlimited = _gfm_params(replace(sc.gfm, i_sa=None), 1e9)
    make = lambda u: Params(unlimited, _gfl_params(sc.gfl, float(u)))
    p0, sep = initial_equilibrium(nets["prefault"], make)
    i_fm0 = sep.i_fm
    i_max = sc.gfm.i_max if sc.gfm.i_max is not None else sc.gfm.i_max_ratio * i_fm0
    params = Params(_gfm_params(sc.gfm, i_max), p0.gfl)
    fld = solve_mode_field(sep.d12, sep.d13, GfmMode.NC, GflMode.NC, nets["prefault"], params,
                           guess=np.asarray(sep.x))
    return Resolved(sc, params, nets, state_from_field(fld, 0), float(i_fm0))
