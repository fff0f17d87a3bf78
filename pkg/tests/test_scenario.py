import math
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybres.errors import ValidationError
from hybres.scenario import (
    DEFAULTS,
    TABLE_II_TEXT,
    parse_scenario,
    parse_scenario_text,
    resolve,
    scenario_dict,
    serialize_scenario,
    table_ii,
)

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"


def with_sections(extra: str) -> str:
    return TABLE_II_TEXT + "\n" + extra


def test_minimal_file_gets_defaults():
    sc = parse_scenario_text(TABLE_II_TEXT)
    assert sc.gfm.k_q == 0.5
    assert sc.gfl.kp_pll == 10.0
    assert sc.gfl.ki_pll == 100.0
    assert (sc.gfm.p_ref, sc.gfm.q_ref) == (1.68, 0.21)
    assert (sc.gfl.p_ref, sc.gfl.q_ref) == (1.39, 0.27)
    for key in ("gfm.k_q", "gfl.kp_pll", "gfl.ki_pll", "gfl.u_lv", "run.dt"):
        assert key in sc.defaults_applied
    assert "network.buses" not in sc.defaults_applied
    assert "fault.bus" not in sc.defaults_applied


def test_explicit_keys_are_not_reported_as_defaults():
    sc = parse_scenario_text(with_sections("[gfm]\nk_q = 0.7\n"))
    assert sc.gfm.k_q == 0.7
    assert "gfm.k_q" not in sc.defaults_applied
    assert "gfm.j" in sc.defaults_applied


def test_reference_file_matches_builtin():
    assert parse_scenario(SCENARIOS / "table2.ini") == table_ii()


def test_interval_violation_names_field():
    with pytest.raises(ValidationError) as e:
        parse_scenario_text(with_sections("[gfl]\nu_lv = 1.2\nu_hv = 1.1\n"))
    assert e.value.field == "gfl.u_lv"
    assert "u_lv < u_hv" in str(e.value)


@pytest.mark.parametrize("section,key", [("network", "branches"), ("fault", "t_clear"),
                                         ("fault", "bus")])
def test_missing_required_key(section, key):
    lines = [ln for ln in TABLE_II_TEXT.splitlines() if not ln.startswith(f"{key} =")]
    with pytest.raises(ValidationError) as e:
        parse_scenario_text("\n".join(lines))
    assert e.value.field == f"{section}.{key}"


def test_missing_required_section():
    text = TABLE_II_TEXT.split("[fault]")[0]
    with pytest.raises(ValidationError) as e:
        parse_scenario_text(text)
    assert e.value.field == "fault"


def test_unknown_section_and_key():
    with pytest.raises(ValidationError) as e:
        parse_scenario_text(with_sections("[plant]\nx = 1\n"))
    assert e.value.field == "plant"
    with pytest.raises(ValidationError) as e:
        parse_scenario_text(with_sections("[gfm]\ninertia = 1\n"))
    assert e.value.field == "gfm.inertia"


@pytest.mark.parametrize("extra,field", [
    ("[gfm]\nj = abc\n", "gfm.j"),
    ("[gfm]\nj = -1\n", "gfm.j"),
    ("[gfm]\nphi_sa_policy = drift\n", "gfm.phi_sa_policy"),
    ("[gfl]\nkp_pll = 0\n", "gfl.kp_pll"),
    ("[gfl]\ni_max_ratio = 0.9\n", "gfl.i_max_ratio"),
    ("[run]\ndt = 0\n", "run.dt"),
    ("[run]\nt_end = 1.0\n", "run.t_end"),
    ("[run]\nresolution = 2, 2\n", "run.resolution"),
    ("[run]\nmap_stages = during\n", "run.map_stages"),
])
def test_field_validation(extra, field):
    with pytest.raises(ValidationError) as e:
        parse_scenario_text(with_sections(extra))
    assert e.value.field == field


def test_fault_bus_must_exist():
    with pytest.raises(ValidationError) as e:
        parse_scenario_text(TABLE_II_TEXT.replace("bus = 4", "bus = 9"))
    assert e.value.field == "fault.bus"


def test_tripped_branch_index_checked():
    with pytest.raises(ValidationError) as e:
        parse_scenario_text(TABLE_II_TEXT + "tripped_branches = 5\n")
    assert e.value.field == "fault.tripped_branches"


def test_disabled_fault_skips_time_check():
    sc = parse_scenario_text(with_sections("[run]\nt_end = 1.0\n").replace(
        "[fault]\n", "[fault]\nenabled = false\n"))
    assert not sc.fault_enabled


def test_missing_file():
    with pytest.raises(ValidationError):
        parse_scenario("/nonexistent/scenario.ini")


def test_round_trip_identity():
    for sc in (table_ii(), parse_scenario(SCENARIOS / "gfl_dominant.ini")):
        text = serialize_scenario(sc)
        again = parse_scenario_text(text)
        assert again == sc
        assert serialize_scenario(again) == text


@settings(max_examples=60, deadline=None)
@given(
    st.floats(0.1, 5.0), st.floats(0.0, 3.0), st.floats(0.01, 2.0),
    st.floats(0.5, 0.99), st.floats(1.01, 1.5), st.floats(1.0, 100.0),
    st.floats(1e-5, 1e-2), st.integers(3, 50),
)
def test_round_trip_random(j, d, k_q, u_lv, u_hv, kp, dt, res):
    sc = parse_scenario_text(with_sections(
        f"[gfm]\nj = {j!r}\nd = {d!r}\nk_q = {k_q!r}\n"
        f"[gfl]\nu_lv = {u_lv!r}\nu_hv = {u_hv!r}\nkp_pll = {kp!r}\n"
        f"[run]\ndt = {dt!r}\nresolution = {res}, {res + 1}\n"))
    assert parse_scenario_text(serialize_scenario(sc)) == sc


def test_scenario_dict_lists_every_section():
    d = scenario_dict(table_ii())
    assert list(d) == ["network", "gfm", "gfl", "fault", "run"]
    assert d["gfm"]["i_max"] == "auto"
    assert set(DEFAULTS["gfl"]) <= set(d["gfl"])


def test_resolve_reference_values(resolved):
    p = resolved.params
    assert resolved.i_fm0 == pytest.approx(1.6065342892, abs=1e-9)
    assert p.gfm.i_max == pytest.approx(1.5 * resolved.i_fm0, rel=1e-12)
    assert p.gfl.i0 == pytest.approx(1.3347684955, abs=1e-9)
    assert p.gfl.phi0 == pytest.approx(-0.19185545, abs=1e-8)
    assert p.gfl.i_max == pytest.approx(1.2 * p.gfl.i0, rel=1e-12)
    assert p.gfl.k_phi_lvrt == pytest.approx((math.pi / 2 + p.gfl.phi0) / 0.9, rel=1e-12)
    assert p.gfl.k_phi_hvrt == pytest.approx((math.pi / 2 - p.gfl.phi0) / 0.9, rel=1e-12)
    assert set(resolved.nets) == {"prefault", "fault", "postfault"}


def test_absolute_limit_overrides_ratio():
    r = resolve(parse_scenario_text(with_sections("[gfm]\ni_max = 2.0\n")))
    assert r.params.gfm.i_max == 2.0
    assert r.params.gfm.i_sa == 2.0
