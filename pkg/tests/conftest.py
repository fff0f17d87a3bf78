"""Shared fixtures: the reference scenario resolved once per session."""

from __future__ import annotations

import numpy as np
import pytest

from hybres.dynamics import DynamicState, integrate
from hybres.regions import GridSpec, region_map
from hybres.scenario import resolve, table_ii


@pytest.fixture(scope="session")
def resolved():
    return resolve(table_ii())


@pytest.fixture(scope="session")
def params(resolved):
    return resolved.params


@pytest.fixture(scope="session")
def nets(resolved):
    return resolved.nets


@pytest.fixture(scope="session")
def sep1(resolved):
    return resolved.sep1


@pytest.fixture(scope="session")
def sat(resolved):
    return resolved.saturation()


@pytest.fixture(scope="session")
def post_map(nets, params, sat):
    return region_map(nets["postfault"], params, GridSpec(n12=121, n13=121), sat=sat)


@pytest.fixture(scope="session")
def fault_traj(resolved):
    """Reference fault run at a coarse step (shared by several modules)."""
    s = resolved.sep1
    return integrate(DynamicState(s.d12, 0.0, s.d13, 0.0), resolved.nets, resolved.params,
                     resolved.fault, 3.0, 1e-3, initial_n=2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion."""

    def _report(k: int, ok: bool, detail: str):
        _ACCEPTANCE[k] = (bool(ok), detail)
        print(f"criterion {k}: {'PASS' if ok else 'FAIL'} {detail}")

    return _report


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} {detail}")
