"""Admittance assembly, Kron reduction and source-partition matrices.

The studied system has three active buses (stiff grid, GFM converter, GFL
converter) tied to passive buses.  Active buses are always ordered
grid, gfm, gfl so that row/column indices of every reduced matrix line up
with the 1-based element names used throughout the package (``M[2, 3]`` is
the GFM row, GFL column).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import NetworkError

BUS_KINDS = ("grid", "gfm", "gfl", "passive")
STAGES = ("prefault", "fault", "postfault")

# Partitions of the reduced 3-bus network (0-based): voltage sources | current sources.
NC_PARTITION = ((0, 1), (2,))
CS_PARTITION = ((0,), (1, 2))


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    z: complex


@dataclass(frozen=True)
class Shunt:
    bus: int
    y: complex


@dataclass(frozen=True)
class NetworkModel:
    """Buses, branches and shunts of the hybrid system, in per unit.

    ``buses`` maps bus id to kind. Branch impedances and shunt admittances
    are on the system base given by ``s_base`` (MVA) and ``v_base`` (kV).
    """

    buses: dict[int, str]
    branches: tuple[Branch, ...]
    shunts: tuple[Shunt, ...] = ()
    s_base: float = 100.0
    v_base: float = 230.0
    f_base: float = 50.0
    u_sys: float = 1.0

    def __post_init__(self):
        for bid, kind in self.buses.items():
            if kind not in BUS_KINDS:
                raise NetworkError(f"bus {bid}: unknown kind {kind!r}")
        for kind in ("grid", "gfm", "gfl"):
            count = sum(1 for k in self.buses.values() if k == kind)
            if count != 1:
                raise NetworkError(f"expected exactly one {kind} bus, found {count}")
        for br in self.branches:
            for b in (br.from_bus, br.to_bus):
                if b not in self.buses:
                    raise NetworkError(f"branch {br.from_bus}-{br.to_bus}: unknown bus {b}")
            if br.from_bus == br.to_bus:
                raise NetworkError(f"branch {br.from_bus}-{br.to_bus}: self loop")
            if abs(br.z) == 0.0:
                raise NetworkError(f"branch {br.from_bus}-{br.to_bus}: zero impedance")
        for sh in self.shunts:
            if sh.bus not in self.buses:
                raise NetworkError(f"shunt at unknown bus {sh.bus}")
        if self.s_base <= 0 or self.v_base <= 0:
            raise NetworkError("base quantities must be positive")

    @property
    def z_base(self) -> float:
        """Base impedance in ohm."""
        return self.v_base**2 / self.s_base

    def bus_of(self, kind: str) -> int:
        return next(b for b, k in self.buses.items() if k == kind)

    @property
    def bus_ids(self) -> list[int]:
        """Active buses (grid, gfm, gfl) followed by passive buses in id order."""
        active = [self.bus_of(k) for k in ("grid", "gfm", "gfl")]
        passive = sorted(b for b, k in self.buses.items() if k == "passive")
        return active + passive

    @property
    def passive_ids(self) -> list[int]:
        return self.bus_ids[3:]


@dataclass(frozen=True)
class FaultStage:
    """A bolted-through-resistance fault and the stage being evaluated.

    ``resistance`` is in ohm. ``tripped_branches`` lists indices into
    ``NetworkModel.branches`` removed in the post-fault stage.
    """

    stage: str = "prefault"
    bus: int = 4
    resistance: float = 1.0
    t_start: float = 0.0
    t_clear: float = 1.2
    tripped_branches: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise NetworkError(f"unknown stage {self.stage!r}")
        if self.resistance <= 0:
            raise NetworkError("fault resistance must be positive")
        if self.t_clear <= self.t_start:
            raise NetworkError("fault clear time must exceed start time")

    def at(self, stage: str) -> "FaultStage":
        return replace(self, stage=stage)


def build_admittance(model: NetworkModel, stage: FaultStage | None = None) -> np.ndarray:
    """Nodal admittance matrix ordered as ``model.bus_ids``.

    During the fault stage a shunt conductance ``z_base / R_fault`` (p.u.) is
    added at the fault bus.
    """
    stage = stage or FaultStage()
    order = model.bus_ids
    pos = {b: i for i, b in enumerate(order)}
    n = len(order)
    Y = np.zeros((n, n), dtype=complex)
    skip = set(stage.tripped_branches) if stage.stage == "postfault" else set()
    for k, br in enumerate(model.branches):
        if k in skip:
            continue
        y = 1.0 / br.z
        i, j = pos[br.from_bus], pos[br.to_bus]
        Y[i, i] += y
        Y[j, j] += y
        Y[i, j] -= y
        Y[j, i] -= y
    for sh in model.shunts:
        Y[pos[sh.bus], pos[sh.bus]] += sh.y
    if stage.stage == "fault":
        if stage.bus not in pos:
            raise NetworkError(f"fault bus {stage.bus} does not exist")
        Y[pos[stage.bus], pos[stage.bus]] += model.z_base / stage.resistance
    return Y


def kron_reduce(Y: np.ndarray, passive: list[int] | tuple[int, ...]) -> np.ndarray:
    """Eliminate the ``passive`` rows/columns of ``Y`` (Schur complement)."""
    Y = np.asarray(Y, dtype=complex)
    passive = list(passive)
    active = [i for i in range(Y.shape[0]) if i not in passive]
    if not passive:
        return Y[np.ix_(active, active)].copy()
    Ya = Y[np.ix_(active, active)]
    Yb = Y[np.ix_(active, passive)]
    Yc = Y[np.ix_(passive, active)]
    Yd = Y[np.ix_(passive, passive)]
    try:
        X = np.linalg.solve(Yd, Yc)
    except np.linalg.LinAlgError as exc:
        raise NetworkError("singular passive block: isolated or degenerate passive node") from exc
    if not np.all(np.isfinite(X)) or np.linalg.cond(Yd) > 1e14:
        raise NetworkError("singular passive block: isolated or degenerate passive node")
    return Ya - Yb @ X


def partition_matrix(Yr: np.ndarray, v_nodes, i_nodes) -> np.ndarray:
    """Hybrid matrix mapping (U_V, I_I) to (I_V, U_I).

    Rows and columns are returned in the original node order, so for the
    CS partition ``M[1, 1]`` still refers to the GFM node.
    """
    v_nodes, i_nodes = list(v_nodes), list(i_nodes)
    n = Yr.shape[0]
    if sorted(v_nodes + i_nodes) != list(range(n)):
        raise NetworkError("voltage and current node sets must partition the active nodes")
    Yra = Yr[np.ix_(v_nodes, v_nodes)]
    Yrb = Yr[np.ix_(v_nodes, i_nodes)]
    Yrc = Yr[np.ix_(i_nodes, v_nodes)]
    Yrd = Yr[np.ix_(i_nodes, i_nodes)]
    if np.linalg.cond(Yrd) > 1e14:
        raise NetworkError("singular current-source block: ill-posed source partition")
    Yrd_inv = np.linalg.inv(Yrd)
    blocks = np.block([
        [Yra - Yrb @ Yrd_inv @ Yrc, Yrb @ Yrd_inv],
        [-Yrd_inv @ Yrc, Yrd_inv],
    ])
    order = v_nodes + i_nodes
    M = np.empty_like(blocks)
    M[np.ix_(order, order)] = blocks
    return M


@dataclass(frozen=True)
class ReducedNetwork:
    """Kron-reduced admittance of one stage and its two partition matrices."""

    y_r: np.ndarray
    m_nc: np.ndarray
    m_cs: np.ndarray
    u_sys: float = 1.0
    stage: str = "prefault"

    @staticmethod
    def polar(M: np.ndarray, i: int, j: int) -> tuple[float, float]:
        """Magnitude and angle of the 1-based element ``(i, j)``."""
        z = M[i - 1, j - 1]
        return float(abs(z)), float(np.angle(z))


def reduce_network(model: NetworkModel, stage: FaultStage | None = None) -> ReducedNetwork:
    stage = stage or FaultStage()
    Y = build_admittance(model, stage)
    Yr = kron_reduce(Y, list(range(3, Y.shape[0])))
    return ReducedNetwork(
        y_r=Yr,
        m_nc=partition_matrix(Yr, *NC_PARTITION),
        m_cs=partition_matrix(Yr, *CS_PARTITION),
        u_sys=model.u_sys,
        stage=stage.stage,
    )


def stage_networks(model: NetworkModel, fault: FaultStage) -> dict[str, ReducedNetwork]:
    return {s: reduce_network(model, fault.at(s)) for s in STAGES}


def write_matrix_csv(path: str | Path, M: np.ndarray) -> None:
    """Write a complex matrix as rows of (row, col, re, im), 1-based indices."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "re", "im"])
        for i in range(M.shape[0]):
            for j in range(M.shape[1]):
                w.writerow([i + 1, j + 1, repr(float(M[i, j].real)), repr(float(M[i, j].imag))])
