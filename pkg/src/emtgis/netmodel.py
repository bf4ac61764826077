"""Grid data model: buses, branches, machines, black-box regions, admittance.

Everything is per-unit on a single system MVA base; angles are radians
internally (case files carry degrees and are converted at parse time).
The phasor network is the single-phase equivalent of a balanced
three-phase system.
"""

from __future__ import annotations

import cmath
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import CaseFormatError, OracleUnavailable, SingularNetwork

TWO_PI = 2.0 * math.pi


def normalize_angle(angle: float) -> float:
    """Wrap an angle in radians to (-pi, pi]."""
    r = math.remainder(angle, TWO_PI)
    return math.pi if r <= -math.pi else r


@dataclass(frozen=True)
class Phasor:
    """Polar-form complex electrical quantity.

    magnitude is per-unit and non-negative; angle is radians, kept in
    (-pi, pi] after every construction.
    """

    magnitude: float
    angle: float = 0.0

    def __post_init__(self):
        mag, ang = self.magnitude, self.angle
        if mag < 0.0:
            mag, ang = -mag, ang + math.pi
        object.__setattr__(self, "magnitude", float(mag))
        object.__setattr__(self, "angle", normalize_angle(float(ang)))

    @classmethod
    def from_complex(cls, z: complex) -> "Phasor":
        return cls(abs(z), cmath.phase(z))

    @property
    def rect(self) -> complex:
        return cmath.rect(self.magnitude, self.angle)

    def scaled(self, factor: float) -> "Phasor":
        return Phasor(self.magnitude * factor, self.angle)

    def rotated(self, dangle: float) -> "Phasor":
        return Phasor(self.magnitude, self.angle + dangle)


class BusKind(str, Enum):
    SLACK = "Slack"
    PV = "PV"
    PQ = "PQ"
    BOUNDARY = "Boundary"


class MachineKind(str, Enum):
    IDEAL_SOURCE = "IdealSource"
    SYNCHRONOUS_SIMPLIFIED = "SynchronousSimplified"


@dataclass(frozen=True)
class BusRecord:
    id: str
    kind: BusKind
    base_kv: float
    v_set: float | None = None
    p_load: float = 0.0
    q_load: float = 0.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0


@dataclass(frozen=True)
class BranchRecord:
    from_bus: str
    to_bus: str
    r: float
    x: float
    b_half: float = 0.0
    tap: float = 1.0

    @property
    def series_admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class MachineRecord:
    bus: str
    kind: MachineKind
    xd_transient: float = 0.0
    p_set: float = 0.0
    v_set: float | None = None
    inertia_h: float = 0.0
    damping: float = 2.0  # pu torque per pu speed deviation (classical model)


@dataclass
class CaseFile:
    """Complete grid description, including region declarations.

    `grbcs` holds grbc.GrbcDeclaration objects; kept loosely typed here to
    avoid an import cycle with the region-adapter module.
    """

    base_mva: float
    frequency_hz: float
    buses: list[BusRecord]
    branches: list[BranchRecord]
    machines: list[MachineRecord] = field(default_factory=list)
    grbcs: list = field(default_factory=list)
    name: str = "case"

    @property
    def omega(self) -> float:
        return TWO_PI * self.frequency_hz

    @property
    def period(self) -> float:
        return 1.0 / self.frequency_hz

    def bus_map(self) -> dict[str, BusRecord]:
        return {b.id: b for b in self.buses}

    def bus(self, bus_id: str) -> BusRecord:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    def machines_at(self, bus_id: str) -> list[MachineRecord]:
        return [m for m in self.machines if m.bus == bus_id]

    def boundary_ids(self) -> list[str]:
        """Boundary buses in region-declaration order."""
        return [g.boundary_bus for g in self.grbcs]


# --- case file I/O ----------------------------------------------------------


def parse_case(doc: dict, name: str = "case") -> CaseFile:
    """Build a CaseFile from a parsed JSON document.

    Any *_deg angle field in the document is converted to radians here;
    everything downstream works in radians.
    """
    from . import grbc  # deferred: grbc imports netmodel types

    try:
        base_mva = float(doc["base_mva"])
        frequency_hz = float(doc["frequency_hz"])
        buses = [_parse_bus(d) for d in doc["buses"]]
        branches = [_parse_branch(d) for d in doc["branches"]]
        machines = [_parse_machine(d) for d in doc.get("machines", [])]
        grbcs = [grbc.parse_declaration(d) for d in doc.get("grbcs", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseFormatError(f"malformed case document: {exc}") from exc
    return CaseFile(base_mva, frequency_hz, buses, branches, machines, grbcs, name)


def load_case(path: str | Path) -> CaseFile:
    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    return parse_case(doc, name=path.stem)


def _parse_bus(d: dict) -> BusRecord:
    return BusRecord(
        id=str(d["id"]),
        kind=BusKind(d["kind"]),
        base_kv=float(d["base_kv"]),
        v_set=None if d.get("v_set") is None else float(d["v_set"]),
        p_load=float(d.get("p_load", 0.0)),
        q_load=float(d.get("q_load", 0.0)),
        shunt_g=float(d.get("shunt_g", 0.0)),
        shunt_b=float(d.get("shunt_b", 0.0)),
    )


def _parse_branch(d: dict) -> BranchRecord:
    return BranchRecord(
        from_bus=str(d["from"]),
        to_bus=str(d["to"]),
        r=float(d["r"]),
        x=float(d["x"]),
        b_half=float(d.get("b_half", 0.0)),
        tap=float(d.get("tap", 1.0)),
    )


def _parse_machine(d: dict) -> MachineRecord:
    return MachineRecord(
        bus=str(d["bus"]),
        kind=MachineKind(d["kind"]),
        xd_transient=float(d.get("xd_transient", 0.0)),
        p_set=float(d.get("p_set", 0.0)),
        v_set=None if d.get("v_set") is None else float(d["v_set"]),
        inertia_h=float(d.get("inertia_h", 0.0)),
        damping=float(d.get("damping", 2.0)),
    )


# --- validation -------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    code: str
    subject: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, code: str, subject: str, message: str):
        self.violations.append(Violation(code, subject, message))

    def codes(self) -> list[str]:
        return [v.code for v in self.violations]


def validate_case(case: CaseFile) -> ValidationReport:
    """Check every structural invariant of a case; returns an ordered report.

    An empty report means the case is usable by every other module.
    """
    from . import grbc

    rep = ValidationReport()
    if case.base_mva <= 0:
        rep.add("BadBase", case.name, "base_mva must be > 0")
    if case.frequency_hz <= 0:
        rep.add("BadBase", case.name, "frequency_hz must be > 0")

    seen: set[str] = set()
    for b in case.buses:
        if b.id in seen:
            rep.add("DuplicateId", b.id, f"bus id '{b.id}' appears more than once")
        seen.add(b.id)
        if b.base_kv <= 0:
            rep.add("BadBase", b.id, "base_kv must be > 0")
        if b.kind in (BusKind.SLACK, BusKind.PV) and b.v_set is None:
            rep.add("MissingVset", b.id, f"{b.kind.value} bus needs v_set")

    bus_ids = {b.id for b in case.buses}
    for br in case.branches:
        label = f"{br.from_bus}-{br.to_bus}"
        for end in (br.from_bus, br.to_bus):
            if end not in bus_ids:
                rep.add("UnknownBusRef", label, f"branch endpoint '{end}' undefined")
        if br.r == 0.0 and br.x == 0.0:
            rep.add("ZeroImpedanceBranch", label, "branch needs nonzero r or x")
        if br.tap <= 0.0:
            rep.add("BadTap", label, "tap ratio must be > 0")

    for m in case.machines:
        if m.bus not in bus_ids:
            rep.add("UnknownBusRef", m.bus, f"machine bus '{m.bus}' undefined")
        if m.kind is MachineKind.SYNCHRONOUS_SIMPLIFIED and m.xd_transient <= 0:
            rep.add("BadMachineReactance", m.bus, "xd_transient must be > 0")

    # Region declarations: ownership and payload health.
    owned: dict[str, str] = {}
    for g in case.grbcs:
        if g.boundary_bus not in bus_ids:
            rep.add("UnknownBusRef", g.name, f"boundary bus '{g.boundary_bus}' undefined")
        else:
            if case.bus(g.boundary_bus).kind is not BusKind.BOUNDARY:
                rep.add(
                    "GrbcBusNotBoundary",
                    g.name,
                    f"bus '{g.boundary_bus}' must be kind Boundary",
                )
            if g.boundary_bus in owned:
                rep.add(
                    "BoundaryMultiplyOwned",
                    g.boundary_bus,
                    f"boundary bus owned by both '{owned[g.boundary_bus]}' and '{g.name}'",
                )
            owned[g.boundary_bus] = g.name
        for code, subject, msg in grbc.validate_declaration(g):
            rep.add(code, subject, msg)

    for b in case.buses:
        if b.kind is BusKind.BOUNDARY and b.id not in owned:
            rep.add("BoundaryNotDeclared", b.id, "Boundary bus not owned by any region")

    _check_islands(case, rep)
    return rep


def _check_islands(case: CaseFile, rep: ValidationReport):
    """Connectivity and slack count per island of the main-system graph."""
    ids = [b.id for b in case.buses]
    adjacency: dict[str, set[str]] = {i: set() for i in ids}
    for br in case.branches:
        if br.from_bus in adjacency and br.to_bus in adjacency:
            adjacency[br.from_bus].add(br.to_bus)
            adjacency[br.to_bus].add(br.from_bus)

    unvisited = set(ids)
    while unvisited:
        start = next(iter(sorted(unvisited)))
        stack, island = [start], set()
        while stack:
            n = stack.pop()
            if n in island:
                continue
            island.add(n)
            stack.extend(adjacency[n] - island)
        unvisited -= island
        slacks = [b.id for b in case.buses if b.id in island and b.kind is BusKind.SLACK]
        # A lone bus that only hosts a region boundary forms no island of interest.
        if len(slacks) != 1:
            rep.add(
                "SlackCount",
                ",".join(sorted(island)),
                f"island has {len(slacks)} slack buses (need exactly 1)",
            )


# --- nodal admittance -------------------------------------------------------


@dataclass
class AdmittanceMatrix:
    bus_ids: tuple[str, ...]
    mat: np.ndarray  # dense complex, (n, n)

    @property
    def dimension(self) -> int:
        return len(self.bus_ids)

    def index(self, bus_id: str) -> int:
        return self.bus_ids.index(bus_id)


def build_admittance(case: CaseFile, exclude_grbc: bool = True) -> AdmittanceMatrix:
    """Assemble the nodal admittance matrix.

    With exclude_grbc (the default) only the declared main-system buses and
    branches enter; boundary buses remain as ordinary rows.  With
    exclude_grbc=False the white-box region internals are inlined under
    namespaced ids, which requires every region to be oracle-capable.
    """
    working = case if exclude_grbc else inline_grbcs(case)
    ids = tuple(b.id for b in working.buses)
    index = {bid: i for i, bid in enumerate(ids)}
    n = len(ids)
    y = np.zeros((n, n), dtype=complex)

    for br in working.branches:
        f, t = index[br.from_bus], index[br.to_bus]
        ys = br.series_admittance
        ysh = 1j * br.b_half
        tap = br.tap
        y[f, f] += (ys + ysh) / (tap * tap)
        y[t, t] += ys + ysh
        y[f, t] -= ys / tap
        y[t, f] -= ys / tap

    for b in working.buses:
        i = index[b.id]
        y[i, i] += complex(b.shunt_g, b.shunt_b)

    for i, bid in enumerate(ids):
        if np.all(y[i] == 0.0):
            raise SingularNetwork(f"bus '{bid}' has no admittance connection")
    return AdmittanceMatrix(ids, y)


def inline_grbcs(case: CaseFile) -> CaseFile:
    """Flatten white-box region internals into one whole-system case.

    Internal buses/machines are renamed '<region>/<id>'; boundary buses
    become ordinary PQ buses.  Raises OracleUnavailable if any region has
    no visible internal network.
    """
    from . import grbc

    buses: list[BusRecord] = []
    for b in case.buses:
        if b.kind is BusKind.BOUNDARY:
            buses.append(
                BusRecord(b.id, BusKind.PQ, b.base_kv, None,
                          b.p_load, b.q_load, b.shunt_g, b.shunt_b)
            )
        else:
            buses.append(b)
    branches = list(case.branches)
    machines = list(case.machines)

    for g in case.grbcs:
        if grbc.adapter_is_opaque(g):
            raise OracleUnavailable(
                f"region '{g.name}' is opaque; whole-system solve impossible"
            )
        net = g.payload.network
        rename = {b.id: f"{g.name}/{b.id}" for b in net.buses}
        rename[g.boundary_bus] = g.boundary_bus
        for b in net.buses:
            buses.append(
                BusRecord(rename[b.id], b.kind, b.base_kv, b.v_set,
                          b.p_load, b.q_load, b.shunt_g, b.shunt_b)
            )
        for br in net.branches:
            branches.append(
                BranchRecord(rename[br.from_bus], rename[br.to_bus],
                             br.r, br.x, br.b_half, br.tap)
            )
        for m in net.machines:
            machines.append(
                MachineRecord(rename[m.bus], m.kind, m.xd_transient,
                              m.p_set, m.v_set, m.inertia_h)
            )

    return CaseFile(case.base_mva, case.frequency_hz, buses, branches,
                    machines, [], name=f"{case.name}+inlined")
