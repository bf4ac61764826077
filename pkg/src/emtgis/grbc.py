"""Black-box region adapters.

A region is anything that maps a boundary voltage phasor to injected power
(p_tilde, q_tilde) at its torn boundary bus and that can be ramped to an
initialized state in the EMT kernel.  The coordinator only ever calls
`evaluate` and `adapter_is_opaque`; it never sees region internals.

Sign convention: injections are measured INTO the torn boundary node from
the region side, so boundary convergence is p_main + p_tilde = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

from .errors import (
    GrbcPayloadError,
    InternalNonConvergence,
    InvalidVoltage,
    NonConvergence,
    SingularJacobian,
)
from .netmodel import (
    BranchRecord,
    BusKind,
    BusRecord,
    CaseFile,
    MachineRecord,
    Phasor,
    _parse_branch,
    _parse_bus,
    _parse_machine,
)


class GrbcKind(str, Enum):
    WHITE_BOX_NETWORK = "WhiteBoxNetwork"
    SCRIPTED_RESPONSE = "ScriptedResponse"
    SIMPLIFIED_HVDC_TERMINAL = "SimplifiedHvdcTerminal"


@dataclass(frozen=True)
class Subnetwork:
    """Internal phasor network of a white-box region."""

    buses: tuple[BusRecord, ...]
    branches: tuple[BranchRecord, ...]
    machines: tuple[MachineRecord, ...]


@dataclass(frozen=True)
class WhiteBoxPayload:
    network: Subnetwork
    oracle: bool = True
    pf_tol: float = 1e-12


@dataclass(frozen=True)
class ScriptedPayload:
    p_expr: object
    q_expr: object


@dataclass(frozen=True)
class HvdcPayload:
    """Steady-state converter terminal: constant DC power order with
    reactive consumption q = p * tan_phi, derated linearly below 0.9 pu."""

    p_dc: float
    tan_phi: float


@dataclass(frozen=True)
class GrbcDeclaration:
    name: str
    boundary_bus: str
    kind: GrbcKind
    payload: object


@dataclass(frozen=True)
class GrbcEvaluation:
    p_tilde: float
    q_tilde: float
    evaluation_cost: int = 1


# --- expression grammar for scripted responses -------------------------------

_BINARY = {"+", "-", "*", "/", "pow"}
_UNARY = {"sin", "cos"}
_VARS = {"V", "theta"}


def validate_expr(node) -> None:
    """Recursively check a scripted expression tree; raises GrbcPayloadError."""
    if isinstance(node, (int, float)) and not isinstance(node, bool):
        return
    if isinstance(node, str):
        if node not in _VARS:
            raise GrbcPayloadError(f"unknown variable '{node}' (allowed: V, theta)")
        return
    if isinstance(node, list) and node:
        op, *args = node
        if op in _UNARY:
            if len(args) != 1:
                raise GrbcPayloadError(f"'{op}' takes 1 argument, got {len(args)}")
        elif op in _BINARY:
            if op == "-" and len(args) == 1:
                pass  # unary minus
            elif len(args) != 2:
                raise GrbcPayloadError(f"'{op}' takes 2 arguments, got {len(args)}")
        else:
            raise GrbcPayloadError(f"unknown operator '{op}'")
        for a in args:
            validate_expr(a)
        return
    raise GrbcPayloadError(f"malformed expression node: {node!r}")


def eval_expr(node, v: float, theta: float) -> float:
    if isinstance(node, (int, float)):
        return float(node)
    if node == "V":
        return v
    if node == "theta":
        return theta
    op, *args = node
    vals = [eval_expr(a, v, theta) for a in args]
    if op == "+":
        return vals[0] + vals[1]
    if op == "-":
        return -vals[0] if len(vals) == 1 else vals[0] - vals[1]
    if op == "*":
        return vals[0] * vals[1]
    if op == "/":
        return vals[0] / vals[1]
    if op == "pow":
        return vals[0] ** vals[1]
    if op == "sin":
        return math.sin(vals[0])
    return math.cos(vals[0])


# --- declaration parsing ------------------------------------------------------


def parse_declaration(d: dict) -> GrbcDeclaration:
    name = str(d["name"])
    boundary = str(d["boundary_bus"])
    kind = GrbcKind(d["kind"])
    raw = d.get("payload", {})
    if kind is GrbcKind.WHITE_BOX_NETWORK:
        net = Subnetwork(
            buses=tuple(_parse_bus(b) for b in raw.get("buses", [])),
            branches=tuple(_parse_branch(b) for b in raw.get("branches", [])),
            machines=tuple(_parse_machine(m) for m in raw.get("machines", [])),
        )
        payload = WhiteBoxPayload(
            network=net,
            oracle=bool(raw.get("oracle", True)),
            pf_tol=float(raw.get("pf_tol", 1e-12)),
        )
    elif kind is GrbcKind.SCRIPTED_RESPONSE:
        payload = ScriptedPayload(p_expr=raw["p"], q_expr=raw["q"])
    else:
        payload = HvdcPayload(p_dc=float(raw["p_dc"]), tan_phi=float(raw["tan_phi"]))
    return GrbcDeclaration(name, boundary, kind, payload)


def validate_declaration(decl: GrbcDeclaration) -> list[tuple[str, str, str]]:
    """Payload-level checks; returns (code, subject, message) tuples."""
    out: list[tuple[str, str, str]] = []
    if decl.kind is GrbcKind.SCRIPTED_RESPONSE:
        for which, expr in (("p", decl.payload.p_expr), ("q", decl.payload.q_expr)):
            try:
                validate_expr(expr)
            except GrbcPayloadError as exc:
                out.append(("BadExpression", f"{decl.name}.{which}", str(exc)))
    elif decl.kind is GrbcKind.SIMPLIFIED_HVDC_TERMINAL:
        if not math.isfinite(decl.payload.p_dc) or not math.isfinite(decl.payload.tan_phi):
            out.append(("BadPayload", decl.name, "p_dc and tan_phi must be finite"))
    else:
        net = decl.payload.network
        seen = set()
        internal_ids = {b.id for b in net.buses}
        for b in net.buses:
            if b.id in seen:
                out.append(("DuplicateId", f"{decl.name}/{b.id}", "duplicate internal bus"))
            seen.add(b.id)
            if b.kind in (BusKind.SLACK, BusKind.BOUNDARY):
                out.append(
                    ("BadInternalBusKind", f"{decl.name}/{b.id}",
                     "internal buses must be PV or PQ")
                )
        allowed = internal_ids | {decl.boundary_bus}
        for br in net.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in allowed:
                    out.append(
                        ("UnknownBusRef", f"{decl.name}/{end}",
                         "internal branch endpoint undefined")
                    )
        for m in net.machines:
            if m.bus not in internal_ids:
                out.append(
                    ("UnknownBusRef", f"{decl.name}/{m.bus}", "machine bus undefined")
                )
    return out


def internal_pf_case(decl: GrbcDeclaration) -> CaseFile:
    """Region-side phasor network with the torn boundary bus included.

    Base values are placeholders; per-unit power-flow math never uses them.
    """
    if decl.kind is not GrbcKind.WHITE_BOX_NETWORK:
        raise GrbcPayloadError(f"region '{decl.name}' has no internal network")
    net = decl.payload.network
    boundary = BusRecord(decl.boundary_bus, BusKind.BOUNDARY, base_kv=1.0)
    return CaseFile(
        base_mva=100.0,
        frequency_hz=50.0,
        buses=[boundary, *net.buses],
        branches=list(net.branches),
        machines=list(net.machines),
        grbcs=[],
        name=f"{decl.name}-internal",
    )


# --- the adapter surface used by the coordinator ------------------------------


def evaluate(decl: GrbcDeclaration, v_boundary: Phasor) -> GrbcEvaluation:
    """Injected power of the region into its torn boundary node at the
    supplied boundary voltage.  Pure function of (decl, v_boundary)."""
    if v_boundary.magnitude <= 0.0:
        raise InvalidVoltage(
            f"boundary voltage magnitude must be > 0, got {v_boundary.magnitude}"
        )
    if decl.kind is GrbcKind.SCRIPTED_RESPONSE:
        v, th = v_boundary.magnitude, v_boundary.angle
        return GrbcEvaluation(
            p_tilde=eval_expr(decl.payload.p_expr, v, th),
            q_tilde=eval_expr(decl.payload.q_expr, v, th),
        )
    if decl.kind is GrbcKind.SIMPLIFIED_HVDC_TERMINAL:
        v = v_boundary.magnitude
        p_eff = decl.payload.p_dc * (v / 0.9 if v < 0.9 else 1.0)
        return GrbcEvaluation(p_tilde=-p_eff, q_tilde=-p_eff * decl.payload.tan_phi)
    return _evaluate_white_box(decl, v_boundary)


def _evaluate_white_box(decl: GrbcDeclaration, v_boundary: Phasor) -> GrbcEvaluation:
    from . import powerflow  # deferred: powerflow imports netmodel only

    case = internal_pf_case(decl)
    try:
        sol = powerflow.solve_main(
            case,
            {decl.boundary_bus: v_boundary},
            tol=decl.payload.pf_tol,
            max_iter=60,
        )
    except (NonConvergence, SingularJacobian) as exc:
        raise InternalNonConvergence(
            f"internal power flow of region '{decl.name}' failed: {exc}"
        ) from exc
    # Injection into the torn node from the region side is the negative of
    # the network injection computed at the boundary row (no region-side
    # load sits on the boundary bus itself).
    s = sol.injection(decl.boundary_bus)
    return GrbcEvaluation(
        p_tilde=-s[0], q_tilde=-s[1], evaluation_cost=sol.iterations
    )


def adapter_is_opaque(decl: GrbcDeclaration) -> bool:
    """False only for a white-box network declared oracle-capable."""
    return not (
        decl.kind is GrbcKind.WHITE_BOX_NETWORK and decl.payload.oracle
    )
