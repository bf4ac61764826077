"""Desk-scale EMT kernel.

Fixed-step trapezoidal companion models assembled into a nodal conductance
matrix, solved per step for three decoupled phases (balanced operation,
sources shifted by +-120 degrees).  Ideal voltage sources and machine
internal EMF nodes are handled as known-voltage nodes; the reduced system
over the remaining nodes is factorized once per topology.

Instantaneous per-unit convention: phasor magnitudes are RMS, instantaneous
peaks are sqrt(2) times RMS.
"""

from __future__ import annotations

import cmath
import math
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    IncompatibleSnapshot,
    InvalidParameter,
    SingularConductance,
    UnknownBus,
    UnknownProbe,
)

SQRT2 = math.sqrt(2.0)
PHASE_SHIFT = np.array([0.0, -2.0 * math.pi / 3.0, 2.0 * math.pi / 3.0])
PHASE_NAMES = ("a", "b", "c")


class ElementKind(str, Enum):
    RESISTOR = "Resistor"
    INDUCTOR = "Inductor"
    CAPACITOR = "Capacitor"
    SOURCE = "Source"


@dataclass(frozen=True)
class CompanionModel:
    """Discrete-time equivalent i(t) = G u(t) + H u(t-dt) + J i(t-dt)."""

    kind: ElementKind
    g_coef: float
    h_coef: float
    j_coef: float


def companion_coefficients(kind: ElementKind, value: float, dt: float) -> CompanionModel:
    """Trapezoidal companion coefficients for one element."""
    if dt <= 0.0:
        raise InvalidParameter("dt must be positive")
    if kind is ElementKind.SOURCE:
        return CompanionModel(kind, 0.0, 0.0, 0.0)
    if value <= 0.0:
        raise InvalidParameter(f"{kind.value} parameter must be positive, got {value}")
    if kind is ElementKind.RESISTOR:
        return CompanionModel(kind, 1.0 / value, 0.0, 0.0)
    if kind is ElementKind.INDUCTOR:
        g = dt / (2.0 * value)
        return CompanionModel(kind, g, g, 1.0)
    g = 2.0 * value / dt
    return CompanionModel(kind, g, -g, -1.0)


def effective_admittance(model: CompanionModel, omega: float, dt: float) -> complex:
    """Admittance seen by a pure discrete sinusoid at omega.

    Derived from the companion recursion with v, i sampled sinusoids;
    initializing states from these values puts the kernel exactly on its
    discrete periodic steady state.
    """
    z = cmath.exp(-1j * omega * dt)
    return (model.g_coef + model.h_coef * z) / (1.0 - model.j_coef * z)


def continuous_admittance(kind: ElementKind, value: float, omega: float) -> complex:
    if kind is ElementKind.RESISTOR:
        return 1.0 / value
    if kind is ElementKind.INDUCTOR:
        return 1.0 / (1j * omega * value)
    return 1j * omega * value


def ramp_profile(t: float, t_ramp: float) -> float:
    """Linear source ramp: 0 for t <= 0, t/t_ramp inside, 1 after."""
    if t_ramp <= 0.0:
        raise InvalidParameter("t_ramp must be positive")
    if t <= 0.0:
        return 0.0
    if t >= t_ramp:
        return 1.0
    return t / t_ramp


# --- network description ------------------------------------------------------


@dataclass(frozen=True)
class Element:
    """Two-terminal R/L/C between nodes; n_to None means ground."""

    eid: str
    kind: ElementKind
    n_from: str
    n_to: str | None
    value: float


@dataclass(frozen=True)
class Source:
    """Ideal grounded voltage source pinning its node."""

    sid: str
    node: str
    rms: float
    angle: float


@dataclass(frozen=True)
class Machine:
    """Classical machine: EMF behind transient reactance with swing dynamics.

    The EMF node and series inductor are explicit members of the network;
    this record carries their ids plus the mechanical state parameters.
    delta0/emf_rms/pm are the build-time operating point; the dynamic copy
    lives in EmtState.
    """

    mid: str
    bus: str
    emf_node: str
    branch_eid: str
    xd: float
    inertia_h: float
    damping: float
    emf_rms: float
    delta0: float
    pm: float
    swing: bool = True


@dataclass(frozen=True)
class EmtNet:
    name: str
    frequency_hz: float
    nodes: tuple[str, ...]
    elements: tuple[Element, ...]
    sources: tuple[Source, ...]
    machines: tuple[Machine, ...] = ()

    @property
    def omega(self) -> float:
        return 2.0 * math.pi * self.frequency_hz

    @property
    def period(self) -> float:
        return 1.0 / self.frequency_hz

    def element(self, eid: str) -> Element:
        for e in self.elements:
            if e.eid == eid:
                return e
        raise KeyError(eid)

    def with_sources_zeroed(self) -> "EmtNet":
        return replace(self, sources=tuple(replace(s, rms=0.0) for s in self.sources))


class FaultKind(str, Enum):
    THREE_PHASE_TO_GROUND = "ThreePhaseToGround"


def apply_fault(net: EmtNet, bus: str, r_fault: float,
                kind: FaultKind = FaultKind.THREE_PHASE_TO_GROUND) -> EmtNet:
    """Shunt fault resistance to ground on all three phases at a node.

    An infinite fault resistance is the no-fault identity.
    """
    if kind is not FaultKind.THREE_PHASE_TO_GROUND:
        raise InvalidParameter(f"unsupported fault kind {kind}")
    if bus not in net.nodes:
        raise UnknownBus(f"fault target '{bus}' is not a network node")
    if math.isinf(r_fault):
        return net
    if r_fault <= 0.0:
        raise InvalidParameter("fault resistance must be positive or infinite")
    fault = Element(f"fault:{bus}", ElementKind.RESISTOR, bus, None, r_fault)
    return replace(net, elements=net.elements + (fault,))


# --- events and run configuration ----------------------------------------------


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: str               # only "fault" is defined
    target: str
    r_fault: float = 1e-6


@dataclass
class SimConfig:
    dt: float
    duration: float
    record: list[str] = field(default_factory=list)
    events: list[SimEvent] = field(default_factory=list)
    ramp_sources: bool = False
    t_ramp: float = 0.5
    rms_change_tol: float = 5e-4    # per-cycle relative RMS change for steadiness
    steady_cycles: int = 3          # consecutive stable cycle-to-cycle changes
    settle_margin_cycles: int = 5   # extra cycles after detection before capture

    def __post_init__(self):
        if self.dt <= 0.0:
            raise InvalidParameter("dt must be positive")
        times = [e.time for e in self.events]
        if times != sorted(times):
            raise InvalidParameter("events must be sorted by time")


# --- simulation state -----------------------------------------------------------


@dataclass
class EmtState:
    """Complete instantaneous state of one network at one step.

    v_nodes/elem_i are the instantaneous values at the stamped time;
    hist_u/hist_i are the per-element histories one step behind it, so the
    companion relation i = G u + H hist_u + J hist_i holds exactly at every
    stamped state (element voltages u recompute from v_nodes).
    """

    step: int
    dt: float
    node_ids: tuple[str, ...]
    element_ids: tuple[str, ...]
    source_ids: tuple[str, ...]
    machine_ids: tuple[str, ...]
    v_nodes: np.ndarray        # (n_nodes, 3)
    elem_i: np.ndarray         # (n_elements, 3) element current at t
    hist_u: np.ndarray         # (n_elements, 3) element voltage at t - dt
    hist_i: np.ndarray         # (n_elements, 3) element current at t - dt
    machine_delta: np.ndarray
    machine_speed_dev: np.ndarray
    machine_emf: np.ndarray
    machine_pm: np.ndarray
    source_scale: np.ndarray

    @property
    def time(self) -> float:
        return self.step * self.dt

    def copy(self) -> "EmtState":
        return EmtState(
            self.step, self.dt, self.node_ids, self.element_ids,
            self.source_ids, self.machine_ids,
            self.v_nodes.copy(), self.elem_i.copy(), self.hist_u.copy(),
            self.hist_i.copy(), self.machine_delta.copy(),
            self.machine_speed_dev.copy(), self.machine_emf.copy(),
            self.machine_pm.copy(), self.source_scale.copy(),
        )


# --- compiled network ------------------------------------------------------------


class CompiledNet:
    """Index maps, companion arrays and factorized reduced matrices for one dt."""

    def __init__(self, net: EmtNet, dt: float):
        self.net = net
        self.dt = dt
        self.omega = net.omega
        nodes = list(net.nodes)
        self.node_index = {nid: i for i, nid in enumerate(nodes)}
        self.n_nodes = len(nodes)
        ground = self.n_nodes  # sentinel row, held at zero

        self.ef = np.array(
            [self.node_index[e.n_from] for e in net.elements], dtype=int
        ) if net.elements else np.zeros(0, dtype=int)
        self.et = np.array(
            [ground if e.n_to is None else self.node_index[e.n_to] for e in net.elements],
            dtype=int,
        ) if net.elements else np.zeros(0, dtype=int)

        models = [companion_coefficients(e.kind, e.value, dt) for e in net.elements]
        self.g = np.array([m.g_coef for m in models])
        self.h = np.array([m.h_coef for m in models])
        self.j = np.array([m.j_coef for m in models])
        self.models = models

        known: list[int] = []
        self.known_rms = []
        self.known_angle = []
        for s in net.sources:
            known.append(self.node_index[s.node])
            self.known_rms.append(s.rms)
            self.known_angle.append(s.angle)
        self.machine_emf_pos = []
        self.machine_branch = []
        for m in net.machines:
            self.machine_emf_pos.append(len(known))
            known.append(self.node_index[m.emf_node])
            self.known_rms.append(m.emf_rms)
            self.known_angle.append(m.delta0)
            self.machine_branch.append(
                [e.eid for e in net.elements].index(m.branch_eid)
            )
        self.known_idx = np.array(known, dtype=int)
        self.known_rms = np.array(self.known_rms)
        self.known_angle = np.array(self.known_angle)
        self.machine_branch = np.array(self.machine_branch, dtype=int)
        self.machine_swing = np.array([m.swing for m in net.machines])
        self.machine_2h = np.array([2.0 * m.inertia_h for m in net.machines])
        self.machine_damping = np.array([m.damping for m in net.machines])

        known_set = set(self.known_idx.tolist())
        self.unknown_idx = np.array(
            [i for i in range(self.n_nodes) if i not in known_set], dtype=int
        )

        gmat = np.zeros((self.n_nodes + 1, self.n_nodes + 1))
        for k in range(len(net.elements)):
            f, t, gv = self.ef[k], self.et[k], self.g[k]
            gmat[f, f] += gv
            gmat[t, t] += gv
            gmat[f, t] -= gv
            gmat[t, f] -= gv
        u = self.unknown_idx
        self.w_mat = gmat[np.ix_(u, self.known_idx)] if u.size and known else np.zeros(
            (u.size, len(known))
        )
        g_uu = gmat[np.ix_(u, u)]
        try:
            self.g_red_inv = np.linalg.inv(g_uu) if u.size else np.zeros((0, 0))
        except np.linalg.LinAlgError as exc:
            raise SingularConductance(
                f"reduced conductance matrix of '{net.name}' is singular"
            ) from exc

    # --- state construction -----------------------------------------------

    def zero_state(self) -> EmtState:
        net = self.net
        ne, nm, ns = len(net.elements), len(net.machines), len(net.sources)
        return EmtState(
            step=0,
            dt=self.dt,
            node_ids=net.nodes,
            element_ids=tuple(e.eid for e in net.elements),
            source_ids=tuple(s.sid for s in net.sources),
            machine_ids=tuple(m.mid for m in net.machines),
            v_nodes=np.zeros((self.n_nodes, 3)),
            elem_i=np.zeros((ne, 3)),
            hist_u=np.zeros((ne, 3)),
            hist_i=np.zeros((ne, 3)),
            machine_delta=np.array([m.delta0 for m in net.machines], dtype=float),
            machine_speed_dev=np.zeros(nm),
            machine_emf=np.array([m.emf_rms for m in net.machines], dtype=float),
            machine_pm=np.array([m.pm for m in net.machines], dtype=float),
            source_scale=np.zeros(ns),
        )

    def element_voltages(self, state: EmtState) -> np.ndarray:
        """Element branch voltages at the stamped time, from node voltages."""
        v_pad = np.vstack([state.v_nodes, np.zeros((1, 3))])
        return v_pad[self.ef] - v_pad[self.et] if len(self.ef) else np.zeros((0, 3))

    def check_compatible(self, state: EmtState) -> None:
        if state.node_ids != self.net.nodes:
            raise IncompatibleSnapshot("node set differs from network")
        if state.element_ids != tuple(e.eid for e in self.net.elements):
            raise IncompatibleSnapshot("element set differs from network")
        if abs(state.dt - self.dt) > 1e-18:
            raise IncompatibleSnapshot(
                f"snapshot dt {state.dt} differs from configured dt {self.dt}"
            )

    def migrate_state(self, state: EmtState) -> EmtState:
        """Carry a state onto this topology after appended elements (faults)."""
        have = len(state.element_ids)
        want = len(self.net.elements)
        ids = tuple(e.eid for e in self.net.elements)
        if ids[:have] != state.element_ids or want < have:
            raise IncompatibleSnapshot("topology change is not an element append")
        extra = want - have
        pad = np.zeros((extra, 3))
        out = state.copy()
        out.element_ids = ids
        out.elem_i = np.vstack([out.elem_i, pad])
        out.hist_u = np.vstack([out.hist_u, pad])
        out.hist_i = np.vstack([out.hist_i, pad])
        return out

    # --- stepping -----------------------------------------------------------

    def known_voltages(self, t: float, scale: float, machine_delta: np.ndarray,
                       machine_emf: np.ndarray) -> np.ndarray:
        """Instantaneous known-node voltages (n_known, 3) at time t."""
        rms = self.known_rms.copy()
        ang = self.known_angle.copy()
        if len(self.machine_emf_pos):
            pos = np.array(self.machine_emf_pos, dtype=int)
            rms[pos] = machine_emf
            ang[pos] = machine_delta
        arg = self.omega * t + ang[:, None] + PHASE_SHIFT[None, :]
        return SQRT2 * scale * rms[:, None] * np.cos(arg)

    def step(self, state: EmtState, ramp: bool, t_ramp: float) -> EmtState:
        """Advance one dt: inject histories, solve nodal equations, update."""
        dt = self.dt
        t_new = (state.step + 1) * dt
        scale = ramp_profile(t_new, t_ramp) if ramp else 1.0

        u_now = self.element_voltages(state)
        i_hist = ((self.h * u_now.T) + (self.j * state.elem_i.T)).T  # (ne, 3)

        inj = np.zeros((self.n_nodes + 1, 3))
        if len(self.ef):
            np.add.at(inj, self.ef, -i_hist)
            np.add.at(inj, self.et, i_hist)

        v_k = self.known_voltages(t_new, scale, state.machine_delta, state.machine_emf)
        v_full = np.zeros((self.n_nodes + 1, 3))
        if self.known_idx.size:
            v_full[self.known_idx] = v_k
        if self.unknown_idx.size:
            rhs = inj[self.unknown_idx]
            if self.known_idx.size:
                rhs = rhs - self.w_mat @ v_k
            v_full[self.unknown_idx] = self.g_red_inv @ rhs

        u = v_full[self.ef] - v_full[self.et] if len(self.ef) else np.zeros((0, 3))
        i_new = (self.g * u.T).T + i_hist

        out = state.copy()
        out.step = state.step + 1
        out.v_nodes = v_full[: self.n_nodes]
        out.elem_i = i_new
        out.hist_u = u_now
        out.hist_i = state.elem_i.copy()
        out.source_scale = np.full_like(state.source_scale, scale)

        if len(self.machine_branch):
            e_v = v_full[self.known_idx[self.machine_emf_pos]]
            i_m = i_new[self.machine_branch]
            pe = np.sum(e_v * i_m, axis=1) / 3.0
            active = self.machine_swing & (scale >= 1.0) & (self.machine_2h > 0)
            if np.any(active):
                dw = out.machine_speed_dev.copy()
                acc = (out.machine_pm - pe - self.machine_damping * dw)
                dw = np.where(active, dw + dt * acc / np.where(self.machine_2h > 0,
                                                               self.machine_2h, 1.0), dw)
                out.machine_speed_dev = dw
                out.machine_delta = np.where(
                    active, out.machine_delta + dt * self.omega * dw, out.machine_delta
                )
        return out


# --- probes and waveform recording -----------------------------------------------


@dataclass
class Waveform:
    probe: str
    times: np.ndarray
    values: np.ndarray

    @property
    def samples(self) -> np.ndarray:
        return np.column_stack([self.times, self.values])


class ProbeSet:
    """Resolved probe ids: node voltages and element currents, all phases."""

    def __init__(self, compiled: CompiledNet, record: list[str]):
        self.keys: list[str] = []
        self._getters: list[tuple[str, int, int]] = []  # (kind, index, phase)
        for pid in record:
            if pid.startswith("i:"):
                eid = pid[2:]
                eids = [e.eid for e in compiled.net.elements]
                if eid not in eids:
                    raise UnknownProbe(f"no element '{eid}' to record current from")
                idx = eids.index(eid)
                for ph, name in enumerate(PHASE_NAMES):
                    self.keys.append(f"{pid}.{name}")
                    self._getters.append(("i", idx, ph))
            else:
                if pid not in compiled.node_index:
                    raise UnknownProbe(f"no node '{pid}' to record voltage from")
                idx = compiled.node_index[pid]
                for ph, name in enumerate(PHASE_NAMES):
                    self.keys.append(f"{pid}.{name}")
                    self._getters.append(("v", idx, ph))

    def sample(self, state: EmtState) -> np.ndarray:
        out = np.empty(len(self._getters))
        for k, (kind, idx, ph) in enumerate(self._getters):
            src = state.v_nodes if kind == "v" else state.elem_i
            out[k] = src[idx, ph]
        return out


@dataclass
class WaveformSet:
    times: np.ndarray
    data: dict[str, np.ndarray]

    def waveform(self, key: str) -> Waveform:
        return Waveform(key, self.times, self.data[key])

    def cycle_rms(self, key: str, samples_per_cycle: int, last_only: bool = True):
        y = self.data[key]
        usable = (len(y) - 1) // samples_per_cycle * samples_per_cycle
        cycles = y[len(y) - usable:].reshape(-1, samples_per_cycle)
        rms = np.sqrt(np.mean(cycles**2, axis=1))
        return rms[-1] if last_only else rms


def run(net: EmtNet, cfg: SimConfig, init: EmtState | None = None
        ) -> tuple[WaveformSet, EmtState]:
    """Fixed-duration simulation with event handling and probe recording."""
    compiled = CompiledNet(net, cfg.dt)
    state = compiled.zero_state() if init is None else init.copy()
    compiled.check_compatible(state)

    n_steps = int(round(cfg.duration / cfg.dt))
    start_step = state.step
    events = sorted(cfg.events, key=lambda e: e.time)
    event_steps = [int(round(e.time / cfg.dt)) for e in events]
    for e in events:
        if e.kind != "fault":
            raise InvalidParameter(f"unknown event kind '{e.kind}'")
        if e.target not in net.nodes:
            raise UnknownBus(f"event targets unknown node '{e.target}'")

    probes = ProbeSet(compiled, cfg.record)
    times = (start_step + np.arange(n_steps + 1)) * cfg.dt
    traces = np.zeros((n_steps + 1, len(probes.keys)))
    traces[0] = probes.sample(state)

    next_event = 0
    current_net = net
    for k in range(1, n_steps + 1):
        while next_event < len(events) and state.step >= event_steps[next_event]:
            ev = events[next_event]
            current_net = apply_fault(current_net, ev.target, ev.r_fault)
            compiled = CompiledNet(current_net, cfg.dt)
            state = compiled.migrate_state(state)
            probes = ProbeSet(compiled, cfg.record)
            next_event += 1
        state = compiled.step(state, cfg.ramp_sources, cfg.t_ramp)
        traces[k] = probes.sample(state)

    data = {key: traces[:, i].copy() for i, key in enumerate(probes.keys)}
    return WaveformSet(times, data), state


def run_until_steady(net: EmtNet, cfg: SimConfig, init: EmtState | None = None,
                     ) -> tuple[EmtState, int | None, np.ndarray, list[str]]:
    """Step cycle-by-cycle until every probe's cycle RMS stops changing.

    Steadiness: `steady_cycles` consecutive cycle-over-cycle relative RMS
    changes below `rms_change_tol` on every probe (detector armed only
    after a ramp completes).  After detection, `settle_margin_cycles` more
    cycles run before the state is returned, and the samples of the final
    full cycle come back for phasor extraction.

    Returns (state, ready_step or None, last cycle samples, probe keys).
    """
    compiled = CompiledNet(net, cfg.dt)
    state = compiled.zero_state() if init is None else init.copy()
    compiled.check_compatible(state)

    n_cycle = int(round(net.period / cfg.dt))
    if abs(n_cycle * cfg.dt - net.period) > 1e-9 * net.period or n_cycle < 4:
        raise InvalidParameter("period must be an integer multiple of dt")
    probes = ProbeSet(compiled, cfg.record)
    max_cycles = int(cfg.duration / net.period)
    arm_after = math.ceil(cfg.t_ramp / net.period) if cfg.ramp_sources else 0

    buf = np.zeros((n_cycle, len(probes.keys)))
    prev_rms: np.ndarray | None = None
    stable_run = 0
    fired_at: int | None = None

    for c in range(max_cycles):
        for k in range(n_cycle):
            state = compiled.step(state, cfg.ramp_sources, cfg.t_ramp)
            buf[k] = probes.sample(state)
        if fired_at is not None:
            if c - fired_at >= cfg.settle_margin_cycles:
                return state, state.step, buf.copy(), probes.keys
            continue
        rms = np.sqrt(np.mean(buf**2, axis=0))
        if prev_rms is not None and c >= arm_after:
            change = np.abs(rms - prev_rms) / np.maximum(rms, 1e-6)
            stable_run = stable_run + 1 if float(change.max()) <= cfg.rms_change_tol else 0
            if stable_run >= cfg.steady_cycles:
                fired_at = c
                if cfg.settle_margin_cycles == 0:
                    return state, state.step, buf.copy(), probes.keys
        prev_rms = rms.copy()
    return state, None, buf.copy(), probes.keys


def fourier_phasor(samples: np.ndarray, end_step: int, dt: float, omega: float) -> complex:
    """RMS phasor of one full cycle of samples ending at end_step (absolute clock).

    For v(t) = sqrt(2) |V| cos(omega t + a) the result is |V| e^{ja}.
    """
    n = len(samples)
    steps = np.arange(end_step - n + 1, end_step + 1)
    t = steps * dt
    return complex(2.0 / (SQRT2 * n) * np.sum(samples * np.exp(-1j * omega * t)))


def companion_replay(compiled: CompiledNet, state: EmtState) -> np.ndarray:
    """Re-evaluate the companion relation from the stored state.

    Uses the same arithmetic as step(), so on any stepped state the result
    equals state.elem_i bit for bit.
    """
    u_now = compiled.element_voltages(state)
    i_hist = ((compiled.h * state.hist_u.T) + (compiled.j * state.hist_i.T)).T
    return (compiled.g * u_now.T).T + i_hist


def stored_energy(net: EmtNet, state: EmtState) -> float:
    """Total inductor + capacitor energy over all phases."""
    total = 0.0
    for k, e in enumerate(net.elements):
        if e.kind is ElementKind.INDUCTOR:
            total += 0.5 * e.value * float(np.sum(state.elem_i[k] ** 2))
        elif e.kind is ElementKind.CAPACITOR:
            f = state.node_ids.index(e.n_from)
            vf = state.v_nodes[f]
            vt = state.v_nodes[state.node_ids.index(e.n_to)] if e.n_to else 0.0
            total += 0.5 * e.value * float(np.sum((vf - vt) ** 2))
    return total


# --- phasor-domain solves on the same network ------------------------------------


def phasor_solve(net: EmtNet, known_phasors: dict[str, complex],
                 injections: dict[str, complex] | None = None,
                 dt: float | None = None) -> tuple[dict[str, complex], dict[str, complex]]:
    """Single-frequency nodal solve of the network at its fundamental.

    known_phasors pin nodes (RMS); injections add RMS current sources into
    nodes.  With dt given, element admittances are the discrete-companion
    effective values, so the result is the exact periodic steady state of
    the stepped kernel; otherwise continuous jw admittances are used.

    Returns (node phasors, element current phasors) with element currents
    oriented from n_from to n_to.
    """
    injections = injections or {}
    omega = net.omega
    nodes = list(net.nodes)
    index = {nid: i for i, nid in enumerate(nodes)}
    n = len(nodes)
    ground = n

    yvals = []
    for e in net.elements:
        if dt is None:
            yvals.append(continuous_admittance(e.kind, e.value, omega))
        else:
            yvals.append(effective_admittance(
                companion_coefficients(e.kind, e.value, dt), omega, dt))

    ymat = np.zeros((n + 1, n + 1), dtype=complex)
    for e, yv in zip(net.elements, yvals):
        f = index[e.n_from]
        t = ground if e.n_to is None else index[e.n_to]
        ymat[f, f] += yv
        ymat[t, t] += yv
        ymat[f, t] -= yv
        ymat[t, f] -= yv

    known_idx = np.array(sorted(index[nid] for nid in known_phasors), dtype=int)
    v = np.zeros(n + 1, dtype=complex)
    for nid, ph in known_phasors.items():
        v[index[nid]] = ph
    inj = np.zeros(n + 1, dtype=complex)
    for nid, cur in injections.items():
        inj[index[nid]] += cur

    unknown = np.array([i for i in range(n) if i not in set(known_idx.tolist())],
                       dtype=int)
    if unknown.size:
        y_uu = ymat[np.ix_(unknown, unknown)]
        rhs = inj[unknown]
        if known_idx.size:
            rhs = rhs - ymat[np.ix_(unknown, known_idx)] @ v[known_idx]
        try:
            v[unknown] = np.linalg.solve(y_uu, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularConductance("phasor nodal matrix is singular") from exc

    node_ph = {nid: complex(v[index[nid]]) for nid in nodes}
    elem_ph = {}
    for e, yv in zip(net.elements, yvals):
        vf = v[index[e.n_from]]
        vt = 0.0 if e.n_to is None else v[index[e.n_to]]
        elem_ph[e.eid] = complex(yv * (vf - vt))
    return node_ph, elem_ph


# --- waveform export --------------------------------------------------------------


def write_waveforms_csv(path: str | Path, waves: WaveformSet) -> None:
    keys = list(waves.data.keys())
    lines = ["time," + ",".join(keys)]
    cols = [waves.data[k] for k in keys]
    for i, t in enumerate(waves.times):
        row = ",".join(f"{c[i]:.17g}" for c in cols)
        lines.append(f"{t:.17g},{row}")
    Path(path).write_text("\n".join(lines) + "\n")


_MAGIC = b"EMTW"
_VERSION = 1


def write_waveforms_bin(path: str | Path, waves: WaveformSet) -> None:
    """Compact binary record: magic, u16 version, probe table, f64 samples."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<HI", _VERSION, len(waves.data)))
        t0 = float(waves.times[0]) if len(waves.times) else 0.0
        dt = float(waves.times[1] - waves.times[0]) if len(waves.times) > 1 else 0.0
        for key, values in waves.data.items():
            name = key.encode()
            f.write(struct.pack("<H", len(name)))
            f.write(name)
            f.write(struct.pack("<Qdd", len(values), t0, dt))
            f.write(np.asarray(values, dtype="<f8").tobytes())


def read_waveforms_bin(path: str | Path) -> WaveformSet:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError("not a waveform record")
        version, n_probes = struct.unpack("<HI", f.read(6))
        if version != _VERSION:
            raise ValueError(f"unsupported waveform record version {version}")
        data = {}
        t0 = dt = 0.0
        n = 0
        for _ in range(n_probes):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode()
            n, t0, dt = struct.unpack("<Qdd", f.read(24))
            data[name] = np.frombuffer(f.read(8 * n), dtype="<f8").copy()
        times = t0 + np.arange(n) * dt
    return WaveformSet(times, data)
