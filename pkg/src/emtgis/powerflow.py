"""Newton-Raphson AC power flow on the polar mismatch equations.

The torn main system is solved with its boundary buses held at
coordinator-supplied phasors (slack-like), and the whole un-torn network
can be solved monolithically as an independent reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonConvergence, NotConverged, SingularJacobian
from .netmodel import (
    AdmittanceMatrix,
    BusKind,
    CaseFile,
    Phasor,
    build_admittance,
    inline_grbcs,
)


@dataclass
class PowerFlowSolution:
    bus_ids: tuple[str, ...]
    vm: np.ndarray  # per-unit magnitudes
    va: np.ndarray  # radians
    p_calc: np.ndarray  # network injection per bus (generator convention)
    q_calc: np.ndarray
    iterations: int
    converged: bool
    max_mismatch: float
    mismatch_history: list[float] = field(default_factory=list)

    def index(self, bus_id: str) -> int:
        return self.bus_ids.index(bus_id)

    def voltage(self, bus_id: str) -> Phasor:
        i = self.index(bus_id)
        return Phasor(float(self.vm[i]), float(self.va[i]))

    def injection(self, bus_id: str) -> tuple[float, float]:
        """Net complex power injected into the network at the bus."""
        i = self.index(bus_id)
        return float(self.p_calc[i]), float(self.q_calc[i])

    def complex_voltages(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)

    def to_csv(self, path: str | Path) -> None:
        lines = ["bus_id,v_pu,theta_deg,p_pu,q_pu"]
        for i, bid in enumerate(self.bus_ids):
            lines.append(
                f"{bid},{self.vm[i]:.12g},{np.degrees(self.va[i]):.12g},"
                f"{self.p_calc[i]:.12g},{self.q_calc[i]:.12g}"
            )
        Path(path).write_text("\n".join(lines) + "\n")


def _scheduled_injections(case: CaseFile) -> tuple[np.ndarray, np.ndarray]:
    n = len(case.buses)
    p = np.zeros(n)
    q = np.zeros(n)
    for i, b in enumerate(case.buses):
        p[i] -= b.p_load
        q[i] -= b.q_load
    for m in case.machines:
        for i, b in enumerate(case.buses):
            if b.id == m.bus:
                p[i] += m.p_set
    return p, q


def solve_main(
    case: CaseFile,
    boundary_voltages: dict[str, Phasor] | None = None,
    tol: float = 1e-8,
    max_iter: int = 30,
    warm_start: PowerFlowSolution | None = None,
    ybus: AdmittanceMatrix | None = None,
) -> PowerFlowSolution:
    """Solve the main system with Boundary buses fixed at supplied phasors.

    Slack and Boundary buses keep their phasors exactly; PV buses hold
    magnitude; standard full-Jacobian NR over the remaining unknowns,
    refactorized every iteration.  Flat start unless warm_start is given.
    """
    boundary_voltages = boundary_voltages or {}
    y = ybus if ybus is not None else build_admittance(case)
    ids = y.bus_ids
    n = len(ids)
    kinds = [b.kind for b in case.buses]

    missing = [
        b.id for b in case.buses
        if b.kind is BusKind.BOUNDARY and b.id not in boundary_voltages
    ]
    if missing:
        raise ValueError(f"no boundary voltage supplied for buses {missing}")

    vm = np.ones(n)
    va = np.zeros(n)
    for i, b in enumerate(case.buses):
        if b.kind in (BusKind.SLACK, BusKind.PV):
            vm[i] = b.v_set
        elif b.kind is BusKind.BOUNDARY:
            ph = boundary_voltages[b.id]
            vm[i], va[i] = ph.magnitude, ph.angle
    if warm_start is not None:
        for i, bid in enumerate(ids):
            if kinds[i] in (BusKind.PQ,):
                j = warm_start.index(bid)
                vm[i], va[i] = warm_start.vm[j], warm_start.va[j]
            elif kinds[i] is BusKind.PV:
                va[i] = warm_start.va[warm_start.index(bid)]

    pq = np.array([i for i, k in enumerate(kinds) if k is BusKind.PQ], dtype=int)
    pv = np.array([i for i, k in enumerate(kinds) if k is BusKind.PV], dtype=int)
    pvpq = np.concatenate([pv, pq])

    p_sched, q_sched = _scheduled_injections(case)

    def calc_powers():
        v = vm * np.exp(1j * va)
        s = v * np.conj(y.mat @ v)
        return v, s

    history: list[float] = []
    converged = False
    iterations = 0
    v, s = calc_powers()
    for it in range(max_iter + 1):
        dp = p_sched[pvpq] - s.real[pvpq]
        dq = q_sched[pq] - s.imag[pq]
        mismatch = np.concatenate([dp, dq])
        if mismatch.size and not np.all(np.isfinite(mismatch)):
            raise NonConvergence(it, float("inf"))
        max_mis = float(np.max(np.abs(mismatch))) if mismatch.size else 0.0
        history.append(max_mis)
        if max_mis <= tol:
            converged = True
            iterations = it
            break
        if it == max_iter:
            break
        ibus = y.mat @ v
        diag_v = np.diag(v)
        diag_i = np.diag(ibus)
        diag_vnorm = np.diag(np.exp(1j * va))
        ds_dva = 1j * diag_v @ np.conj(diag_i - y.mat @ diag_v)
        ds_dvm = diag_v @ np.conj(y.mat @ diag_vnorm) + np.conj(diag_i) @ diag_vnorm
        j11 = ds_dva[np.ix_(pvpq, pvpq)].real
        j12 = ds_dvm[np.ix_(pvpq, pq)].real
        j21 = ds_dva[np.ix_(pq, pvpq)].imag
        j22 = ds_dvm[np.ix_(pq, pq)].imag
        jac = np.block([[j11, j12], [j21, j22]])
        try:
            dx = np.linalg.solve(jac, mismatch)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(it) from exc
        va[pvpq] += dx[: pvpq.size]
        vm[pq] += dx[pvpq.size:]
        v, s = calc_powers()

    if not converged:
        raise NonConvergence(max_iter, history[-1])
    return PowerFlowSolution(
        bus_ids=tuple(ids),
        vm=vm,
        va=va,
        p_calc=s.real.copy(),
        q_calc=s.imag.copy(),
        iterations=iterations,
        converged=True,
        max_mismatch=history[-1],
        mismatch_history=history,
    )


def boundary_injections(sol: PowerFlowSolution, case: CaseFile) -> dict[str, tuple[float, float]]:
    """Power the main system pushes into each torn boundary node.

    Positive means flowing into the boundary node; the boundary bus's own
    load belongs to the main side and is netted off here.
    """
    if not sol.converged:
        raise NotConverged("boundary injections need a converged solution")
    out: dict[str, tuple[float, float]] = {}
    for b in case.buses:
        if b.kind is BusKind.BOUNDARY:
            p_net, q_net = sol.injection(b.id)
            out[b.id] = (-p_net - b.p_load, -q_net - b.q_load)
    return out


def solve_monolithic(case: CaseFile, tol: float = 1e-10, max_iter: int = 40) -> PowerFlowSolution:
    """NR over the whole un-decomposed network (white-box regions inlined).

    Serves as the independent reference the torn coordination must match.
    Raises OracleUnavailable if any region is opaque.
    """
    flat = inline_grbcs(case)
    return solve_main(flat, {}, tol=tol, max_iter=max_iter)
