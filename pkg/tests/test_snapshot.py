import cmath
import copy
import json
import math

import numpy as np
import pytest

import emtgis.emtkernel as ek
import emtgis.snapshot as sn
from emtgis.errors import (
    NotConverged,
    ScheduleViolation,
    StageFailure,
    SteadyStateTimeout,
    TopologyMismatch,
    ZeroFaultCurrentDelta,
)
from emtgis.netmodel import (
    BranchRecord,
    BusKind,
    BusRecord,
    CaseFile,
    MachineKind,
    MachineRecord,
    Phasor,
)
from emtgis.powerflow import solve_main

OMEGA = 2 * math.pi * 50.0

from conftest import injection_thevenin, random_linear_net, subset_state  # noqa: E402


def machine_case():
    """Slack source, one classical machine, one load: phasor-init testbed."""
    return CaseFile(
        100.0, 50.0,
        [BusRecord("B1", BusKind.SLACK, 230.0, v_set=1.02),
         BusRecord("B2", BusKind.PV, 230.0, v_set=1.01),
         BusRecord("B3", BusKind.PQ, 230.0, p_load=0.6, q_load=0.2)],
        [BranchRecord("B1", "B3", 0.01, 0.08),
         BranchRecord("B2", "B3", 0.012, 0.1)],
        [MachineRecord("B1", MachineKind.IDEAL_SOURCE),
         MachineRecord("B2", MachineKind.SYNCHRONOUS_SIMPLIFIED,
                       xd_transient=0.15, p_set=0.4, v_set=1.01,
                       inertia_h=1.5, damping=2.0)],
    )


class TestPhasorDiagram:
    def test_port_current_of_unloaded_source_is_zero(self):
        assert sn.machine_port_current(0j, 1.0 + 0j) == 0j

    def test_port_current_is_conjugate_ratio(self):
        i = sn.machine_port_current(1.0 + 0j, 1.0 + 0j)
        assert i == pytest.approx(1.0 + 0j)
        i = sn.machine_port_current(0.5 + 0.2j, cmath.rect(1.02, 0.1))
        assert i == pytest.approx(((0.5 + 0.2j) / cmath.rect(1.02, 0.1)).conjugate())

    def test_classical_machine_emf(self):
        emf = sn.machine_internal_emf(1.0 + 0j, 1.0 + 0j, 0.2)
        assert emf == pytest.approx(1.0 + 0.2j)
        assert abs(emf) == pytest.approx(math.sqrt(1.04))
        assert cmath.phase(emf) == pytest.approx(math.atan(0.2))


class TestPhasorInit:
    def test_requires_converged_solution(self, twobus):
        pf = solve_main(twobus, {}, tol=1e-12)
        pf.converged = False
        with pytest.raises(NotConverged):
            sn.phasor_init(twobus, pf, dt=5e-5)

    def test_unloaded_network_has_zero_current_histories(self):
        case = CaseFile(
            100.0, 50.0,
            [BusRecord("B1", BusKind.SLACK, 230.0, v_set=1.0),
             BusRecord("B2", BusKind.PQ, 230.0)],
            [BranchRecord("B1", "B2", 0.0, 0.1)],
            [MachineRecord("B1", MachineKind.IDEAL_SOURCE)],
        )
        pf = solve_main(case, {}, tol=1e-12)
        snap = sn.phasor_init(case, pf, dt=5e-5)
        st = snap.emt_state
        assert np.max(np.abs(st.elem_i)) < 1e-12
        assert np.max(np.abs(st.hist_i)) < 1e-12
        # voltage histories follow the phasor one step back
        k = st.node_ids.index("B2")
        assert st.v_nodes[k, 0] == pytest.approx(math.sqrt(2.0), rel=1e-9)

    def test_history_currents_are_peak_scaled_phasors(self, twobus):
        # component with V = 1 angle 0 carrying S = P: history current is
        # sqrt(2) |I| cos(omega (t0 - dt)) per the port-current rule
        pf = solve_main(twobus, {}, tol=1e-12)
        snap = sn.phasor_init(twobus, pf, dt=5e-5, t0=0.0)
        st = snap.emt_state
        net = sn.build_main_net(twobus, pf)
        _, elem_ph = ek.phasor_solve(net, {
            s.node: cmath.rect(s.rms, s.angle) for s in net.sources}, dt=5e-5)
        for k, e in enumerate(net.elements):
            expect = ek.SQRT2 * (elem_ph[e.eid]
                                 * cmath.exp(1j * OMEGA * (-5e-5))).real
            assert st.hist_i[k, 0] == pytest.approx(expect, abs=1e-12)

    def test_machine_case_holds_steady_two_cycles(self):
        case = machine_case()
        pf = solve_main(case, {}, tol=1e-12)
        snap = sn.phasor_init(case, pf, dt=5e-5)
        net = sn.build_main_net(case, pf)
        waves, _ = ek.run(net, ek.SimConfig(dt=5e-5, duration=0.04,
                                            record=["B1", "B2", "B3"]),
                          init=snap.emt_state)
        n = int(round(0.02 / 5e-5))
        for b in ("B1", "B2", "B3"):
            rms = waves.cycle_rms(f"{b}.a", n, last_only=False)
            target = pf.voltage(b).magnitude
            assert np.max(np.abs(rms - target)) / target < 1e-3

    def test_machine_stays_at_equilibrium(self):
        case = machine_case()
        pf = solve_main(case, {}, tol=1e-12)
        snap = sn.phasor_init(case, pf, dt=5e-5)
        net = sn.build_main_net(case, pf)
        _, fin = ek.run(net, ek.SimConfig(dt=5e-5, duration=0.5),
                        init=snap.emt_state)
        assert fin.machine_delta[0] == pytest.approx(
            snap.emt_state.machine_delta[0], abs=1e-9)
        assert abs(fin.machine_speed_dev[0]) < 1e-10

    def test_off_grid_t0_rejected(self, twobus):
        pf = solve_main(twobus, {}, tol=1e-12)
        with pytest.raises(ValueError):
            sn.phasor_init(twobus, pf, dt=5e-5, t0=1.23e-5)

    def test_snapshot_phasor_consistency_both_provenances(self, ninebus1_pipeline):
        for name, snap in ninebus1_pipeline.subsystem_snapshots.items():
            assert snap.phasor_consistency_error() < 1e-6, name
        # the merged snapshot can only disagree by the splicing deviation
        dev = max(ninebus1_pipeline.report.splice_deviations.values())
        merged = ninebus1_pipeline.snapshot.phasor_consistency_error()
        assert merged <= dev + 1e-6


class TestThevenin:
    def test_constructed_measurement_pair(self):
        th = sn.thevenin_from_measurements(1.0 + 0j, 0j, -10j)
        assert th.z_eq == pytest.approx(-0.1j)
        assert (th.z_eq.imag, abs(th.z_eq)) == pytest.approx((-0.1, 0.1))
        assert th.e_eq.rect == pytest.approx(1.0 + 0j)

    def test_source_behind_reactance_is_exact(self):
        net = ek.EmtNet(
            "src", 50.0, ("s", "b"),
            (ek.Element("x", ek.ElementKind.INDUCTOR, "s", "b", 0.1 / OMEGA),),
            (ek.Source("e", "s", 1.0, 0.0),),
        )
        th = sn.extract_thevenin_from_net(net, "b", 1.0 + 0j, 0j)
        assert th.z_eq == pytest.approx(0.1j, abs=1e-12)
        assert th.e_eq.rect == pytest.approx(1.0 + 0j, abs=1e-12)

    def test_degenerate_measurements_raise(self):
        with pytest.raises(ZeroFaultCurrentDelta):
            sn.thevenin_from_measurements(1.0 + 0j, -2j, 2j)

    def test_equivalent_satisfies_measurement_identity(self, ninebus1,
                                                       ninebus1_pipeline):
        pf = ninebus1_pipeline.main_pf
        from emtgis.powerflow import boundary_injections

        th = sn.thevenin_extract(ninebus1, pf, "B10")
        p, q = boundary_injections(pf, ninebus1)["B10"]
        v_b = pf.voltage("B10").rect
        i_b = sn.machine_port_current(complex(p, q), v_b)
        assert i_b * th.z_eq + v_b == pytest.approx(th.e_eq.rect, abs=1e-9)

    def test_equivalent_reproduces_boundary_operating_point(self, ninebus1,
                                                            ninebus1_pipeline):
        """Attaching the extracted source/impedance to the region's own
        phasor network reproduces the coordinated boundary state."""
        res = ninebus1_pipeline
        op = res.region_ops[0]
        th = sn.thevenin_extract(ninebus1, res.main_pf, "B10")
        region = sn.build_region_net(op, 50.0)
        net, probe = sn.attach_thevenin(region, "B10", th)
        known = {s.node: cmath.rect(s.rms, s.angle) for s in net.sources}
        node_ph, elem_ph = ek.phasor_solve(net, known)
        v_ipf = res.boundary_state.voltage(0).rect
        assert node_ph["B10"] == pytest.approx(v_ipf, abs=1e-6)
        i_ipf = sn.machine_port_current(
            complex(res.boundary_state.p[0], res.boundary_state.q[0]), v_ipf)
        assert elem_ph[probe] == pytest.approx(i_ipf, abs=1e-6)

    def test_randomized_networks_match_injection_oracle(self):
        """Extracted impedance equals the Thevenin impedance computed by the
        textbook definition (unit injection with sources grounded)."""
        rng = np.random.default_rng(314)
        for trial in range(3):
            net, boundary = random_linear_net(rng)
            z_direct = injection_thevenin(net, boundary)
            known = {s.node: cmath.rect(s.rms, s.angle) for s in net.sources}
            node_ph, _ = ek.phasor_solve(net, known)
            th = sn.extract_thevenin_from_net(net, boundary,
                                              node_ph[boundary], 0j)
            assert th.z_eq == pytest.approx(z_direct, rel=1e-9)


class TestRamp:
    def setup_rl_region(self, r=0.5, x=1.0):
        net = ek.EmtNet(
            "region:rl", 50.0, ("B",),
            (ek.Element("rl/load:r", ek.ElementKind.RESISTOR, "B", "Bm", r),
             ek.Element("rl/load:l", ek.ElementKind.INDUCTOR, "Bm", None,
                        x / OMEGA)),
            (),
        )
        return ek.EmtNet(net.name, 50.0, net.nodes + ("Bm",), net.elements,
                         net.sources)

    def test_rl_region_settles_to_divider_solution(self):
        region = self.setup_rl_region()
        th = sn.TheveninEquivalent(Phasor(1.0, 0.0), 0.02 + 0.1j)
        cfg = ek.SimConfig(dt=5e-5, duration=4.0, record=[], ramp_sources=True,
                           t_ramp=0.3)
        snap = sn.ramp_to_snapshot(region, th, cfg, "B", subsystem="rl")
        v, i = snap.boundary_phasors["B"]
        z_load = 0.5 + 1.0j
        expect_v = th.e_eq.rect * z_load / (th.z_eq + z_load)
        expect_i = th.e_eq.rect / (th.z_eq + z_load)
        assert abs(v.rect - expect_v) / abs(expect_v) < 2e-3
        assert abs(i.rect - expect_i) / abs(expect_i) < 2e-3
        assert snap.provenance == sn.PROVENANCE_RAMP

    def test_open_circuit_region_sees_source(self):
        region = ek.EmtNet("region:open", 50.0, ("B",), (), ())
        th = sn.TheveninEquivalent(Phasor(0.97, 0.2), 0.05 + 0.2j)
        cfg = ek.SimConfig(dt=5e-5, duration=3.0, record=[], ramp_sources=True,
                           t_ramp=0.3)
        snap = sn.ramp_to_snapshot(region, th, cfg, "B", subsystem="open")
        v, i = snap.boundary_phasors["B"]
        assert abs(v.rect - th.e_eq.rect) < 1e-3
        assert abs(i.rect) < 1e-6

    def test_budget_shorter_than_ramp_times_out(self):
        region = self.setup_rl_region()
        th = sn.TheveninEquivalent(Phasor(1.0, 0.0), 0.02 + 0.1j)
        cfg = ek.SimConfig(dt=5e-5, duration=0.2, record=[], ramp_sources=True,
                           t_ramp=0.5)
        with pytest.raises(SteadyStateTimeout):
            sn.ramp_to_snapshot(region, th, cfg, "B")

    def test_ramped_snapshot_phasor_consistency(self):
        region = self.setup_rl_region()
        th = sn.TheveninEquivalent(Phasor(1.0, 0.0), 0.02 + 0.1j)
        cfg = ek.SimConfig(dt=5e-5, duration=4.0, record=[], ramp_sources=True,
                           t_ramp=0.3)
        snap = sn.ramp_to_snapshot(region, th, cfg, "B", subsystem="rl")
        assert snap.phasor_consistency_error() < 1e-6


class TestSpliceSchedule:
    def test_next_even_period_boundary(self):
        sched = sn.splice_schedule({"i": 1.0, "j": 1.013}, period=0.02, dt=1e-3)
        assert sched.reference == "i"
        assert sched.adjusted_time("j", 1e-3) == pytest.approx(1.04)

    def test_equal_ready_times_need_no_delay(self):
        sched = sn.splice_schedule({"i": 1.0, "j": 1.0}, period=0.02, dt=1e-3)
        assert sched.t_adj_steps["j"] == sched.t_ref_steps

    def test_just_below_two_periods(self):
        sched = sn.splice_schedule({"i": 1.0, "j": 1.0799}, period=0.02, dt=1e-4)
        assert sched.adjusted_time("j", 1e-4) == pytest.approx(1.08)

    def test_single_period_factor_flag(self):
        sched = sn.splice_schedule({"i": 1.0, "j": 1.013}, period=0.02,
                                   dt=1e-3, factor=1)
        assert sched.adjusted_time("j", 1e-3) == pytest.approx(1.02)

    def test_off_grid_ready_time_rejected(self):
        with pytest.raises(ValueError):
            sn.splice_schedule({"i": 1.00003}, period=0.02, dt=1e-3)

    def test_modulus_and_ordering_properties(self):
        rng = np.random.default_rng(99)
        for _ in range(200):
            period_steps = int(rng.integers(2, 500))
            factor = int(rng.choice([1, 2]))
            ready = {f"s{i}": int(rng.integers(0, 10**6))
                     for i in range(int(rng.integers(1, 6)))}
            sched = sn.schedule_from_steps(ready, period_steps, factor)
            modulus = factor * period_steps
            for name, adj in sched.t_adj_steps.items():
                assert adj >= ready[name]
                assert (adj - sched.t_ref_steps) % modulus == 0
                assert adj - ready[name] < modulus


@pytest.fixture(scope="module")
def split_setup(ninebus1, ninebus1_pipeline):
    """Steady full-system states at several capture times, pre-split into
    main and region parts."""
    res = ninebus1_pipeline
    case = ninebus1
    dt = 5e-5
    n_cycle = int(round(case.period / dt))
    main_net = sn.build_main_net(case, res.main_pf)
    region_net = sn.build_region_net(res.region_ops[0], 50.0)
    full = res.full_net

    # sample the settled whole system across one period, catching the
    # boundary-voltage peak for a worst-case opposite-phase splice
    waves, _ = ek.run(full, ek.SimConfig(dt=dt, duration=0.02, record=["B10"]),
                      init=res.snapshot.emt_state)
    peak_off = int(np.argmax(waves.data["B10.a"][1:])) + 1
    _, at_peak = ek.run(full, ek.SimConfig(dt=dt, duration=peak_off * dt),
                        init=res.snapshot.emt_state)
    _, at_half = ek.run(full, ek.SimConfig(dt=dt, duration=(n_cycle // 2) * dt),
                        init=at_peak)
    _, at_two = ek.run(full, ek.SimConfig(dt=dt, duration=2 * n_cycle * dt),
                       init=at_peak)

    def split(state):
        main = subset_state(state, main_net.nodes,
                            [e.eid for e in main_net.elements],
                            [m.mid for m in main_net.machines])
        region = subset_state(state, region_net.nodes,
                              [e.eid for e in region_net.elements])
        mk = lambda name, st, prov: sn.Snapshot(
            name, st.step, dt, 50.0, st, {}, prov, parts={name: prov})
        return (mk("main", main, sn.PROVENANCE_PHASOR),
                mk("wind1", region, sn.PROVENANCE_RAMP))

    return {
        "case": case, "dt": dt, "full": full, "n_cycle": n_cycle,
        "res": res, "split": split,
        "at_peak": at_peak, "at_half": at_half, "at_two": at_two,
    }


class TestSplice:
    def test_same_instant_splice_is_seamless(self, split_setup):
        s = split_setup
        main, region = s["split"](s["at_peak"])
        sched = sn.schedule_from_steps(
            {"main": main.timestamp_steps, "wind1": region.timestamp_steps},
            s["n_cycle"])
        merged, dev = sn.splice({"main": main, "wind1": region}, sched,
                                s["full"], s["dt"])
        assert max(dev.values()) < 1e-6
        waves, _ = ek.run(s["full"], ek.SimConfig(dt=s["dt"], duration=0.1,
                                                  record=["B10", "B5"]),
                          init=merged.emt_state)
        for key in ("B10.a", "B5.a"):
            rms = waves.cycle_rms(key, s["n_cycle"], last_only=False)
            assert np.max(np.abs(rms - rms[-1])) / rms[-1] < 1e-3

    def test_opposite_phase_splice_and_adjustment(self, split_setup):
        s = split_setup
        main, _ = s["split"](s["at_peak"])
        _, region_half = s["split"](s["at_half"])
        _, region_two = s["split"](s["at_two"])

        # deliberately unadjusted: region captured half a period later
        bad_sched = sn.SpliceSchedule(
            "main", main.timestamp_steps, s["n_cycle"], 2,
            {"main": main.timestamp_steps, "wind1": region_half.timestamp_steps})
        _, bad_dev = sn.splice({"main": main, "wind1": region_half}, bad_sched,
                               s["full"], s["dt"])
        # adjusted: next 2kT-aligned instant
        sched = sn.schedule_from_steps(
            {"main": main.timestamp_steps, "wind1": region_half.timestamp_steps},
            s["n_cycle"])
        assert sched.t_adj_steps["wind1"] == region_two.timestamp_steps
        _, good_dev = sn.splice({"main": main, "wind1": region_two}, sched,
                                s["full"], s["dt"])

        v_peak = ek.SQRT2 * s["res"].main_pf.voltage("B10").magnitude
        assert max(bad_dev.values()) > 1.5 * v_peak  # near twice the peak
        assert max(good_dev.values()) <= max(bad_dev.values()) / 100.0

    def test_schedule_violation_detected(self, split_setup):
        s = split_setup
        main, region = s["split"](s["at_peak"])
        sched = sn.schedule_from_steps(
            {"main": main.timestamp_steps, "wind1": region.timestamp_steps + 7},
            s["n_cycle"])
        with pytest.raises(ScheduleViolation):
            sn.splice({"main": main, "wind1": region}, sched, s["full"], s["dt"])

    def test_missing_coverage_detected(self, split_setup):
        s = split_setup
        main, region = s["split"](s["at_peak"])
        sched = sn.schedule_from_steps({"main": main.timestamp_steps},
                                       s["n_cycle"])
        with pytest.raises(TopologyMismatch):
            sn.splice({"main": main}, sched, s["full"], s["dt"])

    def test_single_subsystem_splice_is_identity(self, split_setup):
        # a lone snapshot that covers the entire network passes through
        whole = split_setup["res"].snapshot
        sched = sn.schedule_from_steps({"whole": whole.timestamp_steps},
                                       split_setup["n_cycle"])
        merged, dev = sn.splice({"whole": whole}, sched, split_setup["full"],
                                split_setup["dt"])
        assert merged is whole
        assert all(v == 0.0 for v in dev.values())


class TestPipeline:
    def test_zero_region_case_reduces_to_phasor_init(self, twobus):
        result = sn.run_emtgis(twobus, sn.PipelineConfig(dt=5e-5))
        assert result.snapshot.provenance == sn.PROVENANCE_PHASOR
        assert result.report.gis_cost_steps == 0
        waves, _ = ek.run(result.full_net,
                          ek.SimConfig(dt=5e-5, duration=0.1, record=["B2"]),
                          init=result.snapshot.emt_state)
        rms = waves.cycle_rms("B2.a", 400, last_only=False)
        target = result.main_pf.voltage("B2").magnitude
        assert np.max(np.abs(rms - target)) / target < 1e-3

    def test_report_carries_all_stages(self, ninebus1_pipeline):
        rep = ninebus1_pipeline.report
        assert rep.ipf_trace is not None and rep.ipf_trace.status == "converged"
        assert set(rep.ready_steps) == {"main", "wind1"}
        assert rep.adjusted_steps["wind1"] >= rep.ready_steps["wind1"]
        assert rep.splice_deviations["B10"] < 1e-4
        assert ninebus1_pipeline.snapshot.provenance == sn.PROVENANCE_SPLICED
        assert ninebus1_pipeline.snapshot.parts == {
            "main": sn.PROVENANCE_PHASOR, "wind1": sn.PROVENANCE_RAMP}

    def test_stage_failure_is_tagged(self, ninebus1):
        cfg = sn.PipelineConfig(dt=5e-5, ramp_budget=0.2)  # can't finish ramp
        with pytest.raises(StageFailure) as exc:
            sn.run_emtgis(ninebus1, cfg)
        assert exc.value.stage == "ramp_to_snapshot"

    def test_invalid_case_fails_validate_stage(self, ninebus1):
        case = copy.deepcopy(ninebus1)
        case.buses.append(case.buses[0])
        with pytest.raises(StageFailure) as exc:
            sn.run_emtgis(case, sn.PipelineConfig(dt=5e-5))
        assert exc.value.stage == "validate"


class TestSnapshotFile:
    def test_round_trip_is_exact(self, ninebus1_pipeline, tmp_path):
        snap = ninebus1_pipeline.snapshot
        path = tmp_path / "snap.json"
        sn.save_snapshot(snap, path)
        back = sn.load_snapshot(path)
        a, b = snap.emt_state, back.emt_state
        assert back.subsystem == snap.subsystem
        assert back.timestamp_steps == snap.timestamp_steps
        assert back.provenance == snap.provenance
        assert a.node_ids == b.node_ids and a.element_ids == b.element_ids
        for field in ("v_nodes", "elem_i", "hist_u", "hist_i", "machine_delta",
                      "machine_pm", "source_scale"):
            assert np.array_equal(getattr(a, field), getattr(b, field)), field
        for bus, (v, i) in snap.boundary_phasors.items():
            bv, bi = back.boundary_phasors[bus]
            assert (bv.magnitude, bv.angle) == (v.magnitude, v.angle)
            assert (bi.magnitude, bi.angle) == (i.magnitude, i.angle)

    def test_loaded_snapshot_resumes_simulation(self, ninebus1_pipeline, tmp_path):
        path = tmp_path / "snap.json"
        sn.save_snapshot(ninebus1_pipeline.snapshot, path)
        back = sn.load_snapshot(path)
        waves, _ = ek.run(ninebus1_pipeline.full_net,
                          ek.SimConfig(dt=5e-5, duration=0.05, record=["B10"]),
                          init=back.emt_state)
        rms = waves.cycle_rms("B10.a", 400)
        target = ninebus1_pipeline.main_pf.voltage("B10").magnitude
        assert rms == pytest.approx(target, rel=1e-3)


class TestAdvance:
    def test_advancing_backwards_is_refused(self, ninebus1_pipeline):
        from emtgis.errors import ScheduleViolation

        snap = ninebus1_pipeline.subsystem_snapshots["wind1"]
        with pytest.raises(ScheduleViolation):
            sn.advance_snapshot(snap, ninebus1_pipeline.full_net,
                                snap.timestamp_steps - 1, snap.dt)

    def test_snapshot_version_gate(self, tmp_path, ninebus1_pipeline):
        from emtgis.errors import IncompatibleSnapshot

        path = tmp_path / "snap.json"
        sn.save_snapshot(ninebus1_pipeline.snapshot, path)
        doc = json.loads(path.read_text())
        doc["version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(IncompatibleSnapshot):
            sn.load_snapshot(path)

    def test_off_grid_period_rejected(self):
        with pytest.raises(ValueError):
            sn.splice_schedule({"i": 1.0}, period=0.021305, dt=1e-4)
