import json
import math
from pathlib import Path

import numpy as np
import pytest

import emtgis.emtkernel as ek
from emtgis.errors import (
    IncompatibleSnapshot,
    InvalidParameter,
    UnknownBus,
    UnknownProbe,
)

OMEGA = 2 * math.pi * 50.0
DATA = Path(__file__).parent / "data"


def rl_net(r=1.0, l_henry=0.01, rms=1.0):
    return ek.EmtNet(
        "rl", 50.0, ("n1", "n2"),
        (ek.Element("r1", ek.ElementKind.RESISTOR, "n1", "n2", r),
         ek.Element("l1", ek.ElementKind.INDUCTOR, "n2", None, l_henry)),
        (ek.Source("src", "n1", rms, 0.0),),
    )


class TestCompanionCoefficients:
    def test_resistor(self):
        m = ek.companion_coefficients(ek.ElementKind.RESISTOR, 2.0, 20e-6)
        assert (m.g_coef, m.h_coef, m.j_coef) == (0.5, 0.0, 0.0)

    def test_inductor_trapezoidal(self):
        # di/dt = v/L discretized by the trapezoid: G = H = dt/2L, J = 1
        m = ek.companion_coefficients(ek.ElementKind.INDUCTOR, 0.1, 20e-6)
        assert m.g_coef == pytest.approx(1e-4)
        assert m.h_coef == pytest.approx(1e-4)
        assert m.j_coef == 1.0

    def test_capacitor_trapezoidal(self):
        m = ek.companion_coefficients(ek.ElementKind.CAPACITOR, 1e-3, 20e-6)
        assert m.g_coef == pytest.approx(100.0)
        assert m.h_coef == pytest.approx(-100.0)
        assert m.j_coef == -1.0

    @pytest.mark.parametrize("kind", [ek.ElementKind.RESISTOR,
                                      ek.ElementKind.INDUCTOR,
                                      ek.ElementKind.CAPACITOR])
    def test_nonpositive_value_rejected(self, kind):
        with pytest.raises(InvalidParameter):
            ek.companion_coefficients(kind, 0.0, 20e-6)


class TestStep:
    def test_resistive_divider_is_static(self):
        # with a constant (zero-frequency) source the mid node holds the
        # exact divider value at every step
        net = ek.EmtNet(
            "div", 0.0, ("n1", "n2"),
            (ek.Element("ra", ek.ElementKind.RESISTOR, "n1", "n2", 1.0),
             ek.Element("rb", ek.ElementKind.RESISTOR, "n2", None, 1.0)),
            (ek.Source("src", "n1", 1.0 / math.sqrt(2.0), 0.0),),
        )
        waves, _ = ek.run(net, ek.SimConfig(dt=1e-4, duration=0.01, record=["n2"]))
        assert np.all(waves.data["n2.a"][1:] == pytest.approx(0.5, abs=1e-15))

    def test_rl_steady_state_matches_phasor_solution(self):
        net = rl_net()
        waves, _ = ek.run(net, ek.SimConfig(dt=2e-5, duration=0.3,
                                            record=["i:l1"]))
        i_amp = ek.SQRT2 * waves.cycle_rms("i:l1.a", int(round(0.02 / 2e-5)))
        expect = ek.SQRT2 * 1.0 / abs(1.0 + 1j * OMEGA * 0.01)
        assert i_amp == pytest.approx(expect, rel=1e-3)

    def test_zero_sources_zero_state_stays_zero(self):
        net = rl_net(rms=0.0)
        waves, st = ek.run(net, ek.SimConfig(dt=1e-4, duration=0.05,
                                             record=["n1", "n2", "i:l1"]))
        for v in waves.data.values():
            assert np.all(v == 0.0)
        assert np.all(st.v_nodes == 0.0) and np.all(st.elem_i == 0.0)

    def test_three_phases_are_balanced(self):
        net = rl_net()
        waves, _ = ek.run(net, ek.SimConfig(dt=2e-5, duration=0.5, record=["n2"]))
        n = int(round(0.02 / 2e-5))
        rms = [waves.cycle_rms(f"n2.{p}", n) for p in "abc"]
        assert max(rms) - min(rms) < 1e-9
        # instantaneous sum of a balanced set vanishes
        tail = sum(waves.data[f"n2.{p}"][-n:] for p in "abc")
        assert np.max(np.abs(tail)) < 1e-9


class TestRampProfile:
    def test_shape(self):
        assert ek.ramp_profile(0.0, 0.5) == 0.0
        assert ek.ramp_profile(-1.0, 0.5) == 0.0
        assert ek.ramp_profile(0.25, 0.5) == 0.5
        assert ek.ramp_profile(0.5, 0.5) == 1.0
        assert ek.ramp_profile(2.0, 0.5) == 1.0

    def test_bad_duration(self):
        with pytest.raises(InvalidParameter):
            ek.ramp_profile(0.1, 0.0)


class TestFault:
    def test_near_solid_fault_collapses_voltage(self):
        net = ek.EmtNet(
            "f", 50.0, ("n1", "n2"),
            (ek.Element("l1", ek.ElementKind.INDUCTOR, "n1", "n2",
                        0.1 / OMEGA),),
            (ek.Source("src", "n1", 1.0, 0.0),),
        )
        cfg = ek.SimConfig(dt=1e-4, duration=0.2, record=["n2"],
                           events=[ek.SimEvent(0.1, "fault", "n2", 1e-6)])
        waves, _ = ek.run(net, cfg)
        k = int(0.1 / 1e-4)
        assert np.max(np.abs(waves.data["n2.a"][k - 200:k])) > 1.0
        assert abs(waves.data["n2.a"][k + 2]) < 1e-4

    def test_infinite_resistance_is_identity(self):
        net = rl_net()
        assert ek.apply_fault(net, "n2", math.inf) is net

    def test_unknown_bus_rejected(self):
        with pytest.raises(UnknownBus):
            ek.apply_fault(rl_net(), "nope", 0.1)

    def test_fault_current_matches_phasor_oracle(self):
        # source 1.0 behind x = 0.1; resistive fault at the far bus:
        # |I| = |E| / |Z + R| in sinusoidal steady state
        x, rf = 0.1, 0.05
        net = ek.EmtNet(
            "f", 50.0, ("n1", "n2"),
            (ek.Element("l1", ek.ElementKind.INDUCTOR, "n1", "n2", x / OMEGA),),
            (ek.Source("src", "n1", 1.0, 0.0),),
        )
        faulted = ek.apply_fault(net, "n2", rf)
        cfg = ek.SimConfig(dt=2e-5, duration=0.4, record=["i:fault:n2"])
        waves, st = ek.run(faulted, cfg)
        col = waves.data["i:fault:n2.a"]
        i_ph = ek.fourier_phasor(col[-1000:], st.step, 2e-5, OMEGA)
        assert abs(i_ph) == pytest.approx(1.0 / abs(rf + 1j * x), rel=2e-3)

    def test_unsorted_events_rejected(self):
        with pytest.raises(InvalidParameter):
            ek.SimConfig(dt=1e-4, duration=0.1,
                         events=[ek.SimEvent(0.2, "fault", "n2"),
                                 ek.SimEvent(0.1, "fault", "n2")])

    def test_post_fault_waveform_golden_regression(self):
        golden = json.loads((DATA / "golden_fault.json").read_text())
        net = rl_net()
        cfg = ek.SimConfig(dt=float(golden["dt"]), duration=float(golden["duration"]),
                           record=["n2"],
                           events=[ek.SimEvent(float(golden["fault_time"]),
                                               "fault", "n2",
                                               float(golden["r_fault"]))])
        waves, _ = ek.run(net, cfg)
        got = waves.data["n2.a"][golden["window"][0]:golden["window"][1]]
        want = np.array(golden["samples"])
        assert got == pytest.approx(want, rel=1e-9, abs=1e-12)
        # the fault leaves a visible mark relative to the pre-fault cycle
        k = int(golden["fault_time"] / golden["dt"])
        pre = waves.data["n2.a"][k - len(want):k]
        assert np.max(np.abs(got - pre)) > 0.01


class TestNumericalContracts:
    def test_companion_replay_is_bit_exact(self):
        net = rl_net()
        compiled = ek.CompiledNet(net, 2e-5)
        state = compiled.zero_state()
        for _ in range(500):
            state = compiled.step(state, False, 0.5)
        assert np.array_equal(ek.companion_replay(compiled, state), state.elem_i)

    def test_trapezoidal_order_by_dt_halving(self):
        # second-order accuracy: halving dt cuts the steady-state amplitude
        # error by about four
        def amp_error(dt):
            net = rl_net()
            waves, st = ek.run(net, ek.SimConfig(dt=dt, duration=0.3,
                                                 record=["i:l1"]))
            n = int(round(0.02 / dt))
            ph = ek.fourier_phasor(waves.data["i:l1.a"][-n:], st.step, dt, OMEGA)
            exact = 1.0 / (1.0 + 1j * OMEGA * 0.01)
            return abs(abs(ph) - abs(exact))

        ratio = amp_error(2e-4) / amp_error(1e-4)
        assert 3.0 < ratio < 5.0

    def test_deenergized_passive_network_loses_energy_monotonically(self):
        net = ek.EmtNet(
            "rlc", 50.0, ("n1", "n2", "n3"),
            (ek.Element("r1", ek.ElementKind.RESISTOR, "n1", "n2", 0.5),
             ek.Element("l1", ek.ElementKind.INDUCTOR, "n2", "n3", 0.01),
             ek.Element("c1", ek.ElementKind.CAPACITOR, "n3", None, 2e-4)),
            (ek.Source("src", "n1", 1.0, 0.3),),
        )
        _, charged = ek.run(net, ek.SimConfig(dt=2e-5, duration=0.3))
        dead = net.with_sources_zeroed()
        compiled = ek.CompiledNet(dead, 2e-5)
        state = charged
        energies = [ek.stored_energy(dead, state)]
        for _ in range(12000):
            state = compiled.step(state, False, 0.5)
            energies.append(ek.stored_energy(dead, state))
        e = np.array(energies)
        assert e[0] > 1e-4
        assert np.all(np.diff(e) <= 1e-12 * e[0])
        assert e[-1] < 1e-3 * e[0]

    def test_identical_runs_are_bitwise_equal(self):
        net = rl_net()
        cfg = ek.SimConfig(dt=5e-5, duration=0.1, record=["n2", "i:l1"])
        w1, s1 = ek.run(net, cfg)
        w2, s2 = ek.run(net, cfg)
        for k in w1.data:
            assert np.array_equal(w1.data[k], w2.data[k])
        assert np.array_equal(s1.v_nodes, s2.v_nodes)


class TestCompatibility:
    def test_foreign_snapshot_rejected(self):
        net_a, net_b = rl_net(), rl_net(r=2.0)
        _, state = ek.run(net_a, ek.SimConfig(dt=5e-5, duration=0.01))
        other = ek.EmtNet("x", 50.0, ("m1",), (), (ek.Source("s", "m1", 1.0, 0.0),))
        with pytest.raises(IncompatibleSnapshot):
            ek.run(other, ek.SimConfig(dt=5e-5, duration=0.01), init=state)

    def test_dt_mismatch_rejected(self):
        net = rl_net()
        _, state = ek.run(net, ek.SimConfig(dt=5e-5, duration=0.01))
        with pytest.raises(IncompatibleSnapshot):
            ek.run(net, ek.SimConfig(dt=1e-4, duration=0.01), init=state)

    def test_unknown_probe_rejected(self):
        with pytest.raises(UnknownProbe):
            ek.run(rl_net(), ek.SimConfig(dt=5e-5, duration=0.01,
                                          record=["ghost"]))


class TestWaveformExport:
    def test_csv_layout(self, tmp_path):
        net = rl_net()
        waves, _ = ek.run(net, ek.SimConfig(dt=1e-4, duration=0.01, record=["n2"]))
        path = tmp_path / "w.csv"
        ek.write_waveforms_csv(path, waves)
        lines = path.read_text().splitlines()
        assert lines[0] == "time,n2.a,n2.b,n2.c"
        assert len(lines) == len(waves.times) + 1

    def test_binary_round_trip_is_exact(self, tmp_path):
        net = rl_net()
        waves, _ = ek.run(net, ek.SimConfig(dt=1e-4, duration=0.02,
                                            record=["n1", "n2", "i:l1"]))
        path = tmp_path / "w.emtw"
        ek.write_waveforms_bin(path, waves)
        back = ek.read_waveforms_bin(path)
        assert list(back.data) == list(waves.data)
        for k in waves.data:
            assert np.array_equal(back.data[k], waves.data[k])
        assert back.times == pytest.approx(waves.times, abs=1e-15)
        assert path.read_bytes()[:4] == b"EMTW"


class TestSteadyDetector:
    def test_detector_fires_on_settled_rl(self):
        net = rl_net()
        cfg = ek.SimConfig(dt=2e-5, duration=2.0, record=["n2"],
                           settle_margin_cycles=0)
        state, fired, _, _ = ek.run_until_steady(net, cfg)
        assert fired is not None
        assert fired * 2e-5 < 0.5

    def test_detector_respects_budget(self):
        net = rl_net()
        cfg = ek.SimConfig(dt=2e-5, duration=0.04, record=["n2"],
                           ramp_sources=True, t_ramp=0.5)
        _, fired, _, _ = ek.run_until_steady(net, cfg)
        assert fired is None


class TestSingularTopology:
    def test_floating_node_is_rejected(self):
        from emtgis.errors import SingularConductance

        net = ek.EmtNet(
            "bad", 50.0, ("n1", "n2", "orphan"),
            (ek.Element("r1", ek.ElementKind.RESISTOR, "n1", "n2", 1.0),),
            (ek.Source("src", "n1", 1.0, 0.0),),
        )
        with pytest.raises(SingularConductance):
            ek.CompiledNet(net, 1e-4)
