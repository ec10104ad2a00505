import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gateblind import electro
from gateblind.electro import CircuitParams, ElectricalTrace, PwlHighPass

C = CircuitParams()
LM = electro.DETECTOR_LINEAR[0]


def test_circuit_validation():
    with pytest.raises(ValueError):
        CircuitParams(v_threshold=0.03)
    with pytest.raises(ValueError):
        CircuitParams(gate_width=300.0)
    with pytest.raises(ValueError):
        CircuitParams(gate_edge=0.0)


def test_gate_voltage_shape():
    assert electro.gate_voltage(C, 0.0) == pytest.approx(1.5)
    assert electro.gate_voltage(C, 1.4) == pytest.approx(3.0)
    assert electro.gate_voltage(C, 2.8) == pytest.approx(1.5)
    assert electro.gate_voltage(C, 10.0) == 0.0
    assert electro.gate_voltage(C, 201.4) == pytest.approx(3.0)


def test_gain_diverges_towards_breakdown():
    vb = 44.0
    g = LM.gain(np.array([30.0, 40.0, 43.9]), vb)
    assert np.all(np.diff(g) > 0)
    assert LM.gain(50.0, vb) == pytest.approx(LM.m0 * LM.floor ** -LM.exponent)


def test_operating_point_self_consistent():
    vb = 44.4
    P = np.array([0.0, 1e-6, 1e-3, 1e-2])
    i, v = electro.operating_point(LM, C, P, vb)
    np.testing.assert_allclose(v, C.v_hv - i * LM.series_resistance)
    np.testing.assert_allclose(i, P * LM.gain(v, vb), rtol=1e-9, atol=1e-15)
    assert i[0] == 0.0 and v[0] == C.v_hv
    assert np.all(np.diff(v) < 0)


def test_excess_for_recovery_round_trip():
    ex = electro.excess_for_recovery(-39.8, 0.078, 0.00488, 0.2)
    # at t_recover the remaining excess gives an avalanche that just reaches threshold
    remaining = ex - 0.1 * (-39.8 + 50.0)
    assert 0.2 * remaining / ex + 3 * 0.00488 == pytest.approx(0.078)
    assert electro.DETECTOR_CIRCUITS[0].nominal_excess == pytest.approx(ex, rel=1e-3)


def test_pwl_highpass_step_response():
    f = PwlHighPass(np.array([0.0, 0.0, 1000.0]), np.array([0.0, 1.0, 1.0]), 165.0)
    t = np.array([0.0, 165.0, 330.0])
    np.testing.assert_allclose(f(t), np.exp(-t / 165.0), rtol=1e-12)
    assert f(-5.0) == 0.0


def test_pwl_highpass_ramp_response():
    tau = 50.0
    f = PwlHighPass(np.array([0.0, 1000.0]), np.array([0.0, 1000.0]), tau)
    t = np.array([10.0, 200.0])
    np.testing.assert_allclose(f(t), tau * (1 - np.exp(-t / tau)), rtol=1e-12)


def test_pwl_highpass_matches_sampled_filter():
    # the exact path and the discretised trace path agree on a gate with an avalanche
    t = np.arange(-20.0, 40.0, 0.001)
    raw = electro.raw_trace(C, LM, 1.49, 0.0, t, avalanche=True, avalanche_time=1.0)
    y = electro.comparator_input(raw, C).v_comp
    ct, cx = electro.capacitive_shape(C)
    at, ax = electro.avalanche_shape(C)
    amp = C.avalanche_peak * min(1.49 / C.nominal_excess, 1.0)
    cap = PwlHighPass(np.concatenate([[-30.0], ct]), np.concatenate([[0.0], cx]), C.ac_time_constant)
    av = PwlHighPass(np.concatenate([[-30.0], at + 1.0]), np.concatenate([[0.0], ax * amp]), C.ac_time_constant)
    exact = cap(t) + av(t)
    assert np.max(np.abs(y - exact)) < 1e-3


def test_capacitive_peak_scaling():
    ct, cx = electro.capacitive_shape(C)
    f = PwlHighPass(np.concatenate([[ct[0] - 1], ct]), np.concatenate([[0.0], cx]), C.ac_time_constant)
    assert np.max(f.at_breakpoints()) == pytest.approx(C.capacitive_peak)
    at, ax = electro.avalanche_shape(C)
    g = PwlHighPass(np.concatenate([[-1.0], at]), np.concatenate([[0.0], ax]), C.ac_time_constant)
    assert np.max(g.at_breakpoints()) == pytest.approx(1.0)


def test_detect_click_and_crossing():
    t = np.arange(-2.0, 12.0, C.sample_step)
    comp = electro.comparator_input(electro.raw_trace(C, LM, 1.49, 0.0, t, avalanche=True), C)
    hit = electro.detect_click(comp, C, (-0.5, 10.0))
    assert hit.click and 0.5 < hit.crossing_time < 1.2
    quiet = electro.comparator_input(electro.raw_trace(C, LM, 1.49, 0.0, t, avalanche=False), C)
    miss = electro.detect_click(quiet, C, (-0.5, 10.0))
    assert not miss.click and miss.crossing_time is None
    assert miss.peak == pytest.approx(C.capacitive_peak, abs=2e-3)
    with pytest.raises(ValueError):
        electro.detect_click(quiet, C, (100.0, 200.0))


def test_no_avalanche_without_excess():
    t = np.arange(-2.0, 12.0, C.sample_step)
    a = electro.raw_trace(C, LM, -0.5, 0.0, t, avalanche=True)
    b = electro.raw_trace(C, LM, -0.5, 0.0, t, avalanche=False)
    np.testing.assert_array_equal(a.i_apd, b.i_apd)


def test_trace_csv_format():
    t = np.arange(0.0, 1.0, 0.25)
    tr = electro.comparator_input(electro.raw_trace(C, LM, 1.49, 0.0, t, avalanche=True, avalanche_time=0.2), C)
    text = tr.to_csv(threshold=C.v_threshold)
    lines = text.splitlines()
    assert lines[0] == "time_ns,v_gate,i_apd_mA,v_comp_mV,click_flag"
    assert len(lines) == 5
    row = lines[2].split(",")
    assert float(row[0]) == 0.25
    assert row[4] in ("0", "1")
    assert float(row[3]) == pytest.approx(tr.v_comp[1] * 1e3)
    with pytest.raises(ValueError):
        ElectricalTrace(t, t, t, np.full(4, np.nan))


def test_sinkhole_depth_matches_exact_filter():
    period, width, tau, v = 200.0, 140.0, 165.0, 0.05
    starts = np.arange(200) * period
    t = np.repeat(np.concatenate([starts, starts + width]), 1)
    t = np.sort(np.concatenate([starts, starts, starts + width, starts + width]))
    x = np.tile([0.0, v, v, 0.0], starts.size)
    f = PwlHighPass(t, x, tau)
    probe = starts[-1] + width + 25.0
    assert f(probe) == pytest.approx(electro.sinkhole_depth(v, width, period, 25.0, tau), rel=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=12), st.floats(5.0, 500.0))
def test_highpass_linear_and_zero_dc(xs, tau):
    t = np.arange(len(xs), dtype=float) * 3.0
    x = np.array(xs)
    f = PwlHighPass(t, x, tau)
    g = PwlHighPass(t, 2 * x + 0.7, tau)
    q = np.linspace(-1.0, t[-1] + 5.0, 37)
    np.testing.assert_allclose(g(q), 2 * f(q), atol=1e-9)
    # breakpoints bound the output between them
    yb = f.at_breakpoints()
    assert np.all(f(q) <= yb.max() + 1e-12)
