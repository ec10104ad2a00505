import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gateblind import waveform as wf
from gateblind.waveform import OpticalWaveform, PulseSpec, SplitRatio, WaveformError


def test_pulse_energy_independent_of_edge():
    for edge in (0.0, 0.2, 1.0, 3.0):
        p = PulseSpec(10.0, 3.0, 2e-3, edge)
        w = wf.compose([p])
        assert wf.energy(w, 0.0, 30.0) == pytest.approx(p.energy, rel=1e-12)
        assert p.energy == pytest.approx(6e-12)


def test_pulse_validation():
    with pytest.raises(WaveformError):
        PulseSpec(0.0, 0.0, 1.0)
    with pytest.raises(WaveformError):
        PulseSpec(0.0, 1.0, -1.0)
    with pytest.raises(WaveformError):
        PulseSpec(0.0, 1.0, 1.0, edge_time=2.0)


def test_half_maximum_points():
    w = wf.compose([PulseSpec(5.0, 4.0, 1.0, 1.0)])
    assert w(5.0) == pytest.approx(0.5)
    assert w(9.0) == pytest.approx(0.5)
    assert w(7.0) == 1.0
    assert w(4.0) == 0.0 and w(10.5) == 0.0


def test_overlap_rejected_unless_additive():
    a = PulseSpec(0.0, 4.0, 1.0)
    b = PulseSpec(2.0, 4.0, 1.0)
    with pytest.raises(WaveformError):
        wf.compose([a, b])
    w = wf.compose([a, b], additive=True)
    assert w(3.0) == pytest.approx(2.0)
    assert wf.energy(w, -5, 20) == pytest.approx(a.energy + b.energy)


def test_cw_floor_and_constant():
    w = wf.compose([PulseSpec(0.0, 2.0, 1e-3)], cw_floor=1e-4)
    assert w(-100.0) == pytest.approx(1e-4)
    assert w(1.0) == pytest.approx(1.1e-3)
    c = OpticalWaveform.constant(2e-3)
    assert wf.mean_power(c, 0.0, 1e6) == pytest.approx(2e-3)
    assert wf.energy(c, -10.0, 10.0) == pytest.approx(2e-3 * 20e-9)


def test_negative_power_rejected():
    with pytest.raises(WaveformError):
        OpticalWaveform(np.array([0.0, 1.0]), np.array([0.0, -1.0]))
    with pytest.raises(WaveformError):
        OpticalWaveform(np.array([1.0, 0.0]), np.array([0.0, 1.0]))


def test_split_conserves_power():
    w = wf.pulse_train(np.arange(5) * 200.0, 3.0, 1e-3)
    a, b = wf.split(w, SplitRatio(0.4675))
    t = np.linspace(-10, 1000, 3001)
    np.testing.assert_allclose(a(t) + b(t), w(t), rtol=0, atol=1e-18)
    assert wf.energy(a, -10, 1000) == pytest.approx(0.4675 * wf.energy(w, -10, 1000))
    with pytest.raises(WaveformError):
        SplitRatio(1.5)


def test_pulse_train_matches_compose():
    starts = np.array([0.0, 10.0, 25.0])
    peaks = np.array([1.0, 2.0, 0.5])
    a = wf.pulse_train(starts, 3.0, peaks, edge_time=0.5)
    b = wf.compose([PulseSpec(s, 3.0, p, 0.5) for s, p in zip(starts, peaks)])
    assert a == b
    with pytest.raises(WaveformError):
        wf.pulse_train(np.array([0.0, 1.0]), 3.0, 1.0)


def test_add_exact():
    a = wf.compose([PulseSpec(0.0, 5.0, 1.0)])
    b = wf.compose([PulseSpec(3.0, 5.0, 2.0)])
    s = wf.add(a, b)
    t = np.linspace(-2, 12, 281)
    np.testing.assert_allclose(s(t), a(t) + b(t), atol=1e-15)


def test_csv_round_trip(tmp_path):
    w = wf.pulse_train(np.array([0.0, 200.0]), 140.0, 5e-4, edge_time=1.0)
    path = tmp_path / "w.csv"
    text = wf.to_csv(w, path)
    assert text.splitlines()[0] == "time_ns,power_W"
    assert path.read_text() == text
    back = wf.from_csv(path)
    assert back == w
    assert wf.from_csv(text) == w


def test_csv_round_trip_with_floor():
    w = wf.compose([PulseSpec(10.0, 2.0, 1e-3)], cw_floor=1e-5)
    back = wf.from_csv(wf.to_csv(w))
    t = np.linspace(-50, 50, 201)
    np.testing.assert_allclose(back(t), w(t))


def test_csv_bad_header():
    with pytest.raises(WaveformError):
        wf.from_csv("t,p\n0,1\n")


def test_window_includes_ends():
    w = wf.compose([PulseSpec(5.0, 4.0, 1.0)])
    t, p = w.window(0.0, 7.0)
    assert t[0] == 0.0 and t[-1] == 7.0
    assert p[-1] == 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0.1, 20.0), st.floats(0.0, 1.0)), min_size=1, max_size=8),
       st.floats(0.0, 0.1))
def test_energy_additive_property(pulses, edge):
    starts = np.concatenate([[0.0], np.cumsum([w + 1.0 for w, _ in pulses])[:-1]])
    specs = [PulseSpec(s, w, p, min(edge, w)) for s, (w, p) in zip(starts, pulses)]
    w = wf.compose(specs)
    total = sum(s.energy for s in specs)
    assert wf.energy(w, -1.0, starts[-1] + 30.0) == pytest.approx(total, rel=1e-9, abs=1e-24)
    mid = starts[len(starts) // 2]
    e1 = wf.energy(w, -1.0, mid) + wf.energy(w, mid, starts[-1] + 30.0)
    assert e1 == pytest.approx(total, rel=1e-9, abs=1e-24)
