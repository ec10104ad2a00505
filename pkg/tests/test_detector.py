import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import binomtest

from gateblind import detector as det
from gateblind import thermal
from gateblind.waveform import OpticalWaveform

RX = det.Receiver()
ZERO = [OpticalWaveform.zero(), OpticalWaveform.zero()]


def test_truncated_noise_bounds_and_moments():
    u = np.random.default_rng(1).random(200_000)
    z = det.truncated_noise(u)
    assert np.all(np.abs(z) <= det.NOISE_CLIP + 1e-12)
    assert abs(z.mean()) < 0.01
    assert z.std() == pytest.approx(0.9866, abs=0.01)   # variance of a 3-sigma truncated normal
    assert det.truncated_noise(0.0) == pytest.approx(-3.0)
    assert det.truncated_noise(1.0) == pytest.approx(3.0)


def test_noise_exceed_prob_matches_sampling():
    z = det.truncated_noise(np.random.default_rng(2).random(400_000))
    for level in (-1.0, 0.0, 1.5, 2.5, 2.95):
        assert det.noise_exceed_prob(level) == pytest.approx(np.mean(z >= level), abs=3e-3)
    assert det.noise_exceed_prob(3.0) == 0.0
    assert det.noise_exceed_prob(-4.0) == pytest.approx(1.0)
    # continuous near the bound: small but non-zero just below 3 sigma
    assert 0 < det.noise_exceed_prob(2.99) < 1e-4


def test_efficiency_profile():
    ec = det.EfficiencyCurve()
    assert ec.profile(1.0) == pytest.approx(0.1)
    assert ec.profile(-0.1) == 0.0 and ec.profile(3.0) == 0.0
    assert ec.fall_start == pytest.approx(1.6) and ec.fall_end == pytest.approx(2.0)
    assert ec.profile(1.8) == pytest.approx(0.05)
    assert det.quantum_efficiency(ec, 1.0, 0.5, 1.0) == pytest.approx(0.05)
    assert det.quantum_efficiency(ec, 1.0, -0.1, 1.0) == 0.0
    with pytest.raises(ValueError):
        det.EfficiencyCurve(plateau=1.5)


def test_config_validation():
    with pytest.raises(ValueError):
        det.DetectorConfig(dark_count_prob=2.0)
    with pytest.raises(ValueError):
        det.DetectorConfig(dead_gates=51)
    with pytest.raises(ValueError):
        det.GateOutcome(0, True, 0.5, "dead", 0.1, 1.0)
    with pytest.raises(ValueError):
        det.GateOutcome(0, False, None, "blind-thermal", 0.0, 0.2)
    with pytest.raises(ValueError):
        det.DetectorState(det.DetectorConfig(), thermal.idle_state(RX.thermal), dead_gates_remaining=60)


def test_nominal_excess_at_cold_plate():
    for cfg in RX.detectors:
        i, v = det.electro.operating_point(cfg.linear, cfg.circuit, 0.0, cfg.v_br(-50.0))
        assert cfg.excess(v, -50.0) == pytest.approx(cfg.circuit.nominal_excess)


def _naive_dead_time(raw, dead, gi):
    click = np.zeros_like(raw)
    free = -10 ** 9
    for k in range(raw.shape[0]):
        if gi[k] >= free and raw[k].any():
            click[k] = raw[k]
            free = gi[k] + 1 + dead
    return click


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 50))
def test_dead_time_matches_reference(seed, dead):
    rng = np.random.default_rng(seed)
    raw = rng.random((300, 2)) < 0.05
    gi = np.cumsum(rng.integers(1, 4, 300))
    click, mask, busy = det.apply_dead_time(raw, dead, True, gi)
    np.testing.assert_array_equal(click, _naive_dead_time(raw, dead, gi))
    assert not np.any(click & mask)


def test_dead_time_independent_and_busy():
    raw = np.array([[1, 0], [0, 1], [0, 1], [1, 0]], bool)
    click, _, busy = det.apply_dead_time(raw, 1, shared=False)
    np.testing.assert_array_equal(click, [[1, 0], [0, 1], [0, 0], [1, 0]])
    click, _, _ = det.apply_dead_time(raw, 5, busy=(2, 0))
    np.testing.assert_array_equal(click, [[0, 0], [0, 1], [0, 0], [0, 0]])
    assert busy == (5, 3)


def test_dark_count_rate_with_dead_time():
    n = 200_000
    tl = det.run_timeline(RX, ZERO, n_gates=n, seed=3)
    raw = tl.raw_click.sum(axis=0)
    for d in (0, 1):
        assert binomtest(int(raw[d]), n, 1e-4).pvalue > 0.0027
    assert np.all(tl.mode[~tl.click & (tl.mode != det.DEAD)] == det.GEIGER)
    latched = tl.click.any(axis=1).mean()
    p_any = 1 - (1 - 1e-4) ** 2
    assert latched == pytest.approx(p_any / (1 + 50 * p_any), rel=0.3)


def test_timeline_deterministic_and_seeded():
    a = det.run_timeline(RX, ZERO, n_gates=30_000, seed=5)
    b = det.run_timeline(RX, ZERO, n_gates=30_000, seed=5)
    c = det.run_timeline(RX, ZERO, n_gates=30_000, seed=6)
    np.testing.assert_array_equal(a.raw_click, b.raw_click)
    assert a.to_csv(0) == b.to_csv(0)
    assert not np.array_equal(a.raw_click, c.raw_click)


def test_timeline_rejects_bad_gates():
    with pytest.raises(ValueError):
        det.run_timeline(RX, ZERO, n_gates=0)
    with pytest.raises(ValueError):
        det.run_timeline(RX, ZERO, gate_indices=np.array([3, 2]))


def test_qubit_detection_probability():
    n = 40_000
    ph = np.zeros((n, 2))
    ph[:, 0] = 1.0
    tl = det.run_timeline(RX, ZERO, n_gates=n, seed=8, photons=ph)
    live = tl.mode[:, 0] != det.DEAD
    frac = tl.raw_click[live, 0].mean()
    p = 1 - (1 - 1e-4) * np.exp(-0.1)
    assert abs(frac - p) < 3 * np.sqrt(p * (1 - p) / live.sum())


def test_bright_cw_blinds_and_heats():
    waves = [OpticalWaveform.constant(9.5e-3), OpticalWaveform.constant(10.7e-3)]
    st = det.steady_cw_state(RX, (9.5e-3, 10.7e-3))
    tl = det.run_timeline(RX, waves, n_gates=5000, state=st, seed=1)
    assert not tl.raw_click.any()
    assert np.all(tl.mode == det.BLIND)
    assert np.all(tl.excess < 0)
    assert st.t_plate > -50.0


def test_gate_outcomes_and_csv():
    tl = det.run_timeline(RX, ZERO, n_gates=3, seed=0)
    outs = tl.outcomes(1)
    assert [o.gate_index for o in outs] == [0, 1, 2]
    assert all(o.mode == "geiger" for o in outs)
    lines = tl.to_csv(1).splitlines()
    assert lines[0] == "gate_index,time_ns,mode,click,comparator_peak_mV,excess_bias_V,t_chip_C"
    assert lines[1].split(",")[2] == "geiger"


def test_simulate_gate_and_sensitivity():
    ds = det.DetectorState(RX.detectors[0], thermal.idle_state(RX.thermal), rng_stream=4)
    out, nxt = det.simulate_gate(ds, RX, OpticalWaveform.zero(), 10)
    assert out.mode == "geiger" and out.excess_bias > 0
    assert det.single_photon_sensitive(ds, RX, None, 10)
    hot = det.DetectorState(RX.detectors[0], det.steady_cw_state(RX, (9.5e-3, 0.0)))
    assert not det.single_photon_sensitive(hot, RX, OpticalWaveform.constant(9.5e-3), 10)
    dead = det.DetectorState(RX.detectors[0], thermal.idle_state(RX.thermal), dead_gates_remaining=2)
    out, nxt = det.simulate_gate(dead, RX, OpticalWaveform.zero(), 0)
    assert out.mode == "dead" and nxt.dead_gates_remaining == 1


def test_thermal_pass_heat_balance():
    waves = [OpticalWaveform.constant(1e-3), OpticalWaveform.zero()]
    run = det.thermal_pass(RX, waves, 0.0, 1e7, thermal.idle_state(RX.thermal))
    assert run.p_mean[:, 0] == pytest.approx(1e-3)
    assert np.all(run.t_chip[1:, 0] >= run.t_chip[:-1, 0] - 1e-12)
    heat = RX.detectors[0].heat(1e-3, run.t_chip[-1, 0])
    assert run.t_chip[-1, 0] - run.t_plate[-1] == pytest.approx(heat * RX.thermal.r_chip[0], rel=0.01)
    assert run.csv().startswith("time_s,t_chip0")


def test_trapped_carrier_afterpulse():
    # energy between gates above the trap level forces an avalanche
    from gateblind.waveform import pulse_train
    w = pulse_train(np.arange(1, 200) * 200.0 + 50.0, 120.0, 1e-4)
    tl = det.run_timeline(RX, [w, OpticalWaveform.zero()], n_gates=100, first_gate=2, seed=0)
    assert tl.raw_click[:, 0].all()
