import types

import numpy as np
import pytest

from gateblind import calibrate as cal
from gateblind import detector as det
from gateblind import electro, thermal

RX = det.Receiver()


class StepProbe:
    """Synthetic probe: trial k clicks once the power exceeds its own level."""

    def __init__(self, levels):
        self.levels = np.sort(np.asarray(levels, float))
        self.batch = types.SimpleNamespace(noise=self.levels)

    def clicks(self, p):
        return int(np.sum(p >= self.levels))


class BumpyProbe(StepProbe):
    def clicks(self, p):
        if p < 1e-3:
            return 0
        return 2 if 1.2e-3 <= p < 1.5e-3 else 5


def test_find_thresholds_brackets_levels():
    probe = StepProbe(np.linspace(1.0e-3, 1.3e-3, 50))
    p0, p100 = cal.find_thresholds(probe, start=1e-4, rel=1e-3)
    assert probe.clicks(p0) == 0 and probe.clicks(p100) == 50
    assert p0 == pytest.approx(1.0e-3, rel=2e-3)
    assert p100 == pytest.approx(1.3e-3, rel=2e-3)


def test_find_thresholds_errors():
    with pytest.raises(cal.CalibrationError):
        cal.find_thresholds(StepProbe([0.0, 1.0]))
    with pytest.raises(cal.NonMonotoneError):
        cal.find_thresholds(BumpyProbe(np.ones(5)), start=1e-4)
    assert issubclass(cal.NonMonotoneError, cal.CalibrationError)


def test_sweep_result_formats():
    sr = cal.SweepResult("power_W", [0.0, 1e-3, 2e-3], {"p_click0": [1e-4, 0.0, 0.0]}, {"x_label": "P"})
    text = sr.to_csv()
    assert text.splitlines()[0] == "# x_label: P"
    assert text.splitlines()[1] == "power_W,p_click0"
    back = cal.SweepResult.from_csv(text)
    np.testing.assert_array_equal(back.x, sr.x)
    np.testing.assert_array_equal(back.columns["p_click0"], sr.columns["p_click0"])
    assert back.meta == {"x_label": "P"}
    js = cal.SweepResult.from_json(sr.to_json())
    assert js.to_dict() == sr.to_dict()
    with pytest.raises(ValueError):
        cal.SweepResult("x", [1.0, 0.0], {})
    with pytest.raises(ValueError):
        cal.SweepResult("x", [0.0, 1.0], {"y": [1.0]})


def test_cw_context_blind_and_thresholds_ordered():
    ctx = cal.cw_context(RX)
    assert not cal.can_click(ctx, 0) and not cal.can_click(ctx, 1)
    rep = cal.threshold_report(ctx, trials=40)
    assert all(a < b for a, b in zip(rep.p0, rep.p100))
    assert 0.5e-3 < rep.p0[0] < 3e-3


def test_idle_receiver_is_not_blind():
    ctx = cal.cw_context(RX, powers=(0.0, 0.0))
    assert cal.can_click(ctx, 0) and cal.can_click(ctx, 1)
    with pytest.raises(cal.CalibrationError):
        cal.threshold_report(ctx, trials=10)


def test_probe_is_reproducible():
    ctx = cal.sinkhole_context(RX)
    a = cal.threshold_report(ctx, trials=30, seed=4)
    b = cal.threshold_report(ctx, trials=30, seed=4)
    assert a == b


def test_cw_sweep_columns():
    sr = cal.sweep_cw_click_probability([0.0, 5e-3, 25e-3], RX, n_gates=2000, seed=1)
    for k in ("p_click0", "p_click1", "p_raw0", "p_raw1", "p_model0", "p_model1"):
        assert k in sr.columns
    # at zero power every firing is an avalanche, which always crosses threshold
    assert sr.columns["p_model0"][0] == sr.columns["p_raw0"][0]
    assert sr.columns["p_click0"][-1] == 0.0 and sr.columns["p_model1"][-1] == 0.0


def test_heat_sweep_and_settle():
    sr = cal.sweep_heat_vs_plate([0.0, 0.2, 0.4])
    np.testing.assert_allclose(sr.columns["t_plate"][:2], -50.0, atol=0.05)
    assert sr.columns["t_plate"][2] == pytest.approx(-43.0, abs=0.1)
    assert sr.columns["i_tec"][2] == pytest.approx(thermal.ThermalParams().tec_max_current)
    assert np.all(np.diff(sr.columns["i_tec"]) >= 0)


def test_efficiency_curve_small():
    sr = cal.measure_efficiency_curve([-0.5, 1.0, 2.5], RX, n_gates=5000, seed=2)
    est, err, model = (sr.columns[k] for k in ("eta_est", "eta_err", "eta_model"))
    np.testing.assert_allclose(model, [0.0, 0.1, 0.0])
    assert np.all(np.abs(est - model) <= 4 * err + 1e-12)


def test_targets_and_residuals():
    t = cal.CalibrationTargets.default()
    assert len(t.targets) == 20
    assert "sinkhole.p100.det1" in t.names()
    assert len(cal.CalibrationTargets.default(include_onsets=False).targets) == 16
    with pytest.raises(ValueError):
        cal.Target("x", 1.0, 0.0)
    r = cal.residuals({"a": 1.1}, cal.CalibrationTargets((cal.Target("a", 1.0, 0.1),)))
    assert r["a"] == pytest.approx(0.1)


def test_parameter_accessors_round_trip():
    for name in cal.FREE_PARAMETERS + ("exponent.1", "series_resistance.0"):
        v = cal._get(RX, name)
        rx2 = cal._set(RX, name, v * 1.05)
        assert cal._get(rx2, name) == pytest.approx(v * 1.05)
    with pytest.raises(KeyError):
        cal._get(RX, "bogus.0")
    rx2 = cal._set(RX, "noise_sigma.0", 0.004)
    c = rx2.detectors[0].circuit
    assert c.nominal_excess == pytest.approx(
        electro.excess_for_recovery(cal.DARK_RECOVERY[0], c.v_threshold, 0.004, c.avalanche_peak))


def test_fit_moves_towards_target():
    rx = cal._set(RX, "m0.0", cal._get(RX, "m0.0") * 1.3)
    before = cal.cw_onset(rx, 0)
    targets = cal.CalibrationTargets((cal.Target("cw_onset.det0", cal.cw_onset(RX, 0), 0.02),))
    fr = cal.fit_parameters(targets, rx, free=("m0.0",), steps=(0.05, 0.01), max_sweeps=10)
    assert fr.ok, fr.residuals
    assert abs(fr.residuals["cw_onset.det0"]) < abs(before / targets.targets[0].value - 1)
    assert fr.evaluations > 1
