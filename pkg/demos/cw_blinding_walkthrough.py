"""Walk through CW thermal blinding on the default receiver.

Run with ``python demos/cw_blinding_walkthrough.py``.  Prints the click
probability per gate as the CW power rises, the blinding onset of each
detector, and what an eavesdropper gains once both detectors are blind.
"""
import numpy as np

from gateblind import calibrate as cal
from gateblind import detector as det
from gateblind import eve
from gateblind import protocol as proto

rx = det.Receiver()

# 1. Click probability versus total CW power.  Dark counts (1e-4 per gate)
#    survive until the chips are so warm that the excess bias vanishes.
powers = np.array([0.0, 5e-3, 10e-3, 15e-3, 18e-3, 18.5e-3, 19e-3, 22e-3])
sweep = cal.sweep_cw_click_probability(powers, rx, n_gates=20_000, seed=1)
print("total CW (mW)  p_model det0   p_model det1")
for P, a, b in zip(powers, sweep.columns["p_model0"], sweep.columns["p_model1"]):
    print(f"{P * 1e3:12.1f}  {a:12.3g}  {b:12.3g}")

# 2. Where does each detector go blind?  (power at the detector itself)
for d in (0, 1):
    print(f"detector {d} blind above {cal.cw_onset(rx, d) * 1e3:.2f} mW")

# 3. Eve measures the trigger thresholds of the blinded detectors ...
ctx = cal.cw_context(rx)
report = cal.threshold_report(ctx)
print("never-click (uW):", [round(p * 1e6) for p in report.p0])
print("always-click (uW):", [round(p * 1e6) for p in report.p100])
print("control condition holds:", report.condition_ok)

# 4. ... and runs the faked-state attack over a short session.
setup = eve.AttackSetup(eve.BlindingStrategy(eve.CW), thresholds=report)
rep, d = eve.run_attack(rx, proto.FrameConfig(), 20_000, setup, seed=3)
eve_bits = d["eve_bit"][d["bob_key"].indices]
print(f"sifted {rep.sifted_length} bits, QBER {rep.qber:.4f}, Eve captured {rep.eve_capture_fraction:.0%},"
      f" Eve's copy identical: {np.array_equal(eve_bits, d['bob_key'].bits)}")
