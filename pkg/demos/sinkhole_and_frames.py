"""Two subtler ways to blind the same receiver.

Sinkhole: short pulses right after each gate drag the AC-coupled
comparator input down, so avalanches no longer reach threshold.
Frames: strong pulses only during the breaks between frames warm the
chips enough that every slot of a frame stays blind.
"""
import numpy as np

from gateblind import calibrate as cal
from gateblind import detector as det
from gateblind import protocol as proto

rx = det.Receiver()

for p in (100e-6, 200e-6, 300e-6, 500e-6):
    ctx = cal.sinkhole_context(rx, p)
    blind = [not cal.can_click(ctx, d) for d in (0, 1)]
    print(f"sinkhole {p * 1e6:5.0f} uW per detector: blind = {blind}")
print("sinkhole onsets (uW):", [round(cal.sinkhole_onset(rx, d) * 1e6) for d in (0, 1)])

cfg = proto.FrameConfig()
bits = np.arange(cfg.bits_per_frame)
ctx = cal.frame_context(rx, (3.5e-3, 4.0e-3), cfg, bits=bits)
k = ctx.run.step_of(bits * rx.period)
print("frame blinding: chip temperature over the frame (C)")
for j in (0, 1, 500, 1071):
    print(f"  bit {j:4d}: det0 {ctx.run.t_chip[k[j], 0]:7.2f}   det1 {ctx.run.t_chip[k[j], 1]:7.2f}")
print("any slot able to click:", [cal.can_click(ctx, d, bits) for d in (0, 1)])
second, last = cal.threshold_report(ctx, 1), cal.threshold_report(ctx, cfg.bits_per_frame - 1)
print("bit 1 thresholds (uW):", [round(v * 1e6) for v in second.p0 + second.p100])
print("last bit thresholds (uW):", [round(v * 1e6) for v in last.p0 + last.p100])
