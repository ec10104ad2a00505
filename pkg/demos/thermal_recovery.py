"""How the cold plate copes with heat, and how long recovery takes."""
from gateblind import calibrate as cal

sweep = cal.sweep_heat_vs_plate([0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
for load, tp, i in zip(sweep.x, sweep.columns["t_plate"], sweep.columns["i_tec"]):
    print(f"load {load * 1e3:5.0f} mW -> plate {tp:7.2f} C, TEC {i:.3f} A")

cd = cal.cooldown()
print(f"after CW blinding the plate starts at {cd['start_plate']:.2f} C")
for d in (0, 1):
    print(f"detector {d} sees dark counts again after {cd['regain_s'][d]:.1f} s (plate {cd['regain_plate'][d]:.2f} C)")
print(f"plate back at target after about {cd['settle_s']:.0f} s")
