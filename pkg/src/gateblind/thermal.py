"""Two-node thermal model: APD chips on a TEC-cooled cold plate.

Each APD chip is a small heat capacity hanging off the cold plate through
``r_chip_plate``.  The plate collects the heat conducted from both chips
plus the leak from ambient, and the TEC pumps it away.  A PI controller
drives the TEC current to hold the plate at the target temperature.

TEC model: at current ``i`` the pumped heat is

    (i / i_max) * (q_leak(t_target) + tec_max_heat + k_dt * (t_plate - t_target))

so that at full current the TEC removes exactly ``tec_max_heat`` of
detector load when the plate sits at the target, and a little more for
every kelvin the plate is warmer.  Above capacity the plate therefore
rises linearly with the excess load, with slope ``plate_rise_slope``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np


class ThermalError(ValueError):
    pass


@dataclass(frozen=True)
class ThermalParams:
    r_chip_plate: tuple = (194.7, 191.3)     # K/W, per detector
    tau_chip: tuple = (556e-6, 556e-6)        # s, chip node time constant
    c_plate: float = 1.5                      # J/K
    tec_max_heat: float = 0.300               # W of detector load at full current
    tec_max_current: float = 2.37             # A
    r_plate_ambient: float = 210.0            # K/W, parasitic leak into the plate
    plate_rise_slope: float = 70.0            # K/W above capacity
    r_sense: float = 2.5                      # K/W, thermistor pickup of conducted heat
    t_ambient: float = 23.6
    t_target: float = -50.0
    kp: float = 2.0                           # A/K
    ki: float = 0.5                           # A/(K s)

    def __post_init__(self):
        r = np.atleast_1d(self.r_chip_plate)
        if np.any(r < 190.0):
            raise ThermalError("r_chip_plate must be >= 190 K/W")
        if np.any(np.atleast_1d(self.tau_chip) <= 0) or self.c_plate <= 0:
            raise ThermalError("heat capacities must be positive")
        if not self.t_target < self.t_ambient:
            raise ThermalError("target must be below ambient")
        if not 0 < self.plate_rise_slope < self.r_plate_ambient:
            raise ThermalError("plate_rise_slope must lie in (0, r_plate_ambient)")

    @property
    def r_chip(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.r_chip_plate, float), (2,))

    @property
    def c_chip(self) -> np.ndarray:
        """Chip heat capacities in J/K."""
        return np.broadcast_to(np.asarray(self.tau_chip, float), (2,)) / self.r_chip

    @property
    def k_dt(self) -> float:
        return 1.0 / self.plate_rise_slope - 1.0 / self.r_plate_ambient

    @property
    def q_leak_target(self) -> float:
        return (self.t_ambient - self.t_target) / self.r_plate_ambient

    def q_leak(self, t_plate):
        return (self.t_ambient - t_plate) / self.r_plate_ambient

    def tec_pump(self, i_tec, t_plate):
        capacity = self.q_leak_target + self.tec_max_heat + self.k_dt * (t_plate - self.t_target)
        return (i_tec / self.tec_max_current) * capacity

    def holding_current(self, load: float) -> float:
        """TEC current that holds the plate at target under a detector load."""
        return self.tec_max_current * (self.q_leak_target + load) / (self.q_leak_target + self.tec_max_heat)


@dataclass(frozen=True)
class ThermalState:
    t_chip: tuple = (-50.0, -50.0)
    t_plate: float = -50.0
    i_tec: float = 0.0
    integrator: float = 0.0

    def sensor(self, p: ThermalParams) -> float:
        """Thermistor reading: plate plus a pickup of the heat conducted from the chips."""
        conducted = float(np.sum((np.asarray(self.t_chip) - self.t_plate) / p.r_chip))
        return self.t_plate + p.r_sense * conducted


@dataclass(frozen=True)
class BreakdownModel:
    v_br_ref: float
    t_ref: float = -50.0
    dvbr_dt: float = 0.1

    def __post_init__(self):
        if not self.dvbr_dt > 0:
            raise ThermalError("dvbr_dt must be positive")


def breakdown_voltage(m: BreakdownModel, t_chip):
    return m.v_br_ref + m.dvbr_dt * (np.asarray(t_chip, float) - m.t_ref)


def heat_dissipation(v_apd, i_apd, p_optical):
    """Electrical plus absorbed optical power, in watts."""
    return np.abs(np.asarray(v_apd) * np.asarray(i_apd)) + np.asarray(p_optical)


def idle_state(p: ThermalParams) -> ThermalState:
    """Equilibrium with no detector load."""
    i = p.holding_current(0.0)
    return ThermalState((p.t_target, p.t_target), p.t_target, i, i / p.ki)


def _controller(p, err, integ, dt):
    raw = p.kp * err + p.ki * integ
    i = min(max(raw, 0.0), p.tec_max_current)
    # conditional integration: stop winding up against a saturated output
    if (raw >= p.tec_max_current and err > 0) or (raw <= 0.0 and err < 0):
        new_integ = integ
    else:
        new_integ = integ + err * dt
    return i, new_integ


def step(state: ThermalState, p: ThermalParams, chip_heat, dt: float) -> ThermalState:
    """Advance the network by dt seconds under constant per-chip heat (W).

    The stiff chip nodes use the exact exponential update for constant
    heat; the plate uses explicit Euler.
    """
    if not 0 < dt <= 1e-3:
        raise ThermalError(f"dt must be in (0, 1 ms], got {dt}")
    heat = np.broadcast_to(np.asarray(chip_heat, float), (2,))
    tc, tp, integ = _advance(p, np.asarray(state.t_chip, float), state.t_plate,
                             state.integrator, heat, dt)
    i, _ = _controller(p, tp - p.t_target, integ, 0.0)
    return ThermalState((float(tc[0]), float(tc[1])), float(tp), float(i), float(integ))


def _advance(p, tc, tp, integ, heat, dt):
    r = p.r_chip
    decay = np.exp(-dt / np.asarray(p.tau_chip, float))
    conducted = (tc - tp) / r
    i, integ = _controller(p, tp - p.t_target, integ, dt)
    dtp = (conducted.sum() + p.q_leak(tp) - p.tec_pump(i, tp)) / p.c_plate
    tc = tp + (tc - tp) * decay + heat * r * (1 - decay)
    tp = tp + dt * dtp
    return tc, tp, integ


def integrate(state: ThermalState, p: ThermalParams, heats, dt: float):
    """Run many steps; ``heats`` has shape (n, 2).

    Returns (final_state, trace) where trace is an (n, 5) array of
    (t_chip0, t_chip1, t_plate, i_tec, sensor) sampled at the *start* of
    each step, i.e. the temperature the detectors see during that step.
    """
    if not 0 < dt <= 1e-3:
        raise ThermalError(f"dt must be in (0, 1 ms], got {dt}")
    heats = np.asarray(heats, float).reshape(-1, 2)
    n = heats.shape[0]
    out = np.empty((n, 5))
    tc = np.asarray(state.t_chip, float).copy()
    tp = state.t_plate
    integ = state.integrator
    r = p.r_chip
    decay = np.exp(-dt / np.broadcast_to(np.asarray(p.tau_chip, float), (2,)))
    gain = r * (1 - decay)
    for k in range(n):
        err = tp - p.t_target
        i, integ_next = _controller(p, err, integ, dt)
        conducted = (tc[0] - tp) / r[0] + (tc[1] - tp) / r[1]
        out[k, 0] = tc[0]
        out[k, 1] = tc[1]
        out[k, 2] = tp
        out[k, 3] = i
        out[k, 4] = tp + p.r_sense * conducted
        dtp = (conducted + p.q_leak(tp) - p.tec_pump(i, tp)) / p.c_plate
        tc = tp + (tc - tp) * decay + heats[k] * gain
        tp = tp + dt * dtp
        integ = integ_next
    i, _ = _controller(p, tp - p.t_target, integ, 0.0)
    final = ThermalState((float(tc[0]), float(tc[1])), float(tp), float(i), float(integ))
    return final, out


def steady_state(p: ThermalParams, chip_heats):
    """Closed-form fixed point of :func:`step` for constant chip heats.

    Returns (t_chip0, t_chip1, t_plate).
    """
    h = np.broadcast_to(np.asarray(chip_heats, float), (2,))
    load = float(h.sum())
    if load <= p.tec_max_heat:
        tp = p.t_target
    else:
        tp = p.t_target + p.plate_rise_slope * (load - p.tec_max_heat)
    tc = tp + h * p.r_chip
    return float(tc[0]), float(tc[1]), float(tp)


def steady_thermal_state(p: ThermalParams, chip_heats) -> ThermalState:
    """Full equilibrium state (including controller) for constant heats."""
    h = np.broadcast_to(np.asarray(chip_heats, float), (2,))
    t0, t1, tp = steady_state(p, h)
    load = float(h.sum())
    i = min(p.holding_current(load), p.tec_max_current)
    integ = (i - p.kp * (tp - p.t_target)) / p.ki
    return ThermalState((t0, t1), tp, i, integ)


def trace_to_csv(times_s, trace, path=None) -> str:
    """CSV with columns time_s, t_chip0, t_chip1, t_plate, i_tec."""
    buf = io.StringIO()
    buf.write("time_s,t_chip0,t_chip1,t_plate,i_tec\n")
    for t, row in zip(np.asarray(times_s), np.asarray(trace)):
        buf.write(",".join(repr(float(v)) for v in (t, row[0], row[1], row[2], row[3])) + "\n")
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
