"""Electrical front-end of one gated detector.

Signals are anode voltages before the AC coupling (the comparator sees
their high-pass image).  Voltages are magnitudes: the bias supply is
written as a positive number even though the APD sits at a negative
potential.

Two evaluation paths exist and are cross-checked in the tests:

* a sampled path (``comparator_input``), a discretised single-pole
  high-pass filter over a 50 ps grid, used for trace dumps;
* an exact path (``PwlHighPass``) for piecewise-linear inputs, used by
  the detector for long timelines.  The output of a single-pole
  high-pass driven by a piecewise-linear input is monotone between
  breakpoints, so peaks can be found by evaluating breakpoints only.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import lfilter


@dataclass(frozen=True)
class CircuitParams:
    v_hv: float = 42.89               # V, bias supply magnitude
    gate_amplitude: float = 3.0       # V
    gate_width: float = 2.8           # ns, full width at half maximum
    gate_period: float = 200.0        # ns
    gate_edge: float = 0.3            # ns, 10-90 style linear edge
    r_bias: float = 0.0               # ohm, optional bias-drop resistor
    ac_time_constant: float = 165.0   # ns
    v_threshold: float = 0.078        # V
    avalanche_peak: float = 0.200     # V at the comparator
    capacitive_peak: float = 0.035    # V at the comparator
    noise_sigma: float = 0.00488      # V, comparator input noise (normal, truncated at 3 sigma)
    sample_step: float = 0.05         # ns
    avalanche_rise: float = 0.3       # ns
    avalanche_fall: float = 1.2       # ns
    nominal_excess: float = 1.493     # V above breakdown at the cold operating point

    def __post_init__(self):
        if not self.v_threshold > self.capacitive_peak:
            raise ValueError("threshold must exceed the capacitive peak")
        if not self.gate_width < self.gate_period:
            raise ValueError("gate must be shorter than its period")
        if self.gate_edge <= 0 or self.gate_edge >= self.gate_width:
            raise ValueError("gate edge must lie in (0, gate_width)")


@dataclass(frozen=True)
class LinearModeModel:
    """Gain M(V) = m0 / max(1 - V/V_br, floor)**exponent in A/W.

    ``r_load`` converts APD current to anode voltage, ``series_resistance``
    makes the DC photocurrent pull the bias down (self-limiting) and
    ``gate_coupling`` is the fraction of the gate swing that reaches the
    junction for light arriving inside the gate.
    """

    m0: float = 0.0876
    exponent: float = 1.265
    floor: float = 0.01
    series_resistance: float = 285.0
    r_load: float = 81.0
    gate_coupling: float = 1.0

    def gain(self, v, v_br):
        x = 1.0 - np.asarray(v, float) / np.asarray(v_br, float)
        return self.m0 * np.maximum(x, self.floor) ** (-self.exponent)


def excess_for_recovery(t_recover, threshold, noise_sigma, avalanche_peak, dvbr_dt=0.1,
                        t_cold=-50.0, noise_bound=3.0):
    """Nominal excess bias at t_cold that makes single-photon sensitivity
    return exactly when the chip cools below ``t_recover``.

    The avalanche scales with excess bias, so sensitivity needs
    avalanche_peak * ex / e0 + noise_bound * sigma >= threshold.
    """
    return dvbr_dt * (t_recover - t_cold) / (1.0 - (threshold - noise_bound * noise_sigma) / avalanche_peak)


DETECTOR_CIRCUITS = (
    CircuitParams(v_hv=42.89, v_threshold=0.078, avalanche_peak=0.200, nominal_excess=1.493),
    CircuitParams(v_hv=43.08, v_threshold=0.082, avalanche_peak=0.300, nominal_excess=1.277),
)

DETECTOR_LINEAR = (
    LinearModeModel(m0=0.0876, gate_coupling=0.21078),
    LinearModeModel(m0=0.0692, gate_coupling=0.24833),
)


def gate_voltage(p: CircuitParams, t):
    """Trapezoidal gate train; gate k has its rising half-maximum at k*period."""
    t = np.asarray(t, float)
    ph = np.mod(t + 0.5 * p.gate_edge, p.gate_period)   # foot of the rising edge at 0
    e, w = p.gate_edge, p.gate_width
    up = np.clip(ph / e, 0.0, 1.0)
    down = np.clip((w + e - ph) / e, 0.0, 1.0)
    v = p.gate_amplitude * np.minimum(up, down)
    return float(v) if v.ndim == 0 else v


def gate_shape(p: CircuitParams):
    """Breakpoints (offset ns, V) of one gate relative to its rising half-maximum."""
    e, w, a = p.gate_edge, p.gate_width, p.gate_amplitude
    t = np.array([-e / 2, e / 2, w - e / 2, w + e / 2])
    return t, np.array([0.0, a, a, 0.0])


def operating_point(lm: LinearModeModel, p: CircuitParams, p_mean, v_br):
    """DC current and APD bias for a mean optical power (vectorised).

    Solves I = P * M(V_hv - I*R) by bisection; the solution is unique
    because the right side falls as I grows.
    """
    P = np.asarray(p_mean, float)
    vb = np.asarray(v_br, float)
    r = lm.series_resistance + p.r_bias
    shape = np.broadcast(P, vb).shape
    lo = np.zeros(shape)
    hi = P * lm.gain(p.v_hv, vb) + lo
    if r == 0:
        return hi, np.full(shape, p.v_hv)
    for _ in range(48):
        mid = 0.5 * (lo + hi)
        pos = mid > P * lm.gain(p.v_hv - mid * r, vb)
        hi = np.where(pos, mid, hi)
        lo = np.where(pos, lo, mid)
    i = 0.5 * (lo + hi)
    return i, p.v_hv - i * r


# ---------------------------------------------------------------------------
# exact high-pass filtering of piecewise-linear signals

class PwlHighPass:
    """High-pass image y = x - I of a piecewise-linear x, where I is the
    first-order low-pass state (time constant tau).

    Breakpoint times may repeat to express jumps.  Before the first
    breakpoint the input is taken as constant at ``x[0]`` with the
    filter settled, unless ``i0`` gives the low-pass state there.
    """

    def __init__(self, t, x, tau, i0=None):
        self.t = np.asarray(t, float)
        self.x = np.asarray(x, float)
        self.tau = float(tau)
        self.i = self._states(self.x[0] if i0 is None else float(i0))

    def _states(self, i0):
        t, x, tau = self.t, self.x, self.tau
        n = t.size
        out = np.empty(n)
        if n == 0:
            return out
        s = np.diff(t)
        e = np.exp(-s / tau)
        with np.errstate(invalid="ignore", divide="ignore"):
            m = np.where(s > 0, np.diff(x) / np.where(s > 0, s, 1.0), 0.0)
        a = e
        b = x[:-1] * (1 - e) + m * (s - tau * (1 - e))
        out[0] = i0
        cur = i0
        al = a.tolist()
        bl = b.tolist()
        for k in range(n - 1):
            cur = al[k] * cur + bl[k]
            out[k + 1] = cur
        return out

    def __call__(self, tq):
        """Filter output at query times (right-continuous at jumps)."""
        tq = np.asarray(tq, float)
        t, x, tau = self.t, self.x, self.tau
        k = np.searchsorted(t, tq, side="right") - 1
        before = k < 0
        k = np.clip(k, 0, t.size - 1)
        nxt = np.minimum(k + 1, t.size - 1)
        span = t[nxt] - t[k]
        s = tq - t[k]
        with np.errstate(invalid="ignore", divide="ignore"):
            m = np.where((span > 0) & (nxt > k), (x[nxt] - x[k]) / np.where(span > 0, span, 1.0), 0.0)
        e = np.exp(-s / tau)
        state = self.i[k] * e + x[k] * (1 - e) + m * (s - tau * (1 - e))
        xv = x[k] + m * s
        y = xv - state
        y0 = x[0] - self.i[0]
        return np.where(before, y0, y)

    def at_breakpoints(self):
        """Output at every stored breakpoint; for repeated times this gives
        both the left and right limits of a jump."""
        return self.x - self.i


def hpf_peak_scale(t, x, tau):
    """Factor that makes the high-pass image of a pulse peak at 1."""
    f = PwlHighPass(np.concatenate([[t[0] - 1.0], t]), np.concatenate([[0.0], x]), tau)
    return 1.0 / float(np.max(f.at_breakpoints()))


def capacitive_shape(p: CircuitParams):
    """Displacement-current image of one gate: a positive plateau during the
    rising edge and a negative one during the falling edge (jumps expressed
    by repeated times), scaled so the comparator sees ``capacitive_peak``."""
    gt, _ = gate_shape(p)
    r0, r1, f0, f1 = gt
    t = np.array([r0, r0, r1, r1, f0, f0, f1, f1])
    u = np.array([0, 1, 1, 0, 0, -1, -1, 0], float)
    k = hpf_peak_scale(t, u, p.ac_time_constant)
    return t, u * k * p.capacitive_peak


def avalanche_shape(p: CircuitParams):
    """Unit-amplitude avalanche pulse starting at offset 0."""
    t = np.array([0.0, p.avalanche_rise, p.avalanche_rise + p.avalanche_fall])
    u = np.array([0.0, 1.0, 0.0])
    return t, u * hpf_peak_scale(t, u, p.ac_time_constant)


# ---------------------------------------------------------------------------
# sampled signals (trace path)

@dataclass(frozen=True)
class ElectricalTrace:
    t: np.ndarray          # ns
    v_gate: np.ndarray     # V
    i_apd: np.ndarray      # A
    v_comp: np.ndarray     # V (anode voltage before filtering for raw traces)

    def __post_init__(self):
        n = self.t.size
        for name in ("v_gate", "i_apd", "v_comp"):
            a = getattr(self, name)
            if a.shape != (n,) or not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be finite with {n} samples")

    def to_csv(self, threshold=None, path=None) -> str:
        """Columns time_ns, v_gate, i_apd_mA, v_comp_mV, click_flag."""
        flag = np.zeros(self.t.size, dtype=int)
        if threshold is not None:
            flag = (self.v_comp >= threshold).astype(int)
        buf = io.StringIO()
        buf.write("time_ns,v_gate,i_apd_mA,v_comp_mV,click_flag\n")
        for row in zip(self.t.tolist(), self.v_gate.tolist(), (self.i_apd * 1e3).tolist(),
                       (self.v_comp * 1e3).tolist(), flag.tolist()):
            buf.write(f"{row[0]!r},{row[1]!r},{row[2]!r},{row[3]!r},{row[4]}\n")
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _pwl_sample(t_bp, x_bp, t):
    """Sample a PWL signal with possible repeated times (right-continuous)."""
    t_bp = np.asarray(t_bp, float)
    x_bp = np.asarray(x_bp, float)
    k = np.searchsorted(t_bp, t, side="right") - 1
    out = np.zeros_like(t, dtype=float)
    ok = (k >= 0) & (k < t_bp.size - 1)
    kk = np.clip(k, 0, t_bp.size - 2)
    span = t_bp[kk + 1] - t_bp[kk]
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(span > 0, (t - t_bp[kk]) / np.where(span > 0, span, 1.0), 0.0)
    val = x_bp[kk] + frac * (x_bp[kk + 1] - x_bp[kk])
    out[ok] = val[ok]
    out[k >= t_bp.size - 1] = x_bp[-1]
    return out


def apd_terminal_current(p: CircuitParams, lm: LinearModeModel, excess_bias: float,
                         optical_power, avalanche: bool, t, avalanche_time: float = 0.5,
                         gate_start: float = 0.0):
    """APD current (A) sampled at times t (ns) for one gate.

    ``optical_power`` is a scalar or an array sampled at t.  The linear
    photocurrent uses the DC operating point of the mean power and the
    gate-raised bias inside the gate; when excess_bias > 0 and an
    avalanche is flagged, a Geiger pulse scaled by excess bias is added.
    The displacement current through the junction capacitance is always
    present.
    """
    t = np.asarray(t, float)
    P = np.broadcast_to(np.asarray(optical_power, float), t.shape)
    e0 = p.nominal_excess
    p_mean = float(np.mean(P)) if P.size else 0.0
    # the breakdown voltage consistent with the requested excess bias at
    # the DC operating point of the mean power
    v_br = p.v_hv + p.gate_amplitude - excess_bias
    for _ in range(30):
        _, v_op = operating_point(lm, p, p_mean, v_br)
        v_br = float(v_op) + p.gate_amplitude - excess_bias
    _, v_op = operating_point(lm, p, p_mean, v_br)
    g = gate_voltage(p, t - gate_start)
    i_lin = P * lm.gain(v_op + lm.gate_coupling * g, v_br)
    ct, cx = capacitive_shape(p)
    i_cap = _pwl_sample(ct + gate_start, cx, t) / lm.r_load
    i = i_lin + i_cap
    if avalanche and excess_bias > 0:
        at, ax = avalanche_shape(p)
        amp = p.avalanche_peak * min(excess_bias / e0, 1.0)
        i = i + _pwl_sample(at + gate_start + avalanche_time, ax * amp, t) / lm.r_load
    return i


def comparator_input(raw: ElectricalTrace, p: CircuitParams) -> ElectricalTrace:
    """High-pass the anode voltage (raw.v_comp) onto the comparator input.

    Discretisation: y[n] = a*(y[n-1] + x[n] - x[n-1]), a = tau/(tau+dt),
    with the filter settled on the first sample.
    """
    x = raw.v_comp
    dt = float(raw.t[1] - raw.t[0]) if raw.t.size > 1 else p.sample_step
    a = p.ac_time_constant / (p.ac_time_constant + dt)
    y, _ = lfilter([a, -a], [1.0, -a], x - x[0], zi=[0.0])
    return replace(raw, v_comp=y)


def raw_trace(p: CircuitParams, lm: LinearModeModel, excess_bias, optical_power, t,
              avalanche=False, avalanche_time=0.5, gate_start=0.0) -> ElectricalTrace:
    """Sampled taps for one gate; v_comp holds the unfiltered anode voltage."""
    i = apd_terminal_current(p, lm, excess_bias, optical_power, avalanche, t,
                             avalanche_time=avalanche_time, gate_start=gate_start)
    return ElectricalTrace(np.asarray(t, float), np.asarray(gate_voltage(p, np.asarray(t) - gate_start), float),
                           i, i * lm.r_load)


@dataclass(frozen=True)
class ClickFragment:
    click: bool
    crossing_time: float | None
    peak: float


def detect_click(v_comp: ElectricalTrace, p: CircuitParams, window, offset: float = 0.0) -> ClickFragment:
    """Comparator decision over a time window.  ``offset`` is the noise
    sample added to the input for this decision."""
    t0, t1 = window
    sel = (v_comp.t >= t0) & (v_comp.t <= t1)
    if not np.any(sel):
        raise ValueError("window does not overlap the trace")
    v = v_comp.v_comp[sel] + offset
    tt = v_comp.t[sel]
    peak = float(np.max(v))
    if peak < p.v_threshold:
        return ClickFragment(False, None, peak)
    k = int(np.argmax(v >= p.v_threshold))
    if k == 0:
        tc = float(tt[0])
    else:
        f = (p.v_threshold - v[k - 1]) / (v[k] - v[k - 1])
        tc = float(tt[k - 1] + f * (tt[k] - tt[k - 1]))
    return ClickFragment(True, tc, peak)


def sinkhole_depth(v_plateau: float, pulse_width: float, period: float, delay: float, tau: float) -> float:
    """Comparator offset (V, negative) ``delay`` ns after the falling edge of a
    periodic rectangular anode pulse train of height ``v_plateau`` in its
    periodic steady state."""
    al = np.exp(-pulse_width / tau)
    be = np.exp(-(period - pulse_width) / tau)
    y_end = -v_plateau * (1 - al) / (1 - al * be)
    return float(y_end * np.exp(-delay / tau))
