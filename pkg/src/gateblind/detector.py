"""Gated detector: per-gate outcomes over multi-rate timelines.

A timeline run has three passes:

1. thermal -- the chip/plate network is advanced on a coarse grid
   (default 5 us) using the mean optical power of each step; the DC
   operating point of the bias network is taken from the same mean;
2. gates -- every gate is evaluated in a short window around it using the
   exact high-pass image of the piecewise-linear anode signal, the
   gate-local capacitive and avalanche pulses and a clipped-Gaussian
   comparator noise sample;
3. dead time -- clicks are latched in gate order and the receiver
   suppresses the following ``dead_gates`` gates.

Clicks do not feed back into the heat balance (an avalanche deposits
picojoules), which is what allows the passes to be separated.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr, ndtri

from . import electro, thermal
from .electro import CircuitParams, LinearModeModel, PwlHighPass
from .thermal import BreakdownModel, ThermalParams, ThermalState
from .waveform import OpticalWaveform, SplitRatio, mean_power, power_at

PHOTON_ENERGY = 6.62607015e-34 * 299792458.0 / 1550e-9   # J at 1550 nm
NOISE_CLIP = 3.0                      # comparator noise is a normal truncated at +-3 sigma
_TAIL = float(ndtr(-NOISE_CLIP))


def truncated_noise(u):
    """Map uniforms onto a standard normal truncated at +-NOISE_CLIP."""
    return ndtri(_TAIL + np.asarray(u) * (1.0 - 2.0 * _TAIL))


def noise_exceed_prob(z):
    """P(noise >= z sigma) for the truncated comparator noise."""
    z = np.clip(np.asarray(z, float), -NOISE_CLIP, NOISE_CLIP)
    return (ndtr(NOISE_CLIP) - ndtr(z)) / (1.0 - 2.0 * _TAIL)

MODES = ("geiger", "linear", "blind-thermal", "dead")
GEIGER, LINEAR, BLIND, DEAD = range(4)


@dataclass(frozen=True)
class EfficiencyCurve:
    """In-gate quantum efficiency profile (offsets from the gate's rising
    half-maximum).  It ramps up over ``rise``, holds ``plateau`` and falls
    linearly over ``fall`` centred ``cutoff_offset`` before the falling
    half-maximum of the gate."""

    plateau: float = 0.10
    rise: float = 0.3
    cutoff_offset: float = 1.0
    fall: float = 0.4
    gate_width: float = 2.8

    def __post_init__(self):
        if not 0 <= self.plateau <= 1:
            raise ValueError("plateau efficiency must be a probability")

    @property
    def fall_start(self) -> float:
        return self.gate_width - self.cutoff_offset - self.fall / 2

    @property
    def fall_end(self) -> float:
        return self.gate_width - self.cutoff_offset + self.fall / 2

    def profile(self, t):
        t = np.asarray(t, float)
        up = np.clip(t / self.rise, 0.0, 1.0)
        down = np.clip((self.fall_end - t) / self.fall, 0.0, 1.0)
        v = self.plateau * np.minimum(up, down)
        v = np.where((t < 0) | (t > self.gate_width), 0.0, v)
        return float(v) if v.ndim == 0 else v


def quantum_efficiency(curve: EfficiencyCurve, t, excess_bias, nominal_excess=1.0):
    """Detection probability of one photon at in-gate offset t (ns)."""
    scale = np.clip(np.asarray(excess_bias, float) / nominal_excess, 0.0, 1.0)
    return curve.profile(t) * scale


@dataclass(frozen=True)
class DetectorConfig:
    circuit: CircuitParams = field(default_factory=CircuitParams)
    linear: LinearModeModel = field(default_factory=LinearModeModel)
    efficiency: EfficiencyCurve = field(default_factory=EfficiencyCurve)
    dark_count_prob: float = 1e-4
    dead_gates: int = 50
    trap_energy: float = 10e-12        # J of inter-gate light that guarantees a trapped-carrier avalanche
    window: tuple = (-0.5, 10.0)       # ns around the gate in which the comparator is latched
    photon_offset: float = 1.0         # ns, arrival of qubit pulses inside the gate

    def __post_init__(self):
        if not 0 <= self.dark_count_prob <= 1:
            raise ValueError("dark_count_prob must be a probability")
        if not 0 <= self.dead_gates <= 50:
            raise ValueError("dead_gates must be in [0, 50]")

    @property
    def breakdown(self) -> BreakdownModel:
        c = self.circuit
        return BreakdownModel(c.v_hv + c.gate_amplitude - c.nominal_excess, -50.0)

    def v_br(self, t_chip):
        return thermal.breakdown_voltage(self.breakdown, t_chip)

    def excess(self, v_op, t_chip):
        return np.asarray(v_op) + self.circuit.gate_amplitude - self.v_br(t_chip)

    def avalanche_amplitude(self, excess):
        c = self.circuit
        return c.avalanche_peak * np.clip(np.asarray(excess, float) / c.nominal_excess, 0.0, 1.0)

    def anode_gain(self, v_op, t_chip):
        """V of anode signal per W of light outside the gate."""
        return self.linear.r_load * self.linear.gain(v_op, self.v_br(t_chip))

    def heat(self, p_mean, t_chip):
        i, v = electro.operating_point(self.linear, self.circuit, p_mean, self.v_br(t_chip))
        return thermal.heat_dissipation(v, i, p_mean)


def default_detectors():
    return tuple(DetectorConfig(circuit=c, linear=l) for c, l in
                 zip(electro.DETECTOR_CIRCUITS, electro.DETECTOR_LINEAR))


@dataclass(frozen=True)
class Receiver:
    detectors: tuple = field(default_factory=default_detectors)
    thermal: ThermalParams = field(default_factory=ThermalParams)
    split: SplitRatio = field(default_factory=lambda: SplitRatio(0.4675))
    shared_dead_time: bool = True

    @property
    def period(self) -> float:
        return self.detectors[0].circuit.gate_period


@dataclass(frozen=True)
class GateOutcome:
    gate_index: int
    click: bool
    click_time_in_gate: float | None
    mode: str
    comparator_peak: float
    excess_bias: float

    def __post_init__(self):
        if self.click and self.mode == "dead":
            raise ValueError("a dead gate cannot click")
        if self.mode == "blind-thermal" and self.excess_bias > 0:
            raise ValueError("thermal blindness needs non-positive excess bias")


@dataclass
class DetectorState:
    """One detector with its link to the shared thermal state."""
    config: DetectorConfig
    thermal_state: ThermalState
    index: int = 0
    dead_gates_remaining: int = 0
    rng_stream: int = 0

    @property
    def dark_count_prob(self):
        return self.config.dark_count_prob

    def __post_init__(self):
        if not 0 <= self.dead_gates_remaining <= 50:
            raise ValueError("dead_gates_remaining must be in [0, 50]")


# ---------------------------------------------------------------------------
# thermal pass

def _op_scalar(lm: LinearModeModel, c: CircuitParams, p, vb):
    if p <= 0.0:
        return 0.0, c.v_hv
    r = lm.series_resistance + c.r_bias
    m0, n, fl = lm.m0, lm.exponent, lm.floor

    def g(v):
        x = 1.0 - v / vb
        return m0 * (x if x > fl else fl) ** (-n)

    hi = p * g(c.v_hv)
    if r == 0:
        return hi, c.v_hv
    lo = 0.0
    for _ in range(44):
        mid = 0.5 * (lo + hi)
        if mid > p * g(c.v_hv - mid * r):
            hi = mid
        else:
            lo = mid
    i = 0.5 * (lo + hi)
    return i, c.v_hv - i * r


@dataclass
class ThermalRun:
    edges: np.ndarray        # ns, step boundaries (n+1)
    p_mean: np.ndarray       # (n, 2) W
    t_chip: np.ndarray       # (n, 2) at step start
    v_op: np.ndarray         # (n, 2)
    i_dc: np.ndarray         # (n, 2)
    t_plate: np.ndarray
    i_tec: np.ndarray
    sensor: np.ndarray
    final: ThermalState

    def step_of(self, t):
        n = self.t_chip.shape[0]
        return np.clip(np.searchsorted(self.edges, t, side="right") - 1, 0, n - 1)

    def csv(self, path=None):
        times_s = self.edges[:-1] * 1e-9
        trace = np.column_stack([self.t_chip, self.t_plate, self.i_tec])
        return thermal.trace_to_csv(times_s, trace, path)


def thermal_pass(rx: Receiver, waves, t0: float, t1: float, state: ThermalState,
                 dt_ns: float = 5000.0, coupled: bool = True) -> ThermalRun:
    """Advance the thermal network over [t0, t1) ns under two waveforms."""
    p = rx.thermal
    n = max(1, int(math.ceil((t1 - t0) / dt_ns - 1e-9)))
    edges = t0 + dt_ns * np.arange(n + 1)
    pm = np.column_stack([mean_power(w, edges[:-1], edges[1:]) for w in waves])
    tc_out = np.empty((n, 2))
    v_out = np.empty((n, 2))
    i_out = np.empty((n, 2))
    tp_out = np.empty(n)
    itec_out = np.empty(n)
    sens_out = np.empty(n)
    dets = rx.detectors
    bd = [d.breakdown for d in dets]
    if not coupled:
        tc = np.asarray(state.t_chip, float)
        for k in (0, 1):
            vb = bd[k].v_br_ref + bd[k].dvbr_dt * (tc[k] - bd[k].t_ref)
            i_dc, v = electro.operating_point(dets[k].linear, dets[k].circuit, pm[:, k], vb)
            v_out[:, k] = v
            i_out[:, k] = i_dc
            tc_out[:, k] = tc[k]
        tp_out[:] = state.t_plate
        itec_out[:] = state.i_tec
        sens_out[:] = state.sensor(p)
        return ThermalRun(edges, pm, tc_out, v_out, i_out, tp_out, itec_out, sens_out, state)

    dt = dt_ns * 1e-9
    if not 0 < dt <= 1e-3:
        raise thermal.ThermalError("thermal step must be in (0, 1 ms]")
    r = p.r_chip
    tau = np.broadcast_to(np.asarray(p.tau_chip, float), (2,))
    decay = np.exp(-dt / tau)
    gain = (r * (1 - decay)).tolist()
    decay = decay.tolist()
    r0, r1 = float(r[0]), float(r[1])
    tc0, tc1 = state.t_chip
    tp = state.t_plate
    integ = state.integrator
    pml = pm.tolist()
    lin = [d.linear for d in dets]
    cir = [d.circuit for d in dets]
    for k in range(n):
        err = tp - p.t_target
        i_tec, integ_next = thermal._controller(p, err, integ, dt)
        pw0, pw1 = pml[k]
        vb0 = bd[0].v_br_ref + bd[0].dvbr_dt * (tc0 - bd[0].t_ref)
        vb1 = bd[1].v_br_ref + bd[1].dvbr_dt * (tc1 - bd[1].t_ref)
        ia, va = _op_scalar(lin[0], cir[0], pw0, vb0)
        ib, vb_ = _op_scalar(lin[1], cir[1], pw1, vb1)
        h0 = va * ia + pw0
        h1 = vb_ * ib + pw1
        conducted = (tc0 - tp) / r0 + (tc1 - tp) / r1
        tc_out[k, 0] = tc0
        tc_out[k, 1] = tc1
        v_out[k, 0] = va
        v_out[k, 1] = vb_
        i_out[k, 0] = ia
        i_out[k, 1] = ib
        tp_out[k] = tp
        itec_out[k] = i_tec
        sens_out[k] = tp + p.r_sense * conducted
        dtp = (conducted + p.q_leak(tp) - p.tec_pump(i_tec, tp)) / p.c_plate
        tc0 = tp + (tc0 - tp) * decay[0] + h0 * gain[0]
        tc1 = tp + (tc1 - tp) * decay[1] + h1 * gain[1]
        tp = tp + dt * dtp
        integ = integ_next
    i_fin, _ = thermal._controller(p, tp - p.t_target, integ, 0.0)
    final = ThermalState((float(tc0), float(tc1)), float(tp), float(i_fin), float(integ))
    return ThermalRun(edges, pm, tc_out, v_out, i_out, tp_out, itec_out, sens_out, final)


# ---------------------------------------------------------------------------
# gate pass

@dataclass
class GateBatch:
    """Everything needed to decide a batch of gates of one detector."""
    offsets: np.ndarray     # (n, K) candidate times relative to gate, sorted
    base: np.ndarray        # (n, K) comparator voltage from light, gate and capacitance
    aval: np.ndarray        # (n, K) avalanche contribution
    noise: np.ndarray       # (n,)
    excess: np.ndarray
    sensitive: np.ndarray   # bool (n,)
    avalanche: np.ndarray   # bool (n,)
    threshold: float

    def decide(self, extra=None):
        tot = self.base + self.aval
        if extra is not None:
            tot = tot + extra
        tot = tot + self.noise[:, None]
        peak = tot.max(axis=1)
        click = peak >= self.threshold
        above = tot >= self.threshold
        k = np.argmax(above, axis=1)
        rows = np.arange(tot.shape[0])
        kp = np.maximum(k - 1, 0)
        y0, y1 = tot[rows, kp], tot[rows, k]
        t0, t1 = self.offsets[rows, kp], self.offsets[rows, k]
        with np.errstate(invalid="ignore", divide="ignore"):
            f = np.where((k > 0) & (y1 > y0), (self.threshold - y0) / (y1 - y0), 0.0)
        tcross = np.where(click, t0 + f * (t1 - t0), np.nan)
        return click, peak - self.noise, tcross


_SHAPES = {}


def _local_shapes(c: CircuitParams):
    key = (c.gate_edge, c.gate_width, c.ac_time_constant, c.capacitive_peak,
           c.avalanche_rise, c.avalanche_fall)
    if key not in _SHAPES:
        ct, cx = electro.capacitive_shape(c)
        cap = PwlHighPass(np.concatenate([[ct[0] - 1.0], ct]), np.concatenate([[0.0], cx]), c.ac_time_constant)
        at, ax = electro.avalanche_shape(c)
        av = PwlHighPass(np.concatenate([[at[0] - 1.0], at]), np.concatenate([[0.0], ax]), c.ac_time_constant)
        _SHAPES[key] = (ct, cap, at, av)
    return _SHAPES[key]


def optical_highpass(cfg: DetectorConfig, wave: OpticalWaveform, run: ThermalRun, k: int,
                     t_begin: float, t_end: float) -> PwlHighPass:
    """Exact high-pass image of the linear-mode anode signal G(t)*P(t)."""
    mids = 0.5 * (run.edges[:-1] + run.edges[1:])
    g_steps = cfg.anode_gain(run.v_op[:, k], run.t_chip[:, k])
    i0, i1 = np.searchsorted(wave.times, [t_begin, t_end])
    times = np.unique(np.concatenate([[t_begin], wave.times[i0:i1], run.edges, [t_end]]))
    times = times[(times >= t_begin) & (times <= t_end)]
    x = np.interp(times, mids, g_steps) * power_at(wave, times)
    return PwlHighPass(times, x, cfg.circuit.ac_time_constant)


def _inter_gate_energy(wave: OpticalWaveform, gate_times, c: CircuitParams):
    """Optical energy (J) between the end of the previous gate window and this gate."""
    end_prev = gate_times - c.gate_period + c.gate_width + c.gate_edge / 2
    start = gate_times - c.gate_edge / 2
    from .waveform import _cum_at
    return (_cum_at(wave, start) - _cum_at(wave, end_prev)) * 1e-9


def prepare_gates(cfg: DetectorConfig, wave: OpticalWaveform, gate_times, t_chip, v_op,
                  hpf: PwlHighPass | None, rng, photons=None, fock=False,
                  extra_offsets=None) -> GateBatch:
    """Build the comparator picture of each gate.

    ``photons`` holds the mean (or, with ``fock``, exact) number of qubit
    photons reaching the detector in each gate at ``photon_offset``.
    Random draws come from ``rng`` in a fixed order so runs reproduce.
    """
    c = cfg.circuit
    lm = cfg.linear
    tg = np.asarray(gate_times, float)
    n = tg.size
    t_chip = np.broadcast_to(np.asarray(t_chip, float), (n,))
    v_op = np.broadcast_to(np.asarray(v_op, float), (n,))
    vb = cfg.v_br(t_chip)
    ex = v_op + c.gate_amplitude - vb
    ct, cap, at, av = _local_shapes(c)
    w0, w1 = cfg.window

    # random numbers, drawn in a fixed order
    u_dark = rng.random(n)
    u_photon = rng.random(n)
    t_dark = rng.random(n)
    noise = truncated_noise(rng.random(n)) * c.noise_sigma

    # light inside the gate: linear bump (gate-raised gain) and photon number
    gate_grid = np.arange(-c.gate_edge / 2, c.gate_width + c.gate_edge / 2 + 1e-9, 0.1)
    in_gate = mean_power(wave, tg - c.gate_edge / 2, tg + c.gate_width + c.gate_edge / 2)
    lit = in_gate > 0
    offs = [np.broadcast_to(ct, (n, ct.size)),
            np.broadcast_to(np.array([w0, w1]), (n, 2))]
    if extra_offsets is not None:
        offs.append(np.broadcast_to(np.asarray(extra_offsets, float), (n, len(extra_offsets))))
    n_bright = np.zeros(n)
    bump_vals = None
    if np.any(lit):
        gt = tg[:, None] + gate_grid[None, :]
        pg = power_at(wave, gt.ravel()).reshape(gt.shape)
        g = electro.gate_voltage(c, gate_grid)
        m_gate = lm.gain(v_op[:, None] + lm.gate_coupling * g[None, :], vb[:, None])
        m_dc = lm.gain(v_op, vb)[:, None]
        xb = lm.r_load * pg * (m_gate - m_dc)
        # exact high-pass of the piecewise-linear bump, vectorised over gates
        tau = c.ac_time_constant
        s = np.diff(gate_grid)
        e = np.exp(-s / tau)
        state = np.zeros(n)
        yb = np.empty_like(xb)
        yb[:, 0] = xb[:, 0]
        for j in range(s.size):
            m = (xb[:, j + 1] - xb[:, j]) / s[j]
            state = state * e[j] + xb[:, j] * (1 - e[j]) + m * (s[j] - tau * (1 - e[j]))
            yb[:, j + 1] = xb[:, j + 1] - state
        bump_vals = yb
        offs.append(np.broadcast_to(gate_grid, (n, gate_grid.size)))
        eta = cfg.efficiency.profile(gate_grid)
        wts = np.full(gate_grid.size, 0.1)
        wts[0] = wts[-1] = 0.05
        n_bright = (pg * eta[None, :] * wts[None, :]).sum(axis=1) * 1e-9 / PHOTON_ENERGY

    # photon detections and the avalanche they cause
    scale = np.clip(ex / c.nominal_excess, 0.0, 1.0)
    p_bright = -np.expm1(-n_bright * scale)
    p_qubit = np.zeros(n)
    if photons is not None:
        mu = np.broadcast_to(np.asarray(photons, float), (n,))
        eta_q = cfg.efficiency.profile(cfg.photon_offset) * scale
        if fock:
            p_qubit = 1.0 - (1.0 - eta_q) ** mu
        else:
            p_qubit = -np.expm1(-eta_q * mu)
    trapped = _inter_gate_energy(wave, tg, c) > cfg.trap_energy
    p_dark = np.where(trapped, 1.0, cfg.dark_count_prob)
    # one uniform decides whether any cause fired; a second picks which
    p_none = (1 - p_bright) * (1 - p_qubit) * (1 - p_dark)
    avalanche = (ex > 0) & (u_dark < 1 - p_none)
    # choose the cause in proportion to its share (earliest-cause timing)
    total = np.maximum(1 - p_none, 1e-300)
    first = u_photon * total
    cause_bright = first < p_bright
    cause_qubit = ~cause_bright & (first < p_bright + (1 - p_bright) * p_qubit)
    lo = cfg.efficiency.rise
    hi = cfg.efficiency.fall_end
    t_av = np.where(cause_bright, lo, np.where(cause_qubit, cfg.photon_offset, lo + t_dark * (hi - lo)))
    amp = np.where(avalanche, cfg.avalanche_amplitude(ex), 0.0)
    offs.append(t_av[:, None] + at[None, :])
    offsets = np.concatenate([np.asarray(o, float) for o in offs], axis=1)

    # optical breakpoints inside each window
    if hpf is not None and hpf.t.size:
        lo_i = np.searchsorted(hpf.t, tg + w0, side="left")
        hi_i = np.searchsorted(hpf.t, tg + w1, side="right")
        cnt = hi_i - lo_i
        kmax = int(cnt.max()) if n else 0
        if kmax:
            j = np.arange(kmax)
            idx = np.minimum(lo_i[:, None] + j[None, :], hpf.t.size - 1)
            ob = hpf.t[idx] - tg[:, None]
            ob = np.where(j[None, :] < cnt[:, None], ob, w1)
            offsets = np.concatenate([offsets, ob], axis=1)
    offsets = np.sort(offsets, axis=1)

    base = cap(offsets)
    if hpf is not None:
        base = base + hpf(tg[:, None] + offsets)
    if bump_vals is not None:
        pos = np.clip((offsets - gate_grid[0]) / 0.1, 0, gate_grid.size - 1)
        j0 = np.minimum(np.floor(pos).astype(int), gate_grid.size - 2)
        f = pos - j0
        rows = np.arange(n)[:, None]
        ybi = bump_vals[rows, j0] * (1 - f) + bump_vals[rows, j0 + 1] * f
        inside = (offsets >= gate_grid[0]) & (offsets <= gate_grid[-1])
        base = base + np.where(inside, ybi, 0.0)
        # after the gate the bump's high-pass tail is a tiny negative offset; ignored
    aval = amp[:, None] * av(offsets - t_av[:, None])

    # single-photon sensitivity: would a full-size avalanche for this bias cross?
    t_ref = lo + c.avalanche_rise
    baseline = cap(np.full(1, t_ref))[0] + (hpf(tg + t_ref) if hpf is not None else 0.0)
    reach = cfg.avalanche_amplitude(ex) + baseline + NOISE_CLIP * c.noise_sigma
    sensitive = (ex > 0) & (reach >= c.v_threshold)
    return GateBatch(offsets, base, aval, noise, ex, sensitive, avalanche, c.v_threshold)


# ---------------------------------------------------------------------------
# timeline

@dataclass
class TimelineResult:
    gate_index: np.ndarray     # absolute gate numbers
    gate_times: np.ndarray
    click: np.ndarray          # (n, 2) latched clicks after dead time
    raw_click: np.ndarray      # (n, 2) comparator decisions ignoring dead time
    mode: np.ndarray           # (n, 2) int codes into MODES
    peak: np.ndarray           # (n, 2) comparator peak without noise, V
    click_time: np.ndarray     # (n, 2) ns into the gate, nan without click
    excess: np.ndarray
    t_chip: np.ndarray
    avalanche: np.ndarray
    thermal: ThermalRun

    @property
    def n_gates(self):
        return self.gate_times.size

    def outcomes(self, det: int):
        out = []
        for k in range(self.n_gates):
            ct = self.click_time[k, det]
            out.append(GateOutcome(int(self.gate_index[k]), bool(self.click[k, det]),
                                   None if np.isnan(ct) else float(ct), MODES[self.mode[k, det]],
                                   float(self.peak[k, det]), float(self.excess[k, det])))
        return out

    def to_csv(self, det: int, path=None) -> str:
        """Per-gate log: gate_index, time_ns, mode, click, comparator_peak_mV, excess_bias_V, t_chip_C."""
        buf = io.StringIO()
        buf.write("gate_index,time_ns,mode,click,comparator_peak_mV,excess_bias_V,t_chip_C\n")
        for k in range(self.n_gates):
            buf.write(f"{int(self.gate_index[k])},{float(self.gate_times[k])!r},{MODES[self.mode[k, det]]},"
                      f"{int(self.click[k, det])},{float(self.peak[k, det]) * 1e3!r},"
                      f"{float(self.excess[k, det])!r},{float(self.t_chip[k, det])!r}\n")
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def apply_dead_time(raw, dead_gates: int, shared: bool = True, gate_index=None, busy=(0, 0)):
    """Latch clicks in gate order.

    A latched click at gate k blanks gates k+1 .. k+dead_gates (absolute
    numbering; gates absent from ``gate_index`` simply are not applied).
    ``busy`` gives, per detector, the first gate that is free again at the
    start.  Returns (clicks, dead_mask, busy_after).
    """
    raw = np.asarray(raw, bool)
    n = raw.shape[0]
    gi = np.arange(n) if gate_index is None else np.asarray(gate_index, np.int64)
    click = np.zeros_like(raw)
    dead = np.zeros_like(raw)
    busy = [int(busy[0]), int(busy[1])]
    for d in (0, 1):
        dead[:, d] = gi < busy[d]
    cand = np.nonzero(raw.any(axis=1))[0]
    for k in cand:
        g = int(gi[k])
        fired = [bool(raw[k, d]) and g >= busy[d] for d in (0, 1)]
        if not (fired[0] or fired[1]):
            continue
        for d in (0, 1):
            if fired[d]:
                click[k, d] = True
        until = g + 1 + dead_gates
        targets = (0, 1) if shared else tuple(d for d in (0, 1) if fired[d])
        j1 = np.searchsorted(gi, until, side="left")
        for d in targets:
            dead[k + 1:j1, d] = True
            busy[d] = max(busy[d], until)
    return click, dead, tuple(busy)


def run_timeline(rx: Receiver, waves, n_gates: int | None = None, first_gate: int = 0,
                 gate_indices=None, state: ThermalState | None = None, coupled: bool = True,
                 seed: int = 0, stream: int = 0, photons=None, fock: bool = False,
                 dt_ns: float = 5000.0, history_ns: float = 2000.0, busy=(0, 0),
                 chunk: int = 50_000) -> TimelineResult:
    """Simulate gates of both detectors.

    Either ``n_gates`` consecutive gates from ``first_gate`` or an explicit
    sorted array of absolute ``gate_indices`` (e.g. frame slots only).
    ``waves`` are the optical waveforms at the two detector inputs;
    ``photons`` optionally gives qubit photon numbers, shape (n, 2).
    """
    if gate_indices is None:
        if n_gates is None or n_gates < 1:
            raise ValueError("need at least one gate")
        gate_indices = first_gate + np.arange(n_gates)
    gi = np.asarray(gate_indices, np.int64)
    if gi.size < 1 or np.any(np.diff(gi) <= 0):
        raise ValueError("gate indices must be non-empty and strictly increasing")
    period = rx.period
    gate_times = gi * period
    t0 = float(gate_times[0]) - period
    t1 = float(gate_times[-1]) + period
    if state is None:
        state = thermal.idle_state(rx.thermal)
    run = thermal_pass(rx, waves, t0, t1, state, dt_ns=dt_ns, coupled=coupled)
    n = gi.size
    ks = run.step_of(gate_times)
    shape = (n, 2)
    raw = np.zeros(shape, bool)
    mode = np.zeros(shape, np.int8)
    peak = np.zeros(shape)
    tcl = np.full(shape, np.nan)
    excess = np.zeros(shape)
    aval = np.zeros(shape, bool)
    tchip = run.t_chip[ks]
    ph_all = None if photons is None else np.asarray(photons, float).reshape(n, 2)
    for d, cfg in enumerate(rx.detectors):
        hpf = optical_highpass(cfg, waves[d], run, d, t0 - history_ns, t1 + period)
        for c0 in range(0, n, chunk):
            sl = slice(c0, min(n, c0 + chunk))
            rng = np.random.default_rng([seed, stream, d, int(gi[c0]) % (1 << 62)])
            ph = None if ph_all is None else ph_all[sl, d]
            batch = prepare_gates(cfg, waves[d], gate_times[sl], tchip[sl, d], run.v_op[ks[sl], d], hpf,
                                  rng, photons=ph, fock=fock)
            c, pk, tc = batch.decide()
            raw[sl, d] = c
            peak[sl, d] = pk
            tcl[sl, d] = tc
            excess[sl, d] = batch.excess
            aval[sl, d] = batch.avalanche
            mode[sl, d] = np.where(batch.sensitive, GEIGER, np.where(batch.excess <= 0, BLIND, LINEAR))
    dead_gates = rx.detectors[0].dead_gates
    click, dead, _ = apply_dead_time(raw, dead_gates, rx.shared_dead_time, gi, busy)
    mode[dead] = DEAD
    tcl[~click] = np.nan
    return TimelineResult(gi, gate_times, click, raw, mode, peak, tcl, excess, tchip, aval, run)


def simulate_gate(ds: DetectorState, rx: Receiver, w: OpticalWaveform, gate_index: int):
    """One gate of one detector with the thermal state frozen.

    Returns (GateOutcome, updated DetectorState).
    """
    cfg = ds.config
    c = cfg.circuit
    tg = gate_index * c.gate_period
    if ds.dead_gates_remaining > 0:
        tc = ds.thermal_state.t_chip[ds.index]
        i_dc, v = electro.operating_point(cfg.linear, c, power_at(w, tg), cfg.v_br(tc))
        out = GateOutcome(gate_index, False, None, "dead", 0.0, float(cfg.excess(v, tc)))
        return out, replace(ds, dead_gates_remaining=ds.dead_gates_remaining - 1)
    waves = [OpticalWaveform.zero(), OpticalWaveform.zero()]
    waves[ds.index] = w
    run = thermal_pass(rx, waves, tg - c.gate_period, tg + c.gate_period, ds.thermal_state,
                       dt_ns=c.gate_period, coupled=False)
    hpf = optical_highpass(cfg, w, run, ds.index, tg - 20 * c.ac_time_constant, tg + c.gate_period)
    rng = np.random.default_rng([ds.rng_stream, gate_index])
    k = run.step_of(tg)
    batch = prepare_gates(cfg, w, np.array([tg]), run.t_chip[k, ds.index], run.v_op[k, ds.index], hpf, rng)
    click, pk, tcr = batch.decide()
    ex = float(batch.excess[0])
    mode = MODES[GEIGER if batch.sensitive[0] else (BLIND if ex <= 0 else LINEAR)]
    out = GateOutcome(gate_index, bool(click[0]), None if not click[0] else float(tcr[0]), mode,
                      float(pk[0]), ex)
    nxt = replace(ds, dead_gates_remaining=cfg.dead_gates if click[0] else 0)
    return out, nxt


def single_photon_sensitive(ds: DetectorState, rx: Receiver, w: OpticalWaveform | None, gate_index: int) -> bool:
    """True iff a full-size avalanche at the current bias could click."""
    w = w if w is not None else OpticalWaveform.zero()
    cfg = ds.config
    c = cfg.circuit
    tg = gate_index * c.gate_period
    waves = [OpticalWaveform.zero(), OpticalWaveform.zero()]
    waves[ds.index] = w
    run = thermal_pass(rx, waves, tg - c.gate_period, tg + c.gate_period, ds.thermal_state,
                       dt_ns=c.gate_period, coupled=False)
    hpf = optical_highpass(cfg, w, run, ds.index, tg - 20 * c.ac_time_constant, tg + c.gate_period)
    k = run.step_of(tg)
    batch = prepare_gates(cfg, w, np.array([tg]), run.t_chip[k, ds.index], run.v_op[k, ds.index],
                          hpf, np.random.default_rng(0))
    return bool(batch.sensitive[0])


# ---------------------------------------------------------------------------
# steady states

def steady_cw_state(rx: Receiver, powers, iters: int = 200) -> ThermalState:
    """Self-consistent thermal equilibrium under constant per-detector light."""
    p = rx.thermal
    pw = np.broadcast_to(np.asarray(powers, float), (2,))
    t_plate = p.t_target
    tc = np.array([p.t_target, p.t_target])
    for _ in range(iters):
        heats = np.array([float(rx.detectors[d].heat(pw[d], tc[d])) for d in (0, 1)])
        t0, t1, tp = thermal.steady_state(p, heats)
        new = np.array([t0, t1])
        if np.max(np.abs(new - tc)) < 1e-7 and abs(tp - t_plate) < 1e-7:
            tc = new
            break
        tc = 0.5 * tc + 0.5 * new
        t_plate = tp
    heats = np.array([float(rx.detectors[d].heat(pw[d], tc[d])) for d in (0, 1)])
    return thermal.steady_thermal_state(p, heats)


def heat_at_equilibrium(rx: Receiver, powers):
    st = steady_cw_state(rx, powers)
    return np.array([float(rx.detectors[d].heat(np.broadcast_to(powers, (2,))[d], st.t_chip[d]))
                     for d in (0, 1)]), st
