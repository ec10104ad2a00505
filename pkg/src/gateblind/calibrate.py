"""Measurement procedures on the simulated detectors.

The simulator is probed the way the hardware would be: a detector is put
into a blinding steady state, bright trigger pulses of a given peak power
are sent just after a gate, and clicks are counted.  On top of that sit
the CW / heat / efficiency sweeps and a small fitter that tunes the free
model constants to a list of target operating points.
"""
from __future__ import annotations

import io
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import detector as det
from . import electro, thermal
from . import eve as eve_mod
from .detector import Receiver
from .protocol import FrameConfig
from .thermal import ThermalState
from .waveform import OpticalWaveform, PulseSpec

log = logging.getLogger(__name__)

TRIALS = 100


class CalibrationError(RuntimeError):
    pass


class NonMonotoneError(CalibrationError):
    pass


# ---------------------------------------------------------------------------
# results

@dataclass
class SweepResult:
    """Ordered samples of one swept quantity with metadata."""
    x_name: str
    x: np.ndarray
    columns: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, float)
        if self.x.size > 1 and np.any(np.diff(self.x) <= 0):
            raise ValueError("sweep x values must be strictly increasing")
        for k, v in self.columns.items():
            v = np.asarray(v, float)
            if v.shape != self.x.shape:
                raise ValueError(f"column {k} has the wrong length")
            self.columns[k] = v

    def to_csv(self, path=None) -> str:
        """CSV with '# key: value' metadata lines ahead of the header."""
        buf = io.StringIO()
        for k in sorted(self.meta):
            buf.write(f"# {k}: {self.meta[k]}\n")
        names = [self.x_name] + list(self.columns)
        buf.write(",".join(names) + "\n")
        cols = [self.x] + [self.columns[k] for k in self.columns]
        for row in zip(*cols):
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def to_dict(self) -> dict:
        return {"x_name": self.x_name, "x": self.x.tolist(),
                "columns": {k: v.tolist() for k, v in self.columns.items()}, "meta": dict(self.meta)}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @staticmethod
    def from_json(text: str) -> "SweepResult":
        d = json.loads(text)
        return SweepResult(d["x_name"], d["x"], d["columns"], d["meta"])

    @staticmethod
    def from_csv(text: str) -> "SweepResult":
        meta, rows, header = {}, [], None
        for line in text.splitlines():
            if line.startswith("#"):
                k, _, v = line[1:].partition(":")
                meta[k.strip()] = v.strip()
            elif header is None:
                header = line.split(",")
            elif line:
                rows.append([float(v) for v in line.split(",")])
        a = np.array(rows, float).reshape(-1, len(header))
        return SweepResult(header[0], a[:, 0], {h: a[:, i + 1] for i, h in enumerate(header[1:])}, meta)


# ---------------------------------------------------------------------------
# probing contexts

@dataclass
class ProbeContext:
    """A receiver held in some illumination state, with the gates to probe.

    ``run`` is the thermal history (already settled) over the probe gates.
    """
    name: str
    rx: Receiver
    waves: tuple
    run: det.ThermalRun
    probe_gates: np.ndarray
    trigger: PulseSpec             # unit-peak pulse relative to the gate

    def gate_times(self):
        return np.asarray(self.probe_gates, float) * self.rx.period


def _settle(rx, waves, t0, t1, state, dt_ns=5000.0):
    return det.thermal_pass(rx, waves, t0, t1, state, dt_ns=dt_ns).final


def _rebalance_controller(p: thermal.ThermalParams, state: ThermalState, load: float) -> ThermalState:
    """Move plate and TEC controller to their equilibrium for a mean detector
    load, keeping the chip-to-plate offsets."""
    eq = thermal.steady_thermal_state(p, (load, 0.0))
    shift = eq.t_plate - state.t_plate
    return ThermalState(tuple(float(t + shift) for t in state.t_chip), eq.t_plate, eq.i_tec, eq.integrator)


def _probe_run(rx, waves, gates, state, dt_ns=5000.0):
    t = np.asarray(gates, float) * rx.period
    return det.thermal_pass(rx, waves, float(t.min()) - rx.period, float(t.max()) + rx.period,
                            state, dt_ns=dt_ns)


def cw_context(rx: Receiver | None = None, powers=(9.5e-3, 10.7e-3), policy=None) -> ProbeContext:
    rx = rx or Receiver()
    policy = policy or eve_mod.TriggerPolicy()
    waves = tuple(OpticalWaveform.constant(p) for p in powers)
    state = det.steady_cw_state(rx, powers)
    gates = np.array([0])
    return ProbeContext("cw-thermal", rx, waves, _probe_run(rx, waves, gates, state), gates,
                        policy.template(eve_mod.CW))


def frame_context(rx: Receiver | None = None, powers=(3.5e-3, 4.0e-3), cfg: FrameConfig | None = None,
                  settle_cycles: int = 10, policy=None, bits=None) -> ProbeContext:
    """Periodic frame-blinding state; probes the given bits (default: second and last)."""
    rx = rx or Receiver()
    cfg = cfg or FrameConfig()
    policy = policy or eve_mod.TriggerPolicy()
    s = eve_mod.BlindingStrategy(eve_mod.FRAME, frame_powers=tuple(powers))
    t0 = -settle_cycles * cfg.cycle
    waves = eve_mod.blinding_waveform(s, cfg, t0, cfg.cycle, rx.period)
    duty = s.frame_pulse_width / cfg.cycle
    state = det.steady_cw_state(rx, np.asarray(powers) * duty)
    state = _settle(rx, waves, t0, -rx.period, state)
    # the plate loop is far slower than a cycle: put the TEC controller on
    # the equilibrium of the cycle-averaged load, then settle the chips again
    cyc = det.thermal_pass(rx, waves, -cfg.cycle - rx.period, -rx.period, state)
    load = float(np.mean(np.sum(cyc.v_op * cyc.i_dc + cyc.p_mean, axis=1)))
    state = _rebalance_controller(rx.thermal, state, load)
    state = _settle(rx, waves, -3 * cfg.cycle - rx.period, -rx.period, state)
    bits = np.array([1, cfg.bits_per_frame - 1]) if bits is None else np.asarray(bits)
    run = det.thermal_pass(rx, waves, -rx.period, cfg.frame_length + rx.period, state)
    return ProbeContext("frame-thermal", rx, waves, run, bits, policy.template(eve_mod.FRAME))


def sinkhole_context(rx: Receiver | None = None, power=500e-6, settle_ns: float = 2e6,
                     policy=None) -> ProbeContext:
    rx = rx or Receiver()
    policy = policy or eve_mod.TriggerPolicy()
    pw = tuple(np.broadcast_to(np.asarray(power, float), (2,)).tolist())
    s = eve_mod.BlindingStrategy(eve_mod.SINKHOLE, sink_power=pw, sink_ramp_periods=1)
    gw = rx.detectors[0].circuit.gate_width
    t_start = -settle_ns
    waves = eve_mod.blinding_waveform(s, FrameConfig(), t_start, 2 * rx.period, rx.period, gw)
    duty = s.sink_width / rx.period
    state = det.steady_cw_state(rx, np.asarray(pw) * duty)
    state = _settle(rx, waves, t_start, -rx.period, state, dt_ns=1000.0)
    gates = np.array([0])
    run = det.thermal_pass(rx, waves, -rx.period, 2 * rx.period, state, dt_ns=rx.period)
    return ProbeContext("sinkhole", rx, waves, run, gates, policy.template(eve_mod.SINKHOLE))


# ---------------------------------------------------------------------------
# thresholds

@dataclass
class GateProbe:
    """CRN probe of one gate: ``trials`` noise/avalanche draws, shared across power levels."""
    batch: det.GateBatch
    unit: np.ndarray          # (trials, K) comparator response per watt of trigger peak

    def clicks(self, peak_power: float) -> int:
        c, _, _ = self.batch.decide(self.unit * peak_power)
        return int(c.sum())


def make_probe(ctx: ProbeContext, d: int, gate: int, trials: int = TRIALS, seed: int = 0) -> GateProbe:
    cfg = ctx.rx.detectors[d]
    c = cfg.circuit
    tg = float(gate) * ctx.rx.period
    run = ctx.run
    hpf = det.optical_highpass(cfg, ctx.waves[d], run, d, tg - 2000.0, tg + ctx.rx.period)
    k = int(run.step_of(tg))
    tc, vop = run.t_chip[k, d], run.v_op[k, d]
    ct, cp = ctx.trigger.corners()
    rng = np.random.default_rng([seed, d, int(gate) % (1 << 62), 99])
    times = np.full(trials, tg)
    batch = det.prepare_gates(cfg, ctx.waves[d], times, tc, vop, hpf, rng, extra_offsets=ct)
    g = float(cfg.anode_gain(vop, tc))
    # high-pass image of a unit-peak trigger, right after the gate
    pulse_hpf = electro.PwlHighPass(ct, g * cp, c.ac_time_constant)
    unit = np.where(batch.offsets >= ct[0], pulse_hpf(np.maximum(batch.offsets, ct[0])), 0.0)
    return GateProbe(batch, unit)


def find_thresholds(probe: GateProbe, start: float = 1e-3, rel: float = 0.01, max_iter: int = 80):
    """Bisect for (p0, p100): the highest power with no click and the lowest
    with a click in every trial, to ``rel`` relative bracket width."""
    n = probe.batch.noise.size
    seen = {}

    def count(p):
        if p not in seen:
            seen[p] = probe.clicks(p)
            ps = sorted(seen)
            cs = [seen[q] for q in ps]
            if any(b < a for a, b in zip(cs, cs[1:])):
                raise NonMonotoneError("click count decreases with trigger power")
        return seen[p]

    if count(0.0) > 0:
        raise CalibrationError("detector clicks without any trigger: not blind")
    hi = start
    for _ in range(max_iter):
        if count(hi) == n:
            break
        hi *= 2
    else:
        raise CalibrationError("no trigger power up to the limit clicks every time")

    def bisect(pred, lo, hi):
        # pred(lo) False, pred(hi) True
        for _ in range(max_iter):
            if hi - lo <= rel * hi:
                return lo, hi
            mid = 0.5 * (lo + hi)
            if pred(mid):
                hi = mid
            else:
                lo = mid
        return lo, hi

    p0_lo, _ = bisect(lambda p: count(p) > 0, 0.0, hi)
    _, p100 = bisect(lambda p: count(p) == n, p0_lo, hi)
    return p0_lo, p100


def threshold_report(ctx: ProbeContext, gate: int | None = None, trials: int = TRIALS, seed: int = 0,
                     rel: float = 0.01):
    gate = int(ctx.probe_gates[0]) if gate is None else gate
    for d in (0, 1):
        if can_click(ctx, d, [gate]):
            raise CalibrationError(f"detector {d} is not blind in the {ctx.name} state")
    res = [find_thresholds(make_probe(ctx, d, gate, trials, seed), rel=rel) for d in (0, 1)]
    return eve_mod.ThresholdReport(tuple(r[0] for r in res), tuple(r[1] for r in res))


def threshold_tables(rx: Receiver | None = None, trials: int = TRIALS, seed: int = 0, rel: float = 0.01):
    """The four threshold tables: CW, frame second bit, frame last bit, sinkhole."""
    rx = rx or Receiver()
    fc = frame_context(rx)
    return {
        "cw": threshold_report(cw_context(rx), trials=trials, seed=seed, rel=rel),
        "frame_bit1": threshold_report(fc, int(fc.probe_gates[0]), trials, seed, rel),
        "frame_last": threshold_report(fc, int(fc.probe_gates[1]), trials, seed, rel),
        "sinkhole": threshold_report(sinkhole_context(rx), trials=trials, seed=seed, rel=rel),
    }


# ---------------------------------------------------------------------------
# blindness and onsets

def can_click(ctx: ProbeContext, d: int, gates=None) -> bool:
    """True if any probe gate could click with no trigger at all.

    A gate can click when it is single-photon sensitive or when its
    noise-free comparator peak plus the noise bound reaches threshold.
    """
    cfg = ctx.rx.detectors[d]
    c = cfg.circuit
    gates = ctx.probe_gates if gates is None else np.asarray(gates)
    tg = np.asarray(gates, float) * ctx.rx.period
    hpf = det.optical_highpass(cfg, ctx.waves[d], ctx.run, d, float(tg.min()) - 2000.0,
                               float(tg.max()) + ctx.rx.period)
    k = ctx.run.step_of(tg)
    b = det.prepare_gates(cfg, ctx.waves[d], tg, ctx.run.t_chip[k, d], ctx.run.v_op[k, d], hpf,
                          np.random.default_rng(0))
    _, peak, _ = b.decide()
    return bool(np.any(b.sensitive) or np.any(peak + det.NOISE_CLIP * c.noise_sigma >= c.v_threshold))


def _bisect_onset(blind, lo, hi, rel=0.005, step=1.1):
    """Power above which ``blind`` holds for good.

    Walks down geometrically from ``hi`` (which must be blind) to the first
    power that is not, then bisects that bracket.  Blindness need not be
    monotone at low power; this finds the top-most transition.
    """
    if not blind(hi):
        raise CalibrationError(f"not blind even at {hi:.4g} W")
    b = hi
    a = hi / step
    while blind(a):
        b = a
        a = a / step
        if a < lo:
            return lo
    while b / a > 1 + rel:
        mid = math.sqrt(a * b)
        if blind(mid):
            b = mid
        else:
            a = mid
    return b


def cw_onset(rx: Receiver, d: int, lo=1e-3, hi=40e-3):
    """CW power at detector d above which it never clicks (both detectors lit
    through the fixed splitter)."""
    frac = rx.split.fractions()

    def blind(p):
        total = p / frac[d]
        return not can_click(cw_context(rx, tuple(total * f for f in frac)), d)
    return _bisect_onset(blind, lo, hi)


def frame_onset(rx: Receiver, d: int, lo=0.3e-3, hi=8e-3, cfg=None):
    """Frame blinding power above which all slots of the frame are blind."""
    cfg = cfg or FrameConfig()
    bits = np.arange(cfg.bits_per_frame)

    def blind(p):
        pw = [0.0, 0.0]
        pw[d] = p
        return not can_click(frame_context(rx, pw, cfg, bits=bits), d)
    return _bisect_onset(blind, lo, hi)


def sinkhole_onset(rx: Receiver, d: int, lo=20e-6, hi=2e-3):
    def blind(p):
        pw = [0.0, 0.0]
        pw[d] = p
        return not can_click(sinkhole_context(rx, pw), d)
    return _bisect_onset(blind, lo, hi)


# ---------------------------------------------------------------------------
# sweeps

def sweep_cw_click_probability(total_powers, rx: Receiver | None = None, n_gates: int = 10_000,
                               seed: int = 0) -> SweepResult:
    """Click probability per gate versus CW source power split over both detectors.

    ``p_click`` counts latched clicks per gate (what a counter sees, dead
    time included), ``p_raw`` comparator firings per gate and ``p_model``
    the exact per-gate probability given the simulated peaks.
    """
    rx = rx or Receiver()
    frac = rx.split.fractions()
    x = np.asarray(total_powers, float)
    cols = {f"{k}{d}": np.zeros(x.size) for k in ("p_click", "p_raw", "p_model") for d in (0, 1)}
    for j, P in enumerate(x):
        pw = tuple(P * f for f in frac)
        waves = [OpticalWaveform.constant(p) for p in pw]
        state = det.steady_cw_state(rx, pw)
        tl = det.run_timeline(rx, waves, n_gates=n_gates, state=state, seed=seed, stream=j)
        for d in (0, 1):
            c = rx.detectors[d].circuit
            cols[f"p_click{d}"][j] = tl.click[:, d].mean()
            cols[f"p_raw{d}"][j] = tl.raw_click[:, d].mean()
            z = (c.v_threshold - tl.peak[:, d]) / c.noise_sigma
            cols[f"p_model{d}"][j] = float(np.mean(det.noise_exceed_prob(z)))
    meta = {"x_label": "CW source power (W)", "y_label": "click probability per gate",
            "split_d0": frac[0], "n_gates": n_gates, "seed": seed, "plot": "click probability vs CW power"}
    return SweepResult("power_W", x, cols, meta)


def settle_thermal(p: thermal.ThermalParams, heats, state: ThermalState | None = None,
                   dt: float = 1e-3, chunk_s: float = 5.0, rate: float = 1e-4, max_s: float = 3600.0):
    """Integrate until the plate changes by less than ``rate`` K/s; returns (state, seconds)."""
    state = state or thermal.idle_state(p)
    n = int(round(chunk_s / dt))
    h = np.broadcast_to(np.asarray(heats, float), (n, 2))
    t = 0.0
    while t < max_s:
        prev = state.t_plate
        state, _ = thermal.integrate(state, p, h, dt)
        t += chunk_s
        if abs(state.t_plate - prev) / chunk_s < rate:
            return state, t
    raise CalibrationError("thermal network did not settle")


def sweep_heat_vs_plate(loads, p: thermal.ThermalParams | None = None) -> SweepResult:
    """Plate temperature, TEC current and sensor reading versus total chip heat."""
    p = p or thermal.ThermalParams()
    x = np.asarray(loads, float)
    tp, it, sens, ts = (np.zeros(x.size) for _ in range(4))
    state = None
    for j, L in enumerate(x):
        state, secs = settle_thermal(p, (L / 2, L / 2), state)
        tp[j], it[j], sens[j], ts[j] = state.t_plate, state.i_tec, state.sensor(p), secs
    meta = {"x_label": "total heat dissipated in the APDs (W)", "y_label": "plate temperature (C) / TEC current (A)",
            "plot": "plate temperature vs heat", "settle_rate_K_per_s": 1e-4}
    return SweepResult("load_W", x, {"t_plate": tp, "i_tec": it, "sensor": sens, "settle_s": ts}, meta)


def cooldown(rx: Receiver | None = None, powers=(9.5e-3, 10.7e-3), dt: float = 1e-3, max_s: float = 600.0):
    """Turn CW blinding off and follow the plate back down.

    Returns dict with the time and plate temperature at which each detector
    regains single-photon sensitivity, and the time to reach target+0.1 K.
    """
    rx = rx or Receiver()
    p = rx.thermal
    state = det.steady_cw_state(rx, powers)
    heats = np.array([float(rx.detectors[d].heat(0.0, -50.0)) for d in (0, 1)])
    n = int(round(1.0 / dt))
    h = np.broadcast_to(heats, (n, 2))
    out = {"regain_s": [None, None], "regain_plate": [None, None], "start_plate": state.t_plate}
    t = 0.0
    while t < max_s:
        state, tr = thermal.integrate(state, p, h, dt)
        for d in (0, 1):
            if out["regain_s"][d] is None:
                cfg = rx.detectors[d]
                tc = tr[:, d]
                i_dc, v = electro.operating_point(cfg.linear, cfg.circuit, np.zeros_like(tc), cfg.v_br(tc))
                ex = cfg.excess(v, tc)
                ok = cfg.avalanche_amplitude(ex) + det.NOISE_CLIP * cfg.circuit.noise_sigma >= cfg.circuit.v_threshold
                ok &= ex > 0
                if ok.any():
                    k = int(np.argmax(ok))
                    out["regain_s"][d] = t + k * dt
                    out["regain_plate"][d] = float(tr[k, 2])
        t += 1.0
        if all(v is not None for v in out["regain_s"]) and state.t_plate < p.t_target + 0.1:
            out["settle_s"] = t
            return out
    raise CalibrationError("plate did not cool down")


def measure_efficiency_curve(offsets, rx: Receiver | None = None, d: int = 0, mu: float = 1.0,
                             n_gates: int = 20_000, seed: int = 0) -> SweepResult:
    """Map eta(t) by sliding mean-photon-number pulses across the gate.

    Each offset is measured over ``n_gates`` consecutive gates; gates
    blanked by dead time are excluded, and eta follows from inverting the
    Poisson click fraction 1 - (1 - p_dark) exp(-eta mu).
    """
    rx = rx or Receiver()
    x = np.asarray(offsets, float)
    est, err, true = (np.zeros(x.size) for _ in range(3))
    base_cfg = rx.detectors[d]
    pd = base_cfg.dark_count_prob
    zero = [OpticalWaveform.zero(), OpticalWaveform.zero()]
    for j, off in enumerate(x):
        cfg = replace(base_cfg, photon_offset=float(off))
        dets = list(rx.detectors)
        dets[d] = cfg
        r = replace(rx, detectors=tuple(dets))
        ph = np.zeros((n_gates, 2))
        ph[:, d] = mu
        tl = det.run_timeline(r, zero, n_gates=n_gates, seed=seed, stream=1000 + j, photons=ph,
                              coupled=False, dt_ns=n_gates * rx.period + rx.period)
        live = tl.mode[:, d] != det.DEAD
        f = tl.click[live, d].mean()
        m = live.sum()
        est[j] = max(0.0, -math.log((1 - f) / (1 - pd)) / mu) if f < 1 else np.inf
        # delta-method standard error of the inversion
        err[j] = math.sqrt(max(f * (1 - f), 1e-12) / m) / ((1 - f) * mu)
        true[j] = float(det.quantum_efficiency(cfg.efficiency, off, cfg.circuit.nominal_excess,
                                               cfg.circuit.nominal_excess))
    meta = {"x_label": "photon arrival offset from gate rising edge (ns)", "y_label": "quantum efficiency",
            "plot": "efficiency map", "mu": mu, "detector": d, "n_gates": n_gates, "seed": seed}
    return SweepResult("offset_ns", x, {"eta_est": est, "eta_err": err, "eta_model": true}, meta)


# ---------------------------------------------------------------------------
# fitting

DARK_RECOVERY = (-39.8, -40.1)       # plate temperature (C) at which dark counts return

MEASURED_TABLES = {
    "cw": ((1.12e-3, 1.71e-3), (1.31e-3, 2.02e-3)),
    "frame_bit1": ((401e-6, 580e-6), (533e-6, 747e-6)),
    "frame_last": ((305e-6, 340e-6), (420e-6, 532e-6)),
    "sinkhole": ((655e-6, 773e-6), (751e-6, 908e-6)),
}


@dataclass(frozen=True)
class Target:
    name: str
    value: float
    tol: float            # relative
    unit: str = ""

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tolerances must be positive")


@dataclass
class CalibrationTargets:
    targets: tuple

    @staticmethod
    def default(include_onsets: bool = True) -> "CalibrationTargets":
        t = []
        for tab, (p0, p100) in MEASURED_TABLES.items():
            for d in (0, 1):
                t.append(Target(f"{tab}.p0.det{d}", p0[d], 0.10, "W"))
                t.append(Target(f"{tab}.p100.det{d}", p100[d], 0.10, "W"))
        if include_onsets:
            t += [Target("cw_onset.det0", 8.8e-3, 0.10, "W"), Target("cw_onset.det1", 10e-3, 0.10, "W"),
                  Target("frame_onset.det0", 1.5e-3, 0.10, "W"), Target("frame_onset.det1", 1.7e-3, 0.10, "W")]
        return CalibrationTargets(tuple(t))

    def names(self):
        return [t.name for t in self.targets]


def predict(rx: Receiver, targets: CalibrationTargets, trials: int = TRIALS, seed: int = 0) -> dict:
    names = set(targets.names())
    out = {}
    if any(n.split(".")[0] in MEASURED_TABLES for n in names):
        for tab, rep in threshold_tables(rx, trials, seed).items():
            for d in (0, 1):
                out[f"{tab}.p0.det{d}"] = rep.p0[d]
                out[f"{tab}.p100.det{d}"] = rep.p100[d]
    for d in (0, 1):
        if f"cw_onset.det{d}" in names:
            out[f"cw_onset.det{d}"] = cw_onset(rx, d)
        if f"frame_onset.det{d}" in names:
            out[f"frame_onset.det{d}"] = frame_onset(rx, d)
    return out


def residuals(pred: dict, targets: CalibrationTargets) -> dict:
    return {t.name: pred[t.name] / t.value - 1.0 for t in targets.targets}


@dataclass
class FitResult:
    receiver: Receiver
    params: dict
    residuals: dict
    offenders: list
    evaluations: int
    seconds: float

    @property
    def ok(self) -> bool:
        return not self.offenders


# Free constants: name -> (getter, setter) on a Receiver.
def _get(rx: Receiver, name: str) -> float:
    kind, _, d = name.rpartition(".")
    d = int(d)
    if kind == "r_chip_plate":
        return float(rx.thermal.r_chip[d])
    if kind == "tau_chip":
        return float(np.broadcast_to(rx.thermal.tau_chip, (2,))[d])
    if kind in ("m0", "gate_coupling", "exponent", "series_resistance"):
        return float(getattr(rx.detectors[d].linear, kind))
    if kind == "noise_sigma":
        return float(rx.detectors[d].circuit.noise_sigma)
    raise KeyError(name)


def _set(rx: Receiver, name: str, value: float) -> Receiver:
    kind, _, d = name.rpartition(".")
    d = int(d)
    if kind in ("r_chip_plate", "tau_chip"):
        cur = list(np.broadcast_to(np.asarray(getattr(rx.thermal, kind), float), (2,)))
        cur[d] = float(value)
        return replace(rx, thermal=replace(rx.thermal, **{kind: tuple(cur)}))
    dets = list(rx.detectors)
    if kind in ("m0", "gate_coupling", "exponent", "series_resistance"):
        dets[d] = replace(dets[d], linear=replace(dets[d].linear, **{kind: float(value)}))
    elif kind == "noise_sigma":
        c = dets[d].circuit
        # keep the dark-count recovery temperature where it is
        e0 = electro.excess_for_recovery(DARK_RECOVERY[d], c.v_threshold, value, c.avalanche_peak)
        dets[d] = replace(dets[d], circuit=replace(c, noise_sigma=float(value), nominal_excess=float(e0)))
    else:
        raise KeyError(name)
    return replace(rx, detectors=tuple(dets))


FREE_PARAMETERS = ("m0.0", "m0.1", "r_chip_plate.0", "r_chip_plate.1", "tau_chip.0", "tau_chip.1",
                   "gate_coupling.0", "gate_coupling.1", "noise_sigma.0", "noise_sigma.1")


def fit_parameters(targets: CalibrationTargets | None = None, rx: Receiver | None = None,
                   free=FREE_PARAMETERS, steps=(0.04, 0.01), max_sweeps: int = 3,
                   trials: int = TRIALS, seed: int = 0) -> FitResult:
    """Coordinate descent of log-parameters on the summed squared log-residuals.

    Starts from the given (default: frozen) constants and stops as soon as
    all residuals are inside their tolerance bands.
    """
    targets = targets or CalibrationTargets.default()
    rx = rx or Receiver()
    t_start = time.perf_counter()
    n_eval = 0

    def cost(r):
        nonlocal n_eval
        n_eval += 1
        res = residuals(predict(r, targets, trials, seed), targets)
        return sum(math.log1p(v) ** 2 for v in res.values()), res

    best, res = cost(rx)

    def offenders(res):
        return [t.name for t in targets.targets if abs(res[t.name]) > t.tol]

    for step in steps:
        for _ in range(max_sweeps):
            if not offenders(res):
                break
            improved = False
            for name in free:
                v0 = _get(rx, name)
                for sgn in (1, -1):
                    try:
                        cand = _set(rx, name, v0 * math.exp(sgn * step))
                        c, r = cost(cand)
                    except (ValueError, CalibrationError, thermal.ThermalError):
                        continue
                    if c < best:
                        rx, best, res, improved = cand, c, r, True
                        break
            if not improved:
                break
    bad = offenders(res)
    fr = FitResult(rx, {n: _get(rx, n) for n in free}, res, bad, n_eval, time.perf_counter() - t_start)
    if bad:
        log.warning("calibration residuals outside tolerance: %s", ", ".join(bad))
    return fr
