"""Faked-state eavesdropper.

Eve measures every qubit with a copy of Bob's receiver, keeps Bob's
detectors out of single-photon mode with one of three blinding
strategies, and replays each result as a bright trigger pulse just after
Bob's gate.  The trigger peak power is picked inside the window where a
basis match always clicks the intended detector and a mismatch (which
splits the power) never clicks either.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import detector as det
from . import protocol as proto
from .protocol import FrameConfig, SessionReport
from .waveform import OpticalWaveform, PulseSpec, SplitRatio, add, pulse_train

log = logging.getLogger(__name__)

CW, FRAME, SINKHOLE = "cw-thermal", "frame-thermal", "sinkhole"
KINDS = (CW, FRAME, SINKHOLE)


class StrategyError(RuntimeError):
    pass


@dataclass(frozen=True)
class BlindingStrategy:
    kind: str
    cw_powers: tuple = (9.5e-3, 10.7e-3)
    frame_powers: tuple = (3.5e-3, 4.0e-3)
    frame_pulse_width: float = 225_000.0    # ns
    frame_pulse_offset: float = 12_500.0    # ns after the frame ends
    sink_power: tuple = (500e-6, 500e-6)
    sink_width: float = 140.0
    sink_delay: float = 25.0                # ns after the gate's falling edge
    sink_ramp_periods: int = 5000
    edge_time: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown blinding strategy {self.kind!r}")
        for name in ("cw_powers", "frame_powers", "sink_power"):
            if any(v < 0 for v in getattr(self, name)):
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class TriggerPolicy:
    widths: dict = field(default_factory=lambda: {CW: 3.0, FRAME: 4.0, SINKHOLE: 3.2})
    delay: float = 0.5          # ns after the gate's falling half-maximum
    edge_time: float = 0.5

    def width(self, kind):
        return self.widths[kind]

    def template(self, kind, gate_width=2.8) -> PulseSpec:
        """Unit-peak trigger pulse relative to the gate's rising half-maximum."""
        return PulseSpec(gate_width + self.delay, self.width(kind), 1.0, self.edge_time)


@dataclass(frozen=True)
class ThresholdReport:
    p0: tuple       # never-click power per detector (W)
    p100: tuple     # always-click power per detector (W)

    def __post_init__(self):
        for a, b in zip(self.p0, self.p100):
            if not a < b:
                raise ValueError("p0 must be below p100 for every detector")

    @property
    def condition_ok(self) -> bool:
        return check_condition(self)


def check_condition(tr: ThresholdReport) -> bool:
    """Sufficient control condition: the highest always-click power stays
    below twice the lowest never-click power."""
    return max(tr.p100) < 2 * min(tr.p0)


def power_window(tr: ThresholdReport, r: SplitRatio):
    """[lo, hi) of usable trigger peak powers.

    A basis match must click any target (>= max p100).  A mismatch halves
    the pulse nominally (< 2 min p0) and, with the real splitter, must stay
    under each detector's p0.
    """
    lo = max(tr.p100)
    hi = min(2 * min(tr.p0), tr.p0[0] / r.fraction_d0, tr.p0[1] / r.fraction_d1)
    return lo, hi


def choose_power(tr: ThresholdReport, r: SplitRatio) -> float:
    lo, hi = power_window(tr, r)
    if not lo < hi:
        raise StrategyError(f"empty trigger power window [{lo:.4g}, {hi:.4g})")
    return 0.5 * (lo + hi)


def interpolate_reports(second: ThresholdReport, last: ThresholdReport, bits: int):
    """Per-bit thresholds, linear in bit index between bit 1 and bit bits-1."""
    k = np.arange(bits)
    f = (k - 1) / (bits - 2)
    p0 = np.array(second.p0)[None, :] + f[:, None] * (np.array(last.p0) - np.array(second.p0))[None, :]
    p100 = np.array(second.p100)[None, :] + f[:, None] * (np.array(last.p100) - np.array(second.p100))[None, :]
    return p0, p100


def frame_power_schedule(second: ThresholdReport, last: ThresholdReport, bits: int, r: SplitRatio):
    """Trigger peak power for every bit of a frame (W)."""
    p0, p100 = interpolate_reports(second, last, bits)
    lo = p100.max(axis=1)
    hi = np.minimum.reduce([2 * p0.min(axis=1), p0[:, 0] / r.fraction_d0, p0[:, 1] / r.fraction_d1])
    if np.any(lo >= hi):
        bad = np.nonzero(lo >= hi)[0]
        raise StrategyError(f"empty trigger window at bits {bad[:5].tolist()}")
    return 0.5 * (lo + hi)


def blinding_waveform(s: BlindingStrategy, cfg: FrameConfig, t_start: float, t_end: float,
                      period: float = 200.0, gate_width: float = 2.8, activate_at: float | None = None):
    """Blinding light at each detector over [t_start, t_end) ns.

    Frames start at multiples of the cycle.  ``activate_at`` marks when a
    sinkhole train starts (its ramp begins there); by default at t_start.
    """
    if s.kind == CW:
        return tuple(OpticalWaveform.constant(p) for p in s.cw_powers)
    if s.kind == FRAME:
        c0 = int(np.floor(t_start / cfg.cycle)) - 1
        c1 = int(np.ceil(t_end / cfg.cycle)) + 1
        starts = np.arange(c0, c1) * cfg.cycle + cfg.frame_length + s.frame_pulse_offset
        next_frame = np.arange(c0, c1) * cfg.cycle + cfg.cycle
        if np.any(starts - s.edge_time / 2 < np.arange(c0, c1) * cfg.cycle + cfg.frame_length) or \
                np.any(starts + s.frame_pulse_width + s.edge_time / 2 > next_frame):
            raise StrategyError("frame blinding pulse overlaps a frame")
        starts = starts[(starts + s.frame_pulse_width > t_start - cfg.cycle) & (starts < t_end)]
        return tuple(pulse_train(starts, s.frame_pulse_width, p, s.edge_time) for p in s.frame_powers)
    # sinkhole: one pulse after every gate, ramped in at activation
    act = t_start if activate_at is None else activate_at
    g0 = int(np.floor(act / period))
    g1 = int(np.ceil(t_end / period)) + 1
    starts = np.arange(g0, g1) * period + gate_width + s.sink_delay
    if starts[-1] + s.sink_width + s.edge_time / 2 > g1 * period:
        raise StrategyError("sinkhole pulse runs into the next gate")
    k = np.arange(starts.size)
    ramp = np.minimum(1.0, (k + 1) / max(1, s.sink_ramp_periods))
    return tuple(pulse_train(starts, s.sink_width, p * ramp, s.edge_time) for p in s.sink_power)


def resend(bit: int, basis: int, policy: TriggerPolicy, kind: str, power: float, gate_time: float,
           gate_width: float = 2.8) -> PulseSpec:
    """The trigger pulse Eve sends for one detected qubit (absolute time).

    Routing to Bob's detectors happens at his beam splitter; the pulse
    itself only carries Eve's basis/bit through its phase, which the
    simulator keeps as metadata.
    """
    if not power > 0:
        raise StrategyError("trigger power must be positive")
    t = policy.template(kind, gate_width)
    return PulseSpec(gate_time + t.start, t.width, power, t.edge_time)


def intercept(alice: proto.AliceRecord, eve_rx: det.Receiver, seed: int, fock: bool = False):
    """Eve measures every slot with her replica receiver.

    Returns (eve_basis, eve_bit, detected) where eve_bit is -1 when
    nothing was detected.  A double click is resolved by a fair coin.
    """
    rng = np.random.default_rng([seed, 11])
    eve_basis = rng.integers(0, 2, len(alice)).astype(np.int8)
    cfg = FrameConfig()
    clicks, _ = proto.honest_receiver_clicks(eve_rx, cfg, alice, eve_basis, seed, stream=12, fock=fock)
    detected = clicks.any(axis=1)
    coin = rng.integers(0, 2, len(alice))
    bit = np.where(clicks[:, 0] & clicks[:, 1], coin, np.where(clicks[:, 1], 1, 0))
    bit = np.where(detected, bit, -1).astype(np.int8)
    return eve_basis, bit, detected


@dataclass
class AttackSetup:
    strategy: BlindingStrategy
    policy: TriggerPolicy = field(default_factory=TriggerPolicy)
    thresholds: ThresholdReport | None = None
    frame_thresholds: tuple | None = None      # (second-bit, last-bit) reports
    trigger_power: float | None = None         # overrides the window midpoint


def trigger_powers(setup: AttackSetup, alice: proto.AliceRecord, r: SplitRatio, cfg: FrameConfig):
    kind = setup.strategy.kind
    if setup.trigger_power is not None:
        return np.full(len(alice), setup.trigger_power)
    if kind == FRAME:
        if setup.frame_thresholds is None:
            raise StrategyError("frame-thermal attack needs per-bit thresholds")
        sched = frame_power_schedule(*setup.frame_thresholds, cfg.bits_per_frame, r)
        return sched[np.asarray(alice.gate) % cfg.gates_per_cycle]
    if setup.thresholds is None:
        raise StrategyError("attack needs a threshold report")
    return np.full(len(alice), choose_power(setup.thresholds, r))


def warm_state(rx: det.Receiver, s: BlindingStrategy, cfg: FrameConfig):
    """Thermal state with blinding already applied for a long time."""
    if s.kind == CW:
        return det.steady_cw_state(rx, s.cw_powers)
    if s.kind == FRAME:
        duty = s.frame_pulse_width / cfg.cycle
        return det.steady_cw_state(rx, np.array(s.frame_powers) * duty)
    return None


def run_attack(rx: det.Receiver, cfg: FrameConfig, n_slots: int, setup: AttackSetup, seed: int,
               mu: float = 1.0, warmup_ns: float | None = None, eve_rx: det.Receiver | None = None):
    """Full faked-state session; returns (SessionReport, details)."""
    s = setup.strategy
    n_frames = -(-n_slots // cfg.bits_per_frame)
    rng = np.random.default_rng([seed, 1])
    alice = proto.generate_frames(cfg, n_frames, rng, mu)
    bob_basis = rng.integers(0, 2, len(alice)).astype(np.int8)
    eve_basis, eve_bit, detected = intercept(alice, eve_rx or rx, seed)
    power = trigger_powers(setup, alice, rx.split, cfg)

    # Bob's optical input: blinding + routed trigger pulses
    period = rx.period
    gw = rx.detectors[0].circuit.gate_width
    t_end = float(alice.gate[-1] + 2) * period
    if warmup_ns is None:
        warmup_ns = {CW: 10 * cfg.cycle, FRAME: 10 * cfg.cycle, SINKHOLE: 8 * cfg.cycle}[s.kind]
    t_act = -warmup_ns
    blind = blinding_waveform(s, cfg, t_act, t_end, period, gw, activate_at=t_act)
    idx = np.nonzero(detected)[0]
    routed = proto.route_powers(power[idx], eve_bit[idx], eve_basis[idx], bob_basis[idx], rx.split)
    tmpl = setup.policy.template(s.kind, gw)
    starts = alice.gate[idx] * period + tmpl.start
    waves = []
    for d in (0, 1):
        on = routed[:, d] > 0
        if on.any():
            trig = pulse_train(starts[on], tmpl.width, routed[on, d], tmpl.edge_time)
            waves.append(add(blind[d], trig))
        else:
            waves.append(blind[d])

    # warm-up (blinding already on, no key exchange yet); clicks here are the activation transient
    state = warm_state(rx, s, cfg)
    c_act = int(np.floor(t_act / cfg.cycle))
    pre = (cfg.slot_gates(-c_act) + c_act * cfg.gates_per_cycle) if c_act < 0 else np.zeros(0, np.int64)
    pre = pre[pre * period >= t_act]
    transient = 0
    busy = (0, 0)
    if pre.size:
        tl0 = det.run_timeline(rx, waves, gate_indices=pre, state=state, seed=seed, stream=20)
        transient = int(tl0.click.any(axis=1).sum())
        state = tl0.thermal.final
        t_done = float(tl0.thermal.edges[-1])
        if t_done < -period:
            # carry the thermal state across the break up to the first slot
            state = det.thermal_pass(rx, waves, t_done, -period, state).final
        _, _, busy = det.apply_dead_time(tl0.raw_click, rx.detectors[0].dead_gates,
                                         rx.shared_dead_time, tl0.gate_index)
    tl = det.run_timeline(rx, waves, gate_indices=alice.gate, state=state, seed=seed, stream=21,
                          busy=busy)
    clicks = tl.click
    a_key, b_key, dbl = proto.sift(alice, bob_basis, clicks)

    match_eb = eve_basis == bob_basis
    any_click = clicks.any(axis=1)
    unexpected = int(np.sum(any_click & ~detected))
    mismatch_clicks = int(np.sum(any_click & detected & ~match_eb))
    faked_double = int(np.sum(clicks[:, 0] & clicks[:, 1] & detected))
    wrong_det = int(np.sum(any_click & detected & match_eb & ~np.where(eve_bit == 1, clicks[:, 1], clicks[:, 0])))
    sk = b_key.indices
    known = (eve_basis[sk] == bob_basis[sk]) & (eve_bit[sk] == b_key.bits)
    capture = float(np.mean(known)) if sk.size else 0.0
    eta = rx.detectors[0].efficiency.plateau
    report = SessionReport(
        n_slots=len(alice), sifted_length=len(a_key), qber=proto.compute_qber(a_key, b_key),
        eve_capture_fraction=capture, double_click_count=dbl,
        per_frame_clicks=np.bincount(alice.frame, weights=any_click, minlength=n_frames).astype(int).tolist(),
        strategy=s.kind, faked_double_clicks=faked_double, mismatch_clicks=mismatch_clicks + wrong_det,
        unexpected_clicks=unexpected, eve_detections=int(detected.sum()), transient_clicks=transient,
        qber_floor=proto.dark_floor_qber(-np.expm1(-mu * eta), rx.detectors[0].dark_count_prob))
    for name in ("faked_double_clicks", "mismatch_clicks", "unexpected_clicks"):
        v = getattr(report, name)
        if v:
            log.warning('{"event": "attack-integrity-violation", "kind": "%s", "count": %d, "strategy": "%s"}',
                        name, v, s.kind)
    return report, dict(alice=alice, bob_basis=bob_basis, eve_basis=eve_basis, eve_bit=eve_bit,
                        clicks=clicks, alice_key=a_key, bob_key=b_key, timeline=tl, power=power)
