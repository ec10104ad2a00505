"""Piecewise-linear optical power timelines.

Time is in nanoseconds and power in watts throughout.  A waveform is a
sorted list of breakpoints joined by straight lines; before the first
breakpoint the waveform sits at ``lead`` (0 unless a CW floor was
composed in) and after the last one it holds the final value.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# smallest edge used when a pulse asks for an instantaneous edge; keeps
# breakpoint times strictly increasing
MIN_EDGE_NS = 1e-6


class WaveformError(ValueError):
    pass


@dataclass(frozen=True)
class PulseSpec:
    """A trapezoidal pulse.

    ``start`` is the half-maximum point of the rising edge and ``width``
    is the full width at half maximum, so the pulse energy is exactly
    ``peak_power * width`` whatever the edge time.
    """

    start: float
    width: float
    peak_power: float
    edge_time: float = 1.0

    def __post_init__(self):
        if not self.width > 0:
            raise WaveformError(f"pulse width must be > 0, got {self.width}")
        if self.peak_power < 0:
            raise WaveformError(f"peak power must be >= 0, got {self.peak_power}")
        if self.edge_time < 0 or self.edge_time > self.width:
            raise WaveformError(
                f"edge time must lie in [0, width], got {self.edge_time} for width {self.width}")

    @property
    def foot_start(self) -> float:
        return self.start - 0.5 * self._edge

    @property
    def foot_end(self) -> float:
        return self.start + self.width + 0.5 * self._edge

    @property
    def _edge(self) -> float:
        return max(self.edge_time, MIN_EDGE_NS)

    def corners(self):
        e = self._edge
        t = np.array([self.start - e / 2, self.start + e / 2,
                      self.start + self.width - e / 2, self.start + self.width + e / 2])
        p = np.array([0.0, self.peak_power, self.peak_power, 0.0])
        return t, p

    @property
    def energy(self) -> float:
        """Pulse energy in joules."""
        return self.peak_power * self.width * 1e-9


@dataclass(frozen=True)
class SplitRatio:
    fraction_d0: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.fraction_d0 <= 1.0:
            raise WaveformError(f"split fraction must be in [0, 1], got {self.fraction_d0}")

    @property
    def fraction_d1(self) -> float:
        return 1.0 - self.fraction_d0

    def fractions(self):
        return (self.fraction_d0, self.fraction_d1)


@dataclass(frozen=True, eq=False)
class OpticalWaveform:
    times: np.ndarray
    powers: np.ndarray
    lead: float = 0.0
    _cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        t = np.ascontiguousarray(self.times, dtype=np.float64)
        p = np.ascontiguousarray(self.powers, dtype=np.float64)
        if t.ndim != 1 or t.shape != p.shape:
            raise WaveformError("times and powers must be 1-d arrays of equal length")
        if t.size and np.any(np.diff(t) <= 0):
            raise WaveformError("breakpoint times must be strictly increasing")
        if np.any(p < 0) or self.lead < 0:
            raise WaveformError("optical power must be non-negative")
        t.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "powers", p)
        cum = np.zeros(t.size)
        if t.size > 1:
            cum[1:] = np.cumsum(0.5 * (p[1:] + p[:-1]) * np.diff(t))
        cum.setflags(write=False)
        object.__setattr__(self, "_cum", cum)

    def __len__(self):
        return self.times.size

    def __eq__(self, other):
        if not isinstance(other, OpticalWaveform):
            return NotImplemented
        return (self.lead == other.lead and np.array_equal(self.times, other.times)
                and np.array_equal(self.powers, other.powers))

    @classmethod
    def constant(cls, power: float) -> "OpticalWaveform":
        return cls(np.array([0.0]), np.array([float(power)]), lead=float(power))

    @classmethod
    def zero(cls) -> "OpticalWaveform":
        return cls(np.zeros(0), np.zeros(0))

    @property
    def tail(self) -> float:
        return float(self.powers[-1]) if self.times.size else self.lead

    def __call__(self, t):
        return power_at(self, t)

    def scaled(self, k: float) -> "OpticalWaveform":
        if k < 0:
            raise WaveformError("scale factor must be non-negative")
        return OpticalWaveform(self.times, self.powers * k, self.lead * k)

    def window(self, t0: float, t1: float):
        """Breakpoints inside [t0, t1] with the two end values added."""
        i0, i1 = np.searchsorted(self.times, [t0, t1], side="right")
        t = np.concatenate([[t0], self.times[i0:i1], [t1]])
        p = power_at(self, t)
        keep = np.concatenate([[True], np.diff(t) > 0])
        return t[keep], p[keep]


def _cum_at(w: OpticalWaveform, t):
    """Integral of w from the first breakpoint to t (W*ns); negative before it."""
    t = np.asarray(t, dtype=np.float64)
    if w.times.size == 0:
        return w.lead * t
    t0 = w.times[0]
    k = np.clip(np.searchsorted(w.times, t, side="right") - 1, 0, w.times.size - 1)
    dt = t - w.times[k]
    pk = w.powers[k]
    nxt = np.minimum(k + 1, w.times.size - 1)
    span = w.times[nxt] - w.times[k]
    with np.errstate(invalid="ignore", divide="ignore"):
        slope = np.where(span > 0, (w.powers[nxt] - pk) / np.where(span > 0, span, 1.0), 0.0)
    inside = w._cum[k] + pk * dt + 0.5 * slope * dt * dt
    after = w._cum[-1] + w.powers[-1] * (t - w.times[-1])
    before = w.lead * (t - t0)
    return np.where(t < t0, before, np.where(t >= w.times[-1], after, inside))


def power_at(w: OpticalWaveform, t):
    """Interpolated power at time(s) t."""
    t = np.asarray(t, dtype=np.float64)
    if w.times.size == 0:
        out = np.full(t.shape, w.lead)
    else:
        out = np.interp(t, w.times, w.powers, left=w.lead, right=w.powers[-1])
    return float(out) if out.ndim == 0 else out


def energy(w: OpticalWaveform, t0: float, t1: float) -> float:
    """Exact optical energy in joules delivered between t0 and t1."""
    if not t0 < t1:
        raise WaveformError(f"energy needs t0 < t1, got {t0} >= {t1}")
    return float(_cum_at(w, t1) - _cum_at(w, t0)) * 1e-9


def mean_power(w: OpticalWaveform, t0, t1):
    """Average power over each interval [t0, t1) (vectorised)."""
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    return (_cum_at(w, t1) - _cum_at(w, t0)) / (t1 - t0)


def split(w: OpticalWaveform, r: SplitRatio):
    """Beam-splitter outputs; the second output is the remainder of the first."""
    a = w.scaled(r.fraction_d0)
    b = OpticalWaveform(w.times, w.powers - a.powers, w.lead - a.lead)
    return a, b


def add(*ws: OpticalWaveform) -> OpticalWaveform:
    """Pointwise sum of waveforms (exact for piecewise-linear inputs)."""
    ws = [w for w in ws if w is not None]
    if not ws:
        return OpticalWaveform.zero()
    t = np.unique(np.concatenate([w.times for w in ws]))
    p = sum(np.asarray(power_at(w, t)).reshape(t.shape) for w in ws)
    return OpticalWaveform(t, p, lead=sum(w.lead for w in ws))


def _overlaps(starts, ends):
    return np.nonzero(starts[1:] < ends[:-1])[0]


def compose(pulses: Sequence[PulseSpec], cw_floor: float = 0.0, additive: bool = False) -> OpticalWaveform:
    """Build a waveform from trapezoidal pulses on top of a CW floor.

    Overlapping pulses are rejected unless ``additive`` is set, in which
    case they are summed.
    """
    if cw_floor < 0:
        raise WaveformError("CW floor must be non-negative")
    if not pulses:
        if cw_floor == 0:
            return OpticalWaveform.zero()
        return OpticalWaveform.constant(cw_floor)
    order = sorted(range(len(pulses)), key=lambda k: pulses[k].start)
    ps = [pulses[k] for k in order]
    starts = np.array([p.foot_start for p in ps])
    ends = np.array([p.foot_end for p in ps])
    bad = _overlaps(starts, ends)
    if bad.size and not additive:
        pairs = [(order[k], order[k + 1]) for k in bad]
        raise WaveformError(f"overlapping pulses at indices {pairs}")
    if bad.size:
        total = add(*[OpticalWaveform(*p.corners()) for p in ps])
        return OpticalWaveform(total.times, total.powers + cw_floor, lead=cw_floor)
    t = np.concatenate([p.corners()[0] for p in ps])
    pw = np.concatenate([p.corners()[1] for p in ps])
    return _from_sorted_corners(t, pw, cw_floor)


def _from_sorted_corners(t, p, floor):
    # adjacent pulses may share a foot; collapse those duplicates
    keep = np.ones(t.size, dtype=bool)
    keep[1:] = np.diff(t) > 0
    return OpticalWaveform(t[keep], p[keep] + floor, lead=floor)


def pulse_train(starts, width: float, peaks, edge_time: float = 1.0, cw_floor: float = 0.0) -> OpticalWaveform:
    """Vectorised ``compose`` for many equal-width pulses.

    ``peaks`` may be a scalar or one value per start.  Starts must be
    sorted and the pulses must not overlap.
    """
    starts = np.asarray(starts, dtype=np.float64)
    peaks = np.broadcast_to(np.asarray(peaks, dtype=np.float64), starts.shape)
    if starts.size == 0:
        return compose([], cw_floor)
    PulseSpec(0.0, width, 0.0, edge_time)  # validates width/edge
    if np.any(peaks < 0):
        raise WaveformError("peak power must be >= 0")
    e = max(edge_time, MIN_EDGE_NS)
    if np.any(np.diff(starts) < 0):
        raise WaveformError("pulse starts must be sorted")
    bad = _overlaps(starts - e / 2, starts + width + e / 2)
    if bad.size:
        raise WaveformError(f"overlapping pulses at indices {[(k, k + 1) for k in bad[:10]]}")
    offs = np.array([-e / 2, e / 2, width - e / 2, width + e / 2])
    t = (starts[:, None] + offs[None, :]).ravel()
    p = (peaks[:, None] * np.array([0.0, 1.0, 1.0, 0.0])[None, :]).ravel()
    return _from_sorted_corners(t, p, cw_floor)


def to_csv(w: OpticalWaveform, path=None) -> str:
    """Two-column CSV (time_ns, power_W).  Returns the text; writes it if a path is given."""
    buf = io.StringIO()
    buf.write("time_ns,power_W\n")
    t, p = w.times, w.powers
    if w.lead != (p[0] if p.size else w.lead) or t.size == 0:
        # make a leading level explicit; only exact when it continues
        # smoothly into the first breakpoint
        first = t[0] - 1.0 if t.size else 0.0
        t = np.concatenate([[first], t])
        p = np.concatenate([[w.lead], p])
    for ti, pi in zip(t.tolist(), p.tolist()):
        buf.write(f"{ti!r},{pi!r}\n")
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def from_csv(source) -> OpticalWaveform:
    """Read a waveform written by :func:`to_csv` (path or text).

    The first row's power is taken as the level before the first breakpoint.
    """
    if isinstance(source, str) and "\n" in source:
        lines = source.splitlines()
    else:
        with open(source) as fh:
            lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "time_ns,power_W":
        raise WaveformError("expected header 'time_ns,power_W'")
    rows = [ln.split(",") for ln in lines[1:] if ln.strip()]
    t = np.array([float(a) for a, _ in rows])
    p = np.array([float(b) for _, b in rows])
    lead = float(p[0]) if p.size else 0.0
    return OpticalWaveform(t, p, lead=lead)

