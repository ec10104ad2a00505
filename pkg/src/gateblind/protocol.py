"""Framed plug-and-play BB84 at the level of bases, bits and detector clicks.

Alice's qubits are grouped in frames of ``bits_per_frame`` slots on the
gate grid, each frame followed by a longer break.  Bob's receiver is
reduced to its final beam splitter: a basis match sends everything to the
detector named by the bit, a mismatch splits the light.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import detector as det
from .waveform import SplitRatio

Z, X = 0, 1


@dataclass(frozen=True)
class FrameConfig:
    bits_per_frame: int = 1072
    bit_period: float = 200.0          # ns
    frame_break: float = 250_000.0     # ns

    def __post_init__(self):
        if self.bits_per_frame < 1:
            raise ValueError("a frame needs at least one bit")
        if not self.frame_break > self.frame_length:
            raise ValueError("frame break must be longer than the frame")

    @property
    def frame_length(self) -> float:
        return self.bits_per_frame * self.bit_period

    @property
    def cycle(self) -> float:
        return self.frame_length + self.frame_break

    @property
    def gates_per_cycle(self) -> int:
        return int(round(self.cycle / self.bit_period))

    def slot_gates(self, n_frames: int) -> np.ndarray:
        """Absolute gate indices of every slot (frame c, bit j)."""
        f = np.arange(n_frames)[:, None] * self.gates_per_cycle
        return (f + np.arange(self.bits_per_frame)[None, :]).ravel()


@dataclass(frozen=True)
class Qubit:
    basis: int
    bit: int
    mean_photon_number: float = 1.0

    def __post_init__(self):
        if self.basis not in (Z, X) or self.bit not in (0, 1):
            raise ValueError("basis and bit must be 0 or 1")
        if not self.mean_photon_number > 0:
            raise ValueError("mean photon number must be positive")


@dataclass
class AliceRecord:
    basis: np.ndarray
    bit: np.ndarray
    gate: np.ndarray          # absolute gate index of each slot
    frame: np.ndarray         # frame number of each slot
    mu: float

    def __len__(self):
        return self.basis.size

    def slot_times(self, cfg: FrameConfig) -> np.ndarray:
        return self.gate * cfg.bit_period


def generate_frames(cfg: FrameConfig, n_frames: int, rng, mu: float = 1.0) -> AliceRecord:
    if n_frames < 1:
        raise ValueError("need at least one frame")
    n = n_frames * cfg.bits_per_frame
    basis = rng.integers(0, 2, n).astype(np.int8)
    bit = rng.integers(0, 2, n).astype(np.int8)
    gate = cfg.slot_gates(n_frames)
    frame = np.repeat(np.arange(n_frames), cfg.bits_per_frame)
    return AliceRecord(basis, bit, gate, frame, mu)


def schedule_duration(cfg: FrameConfig, n_frames: int) -> float:
    """Total time (ns) spanned by n frames including their breaks."""
    return n_frames * cfg.cycle


def bob_route(power, bit, source_basis, bob_basis, r: SplitRatio):
    """Split a classical pulse power (or waveform) between Bob's detectors."""
    if source_basis == bob_basis:
        return (power, 0 * power) if bit == 0 else (0 * power, power)
    if hasattr(power, "scaled"):
        from .waveform import split
        return split(power, r)
    return power * r.fraction_d0, power * r.fraction_d1


def route_powers(power, bit, source_basis, bob_basis, r: SplitRatio):
    """Vectorised :func:`bob_route` for per-slot pulse powers; returns (n, 2)."""
    power = np.asarray(power, float)
    match = np.asarray(source_basis) == np.asarray(bob_basis)
    bit = np.asarray(bit)
    out = np.empty(power.shape + (2,))
    out[..., 0] = np.where(match, np.where(bit == 0, power, 0.0), power * r.fraction_d0)
    out[..., 1] = np.where(match, np.where(bit == 1, power, 0.0), power * r.fraction_d1)
    return out


def route_photons(mu, bit, source_basis, bob_basis, rng=None, fock=False):
    """Photon numbers at Bob's detectors, shape (n, 2).

    Coherent pulses split their mean evenly on a basis mismatch; a single
    photon in Fock mode goes to a random detector.
    """
    bit = np.asarray(bit)
    match = np.asarray(source_basis) == np.asarray(bob_basis)
    n = bit.size
    mu = np.broadcast_to(np.asarray(mu, float), (n,))
    out = np.zeros((n, 2))
    if fock:
        coin = rng.integers(0, 2, n)
        target = np.where(match, bit, coin)
        out[np.arange(n), target] = mu
        return out
    out[:, 0] = np.where(match, np.where(bit == 0, mu, 0.0), 0.5 * mu)
    out[:, 1] = np.where(match, np.where(bit == 1, mu, 0.0), 0.5 * mu)
    return out


@dataclass
class SiftedKey:
    bits: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        if self.indices.size > 1 and np.any(np.diff(self.indices) <= 0):
            raise ValueError("sifted indices must be strictly increasing")

    def __len__(self):
        return self.bits.size

    def to_hex(self, width: int = 64) -> str:
        """Pack the key into bytes (MSB first, zero-padded) and emit hex lines."""
        packed = np.packbits(self.bits.astype(np.uint8)).tobytes().hex()
        return "\n".join(packed[i:i + width] for i in range(0, len(packed), width)) + "\n"

    @staticmethod
    def from_hex(text: str, n_bits: int, indices=None) -> "SiftedKey":
        raw = bytes.fromhex("".join(text.split()))
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[:n_bits].astype(np.int8)
        idx = np.arange(n_bits) if indices is None else np.asarray(indices)
        return SiftedKey(bits, idx)


def sift(alice: AliceRecord, bob_basis, clicks):
    """Keep basis-matched slots where exactly one of Bob's detectors clicked.

    Returns (alice_key, bob_key, double_clicks) where double_clicks counts
    every slot in which both detectors fired.
    """
    clicks = np.asarray(clicks, bool)
    single = clicks[:, 0] ^ clicks[:, 1]
    double = clicks[:, 0] & clicks[:, 1]
    keep = single & (np.asarray(bob_basis) == alice.basis)
    idx = np.nonzero(keep)[0]
    bob_bits = clicks[idx, 1].astype(np.int8)
    return SiftedKey(alice.bit[idx].copy(), idx), SiftedKey(bob_bits, idx), int(double.sum())


def compute_qber(a: SiftedKey, b: SiftedKey) -> float:
    common, ia, ib = np.intersect1d(a.indices, b.indices, return_indices=True)
    if common.size != len(a) or common.size != len(b):
        raise ValueError("keys do not align on the same slots")
    if common.size == 0:
        return 0.0
    return float(np.mean(a.bits[ia] != b.bits[ib]))


def dark_floor_qber(p_click_signal: float, p_dark: float) -> float:
    """QBER of a basis-matched slot from dark counts in the wrong detector.

    Single-click outcomes only: right = p_s (1 - p_d), wrong = p_d (1 - p_s).
    """
    right = p_click_signal * (1 - p_dark)
    wrong = p_dark * (1 - p_click_signal)
    return wrong / (right + wrong)


def expected_click_fraction(p_click: float, dead_gates: int) -> float:
    """Stationary fraction of gates with a latched click for a renewal
    process with per-gate click probability p and a dead time of D gates."""
    return p_click / (1 + dead_gates * p_click)


@dataclass
class SessionReport:
    n_slots: int
    sifted_length: int
    qber: float
    eve_capture_fraction: float
    double_click_count: int
    per_frame_clicks: list
    strategy: str = "none"
    faked_double_clicks: int = 0
    mismatch_clicks: int = 0
    unexpected_clicks: int = 0
    eve_detections: int = 0
    transient_clicks: int = 0
    qber_floor: float = 0.0
    notes: list = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.qber <= 1 or not 0 <= self.eve_capture_fraction <= 1:
            raise ValueError("fractions must lie in [0, 1]")

    @property
    def integrity_violations(self) -> int:
        return self.faked_double_clicks + self.mismatch_clicks + self.unexpected_clicks

    def to_dict(self):
        d = asdict(self)
        d["integrity_violations"] = self.integrity_violations
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def honest_receiver_clicks(rx: det.Receiver, cfg: FrameConfig, alice: AliceRecord, bob_basis,
                           seed: int, stream: int, fock: bool = False, waves=None, state=None):
    """Run Bob's detectors over Alice's slots; returns (clicks (n,2), timeline)."""
    from .waveform import OpticalWaveform
    rng = np.random.default_rng([seed, stream, 7])
    photons = route_photons(alice.mu, alice.bit, alice.basis, bob_basis, rng=rng, fock=fock)
    waves = waves or [OpticalWaveform.zero(), OpticalWaveform.zero()]
    tl = det.run_timeline(rx, waves, gate_indices=alice.gate, state=state, seed=seed, stream=stream,
                          photons=photons, fock=fock)
    return tl.click, tl


def run_session(rx: det.Receiver, cfg: FrameConfig, n_slots: int, seed: int, mu: float = 1.0,
                fock: bool = False):
    """Honest session without an eavesdropper."""
    n_frames = -(-n_slots // cfg.bits_per_frame)
    rng = np.random.default_rng([seed, 1])
    alice = generate_frames(cfg, n_frames, rng, mu)
    bob_basis = rng.integers(0, 2, len(alice)).astype(np.int8)
    clicks, tl = honest_receiver_clicks(rx, cfg, alice, bob_basis, seed, stream=2, fock=fock)
    a, b, dbl = sift(alice, bob_basis, clicks)
    eta = rx.detectors[0].efficiency.plateau
    p_s = -np.expm1(-mu * eta)
    report = SessionReport(
        n_slots=len(alice), sifted_length=len(a), qber=compute_qber(a, b),
        eve_capture_fraction=0.0, double_click_count=dbl,
        per_frame_clicks=np.bincount(alice.frame, weights=clicks.any(axis=1), minlength=n_frames).astype(int).tolist(),
        qber_floor=dark_floor_qber(p_s, rx.detectors[0].dark_count_prob))
    return report, (alice, bob_basis, clicks, a, b)
