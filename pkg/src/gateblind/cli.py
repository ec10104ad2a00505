"""Scenario runner: ``python -m gateblind SCENARIO --seed N [--config cfg.json] [--out DIR]``.

Exit codes: 0 success, 2 attack-integrity violation, 3 calibration
failure, 64 usage error (unknown scenario, bad flags or invalid config).
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import calibrate as cal
from . import detector as det
from . import eve
from . import protocol as proto
from . import thermal
from .waveform import SplitRatio

EXIT_OK, EXIT_INTEGRITY, EXIT_CALIBRATION, EXIT_USAGE = 0, 2, 3, 64

SCENARIOS = {
    "honest-baseline": "honest QKD session without an eavesdropper (dark-count QBER floor)",
    "cw-thermal-blind": "CW thermal blinding: click probability versus CW power",
    "frame-thermal-blind": "thermal blinding with pulses between frames",
    "sinkhole-blind": "sinkhole blinding through the AC-coupled comparator input",
    "full-attack-cw": "faked-state attack under CW thermal blinding",
    "full-attack-frames": "faked-state attack under inter-frame thermal blinding",
    "full-attack-sinkhole": "faked-state attack under sinkhole blinding",
    "efficiency-map": "quantum efficiency versus photon arrival time inside the gate",
    "heat-sweep": "cold-plate temperature and TEC current versus dissipated heat",
    "threshold-tables": "control-pulse power thresholds for never/always clicking",
}

DEFAULT_CONFIG = {
    "session": {"n_slots": 100_000, "mu": 1.0, "bits_per_frame": 1072, "bit_period": 200.0,
                "frame_break": 250_000.0},
    "receiver": {"split_d0": 0.4675, "dark_count_prob": 1e-4, "dead_gates": 50, "shared_dead_time": True},
    "thermal": {},
    "attack": {"cw_powers": [9.5e-3, 10.7e-3], "frame_powers": [3.5e-3, 4.0e-3],
               "sink_power": [500e-6, 500e-6], "trigger_power": None},
    "sweep": {"cw_total_powers": [0.0, 1e-3, 2e-3, 4e-3, 8e-3, 12e-3, 14e-3, 15e-3, 16e-3, 16.5e-3,
                                  17e-3, 17.5e-3, 18e-3, 18.5e-3, 18.7e-3, 18.8e-3, 18.9e-3, 19e-3,
                                  20e-3, 22e-3, 25e-3],
              "cw_gates": 10_000,
              "heat_loads": [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.6],
              "efficiency_offsets": [round(-1.0 + 0.2 * k, 1) for k in range(26)],
              "efficiency_gates": 20_000},
    "calibration": {"trials": 100, "tolerance": 0.10},
}

THERMAL_KEYS = set(thermal.ThermalParams.__dataclass_fields__)


class ConfigError(ValueError):
    def __init__(self, errors):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


def _merge(base, over, path, errors):
    out = copy.deepcopy(base)
    for k, v in over.items():
        p = f"{path}.{k}" if path else k
        if path == "thermal":
            if k not in THERMAL_KEYS:
                errors.append(f"{p}: unknown key")
                continue
            out[k] = v
        elif k not in base:
            errors.append(f"{p}: unknown key")
        elif isinstance(base[k], dict):
            if not isinstance(v, dict):
                errors.append(f"{p}: expected an object")
            else:
                out[k] = _merge(base[k], v, p, errors)
        else:
            out[k] = v
    return out


def _num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate_config(cfg: dict | None) -> dict:
    """Merge ``cfg`` over the defaults and check every bound.

    Returns the normalised config or raises ConfigError listing each
    violation with its path.
    """
    errors = []
    if cfg is None:
        cfg = {}
    if not isinstance(cfg, dict):
        raise ConfigError(["config: expected a JSON object"])
    out = _merge(DEFAULT_CONFIG, cfg, "", errors)
    s, r, a, sw, c = out["session"], out["receiver"], out["attack"], out["sweep"], out["calibration"]

    def need(cond, msg):
        if not cond:
            errors.append(msg)

    for k in ("n_slots", "bits_per_frame"):
        need(isinstance(s[k], int) and not isinstance(s[k], bool) and s[k] >= 1, f"session.{k}: must be an integer >= 1")
    for k in ("mu", "bit_period", "frame_break"):
        need(_num(s[k]) and s[k] > 0, f"session.{k}: must be > 0")
    if all(_num(s[k]) for k in ("bits_per_frame", "bit_period", "frame_break")):
        length = s["bits_per_frame"] * s["bit_period"]
        need(s["frame_break"] > length, f"session.frame_break: must exceed the frame length {length} ns")
    need(_num(r["split_d0"]) and 0 < r["split_d0"] < 1, "receiver.split_d0: must lie in (0, 1)")
    need(_num(r["dark_count_prob"]) and 0 <= r["dark_count_prob"] <= 1, "receiver.dark_count_prob: must lie in [0, 1]")
    need(isinstance(r["dead_gates"], int) and 0 <= r["dead_gates"] <= 50, "receiver.dead_gates: integer in [0, 50]")
    need(isinstance(r["shared_dead_time"], bool), "receiver.shared_dead_time: must be true or false")
    for k in ("cw_powers", "frame_powers", "sink_power"):
        v = a[k]
        ok = isinstance(v, list) and len(v) == 2 and all(_num(x) for x in v)
        need(ok, f"attack.{k}: expected two numbers")
        if ok:
            for i, x in enumerate(v):
                need(x >= 0, f"attack.{k}[{i}]: power must be >= 0")
    tp = a["trigger_power"]
    need(tp is None or (_num(tp) and tp > 0), "attack.trigger_power: must be null or > 0")
    for k in ("cw_total_powers", "heat_loads", "efficiency_offsets"):
        v = sw[k]
        ok = isinstance(v, list) and len(v) >= 1 and all(_num(x) for x in v)
        need(ok, f"sweep.{k}: expected a non-empty list of numbers")
        if ok:
            need(all(b > a_ for a_, b in zip(v, v[1:])), f"sweep.{k}: must be strictly increasing")
            if k != "efficiency_offsets":
                need(min(v) >= 0, f"sweep.{k}: values must be >= 0")
    for k in ("cw_gates", "efficiency_gates"):
        need(isinstance(sw[k], int) and sw[k] >= 100, f"sweep.{k}: integer >= 100")
    need(isinstance(c["trials"], int) and c["trials"] >= 1, "calibration.trials: integer >= 1")
    need(_num(c["tolerance"]) and c["tolerance"] > 0, "calibration.tolerance: must be > 0")
    if not errors:
        try:
            thermal.ThermalParams(**out["thermal"])
        except (TypeError, ValueError) as e:
            errors.append(f"thermal: {e}")
    if errors:
        raise ConfigError(errors)
    return out


def build_receiver(cfg: dict) -> det.Receiver:
    r = cfg["receiver"]
    th = {k: (tuple(v) if isinstance(v, list) else v) for k, v in cfg["thermal"].items()}
    dets = tuple(replace(d, dark_count_prob=r["dark_count_prob"], dead_gates=r["dead_gates"])
                 for d in det.default_detectors())
    return det.Receiver(dets, thermal.ThermalParams(**th), SplitRatio(r["split_d0"]), r["shared_dead_time"])


def build_frames(cfg: dict) -> proto.FrameConfig:
    s = cfg["session"]
    return proto.FrameConfig(s["bits_per_frame"], float(s["bit_period"]), float(s["frame_break"]))


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, np.generic):
        return o.item()
    return o


def dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


class Outputs:
    """Collects artifacts for one scenario run and writes the manifest."""

    def __init__(self, out_dir: str, fmt: str):
        self.dir = out_dir
        self.fmt = fmt
        self.files = {}
        os.makedirs(out_dir, exist_ok=True)

    def write(self, name: str, text: str):
        with open(os.path.join(self.dir, name), "w", newline="") as fh:
            fh.write(text)
        self.files[name] = hashlib.sha256(text.encode()).hexdigest()

    def sweep(self, stem: str, sr: cal.SweepResult):
        if self.fmt == "csv":
            self.write(stem + ".csv", sr.to_csv())
        else:
            self.write(stem + ".json", sr.to_json())

    def table(self, stem: str, header, rows):
        if self.fmt == "csv":
            lines = [",".join(header)] + [",".join(str(v) for v in row) for row in rows]
            self.write(stem + ".csv", "\n".join(lines) + "\n")
        else:
            self.write(stem + ".json", dump_json([dict(zip(header, row)) for row in rows]))

    def manifest(self, scenario, seed, cfg, rx, frames, status, summary):
        m = {"scenario": scenario, "reproduces": SCENARIOS[scenario], "seed": seed, "config": cfg,
             "parameters": {"receiver": asdict(rx), "frames": asdict(frames)},
             "exit_code": status, "summary": summary, "artifacts": dict(sorted(self.files.items()))}
        with open(os.path.join(self.dir, "manifest.json"), "w", newline="") as fh:
            fh.write(dump_json(m))


# ---------------------------------------------------------------------------
# scenarios

def _report_artifacts(out: Outputs, report: proto.SessionReport, a_key, b_key):
    out.write("report.json", dump_json(report.to_dict()))
    out.write("alice_key.hex", a_key.to_hex())
    out.write("bob_key.hex", b_key.to_hex())
    out.table("frame_clicks", ["frame", "clicks"], list(enumerate(report.per_frame_clicks)))


def run_honest(cfg, seed, rx, frames, out):
    s = cfg["session"]
    report, (alice, bob_basis, clicks, a, b) = proto.run_session(rx, frames, s["n_slots"], seed, s["mu"])
    _report_artifacts(out, report, a, b)
    return EXIT_OK, {"qber": report.qber, "qber_floor": report.qber_floor, "sifted_length": report.sifted_length}


def _tolerance_check(values, targets, tol):
    bad = {k: v for k, v in values.items() if abs(v / targets[k] - 1) > tol}
    return bad


def run_cw_blind(cfg, seed, rx, frames, out):
    sw = cfg["sweep"]
    sr = cal.sweep_cw_click_probability(sw["cw_total_powers"], rx, sw["cw_gates"], seed)
    out.sweep("cw_click_probability", sr)
    onsets = {f"det{d}": cal.cw_onset(rx, d) for d in (0, 1)}
    bad = _tolerance_check(onsets, {"det0": 8.8e-3, "det1": 10e-3}, cfg["calibration"]["tolerance"])
    return (EXIT_CALIBRATION if bad else EXIT_OK), {"cw_onset_W": onsets, "out_of_tolerance": sorted(bad)}


def run_frame_blind(cfg, seed, rx, frames, out):
    a = cfg["attack"]
    bits = np.arange(frames.bits_per_frame)
    ctx = cal.frame_context(rx, a["frame_powers"], frames, bits=bits)
    # per-slot picture of the frame in the periodic state
    k = ctx.run.step_of(bits * rx.period)
    rows = []
    blind = {}
    for d in (0, 1):
        cfgd = rx.detectors[d]
        hpf = det.optical_highpass(cfgd, ctx.waves[d], ctx.run, d, -2000.0, frames.frame_length + rx.period)
        b = det.prepare_gates(cfgd, ctx.waves[d], bits * rx.period, ctx.run.t_chip[k, d], ctx.run.v_op[k, d],
                              hpf, np.random.default_rng([seed, d]))
        blind[d] = b.sensitive.copy()
        if d == 0:
            ex0, tc0 = b.excess, ctx.run.t_chip[k, 0]
        else:
            ex1, tc1 = b.excess, ctx.run.t_chip[k, 1]
    for j in range(bits.size):
        rows.append([int(bits[j]), float(ex0[j]), float(tc0[j]), int(not blind[0][j]),
                     float(ex1[j]), float(tc1[j]), int(not blind[1][j])])
    out.table("frame_slots", ["bit", "excess0_V", "t_chip0_C", "blind0", "excess1_V", "t_chip1_C", "blind1"], rows)
    cyc = det.thermal_pass(rx, ctx.waves, ctx.run.edges[-1], ctx.run.edges[-1] + frames.cycle, ctx.run.final)
    out.write("thermal_cycle.csv", cyc.csv())
    onsets = {f"det{d}": cal.frame_onset(rx, d, cfg=frames) for d in (0, 1)}
    heat = float(np.mean(np.sum(cyc.v_op * cyc.i_dc + cyc.p_mean, axis=1)))
    summary = {"all_blind": [bool(not blind[d].any()) for d in (0, 1)],
               "sensor_C": float(np.mean(cyc.sensor)), "plate_C": float(np.mean(cyc.t_plate)),
               "i_tec_A": float(np.mean(cyc.i_tec)), "mean_heat_W": heat, "frame_onset_W": onsets}
    bad = _tolerance_check(onsets, {"det0": 1.5e-3, "det1": 1.7e-3}, cfg["calibration"]["tolerance"])
    summary["out_of_tolerance"] = sorted(bad)
    ok = all(summary["all_blind"]) and not bad
    return (EXIT_OK if ok else EXIT_CALIBRATION), summary


def run_sinkhole_blind(cfg, seed, rx, frames, out):
    pw = cfg["attack"]["sink_power"]
    grid = [50e-6, 100e-6, 150e-6, 200e-6, 250e-6, 300e-6, 350e-6, 400e-6, 450e-6, 500e-6, 600e-6]
    cols = {"blind0": [], "blind1": [], "offset0_V": [], "offset1_V": []}
    for p in grid:
        ctx = cal.sinkhole_context(rx, p)
        for d in (0, 1):
            cols[f"blind{d}"].append(float(not cal.can_click(ctx, d)))
            hpf = det.optical_highpass(rx.detectors[d], ctx.waves[d], ctx.run, d, -2000.0, rx.period)
            t_ref = rx.detectors[d].efficiency.rise + rx.detectors[d].circuit.avalanche_rise
            cols[f"offset{d}_V"].append(float(hpf(np.array([t_ref]))[0]))
    out.sweep("sinkhole_blindness", cal.SweepResult("power_W", grid, cols,
                                                    {"x_label": "sinkhole pulse peak power (W)",
                                                     "y_label": "blind flag / comparator offset at gate (V)"}))
    ctx = cal.sinkhole_context(rx, pw)
    at_power = [bool(not cal.can_click(ctx, d)) for d in (0, 1)]
    onsets = {f"det{d}": cal.sinkhole_onset(rx, d) for d in (0, 1)}
    bad = _tolerance_check(onsets, {"det0": 205e-6, "det1": 400e-6}, cfg["calibration"]["tolerance"])
    ok = all(at_power) and not bad
    return (EXIT_OK if ok else EXIT_CALIBRATION), {"blind_at_config_power": at_power, "sinkhole_onset_W": onsets,
                                                   "out_of_tolerance": sorted(bad)}


def calibrated_setup(kind, cfg, rx, frames, seed):
    """Measure the thresholds Eve needs on (a copy of) Bob's receiver."""
    a = cfg["attack"]
    trials = cfg["calibration"]["trials"]
    s = eve.BlindingStrategy(kind, cw_powers=tuple(a["cw_powers"]), frame_powers=tuple(a["frame_powers"]),
                             sink_power=tuple(a["sink_power"]))
    if kind == eve.CW:
        rep = cal.threshold_report(cal.cw_context(rx, s.cw_powers), trials=trials, seed=seed)
        return eve.AttackSetup(s, thresholds=rep, trigger_power=a["trigger_power"]), {"thresholds": asdict(rep)}
    if kind == eve.FRAME:
        fc = cal.frame_context(rx, s.frame_powers, frames)
        second = cal.threshold_report(fc, int(fc.probe_gates[0]), trials, seed)
        last = cal.threshold_report(fc, int(fc.probe_gates[1]), trials, seed)
        return (eve.AttackSetup(s, frame_thresholds=(second, last), trigger_power=a["trigger_power"]),
                {"second_bit": asdict(second), "last_bit": asdict(last)})
    rep = cal.threshold_report(cal.sinkhole_context(rx, s.sink_power), trials=trials, seed=seed)
    return eve.AttackSetup(s, thresholds=rep, trigger_power=a["trigger_power"]), {"thresholds": asdict(rep)}


def _attack(kind):
    def run(cfg, seed, rx, frames, out):
        try:
            setup, th = calibrated_setup(kind, cfg, rx, frames, seed)
            report, dd = eve.run_attack(rx, frames, cfg["session"]["n_slots"], setup, seed, cfg["session"]["mu"])
        except (cal.CalibrationError, eve.StrategyError) as e:
            return EXIT_CALIBRATION, {"error": str(e)}
        out.write("thresholds.json", dump_json(th))
        _report_artifacts(out, report, dd["alice_key"], dd["bob_key"])
        eve_bits = dd["eve_bit"][dd["bob_key"].indices]
        summary = {"eve_capture_fraction": report.eve_capture_fraction, "qber": report.qber,
                   "qber_floor": report.qber_floor, "integrity_violations": report.integrity_violations,
                   "eve_key_matches_bob": bool(np.array_equal(eve_bits, dd["bob_key"].bits)),
                   "transient_clicks": report.transient_clicks}
        return (EXIT_INTEGRITY if report.integrity_violations else EXIT_OK), summary
    return run


def run_efficiency(cfg, seed, rx, frames, out):
    sw = cfg["sweep"]
    sr = cal.measure_efficiency_curve(sw["efficiency_offsets"], rx, 0, cfg["session"]["mu"],
                                      sw["efficiency_gates"], seed)
    out.sweep("efficiency_map", sr)
    z = np.abs(sr.columns["eta_est"] - sr.columns["eta_model"]) / np.maximum(sr.columns["eta_err"], 1e-12)
    return EXIT_OK, {"max_deviation_sigma": float(z.max())}


def run_heat(cfg, seed, rx, frames, out):
    sr = cal.sweep_heat_vs_plate(cfg["sweep"]["heat_loads"], rx.thermal)
    out.sweep("heat_vs_plate", sr)
    cd = cal.cooldown(rx, tuple(cfg["attack"]["cw_powers"]))
    return EXIT_OK, {"cooldown": cd}


def run_tables(cfg, seed, rx, frames, out):
    trials = cfg["calibration"]["trials"]
    tol = cfg["calibration"]["tolerance"]
    try:
        tabs = cal.threshold_tables(rx, trials, seed)
    except cal.CalibrationError as e:
        return EXIT_CALIBRATION, {"error": str(e)}
    rows = []
    bad = []
    for tab, rep in tabs.items():
        ref = cal.MEASURED_TABLES[tab]
        for d in (0, 1):
            for j, (name, v) in enumerate((("p0", rep.p0[d]), ("p100", rep.p100[d]))):
                r = v / ref[j][d] - 1
                rows.append([tab, d, name, float(v), float(ref[j][d]), float(r)])
                if abs(r) > tol:
                    bad.append(f"{tab}.{name}.det{d}")
    out.table("threshold_tables", ["table", "detector", "level", "power_W", "target_W", "rel_residual"], rows)
    verdicts = {k: eve.check_condition(v) for k, v in tabs.items()}
    return (EXIT_CALIBRATION if bad else EXIT_OK), {"condition_ok": verdicts, "out_of_tolerance": bad}


RUNNERS = {
    "honest-baseline": run_honest,
    "cw-thermal-blind": run_cw_blind,
    "frame-thermal-blind": run_frame_blind,
    "sinkhole-blind": run_sinkhole_blind,
    "full-attack-cw": _attack(eve.CW),
    "full-attack-frames": _attack(eve.FRAME),
    "full-attack-sinkhole": _attack(eve.SINKHOLE),
    "efficiency-map": run_efficiency,
    "heat-sweep": run_heat,
    "threshold-tables": run_tables,
}


def run_scenario(name: str, cfg: dict, seed: int, out_dir: str, fmt: str = "csv") -> int:
    if name not in RUNNERS:
        raise KeyError(name)
    cfg = validate_config(cfg)
    rx = build_receiver(cfg)
    frames = build_frames(cfg)
    out = Outputs(out_dir, fmt)
    status, summary = RUNNERS[name](cfg, seed, rx, frames, out)
    out.manifest(name, seed, cfg, rx, frames, status, summary)
    return status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def make_parser():
    p = _Parser(prog="python -m gateblind", description="Detector-blinding attack simulator scenarios.",
                epilog="scenarios: " + ", ".join(SCENARIOS))
    p.add_argument("scenario", help="scenario name")
    p.add_argument("--config", help="JSON file with parameter overrides")
    p.add_argument("--seed", type=int, required=True, help="random seed (required)")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="format of tabular artifacts")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.scenario not in RUNNERS:
        parser.print_usage(sys.stderr)
        print(f"unknown scenario {args.scenario!r}; choose from: {', '.join(SCENARIOS)}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed < 0:
        print("--seed must be non-negative", file=sys.stderr)
        return EXIT_USAGE
    cfg = {}
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            print(f"cannot read config: {e}", file=sys.stderr)
            return EXIT_USAGE
    try:
        status = run_scenario(args.scenario, cfg, args.seed, args.out, args.format)
    except ConfigError as e:
        for msg in e.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps({"scenario": args.scenario, "exit_code": status, "out": args.out}))
    return status
