import json
import subprocess
import sys

import numpy as np
import pytest

from gateblind import cli
from gateblind.calibrate import SweepResult
from gateblind.protocol import SiftedKey

SMALL = {"session": {"n_slots": 3000}}


def run(tmp_path, *argv, config=None, name="out"):
    args = list(argv)
    if config is not None:
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(config))
        args += ["--config", str(path)]
    out = tmp_path / name
    return cli.main(args + ["--out", str(out)]), out


def test_validate_defaults():
    cfg = cli.validate_config(None)
    assert cfg["session"]["n_slots"] == 100_000
    assert cfg["receiver"]["split_d0"] == 0.4675


@pytest.mark.parametrize("bad, fragment", [
    ({"session": {"n_slots": 0}}, "session.n_slots"),
    ({"session": {"bogus": 1}}, "session.bogus: unknown key"),
    ({"attack": {"cw_powers": [-1e-3, 1e-3]}}, "attack.cw_powers[0]"),
    ({"attack": {"sink_power": [1e-3]}}, "attack.sink_power"),
    ({"session": {"frame_break": 100.0}}, "session.frame_break"),
    ({"receiver": {"split_d0": 1.5}}, "receiver.split_d0"),
    ({"receiver": {"dead_gates": 80}}, "receiver.dead_gates"),
    ({"sweep": {"heat_loads": [0.2, 0.1]}}, "strictly increasing"),
    ({"thermal": {"r_chip_plate": [100.0, 200.0]}}, "thermal"),
    ({"thermal": {"nonsense": 1.0}}, "thermal.nonsense"),
    ({"session": 5}, "expected an object"),
])
def test_validate_rejects(bad, fragment):
    with pytest.raises(cli.ConfigError) as e:
        cli.validate_config(bad)
    assert any(fragment in m for m in e.value.errors)


def test_validate_collects_all_errors():
    with pytest.raises(cli.ConfigError) as e:
        cli.validate_config({"session": {"n_slots": -1, "mu": 0}, "receiver": {"split_d0": 2}})
    assert len(e.value.errors) == 3


def test_exit_ok_honest_and_artifacts(tmp_path, capsys):
    code, out = run(tmp_path, "honest-baseline", "--seed", "1", config=SMALL)
    assert code == cli.EXIT_OK
    line = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert line["exit_code"] == 0 and line["scenario"] == "honest-baseline"
    m = json.loads((out / "manifest.json").read_text())
    assert m["seed"] == 1 and m["exit_code"] == 0
    assert set(m["artifacts"]) == {"report.json", "alice_key.hex", "bob_key.hex", "frame_clicks.csv"}
    report = json.loads((out / "report.json").read_text())
    a = SiftedKey.from_hex((out / "alice_key.hex").read_text(), report["sifted_length"])
    b = SiftedKey.from_hex((out / "bob_key.hex").read_text(), report["sifted_length"])
    assert np.mean(a.bits != b.bits) == pytest.approx(report["qber"])
    rows = (out / "frame_clicks.csv").read_text().splitlines()
    assert rows[0] == "frame,clicks" and len(rows) == 1 + 3
    import hashlib
    for name, digest in m["artifacts"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest


def test_json_format(tmp_path):
    code, out = run(tmp_path, "honest-baseline", "--seed", "1", "--format", "json", config=SMALL)
    assert code == 0
    rows = json.loads((out / "frame_clicks.json").read_text())
    assert rows[0].keys() == {"frame", "clicks"}


def test_sweep_csv_and_json(tmp_path):
    cfg = {"sweep": {"heat_loads": [0.0, 0.4]}, "attack": {"cw_powers": [9.5e-3, 10.7e-3]}}
    code, out = run(tmp_path, "heat-sweep", "--seed", "0", config=cfg, name="csv")
    assert code == 0
    sr = SweepResult.from_csv((out / "heat_vs_plate.csv").read_text())
    assert sr.x_name == "load_W" and list(sr.x) == [0.0, 0.4]
    code, out = run(tmp_path, "heat-sweep", "--seed", "0", "--format", "json", config=cfg, name="js")
    js = SweepResult.from_json((out / "heat_vs_plate.json").read_text())
    np.testing.assert_allclose(js.columns["t_plate"], sr.columns["t_plate"])
    summary = json.loads((out / "manifest.json").read_text())["summary"]
    assert summary["cooldown"]["regain_plate"][0] == pytest.approx(-39.8, abs=0.1)


def test_exit_integrity(tmp_path):
    cfg = {"session": {"n_slots": 3000}, "attack": {"trigger_power": 0.02}, "calibration": {"trials": 20}}
    code, out = run(tmp_path, "full-attack-cw", "--seed", "2", config=cfg)
    assert code == cli.EXIT_INTEGRITY
    m = json.loads((out / "manifest.json").read_text())
    assert m["summary"]["integrity_violations"] > 0 and m["exit_code"] == 2


def test_exit_calibration(tmp_path):
    cfg = {"sweep": {"cw_total_powers": [0.0, 25e-3], "cw_gates": 200}, "calibration": {"tolerance": 1e-9}}
    code, out = run(tmp_path, "cw-thermal-blind", "--seed", "0", config=cfg)
    assert code == cli.EXIT_CALIBRATION
    m = json.loads((out / "manifest.json").read_text())
    assert m["summary"]["out_of_tolerance"] == ["det0", "det1"]


def test_exit_calibration_when_not_blind(tmp_path):
    cfg = {"session": {"n_slots": 1000}, "attack": {"sink_power": [0.0, 0.0]}, "calibration": {"trials": 10}}
    code, _ = run(tmp_path, "full-attack-sinkhole", "--seed", "0", config=cfg)
    assert code == cli.EXIT_CALIBRATION


def test_usage_errors(tmp_path, capsys):
    assert run(tmp_path, "no-such-scenario", "--seed", "1")[0] == cli.EXIT_USAGE
    assert "unknown scenario" in capsys.readouterr().err
    assert run(tmp_path, "honest-baseline", "--seed", "-3")[0] == cli.EXIT_USAGE
    bad = tmp_path / "broken.json"
    bad.write_text("{not json")
    assert cli.main(["honest-baseline", "--seed", "1", "--config", str(bad)]) == cli.EXIT_USAGE
    assert cli.main(["honest-baseline", "--seed", "1", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_USAGE
    code, _ = run(tmp_path, "honest-baseline", "--seed", "1", config={"session": {"n_slots": "many"}})
    assert code == cli.EXIT_USAGE
    assert "config error: session.n_slots" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["honest-baseline"], ["honest-baseline", "--seed", "x"],
                                  ["honest-baseline", "--seed", "1", "--format", "xml"], []])
def test_flag_errors_exit_64(argv):
    with pytest.raises(SystemExit) as e:
        cli.main(argv)
    assert e.value.code == cli.EXIT_USAGE


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "gateblind", "honest-baseline", "--seed", "4",
                        "--config", str(_write(tmp_path, SMALL)), "--out", str(tmp_path / "m")],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    r = subprocess.run([sys.executable, "-m", "gateblind", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "--seed" in r.stdout
    r = subprocess.run([sys.executable, "-m", "gateblind", "bogus", "--seed", "1"], capture_output=True, text=True)
    assert r.returncode == 64


def _write(tmp_path, cfg):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return p


def test_seed_changes_and_reproduces(tmp_path):
    _, a = run(tmp_path, "honest-baseline", "--seed", "5", config=SMALL, name="a")
    _, b = run(tmp_path, "honest-baseline", "--seed", "5", config=SMALL, name="b")
    _, c = run(tmp_path, "honest-baseline", "--seed", "6", config=SMALL, name="c")
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    assert (a / "bob_key.hex").read_bytes() != (c / "bob_key.hex").read_bytes()


def test_manifest_records_parameters(tmp_path):
    _, out = run(tmp_path, "honest-baseline", "--seed", "1", config={"session": {"n_slots": 1000},
                                                                    "thermal": {"tec_max_heat": 0.28}})
    m = json.loads((out / "manifest.json").read_text())
    assert m["parameters"]["receiver"]["thermal"]["tec_max_heat"] == 0.28
    assert m["config"]["thermal"] == {"tec_max_heat": 0.28}
    assert m["reproduces"] == cli.SCENARIOS["honest-baseline"]
