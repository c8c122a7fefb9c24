import csv
import json

import pytest

from helpers import synthetic_window
from msgcontrol.cli import main
from msgcontrol.msg_model import MsgParams

from conftest import SMOKE_CONFIG

TYPICAL = MsgParams(gamma=0.31, g_b=171.0, beta_n=5.9, beta_i=4.7, sigma=3.0, r_meas=4.6)


def read_counts(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def write_patient(root, trace, ins, nut, pid="p1"):
    root.mkdir(parents=True, exist_ok=True)
    tables = (
        ("bg.csv", "bg_mgdl", zip(trace.times, trace.values)),
        ("insulin.csv", "rate_u_per_hr", zip(ins.breakpoints, ins.rates)),
        ("nutrition.csv", "rate_units_per_hr", zip(nut.breakpoints, nut.rates)),
    )
    for name, col, rows in tables:
        with open(root / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["patient_id", "time_hr", col])
            w.writerows((pid, repr(float(t)), repr(float(v))) for t, v in rows)
    return root


# --- simulate ---------------------------------------------------------------------


def test_smoke_simulate(smoke_run):
    assert smoke_run["code"] == 0
    assert smoke_run["elapsed"] < 60.0
    out = smoke_run["out"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["finished_at"]
    for name in manifest["outputs"]:
        assert (out / name).is_file()
    summary = json.loads((out / "summary.json").read_text())
    assert [c["protocol"] for c in summary["comparisons"]] == ["protocol_a", "protocol_b"]


def test_missing_config_exits_2(tmp_path, capsys):
    assert main(["simulate", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_bad_config_key_exits_2(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(SMOKE_CONFIG.read_text() + "\n[bogus]\nx = 1\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_seed_override_changes_results(tmp_path):
    cfg = tmp_path / "tiny.toml"
    text = SMOKE_CONFIG.read_text().replace("n_patients = 20", "n_patients = 2").replace("m_schedules = 4", "m_schedules = 1")
    cfg.write_text(text)
    args = ["simulate", "--config", str(cfg), "--jobs", "1", "--protocol", "protocol_a"]
    assert main([*args, "--out", str(tmp_path / "a"), "--seed", "1"]) == 0
    assert main([*args, "--out", str(tmp_path / "b"), "--seed", "2"]) == 0
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert (ma["root_seed"], mb["root_seed"]) == (1, 2)
    assert (tmp_path / "a" / "results.json").read_text() != (tmp_path / "b" / "results.json").read_text()


# --- retro ------------------------------------------------------------------------


@pytest.mark.parametrize("protocol", ["protocol_a", "protocol_b"])
def test_retro_on_fixture(tmp_path, protocol):
    assert main(["retro", "--protocol", protocol, "--out", str(tmp_path)]) == 0
    rows = read_counts(tmp_path / "table4_counts.csv")
    by_kind = {}
    for r in rows:
        by_kind[r["event_kind"]] = by_kind.get(r["event_kind"], 0) + int(r["count"])
    with open(tmp_path / "events.csv") as fh:
        unevaluable = sum(1 for e in csv.DictReader(fh) if not e["classification"])
    assert by_kind["hypoglycemia"] + by_kind["hyperglycemia"] + unevaluable == 19 + 107


def test_retro_empty_directory(tmp_path):
    (tmp_path / "data").mkdir()
    assert main(["retro", "--data", str(tmp_path / "data"), "--protocol", "protocol_a", "--out", str(tmp_path / "o")]) == 0
    with open(tmp_path / "o" / "events.csv") as fh:
        assert list(csv.DictReader(fh)) == []
    assert all(r["count"] == "0" for r in read_counts(tmp_path / "o" / "table4_counts.csv"))


def test_retro_corrupt_csv_exits_3(tmp_path, capsys):
    d = tmp_path / "data"
    d.mkdir()
    (d / "bg.csv").write_text("patient_id,time_hr,bg_mgdl\np,0,150\np,1\n")
    assert main(["retro", "--data", str(d), "--protocol", "protocol_a", "--out", str(tmp_path / "o")]) == 3
    assert "bg.csv:3" in capsys.readouterr().err
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["status"] == "failed"


def test_retro_missing_data_exits_2(tmp_path):
    assert main(["retro", "--data", str(tmp_path / "nope"), "--protocol", "protocol_a", "--out", str(tmp_path)]) == 2


def test_retro_unknown_protocol_exits_2(tmp_path):
    assert main(["retro", "--protocol", "protocol_z", "--out", str(tmp_path)]) == 2


# --- fit --------------------------------------------------------------------------


def test_fit_synthetic_patient(tmp_path, capsys):
    trace, ins, nut = synthetic_window(TYPICAL, 1, k=40)
    assert len(ins.breakpoints) >= 2
    d = write_patient(tmp_path / "p", trace, ins, nut)
    assert main(["fit", "--data", str(d)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["window"] == [0.0, 24.0]
    assert doc["params"]["gamma"] == pytest.approx(TYPICAL.gamma, rel=0.2)


def test_fit_unreadable_input_exits_2(tmp_path):
    assert main(["fit", "--data", str(tmp_path / "missing")]) == 2


def test_fit_needs_one_patient(tmp_path, capsys):
    trace, ins, nut = synthetic_window(TYPICAL, 2, k=20)
    d = write_patient(tmp_path / "p", trace, ins, nut, pid="a")
    with open(d / "bg.csv", "a") as fh:
        fh.write("b,0.0,150.0\n")
    with open(d / "insulin.csv", "a") as fh:
        fh.write("b,0.0,1.0\nb,2.0,2.0\n")
    assert main(["fit", "--data", str(d)]) == 3
    assert "--patient" in capsys.readouterr().err
    assert main(["fit", "--data", str(d), "--patient", "a"]) == 0
