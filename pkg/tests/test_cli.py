import csv
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from mecssc.cli import EXIT_FAILED, EXIT_OK, EXIT_USAGE, main
from mecssc.sim.scenario import packaged_scenario

GOLDEN = Path(__file__).parent / "golden"


def _digests(folder):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(Path(folder).iterdir())}


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _tight_scenario(tmp_path):
    data = yaml.safe_load(packaged_scenario("canonical_naive").read_text())
    data["assertions"] = [{"kind": "continuity", "ues": ["ue1"], "max_gap_ms": 1},
                          {"kind": "transparency"}]
    path = tmp_path / "tight.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


# -- run

def test_run_valid_scenario(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "canonical_naive", "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "PASS continuity" in text and "FAIL" not in text
    assert "replication naive spgw1->spgw2: 4/4 UEs, 756 B sent" in text
    assert (out / "trace.jsonl").stat().st_size > 0
    assert (out / "trace.pcap").stat().st_size > 0


def test_failing_assertion_exits_nonzero_and_names_it(tmp_path, capsys):
    code = main(["run", str(_tight_scenario(tmp_path)), "--out", str(tmp_path / "o")])
    assert code == EXIT_FAILED
    text = capsys.readouterr().out
    assert "FAIL continuity" in text and "PASS transparency" in text
    saved = json.loads((tmp_path / "o" / "assertions.json").read_text())
    assert [a["ok"] for a in saved] == [False, True]


def test_parse_error_reports_location(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("name: bad\nnodes:\n  - {name: a, kind: router}\n")
    assert main(["run", str(path)]) == EXIT_USAGE
    assert f"{path}:3:" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    [],
    ["run"],
    ["fly"],
    ["run", "canonical_naive", "--set", "oops"],
    ["run", "canonical_naive", "--set", "warp=9"],
    ["run", "canonical_naive", "--seed", "x"],
    ["run", "no_such_file.yaml"],
    ["sweep"],
])
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_USAGE
    assert capsys.readouterr().err


def test_same_seed_same_artifacts(tmp_path):
    for name in ("a", "b"):
        assert main(["run", "canonical_selective", "--seed", "7",
                     "--out", str(tmp_path / name)]) == EXIT_OK
    a, b = _digests(tmp_path / "a"), _digests(tmp_path / "b")
    assert len(a) == 6 and a == b


def test_output_dir_env_and_flag(tmp_path, monkeypatch):
    monkeypatch.setenv("MECSSC_OUT", str(tmp_path / "env"))
    monkeypatch.chdir(tmp_path)
    assert main(["run", "canonical_mirror"]) == EXIT_OK
    assert (tmp_path / "env" / "canonical-mirror" / "rules.txt").exists()
    assert main(["run", "canonical_mirror", "--out", str(tmp_path / "flag")]) == EXIT_OK
    assert (tmp_path / "flag" / "rules.txt").exists()
    monkeypatch.delenv("MECSSC_OUT")
    assert main(["run", "canonical_mirror"]) == EXIT_OK
    assert (tmp_path / "out" / "canonical-mirror" / "rules.txt").exists()


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mecssc.cli", "run",
                           str(_tight_scenario(tmp_path)), "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "FAIL continuity" in proc.stdout


# -- sweep

def _sweep(tmp_path, capsys, config, *extra):
    tmp_path.mkdir(exist_ok=True)
    path = tmp_path / "sweep.yaml"
    path.write_text(yaml.safe_dump(config))
    out = tmp_path / "sweep"
    code = main(["sweep", "--config", str(path), "--out", str(out), *extra])
    capsys.readouterr()
    return code, out


def test_sweep_outputs_and_golden_header(tmp_path, capsys):
    config = dict(strategies=["naive", "selective", "ram_model"], registered=[1, 10],
                  moved=[0, "all"], engine="sim")
    code, out = _sweep(tmp_path, capsys, config)
    assert code == EXIT_OK
    header = (out / "sweep.csv").read_text().splitlines()[0] + "\n"
    assert header == (GOLDEN / "sweep_header.csv").read_text()
    rows = _rows(out / "sweep.csv")
    assert [(r["strategy"], r["registered"], r["moved"]) for r in rows] == [
        (s, str(n), str(m if m != "all" else n)) for s in config["strategies"]
        for n in (1, 10) for m in (0, "all")]
    for r in rows:
        assert int(r["stored_bytes"]) >= 0 and int(r["tx_bytes"]) >= 0
        assert float(r["elapsed_ms"]) >= 0 and float(r["downtime_ms"]) >= 0
    naive = [r for r in rows if r["strategy"] == "naive"]
    assert [int(r["stored_bytes"]) for r in naive] == [189, 189, 1890, 1890]
    ram = [r for r in rows if r["strategy"] == "ram_model"]
    assert int(ram[0]["tx_bytes"]) == 160_000_000
    assert all(float(r["downtime_ms"]) > 25_000 for r in ram)
    assert json.loads((out / "errors.json").read_text()) == []
    series = json.loads((out / "series.json").read_text())
    assert sorted(series) == ["naive", "ram_model", "selective"]
    assert series["selective"]["stored_bytes"] == [189, 205, 1890, 2050]


def test_infeasible_point_becomes_error_row(tmp_path, capsys):
    config = dict(strategies=["naive", "selective"], registered=[1, 10], moved=[5],
                  engine="direct")
    code, out = _sweep(tmp_path, capsys, config)
    assert code == EXIT_OK
    rows = _rows(out / "sweep.csv")
    bad = [r for r in rows if r["registered"] == "1"]
    assert len(bad) == 2
    assert all(r[c] == "ERROR" for r in bad for c in ("stored_bytes", "tx_bytes",
                                                      "elapsed_ms", "downtime_ms"))
    good = [r for r in rows if r["registered"] == "10"]
    assert [int(r["tx_bytes"]) for r in good] == [1890, 945]
    errors = json.loads((out / "errors.json").read_text())
    assert len(errors) == 2 and "exceeds" in errors[0]["error"]
    means = _rows(out / "sweep_means.csv")
    assert [m["stored_bytes"] for m in means] == ["ERROR", "1890", "ERROR", "1970"]


def test_repetitions_have_zero_variance(tmp_path, capsys):
    config = dict(strategies=["naive"], registered=[3], moved=["all"], repetitions=3)
    code, out = _sweep(tmp_path, capsys, config)
    rows = _rows(out / "sweep.csv")
    assert code == EXIT_OK and len(rows) == 3
    assert len({tuple(r.values()) for r in rows}) == 1
    [mean] = _rows(out / "sweep_means.csv")
    assert mean == rows[0]


def test_parallel_sweep_keeps_grid_order(tmp_path, capsys):
    config = dict(strategies=["selective", "naive"], registered=[8, 2, 5],
                  moved=["half", 1], engine="direct")
    _, serial = _sweep(tmp_path / "s", capsys, config)
    _, parallel = _sweep(tmp_path / "p", capsys, config, "--jobs", "3")
    assert (serial / "sweep.csv").read_text() == (parallel / "sweep.csv").read_text()


def test_set_overrides_constants(tmp_path, capsys):
    config = dict(strategies=["naive"], registered=[1], moved=[0], engine="direct")
    _, base = _sweep(tmp_path, capsys, config)
    before = float(_rows(base / "sweep.csv")[0]["elapsed_ms"])
    _, slow = _sweep(tmp_path, capsys, config, "--set", "controller_one_way_us=10000")
    after = float(_rows(slow / "sweep.csv")[0]["elapsed_ms"])
    assert after == pytest.approx(before + 20, abs=1e-3)


def test_selective_single_move_far_cheaper(tmp_path, capsys):
    config = dict(strategies=["naive", "selective"], registered=[1000], moved=[1],
                  engine="direct")
    _, out = _sweep(tmp_path, capsys, config)
    naive, selective = _rows(out / "sweep.csv")
    assert float(selective["elapsed_ms"]) * 100 < float(naive["elapsed_ms"])


@pytest.mark.parametrize("config,needle", [
    (dict(strategies=["teleport"]), "unknown strategy"),
    (dict(repetitions=0), "repetitions"),
    (dict(colour="red"), "unknown key"),
    (dict(constants={"warp": 1}), "warp"),
    (dict(moved=["most"]), "moved values"),
])
def test_bad_sweep_config_exits_2(tmp_path, capsys, config, needle):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(config))
    assert main(["sweep", "--config", str(path)]) == EXIT_USAGE
    assert needle in capsys.readouterr().err
