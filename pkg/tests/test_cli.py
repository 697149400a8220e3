from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest

from tagstream.cli import build_parser, main

COMMANDS = ["run", "validate", "gen", "bench", "report"]


def test_run_worked_example(worked_file, capsys):
    assert main(["run", "--input", str(worked_file)]) == 0
    out = capsys.readouterr().out
    assert "alerts: 1" in out and "events: 4" in out


def test_run_table_output(worked_file, capsys):
    assert main(["run", "--input", str(worked_file), "--table"]) == 0
    out = capsys.readouterr().out
    assert "5.5/6" in out and "reg.exe" in out


def test_run_missing_input(capsys):
    assert main(["run", "--input", "/nonexistent/x.ndjson"]) == 1
    assert "error" in capsys.readouterr().err


def test_run_high_threshold(worked_file, capsys):
    assert main(["run", "--input", str(worked_file), "--threshold", "0.95"]) == 0
    assert "alerts: 0" in capsys.readouterr().out


def test_run_bad_threshold_is_usage_error(worked_file, capsys):
    assert main(["run", "--input", str(worked_file), "--threshold", "1.5"]) == 2


def test_run_decay_flags(worked_file, tmp_path, capsys):
    # half-second lifetime: every tag expires before the next event arrives
    alerts = tmp_path / "a.ndjson"
    rc = main(["run", "--input", str(worked_file), "--decay-seconds", "0.5", "--decay-rounds", "6", "--alerts-out", str(alerts)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "alerts: 0" in out


def test_run_writes_outputs(worked_file, tmp_path, capsys):
    alerts, metrics = tmp_path / "a.ndjson", tmp_path / "m.csv"
    assert main(["run", "--input", str(worked_file), "--alerts-out", str(alerts), "--metrics-out", str(metrics), "--partitions", "1"]) == 0
    assert json.loads(alerts.read_text())["qg"] == "QG2"
    assert metrics.read_text().startswith("event_ts_ms,active_tags\n")


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--input", "x", "--frobnicate"])
    assert exc.value.code == 2


@pytest.mark.parametrize("cmd", COMMANDS)
def test_help_documents_flags(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    sub = next(a for a in build_parser()._subparsers._group_actions[0].choices.items() if a[0] == cmd)[1]
    for action in sub._actions:
        for opt in action.option_strings:
            assert opt in text


def test_validate_shipped(capsys):
    assert main(["validate"]) == 0
    assert "4 graphs OK" in capsys.readouterr().out


def test_validate_broken(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"id": "B", "name": "b", "nodes": [{"id": "a"}, {"id": "b"}, {"id": "c"}], "edges": [{"id": "x", "src": "a", "dst": "b"}], "seeds": [{"node": "a"}]}))
    assert main(["validate", str(bad)]) == 1
    out = capsys.readouterr().out
    assert "unreachable(c)" in out and "over_general_seed(a)" in out


def test_gen_deterministic(tmp_path, capsys):
    outs = []
    for i in range(2):
        trace, gt = tmp_path / f"t{i}.ndjson", tmp_path / f"g{i}.json"
        args = ["gen", "--events", "2000", "--hosts", "2", "--seed", "5", "--inject", "QG2,QG4", "--mutate-in-chain", "1:2",
                "--mutate-around", "3", "--out", str(trace), "--ground-truth", str(gt)]  # fmt: skip
        assert main(args) == 0
        outs.append((trace.read_bytes(), gt.read_bytes()))
    assert outs[0] == outs[1]
    doc = json.loads(outs[0][1])
    assert [a["qg"] for a in doc["attacks"]] == ["QG2", "QG4"]
    assert all(set(a["edges"].values()) <= {2, 3} for a in doc["attacks"])


def test_gen_unknown_template(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--inject", "QG9"])
    assert exc.value.code == 2


def test_gen_then_run_then_report(tmp_path, capsys):
    trace, gt = tmp_path / "t.ndjson", tmp_path / "gt.json"
    assert main(["gen", "--events", "5000", "--hosts", "2", "--seed", "2", "--threshold-corpus", "--out", str(trace), "--ground-truth", str(gt)]) == 0
    alerts = tmp_path / "a.ndjson"
    assert main(["run", "--input", str(trace), "--threshold", "0.5", "--alert-updates", "--alerts-out", str(alerts)]) == 0
    capsys.readouterr()
    csv_out, fig = tmp_path / "sweep.csv", tmp_path / "sweep.png"
    rc = main(["report", "--alerts", str(alerts), "--ground-truth", str(gt), "--thresholds", "0.5:0.9:0.05", "--out", str(csv_out), "--figure", str(fig)])
    assert rc == 0
    rows = list(csv.DictReader(csv_out.open()))
    assert len(rows) == 9
    assert list(rows[0]) == ["threshold", "tp", "fp", "fn", "precision", "recall", "f1"]
    assert fig.stat().st_size > 0 and fig.read_bytes()[:4] == b"\x89PNG"


def test_report_bad_thresholds(tmp_path, capsys):
    (tmp_path / "a").write_text("")
    (tmp_path / "g").write_text('{"attacks": []}')
    assert main(["report", "--alerts", str(tmp_path / "a"), "--ground-truth", str(tmp_path / "g"), "--thresholds", "0.9:0.5:0.1"]) == 2


def test_report_metrics_figure(tmp_path, worked_file, capsys):
    metrics, alerts = tmp_path / "m.csv", tmp_path / "a.ndjson"
    main(["run", "--input", str(worked_file), "--metrics-out", str(metrics), "--alerts-out", str(alerts)])
    (tmp_path / "g").write_text('{"attacks": []}')
    fig = tmp_path / "tags.png"
    assert main(["report", "--alerts", str(alerts), "--ground-truth", str(tmp_path / "g"), "--metrics", str(metrics), "--metrics-figure", str(fig)]) == 0
    assert fig.read_bytes()[:4] == b"\x89PNG"


def test_bench(worked_file, capsys):
    assert main(["bench", "--input", str(worked_file), "--repeat", "2"]) == 0
    out = capsys.readouterr().out
    best = float(out.split("eps: best ")[1].split()[0])
    assert best > 0 and "peak rss:" in out


def test_module_entry_point(worked_file):
    res = subprocess.run([sys.executable, "-m", "tagstream", "run", "--input", str(worked_file)], capture_output=True, text=True)
    assert res.returncode == 0 and "alerts: 1" in res.stdout
