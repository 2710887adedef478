from __future__ import annotations

import json
import socket
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import pytest

from scripts import FULL_PATH
from tara_forge import cli
from tara_forge.llm_client import read_jsonl
from tara_forge.model import load_manifest
from tara_forge.synthetic import make_dataset

SUBCOMMANDS = [
    ["ingest", "window"],
    ["ingest", "overlay"],
    ["ingest", "validate"],
    ["rag", "build"],
    ["rag", "query"],
    ["run"],
    ["evaluate"],
    ["report"],
]


@pytest.fixture
def dataset(tmp_path):
    make_dataset(tmp_path / "data", n_samples=6, n_frames=40, seed=1)
    return tmp_path / "data" / "manifest.jsonl"


def oracle_predictions(manifest, path):
    """Prediction records written straight from the labels."""
    records = []
    for s in load_manifest(manifest):
        records.append(
            {
                "sample_id": s.id,
                "status": "ok",
                "verdict": s.responsibility.to_json(),
                "accident_frame_pred": s.accident_frame,
                "bbox_pred": s.accident_bbox.as_list() if s.accident_bbox else None,
                "facts": s.facts_text,
                "cause": s.cause_text,
                "advice": s.advice_text,
            }
        )
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def snapshot(directory):
    return {p: p.read_bytes() for p in Path(directory).rglob("*") if p.is_file()}


@pytest.mark.parametrize("words", SUBCOMMANDS, ids=lambda w: " ".join(w))
def test_help_lists_every_flag(words, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([*words, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    parser = cli.build_parser()
    sub = parser
    for w in words:
        sub = next(a for a in sub._actions if a.dest in ("command", "action")).choices[w]
    for action in sub._actions:
        for opt in action.option_strings:
            assert opt in text


def test_unknown_subcommand(capsys):
    assert cli.main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_required_flag(capsys):
    assert cli.main(["evaluate", "--manifest", "m.jsonl"]) == 1
    assert "--predictions" in capsys.readouterr().err


def test_evaluate(tmp_path, dataset, capsys):
    preds = oracle_predictions(dataset, tmp_path / "p.jsonl")
    before = snapshot(dataset.parent)
    code = cli.main(["evaluate", "--predictions", str(preds), "--manifest", str(dataset), "--out", str(tmp_path / "r.json")])
    assert code == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["tara"]["micro_average"] == 1.0
    assert report["time"]["average"] == 1.0
    assert "TARA" in capsys.readouterr().out
    assert snapshot(dataset.parent) == before


def test_missing_manifest(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    code = cli.main(["evaluate", "--predictions", "p.jsonl", "--manifest", str(missing), "--out", "r.json"])
    assert code == 1
    assert str(missing) in capsys.readouterr().err


def test_invalid_manifest_is_user_error(tmp_path, capsys):
    bad = tmp_path / "m.jsonl"
    bad.write_text('{"id": "x"}\n')
    assert cli.main(["ingest", "validate", "--manifest", str(bad)]) == 0  # validate reports, never fails
    assert "violations 1" in capsys.readouterr().out
    assert cli.main(["run", "--manifest", str(bad), "--out", str(tmp_path / "run")]) == 1


def write_mock(tmp_path, rules):
    script = tmp_path / "script.json"
    script.write_text(json.dumps({"rules": rules}))
    cfg = tmp_path / "backend.toml"
    cfg.write_text('mock = "script.json"\n')
    return cfg


def test_full_cli_flow(tmp_path, dataset, capsys):
    index = tmp_path / "index"
    clauses = Path(cli.rag.__file__).parent / "data" / "sample_clauses.jsonl"
    assert cli.main(["rag", "build", "--clauses", str(clauses), "--out", str(index)]) == 0
    backend = write_mock(tmp_path, [{"stage": s, "answer": a} for s, a in FULL_PATH.items()])
    run = tmp_path / "run"
    code = cli.main(
        ["run", "--manifest", str(dataset), "--backend", str(backend), "--rag", str(index), "--out", str(run)]
    )
    assert code == 0
    assert len(read_jsonl(run / "predictions.jsonl")) == 6
    assert cli.main(
        ["evaluate", "--predictions", str(run / "predictions.jsonl"), "--manifest", str(dataset), "--out", str(run / "report.json")]
    ) == 0
    capsys.readouterr()
    assert cli.main(["report", str(run)]) == 0
    table = capsys.readouterr().out
    for block in ("TARA", "Description", "Time", "Spatial"):
        assert block in table


def test_report_json_byte_stable(tmp_path, dataset, capsys):
    preds = oracle_predictions(dataset, tmp_path / "p.jsonl")
    cli.main(["evaluate", "--predictions", str(preds), "--manifest", str(dataset), "--out", str(tmp_path / "report.json")])
    capsys.readouterr()
    outputs = []
    for _ in range(2):
        assert cli.main(["report", str(tmp_path), "--format", "json"]) == 0
        outputs.append(capsys.readouterr().out)
    assert outputs[0] == outputs[1]
    assert json.loads(outputs[0])["tara"]["micro_average"] == 1.0


def test_report_tara_only_renders_dashes(tmp_path, capsys):
    report = {"tara": {"accident_acc": 0.5, "non_accident_acc": 1.0, "micro_average": 0.75, "macro_average": 0.75,
                       "counts": {"accident": 2, "non_accident": 2}}}
    (tmp_path / "report.json").write_text(json.dumps(report))
    assert cli.main(["report", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    time_rows = [line for line in lines if "AP@5" in line]
    assert time_rows and time_rows[0].rstrip().endswith("—")
    assert any(line.rstrip().endswith("0.7500") for line in lines)


def test_report_missing_file(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path)]) == 1
    assert "report file not found" in capsys.readouterr().err


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_run_against_refusing_socket(tmp_path, dataset, capsys):
    cfg = tmp_path / "backend.toml"
    cfg.write_text(f'endpoint = "http://127.0.0.1:{free_port()}/v1"\nmodel = "m"\nmax_retries = 1\nbackoff = 0.01\n')
    run = tmp_path / "run"
    code = cli.main(["run", "--manifest", str(dataset), "--backend", str(cfg), "--out", str(run), "--no-rag"])
    assert code == 2
    preds = read_jsonl(run / "predictions.jsonl")
    assert [p["status"] for p in preds] == ["failed"] * 6
    assert "RetryExhaustedError" in capsys.readouterr().err


class _FlakyServer(HTTPServer):
    """Answers the first ``budget`` chat calls, then hangs up on every request."""

    def __init__(self, budget):
        super().__init__(("127.0.0.1", 0), _FlakyHandler)
        self.budget = budget
        self.answers = iter(FULL_PATH.values())


class _FlakyHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        self.rfile.read(int(self.headers["Content-Length"]))
        if self.server.budget <= 0:
            self.close_connection = True
            return
        self.server.budget -= 1
        body = json.dumps({"choices": [{"message": {"content": next(self.server.answers)}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


def test_run_keeps_partial_transcripts(tmp_path, dataset):
    server = _FlakyServer(budget=3)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        cfg = tmp_path / "backend.toml"
        cfg.write_text(f'endpoint = "http://127.0.0.1:{server.server_port}/v1"\nmodel = "m"\nmax_retries = 1\nbackoff = 0.01\n')
        one = tmp_path / "one.jsonl"
        one.write_text((dataset.read_text().splitlines()[1]) + "\n")
        (tmp_path / "syn000").symlink_to(dataset.parent / "syn000")
        run = tmp_path / "run"
        code = cli.main(["run", "--manifest", str(one), "--backend", str(cfg), "--out", str(run), "--jobs", "1"])
    finally:
        server.shutdown()
        server.server_close()
    assert code == 2
    turns = read_jsonl(run / "transcripts.jsonl")
    assert [t["stage"] for t in turns] == ["Occurrence", "Type", "TimeLocation"]
    (pred,) = read_jsonl(run / "predictions.jsonl")
    assert pred["status"] == "failed"
    assert pred["accident_frame_pred"] == 12


def test_config_precedence(tmp_path, capsys):
    index = tmp_path / "index"
    clauses = Path(cli.rag.__file__).parent / "data" / "sample_clauses.jsonl"
    cli.main(["rag", "build", "--clauses", str(clauses), "--out", str(index)])
    cfg = tmp_path / "c.toml"
    cfg.write_text("k = 5\n")
    capsys.readouterr()
    cli.main(["rag", "query", "--index", str(index), "--text", "pedestrian crossing", "--config", str(cfg)])
    assert len(capsys.readouterr().out.splitlines()) == 5
    cli.main(["rag", "query", "--index", str(index), "--text", "pedestrian crossing", "--config", str(cfg), "--k", "2"])
    assert len(capsys.readouterr().out.splitlines()) == 2
    cli.main(["rag", "query", "--index", str(index), "--text", "pedestrian crossing"])
    assert len(capsys.readouterr().out.splitlines()) == 3


def test_ingest_window_and_overlay(tmp_path, dataset):
    before = snapshot(dataset.parent)
    out = tmp_path / "win"
    assert cli.main(["ingest", "window", "--manifest", str(dataset), "--out", str(out), "--window", "20"]) == 0
    src = {s.id: s for s in load_manifest(dataset)}
    for s in load_manifest(out / "manifest.jsonl"):
        assert s.frame_count == 20 and s.fps == 8
        assert len(list((out / s.id).iterdir())) == 20
        if s.accident_frame is not None:
            assert 0 <= s.accident_frame < 20
            assert src[s.id].accident_frame - s.accident_frame >= 0
    assert cli.main(["ingest", "overlay", "--manifest", str(out / "manifest.jsonl")]) == 0
    assert (out / "manifest_overlaid" / "manifest.jsonl").exists()
    assert snapshot(dataset.parent) == before
