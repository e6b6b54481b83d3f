import csv
import io
from importlib import resources

import pytest

from llmhara.cli import (
    EXIT_CONFIG,
    EXIT_CSV_PARSE,
    EXIT_INCOMPLETE,
    EXIT_INTEGRITY,
    EXIT_INVALID,
    EXIT_OK,
    EXIT_PROBE,
    EXIT_STAGE,
    main,
)
from llmhara.domain import Stage
from llmhara.export import HARA_COLUMNS
from llmhara.fixtures import build_fixtures
from llmhara.ledger import read_ledger
from llmhara.provider import ScriptedKey, ScriptedReply


@pytest.fixture
def workspace(tmp_path, caem):
    item = tmp_path / "caem.md"
    item.write_text((resources.files("llmhara") / "data" / "items" / "caem.md").read_text(encoding="utf-8"))
    provider, truth = build_fixtures(caem, seed=7)
    provider.save(tmp_path / "fixtures")
    (tmp_path / "hara.toml").write_text(
        'item_definition = "caem.md"\nledger = "out/run.jsonl"\noutput = "out/hara.csv"\n\n'
        '[provider]\nkind = "scripted"\nfixtures = "fixtures"\n\n[run]\nledger_fsync = false\n'
    )
    return tmp_path, provider, truth


def run_cli(ws, *extra):
    return main(["run", "-c", str(ws / "hara.toml"), *extra])


def test_run_writes_twenty_rows(workspace, capsys):
    ws, _, truth = workspace
    assert all(n >= 5 for n in truth.quadrant_sizes().values())
    assert run_cli(ws) == EXIT_OK
    out = capsys.readouterr().out
    assert "hara.csv (20 rows)" in out
    text = (ws / "out" / "hara.csv").read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    assert tuple(rows[0]) == HARA_COLUMNS
    assert text.splitlines()[0] == "ID,Guideword,Malfunction,Core Scenario,Detailed Scenario,Hazardous Event,Severity,Severity Rationale,Safety Goal"
    assert len(rows) == 21
    assert "\r" not in text


def test_existing_ledger_needs_force(workspace):
    ws, _, _ = workspace
    assert run_cli(ws) == EXIT_OK
    assert run_cli(ws) == EXIT_CONFIG
    assert run_cli(ws, "--force") == EXIT_OK


def test_missing_item_is_config_error(workspace, capsys):
    ws, _, _ = workspace
    (ws / "caem.md").unlink()
    assert run_cli(ws) == EXIT_CONFIG
    assert "item definition" in capsys.readouterr().err
    assert not (ws / "out" / "run.jsonl").exists()


def test_missing_fixtures_is_probe_failure(workspace, caem, tmp_path_factory, capsys):
    ws, provider, _ = workspace
    for k in [k for k in provider.fixtures if k.stage is Stage.SEVERITY]:
        del provider.fixtures[k]
    partial = tmp_path_factory.mktemp("partial")
    provider.save(partial)
    assert run_cli(ws, "--fixtures", str(partial)) == EXIT_PROBE
    assert "Severity" in capsys.readouterr().err
    ledger = ws / "out" / "run.jsonl"
    assert not ledger.exists() or read_ledger(ledger)[1] == []


def test_stage_error_prints_ledger(workspace, capsys):
    ws, provider, _ = workspace
    provider.fixtures[ScriptedKey(Stage.GEOMETRIES, "", 1)] = ScriptedReply("no table here")
    provider.save(ws / "fixtures")
    assert run_cli(ws) == EXIT_STAGE
    err = capsys.readouterr().err
    assert "Geometries" in err and "run.jsonl" in err


def test_export_is_byte_identical(workspace):
    ws, _, _ = workspace
    assert run_cli(ws) == EXIT_OK
    assert main(["export", str(ws / "out" / "run.jsonl"), str(ws / "again.csv")]) == EXIT_OK
    assert (ws / "again.csv").read_bytes() == (ws / "out" / "hara.csv").read_bytes()
    assert main(["validate", str(ws / "again.csv")]) == EXIT_OK


def test_export_of_incomplete_run(workspace, capsys):
    ws, _, _ = workspace
    assert run_cli(ws) == EXIT_OK
    ledger = ws / "out" / "run.jsonl"
    lines = ledger.read_bytes().split(b"\n")
    first_goal = next(i for i, l in enumerate(lines) if b'"stage":"Severity"' in l)
    ledger.write_bytes(b"\n".join(lines[: first_goal + 3]) + b"\n")
    capsys.readouterr()
    assert main(["export", str(ledger), str(ws / "x.csv")]) == EXIT_INCOMPLETE
    assert "incomplete: Severity" in capsys.readouterr().err


def test_export_of_corrupted_ledger(workspace, capsys):
    ws, _, _ = workspace
    assert run_cli(ws) == EXIT_OK
    ledger = ws / "out" / "run.jsonl"
    data = bytearray(ledger.read_bytes())
    i = data.index(b"Omission")
    data[i] = ord("o")
    ledger.write_bytes(bytes(data))
    assert main(["export", str(ledger), str(ws / "x.csv")]) == EXIT_INTEGRITY
    assert main(["verify-ledger", str(ledger)]) == EXIT_INTEGRITY
    assert "divergence at sequence" in capsys.readouterr().out


def test_verify_clean(workspace, capsys):
    ws, _, _ = workspace
    run_cli(ws)
    assert main(["verify-ledger", str(ws / "out" / "run.jsonl")]) == EXIT_OK
    assert "clean" in capsys.readouterr().out


def _edit_csv(path, edit):
    rows = list(csv.reader(io.StringIO(path.read_text(encoding="utf-8"))))
    edit(rows)
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def test_validate_reports_removed_goal(workspace, capsys):
    ws, _, _ = workspace
    run_cli(ws)
    path = ws / "out" / "hara.csv"

    def drop_goal(rows):
        r = next(r for r in rows[1:] if r[6] == "S2")
        r[8] = ""

    _edit_csv(path, drop_goal)
    capsys.readouterr()
    assert main(["validate", str(path)]) == EXIT_INVALID
    assert "[goal-missing-for-S>0]" in capsys.readouterr().out


def test_validate_reports_duplicate_id(workspace, capsys):
    ws, _, _ = workspace
    run_cli(ws)
    path = ws / "out" / "hara.csv"
    _edit_csv(path, lambda rows: rows.__setitem__(2, [rows[1][0]] + rows[2][1:]))
    capsys.readouterr()
    assert main(["validate", str(path)]) == EXIT_INVALID
    assert "[duplicate-id]" in capsys.readouterr().out


def test_validate_parse_error(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("ID,Severity\nE001,S1\n")
    assert main(["validate", str(bad)]) == EXIT_CSV_PARSE
    assert main(["validate", str(tmp_path / "missing.csv")]) == EXIT_CSV_PARSE


def test_resume_via_cli(workspace):
    ws, _, _ = workspace
    assert run_cli(ws) == EXIT_OK
    before = (ws / "out" / "hara.csv").read_bytes()
    (ws / "out" / "hara.csv").unlink()
    assert main(["resume", "-c", str(ws / "hara.toml")]) == EXIT_OK
    assert (ws / "out" / "hara.csv").read_bytes() == before


def test_probe_command(workspace, capsys, monkeypatch):
    ws, _, _ = workspace
    assert main(["probe", "-c", str(ws / "hara.toml")]) == EXIT_OK
    monkeypatch.delenv("LLMHARA_NO_SUCH_KEY", raising=False)
    code = main(["probe", "--provider", "live", "--endpoint", "http://127.0.0.1:9/v1/chat/completions",
                 "--model-id", "m", "--api-key-env", "LLMHARA_NO_SUCH_KEY"])
    assert code == EXIT_PROBE
    assert "missing-credential" in capsys.readouterr().out


def test_credentials_in_config_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[provider]\nkind = "live"\napi_key = "sk-123"\n')
    assert main(["probe", "-c", str(cfg)]) == EXIT_CONFIG
    assert "credentials" in capsys.readouterr().err


def test_flags_override_config(workspace, caem):
    ws, _, _ = workspace
    provider, truth = build_fixtures(caem, seed=3, geometries=3, events_per_pair=(1, 2))
    provider.save(ws / "small")
    code = run_cli(ws, "--fixtures", str(ws / "small"), "--geometries", "3", "--output", str(ws / "small.csv"))
    assert code == EXIT_OK
    rows = (ws / "small.csv").read_text().splitlines()
    assert len(rows) - 1 == len(truth.selected_ids)
