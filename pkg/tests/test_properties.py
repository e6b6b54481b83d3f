"""Pipeline-wide invariants checked over randomly generated fixture runs."""

import csv
import hashlib
import io
import tempfile
from pathlib import Path

from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from llmhara import RunConfig
from llmhara import orchestrator
from llmhara.domain import Quadrant, Severity, Stage
from llmhara.export import HARA_COLUMNS, validate_rows
from llmhara.fixtures import build_fixtures, load_item
from llmhara.ledger import Ledger, canonical_json, make_header, read_ledger, verify
from llmhara.orchestrator import run
from llmhara.provider import CompletionRequest
from llmhara.templates import load_template_set

from helpers import Counting

CAEM = load_item("caem")
TEMPLATES = load_template_set()

runs = st.fixed_dictionaries(
    {
        "seed": st.integers(0, 10_000),
        "geometries": st.integers(1, 5),
        "hi": st.integers(0, 3),
        "k": st.integers(1, 6),
        "weights": st.tuples(*[st.floats(0.05, 1.0)] * 4),
        "limit": st.integers(1, 6),
    }
)

PIPELINE = settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])


def fixture_run(p, ledger):
    provider, truth = build_fixtures(
        CAEM, seed=p["seed"], geometries=p["geometries"], events_per_pair=(0, p["hi"]),
        representatives=p["k"], severity_weights=p["weights"],
    )
    cfg = RunConfig(geometries_requested=p["geometries"], representatives_per_quadrant=p["k"],
                    concurrency_limit=p["limit"], ledger_fsync=False)
    counting = Counting(provider)
    table, pipe = run(CAEM, cfg, counting, ledger)
    return table, truth, counting.calls


@PIPELINE
@given(runs)
def test_run_invariants(p):
    with tempfile.TemporaryDirectory() as d:
        table, truth, calls = fixture_run(p, Path(d) / "l.jsonl")
        assert calls["Expansion"] == truth.pairs
        assert calls.get("Severity", 0) == len(truth.events)
        assert calls.get("SafetyGoal", 0) == sum(ev.severity > Severity.S0 for ev in truth.events)

        sizes = truth.quadrant_sizes()
        for q in Quadrant.all():
            assert sum(r.quadrant == q for r in table.rows) == min(p["k"], sizes[q])
        assert len(table) <= 4 * p["k"]

        with_goal = {r.event.id for r in table.rows if r.event.goal is not None}
        above_s0 = {r.event.id for r in table.rows if r.event.assessment.severity > Severity.S0}
        assert with_goal == above_s0
        ids = [r.event.id for r in table.rows]
        goal_ids = [r.event.goal.id for r in table.rows if r.event.goal]
        assert len(set(ids)) == len(ids) and len(set(goal_ids)) == len(goal_ids)

        rows = [dict(zip(HARA_COLUMNS, r)) for r in list(csv.reader(io.StringIO(table.to_csv())))[1:]]
        assert validate_rows(rows).clean

        _, entries = read_ledger(Path(d) / "l.jsonl")
        assert sum(e.kind == "exchange" for e in entries) == sum(calls.values())


@settings(max_examples=10, deadline=None)
@given(runs, st.integers(1, 8))
def test_concurrency_does_not_change_output(p, other_limit):
    with tempfile.TemporaryDirectory() as d:
        a, _, _ = fixture_run(p, Path(d) / "a.jsonl")
        b, _, _ = fixture_run({**p, "limit": other_limit}, Path(d) / "b.jsonl")
        assert a.to_csv() == b.to_csv()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_scripted_transcript_is_deterministic(seed):
    def transcript():
        provider, truth = build_fixtures(CAEM, seed=seed, geometries=2)
        h = hashlib.sha256()
        for key in sorted(provider.fixtures, key=lambda k: (k.stage.number, k.logical_key, k.attempt)):
            req = CompletionRequest(f"prompt for {key}", key.stage, key.attempt, key.logical_key)
            h.update(provider.complete(req).raw_text.encode())
        return h.hexdigest()

    assert transcript() == transcript()


def test_every_response_is_ledgered_before_it_is_parsed(monkeypatch, tmp_path):
    provider, _ = build_fixtures(CAEM, seed=3, geometries=2)
    ledger_path = tmp_path / "l.jsonl"
    real = orchestrator.extract_table
    unseen = []

    def spying_extract(raw, schema, **kw):
        on_disk = ledger_path.read_text(encoding="utf-8")
        if canonical_json(raw)[1:-1] not in on_disk:
            unseen.append(raw[:40])
        return real(raw, schema, **kw)

    monkeypatch.setattr(orchestrator, "extract_table", spying_extract)
    run(CAEM, RunConfig(geometries_requested=2, ledger_fsync=False), provider, ledger_path)
    assert unseen == []


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(list(Stage)), st.text(max_size=50), st.text(max_size=200)), max_size=12))
def test_any_append_sequence_verifies(entries):
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "l.jsonl"
        with Ledger.create(path, make_header(run="p"), fsync=False) as led:
            for stage, key, text in entries:
                led.append("exchange", stage.value, logical_key=key, attempt=1, response_text=text)
        report = verify(path)
        assert report.clean and report.entries == len(entries)
        _, back = read_ledger(path)
        assert [e.response_text for e in back] == [t for _, _, t in entries]
