"""Opt-in smoke test against a real chat-completion endpoint.

Runs only when ``LLMHARA_LIVE_ENDPOINT`` and ``LLMHARA_LIVE_MODEL`` are set
and the credential variable (``LLMHARA_LIVE_KEY_ENV``, default
``OPENAI_API_KEY``) holds a key. Each stage is called once at small scale
and only the schema validity of the parsed output is checked.
"""

import os

import pytest

from llmhara import RunConfig
from llmhara.domain import GuidewordKind, RunContext, Severity
from llmhara.fixtures import load_item
from llmhara.orchestrator import Pipeline
from llmhara.provider import HttpProvider
from llmhara.templates import load_template_set

ENDPOINT = os.environ.get("LLMHARA_LIVE_ENDPOINT")
MODEL = os.environ.get("LLMHARA_LIVE_MODEL")
KEY_ENV = os.environ.get("LLMHARA_LIVE_KEY_ENV", "OPENAI_API_KEY")

pytestmark = [
    pytest.mark.live,
    pytest.mark.skipif(
        not (ENDPOINT and MODEL and os.environ.get(KEY_ENV)),
        reason="set LLMHARA_LIVE_ENDPOINT, LLMHARA_LIVE_MODEL and the credential variable to run",
    ),
]


def test_each_stage_parses_against_live_model():
    provider = HttpProvider(ENDPOINT, MODEL, api_key_env=KEY_ENV, max_in_flight=2)
    assert provider.probe().ready
    cfg = RunConfig(model_id=MODEL, geometries_requested=2, representatives_per_quadrant=1, ledger_fsync=False)
    pipe = Pipeline(load_template_set(), provider, cfg)
    item = load_item("caem")

    malfunctions = pipe.identify_hazards(item)
    assert malfunctions and all(m.guideword.kind in GuidewordKind for m in malfunctions)
    geometries = pipe.generate_geometries(item)
    assert len(geometries) == 2 and all(g.lanes >= 1 for g in geometries)
    ctx = RunContext.build(malfunctions, geometries)

    events = pipe.expand_scenarios(item, malfunctions[0], geometries[0])
    if not events:
        pytest.skip("model reported no hazardous event for the first pair")
    ev = events[0]
    ev = type(ev)("E001", ev.malfunction_ref, ev.scenario, ev.consequence)
    assessment = pipe.assess_severity(item, ev, ctx)
    assert assessment.severity in Severity and assessment.rationale.strip()
    ev = type(ev)(ev.id, ev.malfunction_ref, ev.scenario, ev.consequence, assessment)
    if assessment.severity > Severity.S0:
        goal = pipe.formulate_safety_goal(item, ev, "SG001", ctx)
        assert goal.event_ref == "E001" and goal.text.strip()
        ev = type(ev)(ev.id, ev.malfunction_ref, ev.scenario, ev.consequence, assessment, goal)

    # two events in one quadrant with one representative forces a selection call
    twin = type(ev)("E002", ev.malfunction_ref, ev.scenario, ev.consequence, assessment,
                    type(ev.goal)("SG002", "E002", ev.goal.text) if ev.goal else None)
    rows = pipe.cluster_and_select([ev, twin], ctx)
    assert len(rows) == 1 and rows[0].event.id in ("E001", "E002")
    assert pipe.stats.provider_calls.get("ClusterSelect", 0) >= 1
    provider.close()
