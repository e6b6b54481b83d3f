import json
import re
import shutil

import pytest
from hypothesis import given
from hypothesis import strategies as st

from llmhara.domain import Stage
from llmhara.parsing import (
    EXPANSION_SCHEMA,
    HAZARDS_SCHEMA,
    SAFETY_GOAL_SCHEMA,
    SEVERITY_SCHEMA,
    cluster_schema,
    geometry_schema,
)
from llmhara.templates import (
    PromptTemplate,
    RenderError,
    TemplateError,
    default_bundle_path,
    estimate_tokens,
    load_template_set,
    placeholders_in,
    render,
)

# function names of every bundled item-definition fixture
FIXTURE_FUNCTION_NAMES = [
    "Collision Avoidance by Evasive Maneuver",
    "Collision avoidance by evasive maneuver",
    "CAEM",
    "Emergency Lane Keeping",
    "ELK",
]


@pytest.fixture
def bundle(tmp_path):
    dst = tmp_path / "bundle"
    shutil.copytree(default_bundle_path(), dst)
    return dst


def edit_manifest(root, fn):
    m = json.loads((root / "manifest.json").read_text())
    fn(m)
    (root / "manifest.json").write_text(json.dumps(m))


def test_load_shipped_bundle():
    ts = load_template_set()
    assert len(ts) == 6
    assert set(ts.templates) == set(Stage)
    assert ts.version == "1.0.0"
    assert ts.reconstruction


def test_missing_stage_is_rejected(bundle):
    edit_manifest(bundle, lambda m: m["stages"].pop("ClusterSelect"))
    with pytest.raises(TemplateError, match="missing stage: ClusterSelect"):
        load_template_set(bundle)


def test_duplicate_stage_file_is_rejected(bundle):
    edit_manifest(bundle, lambda m: m["stages"]["Severity"].update(file="01_hazards.txt"))
    with pytest.raises(TemplateError, match="duplicate"):
        load_template_set(bundle)


def test_undeclared_placeholder_is_named(bundle):
    edit_manifest(bundle, lambda m: m["stages"]["Hazards"].update(placeholders=[]))
    with pytest.raises(TemplateError, match=r"\{item_definition\}.*context"):
        load_template_set(bundle)


def test_declared_but_unused_placeholder(bundle):
    edit_manifest(bundle, lambda m: m["stages"]["Hazards"]["placeholders"].append("extra"))
    with pytest.raises(TemplateError, match=r"\{extra\}"):
        load_template_set(bundle)


def test_crlf_is_rejected(bundle):
    p = bundle / "04_severity.txt"
    p.write_bytes(p.read_bytes().replace(b"\n", b"\r\n"))
    with pytest.raises(TemplateError, match="CR"):
        load_template_set(bundle)


def test_empty_template_section_is_rejected():
    with pytest.raises(TemplateError, match="empty response template"):
        PromptTemplate.parse(Stage.HAZARDS, "[context]\nx\n[task]\ny\n[template]\n\n", frozenset())


def test_render_hazards_embeds_item_definition(caem):
    ts = load_template_set()
    p = render(ts[Stage.HAZARDS], {"item_definition": caem.description})
    assert caem.description in p.text
    assert "collision avoidance by evasive maneuver" in p.text.lower()
    assert p.stage is Stage.HAZARDS
    assert p.token_estimate == estimate_tokens(p.text)
    assert not placeholders_in(p.text)


def test_render_strictness():
    t = load_template_set()[Stage.HAZARDS]
    with pytest.raises(RenderError, match="empty binding"):
        render(t, {"item_definition": "  "})
    with pytest.raises(RenderError, match="missing binding"):
        render(t, {})
    with pytest.raises(RenderError, match="unexpected binding"):
        render(t, {"item_definition": "x", "geometry": "y"})


def test_expansion_bindings_land_where_placeholders_were():
    t = load_template_set()[Stage.EXPANSION]
    bindings = {
        "malfunction": "<<M03: steering too late>>",
        "geometry": "<<G12: 2 lanes, sharp bend, downhill>>",
        "item_definition": "<<ITEM>>",
    }
    p = render(t, bindings)
    for name, value in bindings.items():
        assert p.text.count(value) == 1
    # oracle: substitute directly into the raw sections
    raw = "\n\n".join([t.context_section, t.task_section, t.template_section]) + "\n"
    expected = raw
    for name, value in bindings.items():
        expected = expected.replace("{" + name + "}", value)
    assert p.text == expected


def test_escaped_braces():
    t = PromptTemplate.parse(
        Stage.HAZARDS, "[context]\n{{literal}} {x}\n[task]\nt\n[template]\nA,B\n", frozenset({"x"})
    )
    assert render(t, {"x": "v"}).text.startswith("{literal} v")


@given(st.lists(st.text(min_size=1).filter(lambda s: s.strip()), min_size=3, max_size=3))
def test_render_never_alters_non_placeholder_text(values):
    t = load_template_set()[Stage.EXPANSION]
    names = sorted(t.declared_placeholders)
    p = render(t, dict(zip(names, values)))
    # excise placeholders from the template and bindings from the output: the rest is identical
    raw = "\n\n".join([t.context_section, t.task_section, t.template_section]) + "\n"
    pieces = re.split(r"\{[a-z_]+\}", raw)
    pos = 0
    for piece in pieces:
        idx = p.text.find(piece, pos)
        assert idx >= pos
        pos = idx + len(piece)
    assert pos == len(p.text)


def test_estimate_tokens_basics():
    assert estimate_tokens("") == 0
    assert estimate_tokens("abcd") == 1
    assert estimate_tokens("abcde") == 2


@given(st.text(), st.text())
def test_estimate_tokens_monotone(a, b):
    assert estimate_tokens(a + b) >= estimate_tokens(a)


def test_estimate_tokens_against_tokenizer_oracle(caem):
    # 877 = GPT-3 BPE (r50k) token count of this exact text, computed once offline
    ts = load_template_set()
    prompt = render(ts[Stage.HAZARDS], {"item_definition": caem.description}).text
    text = (prompt * 3)[:4000]
    assert len(text) == 4000
    oracle = 877
    assert abs(estimate_tokens(text) - oracle) <= 0.2 * oracle


def test_templates_are_function_agnostic():
    ts = load_template_set()
    for stage, t in ts.templates.items():
        body = "\n".join([t.context_section, t.task_section, t.template_section])
        for name in FIXTURE_FUNCTION_NAMES:
            assert not re.search(rf"\b{re.escape(name)}\b", body), (stage, name)


def test_template_headers_match_stage_schemas():
    ts = load_template_set()
    schemas = {
        Stage.HAZARDS: HAZARDS_SCHEMA,
        Stage.GEOMETRIES: geometry_schema(20),
        Stage.EXPANSION: EXPANSION_SCHEMA,
        Stage.SEVERITY: SEVERITY_SCHEMA,
        Stage.SAFETY_GOAL: SAFETY_GOAL_SCHEMA,
        Stage.CLUSTER_SELECT: cluster_schema(["E001"], 5),
    }
    for stage, schema in schemas.items():
        last_line = ts[stage].template_section.strip().splitlines()[-1]
        assert last_line == schema.header_line, stage
