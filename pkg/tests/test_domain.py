import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from llmhara.domain import (
    DetailedScenario,
    Guideword,
    GuidewordKind,
    HazardousEvent,
    IntegrityError,
    ItemDefinition,
    Malfunction,
    PreconditionError,
    Quadrant,
    RoadGeometry,
    RunContext,
    SafetyGoal,
    Severity,
    SeverityAssessment,
    SeverityBand,
    classify_quadrant,
    duplicate_ids,
    sequence_ids,
    validate_event,
)

OMISSION = Malfunction("M01", Guideword(GuidewordKind.OMISSION, "too late"), "steers too late")
COMMISSION = Malfunction("M02", Guideword(GuidewordKind.COMMISSION), "steers without reason")
G01 = RoadGeometry("G01", 2, "straight", "level", ("bridge",))
CTX = RunContext.build([OMISSION, COMMISSION], [G01])
MALFS = CTX.malfunctions


def event(severity=None, goal=True, malfunction="M01", eid="E001"):
    assessment = SeverityAssessment(Severity(severity), "because") if severity else None
    g = SafetyGoal("SG001", eid, "shall not") if goal else None
    return HazardousEvent(
        eid, malfunction, DetailedScenario("G01", (("truck", "ahead"),), "narrative"), "harm", assessment, g
    )


@pytest.mark.parametrize(
    "malfunction, severity, expected",
    [
        ("M01", "S1", Quadrant(GuidewordKind.OMISSION, SeverityBand.LOW)),
        ("M02", "S3", Quadrant(GuidewordKind.COMMISSION, SeverityBand.HIGH)),
        ("M01", "S0", Quadrant(GuidewordKind.OMISSION, SeverityBand.LOW)),
    ],
)
def test_classify_quadrant_examples(malfunction, severity, expected):
    assert classify_quadrant(event(severity, malfunction=malfunction), MALFS) == expected


def test_quadrant_totality_exhaustive():
    seen = set()
    for (mid, kind), sev in itertools.product([("M01", "Omission"), ("M02", "Commission")], Severity):
        q = classify_quadrant(event(sev.value, malfunction=mid), MALFS)
        assert q.guideword_kind.value == kind
        assert q.severity_band == (SeverityBand.HIGH if sev.value in ("S2", "S3") else SeverityBand.LOW)
        seen.add(q)
    assert seen == set(Quadrant.all())
    assert len(Quadrant.all()) == 4


def test_classify_quadrant_errors():
    with pytest.raises(PreconditionError):
        classify_quadrant(event(None), MALFS)
    with pytest.raises(IntegrityError):
        classify_quadrant(event("S2", malfunction="M99"), MALFS)


def test_validate_event_examples():
    assert [v.code for v in validate_event(event("S2", goal=False), CTX)] == ["goal-missing-for-S>0"]
    assert [v.code for v in validate_event(event("S0", goal=True), CTX)] == ["goal-present-for-S0"]
    assert validate_event(event("S1", goal=True), CTX) == []


def test_validate_event_reference_violations():
    ev = HazardousEvent("E002", "M42", DetailedScenario("G42", (), " "), "", None, SafetyGoal("SG1", "E001", "x"))
    codes = {v.code for v in validate_event(ev, CTX)}
    assert codes == {
        "malfunction-unresolved",
        "geometry-unresolved",
        "narrative-empty",
        "consequence-empty",
        "goal-without-assessment",
        "goal-event-mismatch",
    }


@given(st.sampled_from(list(Severity)), st.booleans())
def test_goal_gating_is_a_bijection(sev, has_goal):
    report = validate_event(event(sev.value, goal=has_goal), CTX)
    consistent = has_goal == (sev > Severity.S0)
    assert (report == []) == consistent


def test_severity_tokens_are_never_coerced():
    assert Severity.parse(" S2 ") is Severity.S2
    for bad in ["s2", "S4", "S 2", "moderate", "2", ""]:
        with pytest.raises(ValueError):
            Severity.parse(bad)
    assert Severity.S3 > Severity.S2 > Severity.S1 > Severity.S0


def test_guideword_round_trip():
    for gw in [Guideword(GuidewordKind.OMISSION), Guideword(GuidewordKind.COMMISSION, "too early")]:
        assert Guideword.parse(str(gw)) == gw
    with pytest.raises(ValueError):
        Guideword.parse("Late")


def test_item_definition_invariants():
    with pytest.raises(ValueError):
        ItemDefinition("AEB", "   ")
    for bad in ["a/b", "a,b", "a\\b"]:
        with pytest.raises(ValueError):
            ItemDefinition(bad, "text")
    item = ItemDefinition.from_text("# My Function\n\nDoes things.")
    assert item.function_name == "My Function"


def test_entity_invariants():
    with pytest.raises(ValueError):
        RoadGeometry("G01", 0, "straight", "level")
    with pytest.raises(ValueError):
        Malfunction("M01", Guideword(GuidewordKind.OMISSION), " ")
    with pytest.raises(ValueError):
        SeverityAssessment(Severity.S1, "")
    with pytest.raises(ValueError):
        SafetyGoal("SG1", "E1", "")


def test_id_scheme():
    assert sequence_ids("M", 3) == ["M01", "M02", "M03"]
    assert sequence_ids("E", 120, min_width=3)[-1] == "E120"
    ids = sequence_ids("E", 1000, min_width=3)
    assert ids[0] == "E0001" and ids == sorted(ids)
    assert duplicate_ids(["a", "b", "a", "a"]) == ["a"]
