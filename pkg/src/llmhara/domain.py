"""HARA domain types, invariants and the rule-based quadrant classification."""

from __future__ import annotations

import enum
import re
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field


class IntegrityError(Exception):
    """A reference between entities does not resolve."""


class PreconditionError(Exception):
    """An operation was called on an input that does not satisfy its precondition."""


class Stage(str, enum.Enum):
    """The six prompt stages, in pipeline order."""

    HAZARDS = "Hazards"
    GEOMETRIES = "Geometries"
    EXPANSION = "Expansion"
    SEVERITY = "Severity"
    SAFETY_GOAL = "SafetyGoal"
    CLUSTER_SELECT = "ClusterSelect"

    @property
    def number(self) -> int:
        return list(Stage).index(self) + 1


class GuidewordKind(str, enum.Enum):
    OMISSION = "Omission"
    COMMISSION = "Commission"

    @classmethod
    def parse(cls, token: str) -> "GuidewordKind":
        norm = token.strip().casefold()
        for kind in cls:
            if kind.value.casefold() == norm:
                return kind
        raise ValueError(f"unknown guideword: {token!r}")


class Severity(str, enum.Enum):
    S0 = "S0"
    S1 = "S1"
    S2 = "S2"
    S3 = "S3"

    @classmethod
    def parse(cls, token: str) -> "Severity":
        # exact tokens only; "s2", "S 2", "moderate" are all rejected
        try:
            return cls(token.strip())
        except ValueError:
            raise ValueError(f"unknown severity: {token!r}") from None

    @property
    def rank(self) -> int:
        return int(self.value[1])

    def __gt__(self, other: object) -> bool:
        if not isinstance(other, Severity):
            return NotImplemented
        return self.rank > other.rank

    def __ge__(self, other: object) -> bool:
        if not isinstance(other, Severity):
            return NotImplemented
        return self.rank >= other.rank

    def __lt__(self, other: object) -> bool:
        if not isinstance(other, Severity):
            return NotImplemented
        return self.rank < other.rank

    def __le__(self, other: object) -> bool:
        if not isinstance(other, Severity):
            return NotImplemented
        return self.rank <= other.rank


class SeverityBand(str, enum.Enum):
    LOW = "Low"
    HIGH = "High"

    @classmethod
    def of(cls, severity: Severity) -> "SeverityBand":
        # fixed S0/S1 | S2/S3 split
        return cls.HIGH if severity >= Severity.S2 else cls.LOW


_FORBIDDEN_NAME_CHARS = re.compile(r"[/\\,;\t\n\r\"]")


@dataclass(frozen=True)
class ItemDefinition:
    function_name: str
    description: str

    def __post_init__(self) -> None:
        if not self.function_name.strip():
            raise ValueError("function_name must be non-empty")
        if _FORBIDDEN_NAME_CHARS.search(self.function_name):
            raise ValueError(
                f"function_name {self.function_name!r} contains a path separator or delimiter"
            )
        if not self.description.strip():
            raise ValueError("item definition description must be non-empty")

    @classmethod
    def from_text(cls, text: str, function_name: str | None = None) -> "ItemDefinition":
        """Build an item definition from a markdown/plain-text document.

        When ``function_name`` is not given, the first markdown heading is used.
        """
        if function_name is None:
            for line in text.splitlines():
                if line.startswith("#"):
                    function_name = line.lstrip("#").strip()
                    break
            else:
                raise ValueError("no function name given and no heading in item definition")
        return cls(function_name=function_name, description=text.strip())


@dataclass(frozen=True)
class Guideword:
    kind: GuidewordKind
    qualifier: str = ""

    def __str__(self) -> str:
        if self.qualifier:
            return f"{self.kind.value} ({self.qualifier})"
        return self.kind.value

    @classmethod
    def parse(cls, text: str) -> "Guideword":
        """Inverse of ``str()``: ``"Commission (too early)"``."""
        m = re.fullmatch(r"\s*([A-Za-z]+)\s*(?:\((.*)\))?\s*", text, re.DOTALL)
        if not m:
            raise ValueError(f"unparsable guideword: {text!r}")
        return cls(GuidewordKind.parse(m.group(1)), (m.group(2) or "").strip())


@dataclass(frozen=True)
class Malfunction:
    id: str
    guideword: Guideword
    statement: str

    def __post_init__(self) -> None:
        if not self.statement.strip():
            raise ValueError(f"malfunction {self.id}: empty statement")


@dataclass(frozen=True)
class RoadGeometry:
    id: str
    lanes: int
    shape: str
    slope: str
    features: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.lanes < 1:
            raise ValueError(f"geometry {self.id}: lanes must be >= 1, got {self.lanes}")

    def describe(self) -> str:
        lanes = "1 lane" if self.lanes == 1 else f"{self.lanes} lanes"
        text = f"{lanes}, {self.shape}, {self.slope}"
        if self.features:
            text += "; " + ", ".join(self.features)
        return text


@dataclass(frozen=True)
class DetailedScenario:
    geometry_ref: str
    agents: tuple[tuple[str, str], ...]
    narrative: str

    def describe(self) -> str:
        if not self.agents:
            return self.narrative
        agents = "; ".join(f"{label}: {traj}" if traj else label for label, traj in self.agents)
        return f"{self.narrative} [Agents: {agents}]"


@dataclass(frozen=True)
class SeverityAssessment:
    severity: Severity
    rationale: str

    def __post_init__(self) -> None:
        if not self.rationale.strip():
            raise ValueError("severity rationale must be non-empty")


@dataclass(frozen=True)
class SafetyGoal:
    id: str
    event_ref: str
    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError(f"safety goal {self.id}: empty text")


@dataclass(frozen=True)
class HazardousEvent:
    id: str
    malfunction_ref: str
    scenario: DetailedScenario
    consequence: str
    assessment: SeverityAssessment | None = None
    goal: SafetyGoal | None = None


@dataclass(frozen=True)
class Quadrant:
    guideword_kind: GuidewordKind
    severity_band: SeverityBand

    def __str__(self) -> str:
        return f"{self.guideword_kind.value}/{self.severity_band.value}"

    @property
    def sort_key(self) -> tuple[int, int]:
        return (
            list(GuidewordKind).index(self.guideword_kind),
            list(SeverityBand).index(self.severity_band),
        )

    @classmethod
    def all(cls) -> list["Quadrant"]:
        return [cls(k, b) for k in GuidewordKind for b in SeverityBand]


@dataclass
class RunContext:
    """Id tables for reference resolution within one run."""

    malfunctions: Mapping[str, Malfunction] = field(default_factory=dict)
    geometries: Mapping[str, RoadGeometry] = field(default_factory=dict)

    @classmethod
    def build(
        cls, malfunctions: Iterable[Malfunction], geometries: Iterable[RoadGeometry]
    ) -> "RunContext":
        return cls({m.id: m for m in malfunctions}, {g.id: g for g in geometries})


def classify_quadrant(event: HazardousEvent, malfunctions: Mapping[str, Malfunction]) -> Quadrant:
    if event.assessment is None:
        raise PreconditionError(f"event {event.id} has no severity assessment")
    try:
        malfunction = malfunctions[event.malfunction_ref]
    except KeyError:
        raise IntegrityError(
            f"event {event.id} references unknown malfunction {event.malfunction_ref}"
        ) from None
    return Quadrant(malfunction.guideword.kind, SeverityBand.of(event.assessment.severity))


@dataclass(frozen=True)
class Violation:
    code: str
    entity: str
    detail: str = ""


def validate_event(event: HazardousEvent, ctx: RunContext) -> list[Violation]:
    """Check referential and presence invariants of one event.

    Returns an empty list when the event is consistent. Violations are data;
    this never raises.
    """
    out: list[Violation] = []

    def bad(code: str, detail: str = "") -> None:
        out.append(Violation(code, event.id, detail))

    if event.malfunction_ref not in ctx.malfunctions:
        bad("malfunction-unresolved", event.malfunction_ref)
    if event.scenario.geometry_ref not in ctx.geometries:
        bad("geometry-unresolved", event.scenario.geometry_ref)
    if not event.scenario.narrative.strip():
        bad("narrative-empty")
    if not event.consequence.strip():
        bad("consequence-empty")

    a, g = event.assessment, event.goal
    if a is not None and not a.rationale.strip():
        bad("rationale-empty")
    if g is not None:
        if a is None:
            bad("goal-without-assessment")
        elif a.severity == Severity.S0:
            bad("goal-present-for-S0")
        if g.event_ref != event.id:
            bad("goal-event-mismatch", g.event_ref)
        if not g.text.strip():
            bad("goal-text-empty")
    elif a is not None and a.severity > Severity.S0:
        bad("goal-missing-for-S>0", a.severity.value)
    return out


def duplicate_ids(ids: Iterable[str]) -> list[str]:
    seen: set[str] = set()
    dups: list[str] = []
    for i in ids:
        if i in seen and i not in dups:
            dups.append(i)
        seen.add(i)
    return dups


def sequence_ids(prefix: str, count: int, min_width: int = 2) -> list[str]:
    """Zero-padded sequential ids: ``sequence_ids("M", 3) == ["M01", "M02", "M03"]``."""
    width = max(min_width, len(str(count)))
    return [f"{prefix}{i:0{width}d}" for i in range(1, count + 1)]
