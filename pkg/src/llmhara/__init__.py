"""Automated hazard analysis and risk assessment through a chained LLM prompt pipeline."""

__version__ = "0.1.0"

from .domain import (  # noqa: E402
    Guideword,
    GuidewordKind,
    HazardousEvent,
    ItemDefinition,
    Malfunction,
    Quadrant,
    RoadGeometry,
    SafetyGoal,
    Severity,
    SeverityAssessment,
    Stage,
    classify_quadrant,
    validate_event,
)
from .orchestrator import HaraTable, Pipeline, RunConfig, StageError, replay_table, resume, run  # noqa: E402
from .templates import load_template_set  # noqa: E402

__all__ = [
    "Guideword",
    "GuidewordKind",
    "HaraTable",
    "HazardousEvent",
    "ItemDefinition",
    "Malfunction",
    "Pipeline",
    "Quadrant",
    "RoadGeometry",
    "RunConfig",
    "SafetyGoal",
    "Severity",
    "SeverityAssessment",
    "Stage",
    "StageError",
    "classify_quadrant",
    "load_template_set",
    "replay_table",
    "resume",
    "run",
    "validate_event",
]
