"""The reviewer-facing HARA CSV: writing it, reading it back, and checking it."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

from .domain import Guideword, Quadrant, Severity, SeverityBand, Violation, duplicate_ids

if TYPE_CHECKING:
    from .orchestrator import HaraTable

HARA_COLUMNS = (
    "ID",
    "Guideword",
    "Malfunction",
    "Core Scenario",
    "Detailed Scenario",
    "Hazardous Event",
    "Severity",
    "Severity Rationale",
    "Safety Goal",
)


class CsvFormatError(Exception):
    pass


def table_to_csv(table: "HaraTable") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HARA_COLUMNS)
    for row in table.rows:
        ev = row.event
        assert ev.assessment is not None
        w.writerow(
            [
                ev.id,
                str(row.malfunction.guideword),
                f"{row.malfunction.id}: {row.malfunction.statement}",
                f"{row.geometry.id}: {row.geometry.describe()}",
                ev.scenario.describe(),
                ev.consequence,
                ev.assessment.severity.value,
                ev.assessment.rationale,
                f"{ev.goal.id}: {ev.goal.text}" if ev.goal else "",
            ]
        )
    return buf.getvalue()


def write_csv(table: "HaraTable", path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(table_to_csv(table).encode("utf-8"))
    return p


def read_csv_rows(path: str | Path) -> list[dict[str, str]]:
    """Parse an exported HARA CSV; the header must match exactly."""
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CsvFormatError(f"cannot read {path}: {exc}") from exc
    try:
        records = list(csv.reader(io.StringIO(text, newline=""), strict=True))
    except csv.Error as exc:
        raise CsvFormatError(f"{path}: malformed CSV ({exc})") from exc
    if not records or tuple(records[0]) != HARA_COLUMNS:
        raise CsvFormatError(f"{path}: header must be {','.join(HARA_COLUMNS)}")
    rows = []
    for n, rec in enumerate(records[1:], start=2):
        if len(rec) != len(HARA_COLUMNS):
            raise CsvFormatError(f"{path}: line {n} has {len(rec)} cells, expected {len(HARA_COLUMNS)}")
        rows.append(dict(zip(HARA_COLUMNS, rec)))
    return rows


@dataclass
class CsvReport:
    violations: list[Violation]
    rows: int

    @property
    def clean(self) -> bool:
        return not self.violations


def validate_rows(rows: list[dict[str, str]]) -> CsvReport:
    """Domain invariants over exported rows: goal gating, quadrant order, unique ids."""
    out: list[Violation] = []
    for dup in duplicate_ids(r["ID"] for r in rows):
        out.append(Violation("duplicate-id", dup))

    last_key: tuple[tuple[int, int], str] | None = None
    for r in rows:
        rid = r["ID"]
        if not r["Hazardous Event"].strip():
            out.append(Violation("consequence-empty", rid))
        if not r["Severity Rationale"].strip():
            out.append(Violation("rationale-empty", rid))
        try:
            sev = Severity.parse(r["Severity"])
        except ValueError:
            out.append(Violation("bad-severity", rid, r["Severity"]))
            continue
        has_goal = bool(r["Safety Goal"].strip())
        if sev > Severity.S0 and not has_goal:
            out.append(Violation("goal-missing-for-S>0", rid, sev.value))
        if sev == Severity.S0 and has_goal:
            out.append(Violation("goal-present-for-S0", rid))
        try:
            gw = Guideword.parse(r["Guideword"])
        except ValueError:
            out.append(Violation("bad-guideword", rid, r["Guideword"]))
            continue
        key = (Quadrant(gw.kind, SeverityBand.of(sev)).sort_key, rid)
        if last_key is not None and key < last_key:
            out.append(Violation("order-violation", rid, "rows must be sorted by quadrant, then id"))
        last_key = key
    return CsvReport(out, len(rows))


def validate_csv(path: str | Path) -> CsvReport:
    return validate_rows(read_csv_rows(path))
