"""Structured extraction of CSV tables from raw model output, and repair prompts.

Models wrap tables in prose, code fences or markdown pipe syntax, drift the
header, truncate, or emit out-of-domain tokens. :func:`extract_table` turns
any of that into either typed rows or a :class:`ParseFailure`; it never
raises. :func:`build_repair_prompt` feeds a failure back to the model.
"""

from __future__ import annotations

import csv
import enum
import io
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, replace
from typing import Any

from .domain import GuidewordKind, Severity, Stage
from .templates import RenderedPrompt, estimate_tokens

EXCERPT_CHARS = 300


class ValueKind(str, enum.Enum):
    TEXT = "text"
    INTEGER = "integer"
    SEVERITY = "severity-token"
    GUIDEWORD = "guideword-token"
    ID = "id-token"


_ID_RE = re.compile(r"[A-Za-z]{1,4}\d{1,6}")


def _norm(name: str) -> str:
    return " ".join(name.split()).casefold()



@dataclass(frozen=True)
class Column:
    name: str
    kind: ValueKind = ValueKind.TEXT
    required: bool = True
    choices: frozenset[str] | None = None
    unique: bool = False
    min_value: int | None = None


@dataclass(frozen=True)
class StageSchema:
    stage: Stage
    columns: tuple[Column, ...]
    min_rows: int = 0
    max_rows: int | None = None

    def __post_init__(self) -> None:
        names = [_norm(c.name) for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError(f"{self.stage.value}: duplicate column names")
        if self.min_rows < 0:
            raise ValueError("min_rows must be non-negative")
        if self.max_rows is not None and self.min_rows > self.max_rows:
            raise ValueError("min_rows > max_rows")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def header_line(self) -> str:
        return format_csv_row(self.names)


@dataclass(frozen=True)
class ParseFailure:
    code: str  # no-table-found | header-mismatch | bad-cell | row-count | truncated
    detail: str
    excerpt: str = ""
    column: str | None = None
    row: int | None = None


@dataclass(frozen=True)
class ParseOutcome:
    rows: list[dict[str, Any]] | None = None
    failure: ParseFailure | None = None

    def __post_init__(self) -> None:
        if (self.rows is None) == (self.failure is None):
            raise ValueError("exactly one of rows/failure must be set")

    @property
    def ok(self) -> bool:
        return self.failure is None


# -- schemas ---------------------------------------------------------------

HAZARDS_SCHEMA = StageSchema(
    Stage.HAZARDS,
    (
        Column("Guideword", ValueKind.GUIDEWORD),
        Column("Qualifier", required=False),
        Column("Malfunction"),
    ),
    min_rows=1,
)

EXPANSION_SCHEMA = StageSchema(
    Stage.EXPANSION,
    (
        Column("Agents", required=False),
        Column("Detailed Scenario"),
        # rows without a consequence are dropped by the orchestrator, not repaired
        Column("Hazardous Event", required=False),
    ),
    min_rows=0,
)

SEVERITY_SCHEMA = StageSchema(
    Stage.SEVERITY,
    (Column("Severity", ValueKind.SEVERITY), Column("Rationale")),
    min_rows=1,
    max_rows=1,
)

SAFETY_GOAL_SCHEMA = StageSchema(
    Stage.SAFETY_GOAL, (Column("Safety Goal"),), min_rows=1, max_rows=1
)


def geometry_schema(count: int) -> StageSchema:
    return StageSchema(
        Stage.GEOMETRIES,
        (
            Column("Lanes", ValueKind.INTEGER, min_value=1),
            Column("Shape"),
            Column("Slope"),
            Column("Features", required=False),
        ),
        min_rows=count,
        max_rows=count,
    )


def cluster_schema(valid_ids: Iterable[str], count: int) -> StageSchema:
    return StageSchema(
        Stage.CLUSTER_SELECT,
        (
            Column("ID", ValueKind.ID, choices=frozenset(valid_ids), unique=True),
            Column("Reason", required=False),
        ),
        min_rows=count,
        max_rows=count,
    )


# -- CSV helpers -----------------------------------------------------------


def format_csv_row(values: Sequence[str]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(values)
    return buf.getvalue().rstrip("\n")


def serialize_rows(rows: Iterable[Mapping[str, Any]], schema: StageSchema) -> str:
    """Render typed rows as CSV under the schema header (inverse of extract_table)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(schema.names)
    for row in rows:
        w.writerow([_cell_text(row.get(c.name)) for c in schema.columns])
    return buf.getvalue()


def _cell_text(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, enum.Enum):
        return str(value.value)
    return str(value)


def _split_line(line: str) -> list[str] | None:
    try:
        rows = list(csv.reader([line], strict=True))
    except csv.Error:
        return None
    return rows[0] if rows else None


_PIPE_SEP = re.compile(r"^\s*\|?\s*:?-{2,}:?\s*(\|\s*:?-{2,}:?\s*)*\|?\s*$")


def _pipe_cells(line: str) -> list[str]:
    body = line.strip()
    if body.startswith("|"):
        body = body[1:]
    if body.endswith("|") and not body.endswith("\\|"):
        body = body[:-1]
    cells = re.split(r"(?<!\\)\|", body)
    return [c.strip().replace("\\|", "|").replace("<br>", "\n") for c in cells]


def normalize_markdown_tables(text: str) -> str:
    """Rewrite markdown pipe tables as CSV blocks; other lines are left alone."""
    out: list[str] = []
    block: list[str] = []

    def flush() -> None:
        if not block:
            return
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for ln in block:
            if not _PIPE_SEP.match(ln):
                w.writerow(_pipe_cells(ln))
        out.append("")
        out.extend(buf.getvalue().rstrip("\n").split("\n"))
        out.append("")
        block.clear()

    for line in text.split("\n"):
        if line.lstrip().startswith("|"):
            block.append(line)
        else:
            flush()
            out.append(line)
    flush()
    return "\n".join(out)


def _excerpt(text: str) -> str:
    text = text.strip()
    if len(text) > EXCERPT_CHARS:
        return text[:EXCERPT_CHARS] + "..."
    return text


def _find_header(lines: list[str], schema: StageSchema) -> int | None:
    want = [_norm(n) for n in schema.names]
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        fields = _split_line(line.strip())
        if fields is not None and [_norm(f) for f in fields] == want:
            return i
    return None


def _closest_header(lines: list[str], schema: StageSchema) -> str | None:
    want = {_norm(n) for n in schema.names}
    best, best_score = None, 0
    for line in lines:
        fields = _split_line(line.strip()) if line.strip() else None
        if not fields:
            continue
        score = len({_norm(f) for f in fields} & want)
        if score > best_score:
            best, best_score = line, score
    return best


def _convert(value: str, col: Column) -> Any:
    """Typed cell value; raises ValueError with a human-readable reason."""
    value = value.strip()
    if not value:
        if col.required:
            raise ValueError("empty value")
        return ""
    if col.kind is ValueKind.INTEGER:
        if not re.fullmatch(r"[+-]?\d+", value):
            raise ValueError(f"{value!r} is not an integer")
        out: Any = int(value)
        if col.min_value is not None and out < col.min_value:
            raise ValueError(f"{out} is below the minimum {col.min_value}")
    elif col.kind is ValueKind.SEVERITY:
        try:
            out = Severity.parse(value)
        except ValueError:
            raise ValueError(f"{value!r} is not one of S0, S1, S2, S3") from None
    elif col.kind is ValueKind.GUIDEWORD:
        try:
            out = GuidewordKind.parse(value)
        except ValueError:
            raise ValueError(f"{value!r} is not one of Omission, Commission") from None
    elif col.kind is ValueKind.ID:
        if not _ID_RE.fullmatch(value):
            raise ValueError(f"{value!r} is not an identifier")
        out = value
    else:
        out = value
    if col.choices is not None and str(_cell_text(out)) not in col.choices:
        raise ValueError(f"{value!r} is not an allowed value")
    return out


def extract_table(raw_text: str | bytes, schema: StageSchema, *, truncated: bool = False) -> ParseOutcome:
    """Locate the first table with the schema's header in ``raw_text`` and parse it.

    The header match is case-insensitive and tolerant to surrounding and
    repeated whitespace. The table ends at the first blank line, code fence or
    end of text; prose before and after it is ignored. Markdown pipe tables are
    normalized to CSV first if no CSV header is found. ``truncated=True``
    (the provider reported a cut-off response) fails immediately.
    """
    try:
        return _extract(raw_text, schema, truncated)
    except Exception as exc:  # pragma: no cover - last-resort guard for the never-raise contract
        return ParseOutcome(failure=ParseFailure("no-table-found", f"unparsable response: {exc}"))


def _extract(raw_text: str | bytes, schema: StageSchema, truncated: bool) -> ParseOutcome:
    if isinstance(raw_text, bytes):
        raw_text = raw_text.decode("utf-8", errors="replace")
    if truncated:
        return _fail("truncated", "the response was cut off before it was complete", raw_text[-EXCERPT_CHARS:])
    text = raw_text.replace("\r\n", "\n").replace("\r", "\n").replace("\x00", "").replace("\ufeff", "")

    lines = text.split("\n")
    start = _find_header(lines, schema)
    if start is None:
        md = normalize_markdown_tables(text)
        if md != text:
            lines = md.split("\n")
            start = _find_header(lines, schema)
    if start is None:
        near = _closest_header(lines, schema)
        if near is not None:
            return _fail(
                "header-mismatch",
                f"expected header {schema.header_line!r}",
                near,
            )
        return _fail("no-table-found", f"no table with header {schema.header_line!r}", text)

    body_lines: list[str] = []
    for line in lines[start + 1 :]:
        if line.lstrip().startswith("```"):
            break
        body_lines.append(line)
    body = "\n".join(body_lines)
    ends_cleanly = body.endswith("\n") or len(body_lines) < len(lines) - start - 1

    records: list[list[str]] = []
    raw_body = body.split("\n")
    reader = csv.reader(io.StringIO(body), strict=True)
    ncols = len(schema.columns)
    while True:
        try:
            rec = next(reader)
        except StopIteration:
            break
        except csv.Error as exc:
            if "end of data" in str(exc) or "EOF" in str(exc):
                return _fail("truncated", "the table ends inside a quoted cell", body[-EXCERPT_CHARS:])
            return _fail(
                "bad-cell",
                f"row {len(records) + 1}: malformed quoting ({exc})",
                _line_excerpt(body, reader.line_num),
                row=len(records) + 1,
            )
        if not rec or (len(rec) == 1 and not rec[0].strip() and not raw_body[reader.line_num - 1].strip()):
            ends_cleanly = True
            break
        records.append(rec)

    for i, rec in enumerate(records):
        if len(rec) != ncols:
            last = i == len(records) - 1
            if last and len(rec) < ncols and not ends_cleanly:
                return _fail("truncated", f"row {i + 1} is incomplete", format_csv_row(rec))
            return _fail(
                "bad-cell",
                f"row {i + 1} has {len(rec)} cells, expected {ncols} ({schema.header_line})",
                format_csv_row(rec),
                row=i + 1,
            )

    rows: list[dict[str, Any]] = []
    seen: dict[str, set[str]] = {c.name: set() for c in schema.columns if c.unique}
    for i, rec in enumerate(records):
        row: dict[str, Any] = {}
        for col, cell in zip(schema.columns, rec):
            try:
                val = _convert(cell, col)
            except ValueError as exc:
                return _fail(
                    "bad-cell",
                    f"row {i + 1}, column {col.name}: {exc}",
                    format_csv_row(rec),
                    column=col.name,
                    row=i + 1,
                )
            if col.unique:
                key = _cell_text(val)
                if key in seen[col.name]:
                    return _fail(
                        "bad-cell",
                        f"row {i + 1}, column {col.name}: {key!r} is repeated",
                        format_csv_row(rec),
                        column=col.name,
                        row=i + 1,
                    )
                seen[col.name].add(key)
            row[col.name] = val
        rows.append(row)

    n = len(rows)
    if n < schema.min_rows or (schema.max_rows is not None and n > schema.max_rows):
        return _fail("row-count", f"got {n} rows, {_row_requirement(schema)}", _excerpt(body))
    return ParseOutcome(rows=rows)


def _line_excerpt(body: str, line_num: int) -> str:
    lines = body.split("\n")
    lo = max(0, line_num - 2)
    return "\n".join(lines[lo : line_num + 1])


def _fail(code: str, detail: str, excerpt: str = "", **kw: Any) -> ParseOutcome:
    return ParseOutcome(failure=ParseFailure(code, detail, _excerpt(excerpt), **kw))


def _row_requirement(schema: StageSchema) -> str:
    if schema.max_rows is None:
        return f"expected at least {schema.min_rows}"
    if schema.max_rows == schema.min_rows:
        return f"expected exactly {schema.min_rows}"
    return f"expected between {schema.min_rows} and {schema.max_rows}"


# -- repair ----------------------------------------------------------------


def _column_rules(schema: StageSchema, only: str | None = None) -> list[str]:
    rules = []
    for col in schema.columns:
        if only is not None and col.name != only:
            continue
        if col.choices is not None:
            rules.append(f"Allowed values for {col.name}: {', '.join(sorted(col.choices))}.")
        elif col.kind is ValueKind.SEVERITY:
            rules.append(f"Allowed values for {col.name}: S0, S1, S2, S3.")
        elif col.kind is ValueKind.GUIDEWORD:
            rules.append(f"Allowed values for {col.name}: Omission, Commission.")
        elif col.kind is ValueKind.INTEGER:
            rules.append(f"{col.name} must be a whole number.")
        if col.required and col.kind is ValueKind.TEXT:
            rules.append(f"{col.name} must not be empty.")
        if col.unique:
            rules.append(f"Each {col.name} may occur only once.")
    return rules


def build_repair_prompt(
    original: RenderedPrompt, failure: ParseFailure, schema: StageSchema
) -> RenderedPrompt:
    """Re-prompt after a parse failure.

    The new prompt repeats the original task, names the failure, quotes the
    offending part of the answer, asks why the mistake happened and restates
    the response template and the exact header line. The model is always
    asked for a complete new answer, never for a continuation.
    """
    guidance: list[str] = []
    if failure.code == "truncated":
        guidance.append(
            "Your answer was cut off. Do not continue the previous answer: "
            "re-emit the complete table, starting from the header line."
        )
    elif failure.code == "row-count":
        guidance.append(f"The table must have {_row_requirement(schema).replace('expected ', '')} rows.")
    elif failure.code == "bad-cell":
        guidance.extend(_column_rules(schema, failure.column) or _column_rules(schema))
        guidance.append("Put text that contains commas, quotes or line breaks in double quotes.")
    elif failure.code in ("header-mismatch", "no-table-found"):
        guidance.append("Answer with a CSV table whose first line is the header exactly as given.")

    parts = [
        original.text.rstrip("\n"),
        "",
        "----",
        "Your previous answer could not be used.",
        f"Problem ({failure.code}): {failure.detail}",
    ]
    if failure.excerpt:
        parts += ["Offending part of your answer:", "<<<", failure.excerpt, ">>>"]
    parts += ["Why did you make this mistake? Avoid it and answer the task again in full."]
    parts += guidance
    parts += ["", "The header line must be exactly:", schema.header_line]
    if original.template_section:
        parts += ["", "Response template:", original.template_section]
    text = "\n".join(parts) + "\n"
    return replace(original, text=text, token_estimate=estimate_tokens(text))
