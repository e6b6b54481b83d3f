"""The six-stage HARA pipeline: item definition in, HARA table out.

Stages run as barriers. Stage 3 fans out over every (malfunction, geometry)
pair and stages 4-5 over every event, on a thread pool bounded by
``RunConfig.concurrency_limit``; results are merged in sorted key order, so
the output does not depend on arrival order. Every provider exchange is
appended to the ledger before the response is used, and a resumed run reads
recorded exchanges back instead of calling the provider again.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, TypeVar

from . import __version__
from .domain import (
    DetailedScenario,
    Guideword,
    HazardousEvent,
    ItemDefinition,
    Malfunction,
    Quadrant,
    RoadGeometry,
    RunContext,
    SafetyGoal,
    Severity,
    SeverityAssessment,
    Stage,
    classify_quadrant,
    sequence_ids,
    validate_event,
)
from .ledger import Ledger, LedgerEntry, LedgerError, digest, make_header, read_ledger, utc_now
from .parsing import (
    EXPANSION_SCHEMA,
    HAZARDS_SCHEMA,
    SAFETY_GOAL_SCHEMA,
    SEVERITY_SCHEMA,
    ParseFailure,
    StageSchema,
    build_repair_prompt,
    cluster_schema,
    extract_table,
    format_csv_row,
    geometry_schema,
)
from .provider import CompletionRequest, CompletionResponse, FinishReason, Provider
from .templates import DEFAULT_STAGE_BUDGETS, RenderedPrompt, TemplateSet, load_template_set, render

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class StageError(Exception):
    """A stage could not produce usable output within its repair budget."""

    def __init__(self, stage: Stage, logical_key: str, reason: str, failure: ParseFailure | None = None):
        where = f"{stage.value}[{logical_key}]" if logical_key else stage.value
        super().__init__(f"stage {where} failed: {reason}")
        self.stage = stage
        self.logical_key = logical_key
        self.reason = reason
        self.failure = failure


class IncompleteRunError(Exception):
    """A ledger does not hold a finished run."""

    def __init__(self, stage: Stage) -> None:
        super().__init__(f"incomplete: {stage.value}")
        self.stage = stage


class ConfigMismatchError(Exception):
    pass


@dataclass
class RunConfig:
    model_id: str = "scripted"
    temperature: float = 0.0
    max_output_tokens: int = 2048
    concurrency_limit: int = 4
    repair_budget: int = 3
    geometries_requested: int = 20
    representatives_per_quadrant: int = 5
    stage_budgets: dict[str, int] = field(
        default_factory=lambda: {s.value: n for s, n in DEFAULT_STAGE_BUDGETS.items()}
    )
    on_pair_failure: str = "abort"  # or "skip"
    ledger_fsync: bool = True

    def __post_init__(self) -> None:
        for name in ("concurrency_limit", "repair_budget", "geometries_requested", "representatives_per_quadrant"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.on_pair_failure not in ("abort", "skip"):
            raise ValueError("on_pair_failure must be 'abort' or 'skip'")
        missing = {s.value for s in Stage} - set(self.stage_budgets)
        if missing:
            raise ValueError(f"no token budget for stage {sorted(missing)[0]}")

    def budget(self, stage: Stage) -> int:
        return self.stage_budgets[stage.value]

    def semantic_dict(self) -> dict[str, Any]:
        """Fields that influence the result (durability and parallelism do not)."""
        d = asdict(self)
        d.pop("concurrency_limit")
        d.pop("ledger_fsync")
        return d

    @property
    def digest(self) -> str:
        return digest(self.semantic_dict())

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class HaraRow:
    event: HazardousEvent
    malfunction: Malfunction
    geometry: RoadGeometry
    quadrant: Quadrant


@dataclass(frozen=True)
class Provenance:
    bundle_version: str
    model_id: str
    run_timestamp: str
    config_digest: str


@dataclass(frozen=True)
class HaraTable:
    rows: tuple[HaraRow, ...]
    provenance: Provenance
    events_total: int = 0

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        from .export import table_to_csv

        return table_to_csv(self)


@dataclass
class RunStats:
    """Counters for provider traffic, per stage."""

    provider_calls: dict[str, int] = field(default_factory=dict)
    replayed: dict[str, int] = field(default_factory=dict)

    def bump(self, table: dict[str, int], stage: Stage) -> None:
        table[stage.value] = table.get(stage.value, 0) + 1


def _event_binding(
    event: HazardousEvent, malfunctions: Mapping[str, Malfunction], geometries: Mapping[str, RoadGeometry]
) -> str:
    m = malfunctions[event.malfunction_ref]
    g = geometries[event.scenario.geometry_ref]
    return "\n".join(
        [
            f"ID: {event.id}",
            f"Malfunction ({m.guideword}): {m.statement}",
            f"Core scenario: {g.describe()}",
            f"Detailed scenario: {event.scenario.describe()}",
            f"Hazardous event: {event.consequence}",
        ]
    )


def _event_summary(event: HazardousEvent, malfunctions: Mapping[str, Malfunction], geometries: Mapping[str, RoadGeometry]) -> str:
    m = malfunctions[event.malfunction_ref]
    g = geometries[event.scenario.geometry_ref]
    return f"{m.statement} | {g.describe()} | {event.consequence}"


def parse_agents(cell: str) -> tuple[tuple[str, str], ...]:
    """``"truck: oncoming; pedestrian: crossing"`` -> ``(("truck", "oncoming"), ...)``."""
    out = []
    for part in cell.split(";"):
        part = part.strip()
        if not part:
            continue
        label, _, traj = part.partition(":")
        out.append((label.strip(), traj.strip()))
    return tuple(out)


class Pipeline:
    """One HARA run bound to a template set, a provider, a config and a ledger.

    ``recorded`` holds exchanges from an earlier, interrupted attempt of the
    same run; matching requests are answered from it without a provider
    call. With ``provider=None`` the pipeline is replay-only and a request
    missing from ``recorded`` aborts the run.
    """

    def __init__(
        self,
        templates: TemplateSet,
        provider: Provider | None,
        config: RunConfig,
        ledger: Ledger | None = None,
        recorded: Iterable[LedgerEntry] = (),
    ) -> None:
        self.templates = templates
        self.provider = provider
        self.config = config
        self.ledger = ledger
        self.stats = RunStats()
        self._recorded: dict[tuple[str, str, str, int], LedgerEntry] = {}
        self._decisions: set[str] = set()
        for e in recorded:
            if e.kind == "exchange" and e.finish_reason != FinishReason.TRANSPORT_ERROR.value:
                self._recorded[(e.stage, e.logical_key, e.request_digest, e.attempt)] = e
            elif e.kind == "decision":
                self._decisions.add(digest([e.stage, dict(e.data)]))

    # -- plumbing ---------------------------------------------------------

    def _decide(self, stage: Stage, event: str, **data: Any) -> None:
        if self.ledger is None:
            return
        key = digest([stage.value, {"event": event, **data}])
        if key in self._decisions:
            return
        self._decisions.add(key)
        self.ledger.decide(stage.value, event, **data)

    def _exchange(self, prompt: RenderedPrompt, logical_key: str, attempt: int) -> CompletionResponse:
        stage = prompt.stage
        request = CompletionRequest(
            prompt_text=prompt.text,
            stage=stage,
            attempt=attempt,
            logical_key=logical_key,
            model_id=self.config.model_id,
            temperature=self.config.temperature,
            max_output_tokens=self.config.max_output_tokens,
        )
        hit = self._recorded.get((stage.value, logical_key, request.digest, attempt))
        if hit is not None:
            self.stats.bump(self.stats.replayed, stage)
            return CompletionResponse(hit.response_text, FinishReason(hit.finish_reason))
        if self.provider is None:
            raise IncompleteRunError(stage)

        def record(req: CompletionRequest, resp: CompletionResponse, retry: int) -> CompletionResponse:
            self.stats.bump(self.stats.provider_calls, stage)
            if self.ledger is None:
                return resp
            entry = self.ledger.append(
                "exchange",
                stage.value,
                logical_key=logical_key,
                attempt=attempt,
                retry=retry,
                request_digest=req.digest,
                request_text=req.prompt_text,
                response_text=resp.raw_text,
                finish_reason=resp.finish_reason.value,
                data={k: v for k, v in resp.provider_meta.items() if k in ("error", "status")},
            )
            # downstream code only ever sees what the ledger holds
            return CompletionResponse(
                entry.response_text, FinishReason(entry.finish_reason), resp.latency, resp.provider_meta
            )

        return self.provider.complete(request, record)

    def _call(
        self,
        prompt: RenderedPrompt,
        schema: StageSchema,
        logical_key: str = "",
        check: Callable[[list[dict[str, Any]]], ParseFailure | None] | None = None,
    ) -> list[dict[str, Any]]:
        """One logical call with the bounded repair loop."""
        stage = prompt.stage
        failure: ParseFailure | None = None
        for attempt in range(1, self.config.repair_budget + 1):
            if prompt.token_estimate > self.config.budget(stage):
                raise StageError(
                    stage,
                    logical_key,
                    f"prompt of ~{prompt.token_estimate} tokens exceeds the stage budget of "
                    f"{self.config.budget(stage)}",
                )
            resp = self._exchange(prompt, logical_key, attempt)
            if resp.finish_reason is FinishReason.TRANSPORT_ERROR:
                raise StageError(stage, logical_key, f"transport error: {resp.provider_meta.get('error', 'unknown')}")
            if resp.finish_reason is FinishReason.REFUSED:
                failure = ParseFailure("no-table-found", "the model refused to answer", resp.raw_text[:300])
            else:
                outcome = extract_table(
                    resp.raw_text, schema, truncated=resp.finish_reason is FinishReason.TRUNCATED
                )
                failure = outcome.failure
                if failure is None and check is not None:
                    failure = check(outcome.rows or [])
                if failure is None:
                    return outcome.rows or []
            log.info("%s[%s] attempt %d: %s", stage.value, logical_key, attempt, failure.detail)
            prompt = build_repair_prompt(prompt, failure, schema)
        assert failure is not None
        raise StageError(
            stage, logical_key, f"repair budget exhausted ({failure.code}: {failure.detail})", failure
        )

    def _pool_map(self, fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
        """Apply ``fn`` concurrently; results come back in input order."""
        if self.config.concurrency_limit == 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.config.concurrency_limit) as pool:
            futures: list[Future[R]] = [pool.submit(fn, x) for x in items]
            try:
                return [f.result() for f in futures]
            except BaseException:
                for f in futures:
                    f.cancel()
                raise

    def _render(self, stage: Stage, **bindings: str) -> RenderedPrompt:
        return render(self.templates[stage], bindings)

    # -- stages -----------------------------------------------------------

    def identify_hazards(self, item: ItemDefinition) -> list[Malfunction]:
        prompt = self._render(Stage.HAZARDS, item_definition=item.description)
        rows = self._call(prompt, HAZARDS_SCHEMA)
        unique: list[dict[str, Any]] = []
        seen: set[str] = set()
        for row in rows:
            norm = " ".join(row["Malfunction"].split()).casefold()
            if norm in seen:
                continue
            seen.add(norm)
            unique.append(row)
        ids = sequence_ids("M", len(unique))
        return [
            Malfunction(i, Guideword(r["Guideword"], r["Qualifier"]), r["Malfunction"])
            for i, r in zip(ids, unique)
        ]

    def generate_geometries(self, item: ItemDefinition) -> list[RoadGeometry]:
        n = self.config.geometries_requested
        prompt = self._render(Stage.GEOMETRIES, item_definition=item.description, geometry_count=str(n))
        rows = self._call(prompt, geometry_schema(n))
        ids = sequence_ids("G", len(rows))
        return [
            RoadGeometry(
                i,
                r["Lanes"],
                r["Shape"],
                r["Slope"],
                tuple(f.strip() for f in r["Features"].split(";") if f.strip()),
            )
            for i, r in zip(ids, rows)
        ]

    def expand_scenarios(
        self, item: ItemDefinition, malfunction: Malfunction, geometry: RoadGeometry
    ) -> list[HazardousEvent]:
        """Events for one (malfunction, geometry) pair, with provisional ids ``Mxx/Gyy#n``.

        Rows without a consequence are dropped and noted in the ledger.
        """
        key = f"{malfunction.id}/{geometry.id}"
        prompt = self._render(
            Stage.EXPANSION,
            item_definition=item.description,
            malfunction=f"{malfunction.guideword}: {malfunction.statement}",
            geometry=geometry.describe(),
        )
        rows = self._call(prompt, EXPANSION_SCHEMA, key)
        events = []
        for n, row in enumerate(rows, start=1):
            if not row["Hazardous Event"].strip():
                self._decide(Stage.EXPANSION, "dropped-row", key=key, row=n, reason="no hazardous event")
                continue
            scenario = DetailedScenario(geometry.id, parse_agents(row["Agents"]), row["Detailed Scenario"])
            events.append(HazardousEvent(f"{key}#{n}", malfunction.id, scenario, row["Hazardous Event"]))
        return events

    def assess_severity(self, item: ItemDefinition, event: HazardousEvent, ctx: RunContext) -> SeverityAssessment:
        prompt = self._render(
            Stage.SEVERITY,
            item_definition=item.description,
            hazardous_event=_event_binding(event, ctx.malfunctions, ctx.geometries),
        )
        (row,) = self._call(prompt, SEVERITY_SCHEMA, event.id)
        return SeverityAssessment(row["Severity"], row["Rationale"])

    def formulate_safety_goal(
        self, item: ItemDefinition, event: HazardousEvent, goal_id: str, ctx: RunContext
    ) -> SafetyGoal:
        if event.assessment is None or event.assessment.severity == Severity.S0:
            raise ValueError(f"event {event.id}: safety goals are only formulated for severities above S0")
        prompt = self._render(
            Stage.SAFETY_GOAL,
            item_definition=item.description,
            hazardous_event=_event_binding(event, ctx.malfunctions, ctx.geometries),
            severity=event.assessment.severity.value,
        )
        (row,) = self._call(prompt, SAFETY_GOAL_SCHEMA, event.id)
        return SafetyGoal(goal_id, event.id, row["Safety Goal"])

    def cluster_and_select(self, events: Sequence[HazardousEvent], ctx: RunContext) -> list[HaraRow]:
        k = self.config.representatives_per_quadrant
        groups: dict[Quadrant, list[HazardousEvent]] = {q: [] for q in Quadrant.all()}
        for ev in events:
            groups[classify_quadrant(ev, ctx.malfunctions)].append(ev)

        selected: list[HaraRow] = []
        for quadrant in sorted(groups, key=lambda q: q.sort_key):
            members = sorted(groups[quadrant], key=lambda e: e.id)
            if not members:
                continue
            if len(members) <= k:
                chosen = members
                self._decide(Stage.CLUSTER_SELECT, "selected-all", quadrant=str(quadrant), count=len(members))
            else:
                by_id = {e.id: e for e in members}
                table = "\n".join(
                    [format_csv_row(["ID", "Summary"])]
                    + [format_csv_row([e.id, _event_summary(e, ctx.malfunctions, ctx.geometries)]) for e in members]
                )
                prompt = self._render(
                    Stage.CLUSTER_SELECT, quadrant=str(quadrant), select_count=str(k), events=table
                )
                rows = self._call(prompt, cluster_schema(by_id, k), str(quadrant))
                chosen = [by_id[r["ID"]] for r in rows]
            for ev in chosen:
                selected.append(
                    HaraRow(
                        ev,
                        ctx.malfunctions[ev.malfunction_ref],
                        ctx.geometries[ev.scenario.geometry_ref],
                        quadrant,
                    )
                )
        selected.sort(key=lambda r: (r.quadrant.sort_key, r.event.id))
        return selected

    # -- driver -----------------------------------------------------------

    def run(self, item: ItemDefinition, run_timestamp: str = "") -> HaraTable:
        try:
            return self._run(item, run_timestamp)
        except StageError as exc:
            if self.ledger is not None:
                self._decide(exc.stage, "abort", key=exc.logical_key, reason=exc.reason)
            raise

    def _run(self, item: ItemDefinition, run_timestamp: str) -> HaraTable:
        malfunctions = self.identify_hazards(item)
        self._decide(Stage.HAZARDS, "stage-complete", count=len(malfunctions))

        geometries = self.generate_geometries(item)
        self._decide(Stage.GEOMETRIES, "stage-complete", count=len(geometries))
        ctx = RunContext.build(malfunctions, geometries)

        pairs = [(m, g) for m in malfunctions for g in geometries]

        def expand(pair: tuple[Malfunction, RoadGeometry]) -> list[HazardousEvent]:
            try:
                return self.expand_scenarios(item, *pair)
            except StageError as exc:
                if self.config.on_pair_failure == "skip":
                    self._decide(Stage.EXPANSION, "skipped-pair", key=exc.logical_key, reason=exc.reason)
                    return []
                raise

        provisional = [ev for evs in self._pool_map(expand, pairs) for ev in evs]
        event_ids = sequence_ids("E", len(provisional), min_width=3)
        events = [
            HazardousEvent(eid, ev.malfunction_ref, ev.scenario, ev.consequence)
            for eid, ev in zip(event_ids, provisional)
        ]
        self._decide(Stage.EXPANSION, "stage-complete", count=len(events))

        assessments = self._pool_map(lambda ev: self.assess_severity(item, ev, ctx), events)
        events = [
            HazardousEvent(ev.id, ev.malfunction_ref, ev.scenario, ev.consequence, a)
            for ev, a in zip(events, assessments)
        ]
        self._decide(Stage.SEVERITY, "stage-complete", count=len(events))

        # the gate is rule-based: the model is never asked about S0 events
        gated = [ev for ev in events if ev.assessment is not None and ev.assessment.severity > Severity.S0]
        goal_ids = dict(zip((ev.id for ev in gated), sequence_ids("SG", len(gated), min_width=3)))
        goals = self._pool_map(lambda ev: self.formulate_safety_goal(item, ev, goal_ids[ev.id], ctx), gated)
        goal_by_event = {g.event_ref: g for g in goals}
        events = [
            HazardousEvent(ev.id, ev.malfunction_ref, ev.scenario, ev.consequence, ev.assessment, goal_by_event.get(ev.id))
            for ev in events
        ]
        self._decide(Stage.SAFETY_GOAL, "stage-complete", count=len(goals))

        rows = self.cluster_and_select(events, ctx)
        self._decide(Stage.CLUSTER_SELECT, "stage-complete", count=len(rows))

        for row in rows:
            problems = validate_event(row.event, ctx)
            if problems or row.event.assessment is None:
                raise AssertionError(f"pipeline produced an invalid event: {problems}")
        provenance = Provenance(
            self.templates.version, self.config.model_id, run_timestamp, self.config.digest
        )
        table = HaraTable(tuple(rows), provenance, events_total=len(events))
        self._decide(
            Stage.CLUSTER_SELECT,
            "run-complete",
            rows=len(rows),
            csv_sha256=digest(table.to_csv()),
        )
        return table


# -- entry points -----------------------------------------------------------


def _header(item: ItemDefinition, config: RunConfig, templates: TemplateSet, created: str) -> dict[str, Any]:
    return make_header(
        artifact_version=__version__,
        bundle_version=templates.version,
        bundle_path=templates.source,
        config_digest=config.digest,
        model_id=config.model_id,
        created=created,
        config=config.semantic_dict(),
        item={"function_name": item.function_name, "description": item.description},
    )


def run(
    item: ItemDefinition,
    config: RunConfig,
    provider: Provider,
    ledger_path: str | Path,
    templates: TemplateSet | None = None,
) -> tuple[HaraTable, Pipeline]:
    """Execute a fresh run, recording every exchange in a new ledger at ``ledger_path``."""
    templates = templates or load_template_set()
    created = utc_now()
    ledger = Ledger.create(ledger_path, _header(item, config, templates, created), fsync=config.ledger_fsync)
    try:
        pipe = Pipeline(templates, provider, config, ledger)
        return pipe.run(item, created), pipe
    finally:
        ledger.close()


def _check_compatible(header: Mapping[str, Any], config: RunConfig, templates: TemplateSet) -> None:
    if header.get("bundle_version") != templates.version:
        raise ConfigMismatchError(
            f"ledger was recorded with template bundle {header.get('bundle_version')}, "
            f"loaded bundle is {templates.version}"
        )
    if header.get("config_digest") != config.digest:
        raise ConfigMismatchError("run configuration differs from the one recorded in the ledger")


def item_from_header(header: Mapping[str, Any]) -> ItemDefinition:
    return ItemDefinition(**header["item"])


def resume(
    ledger_path: str | Path,
    provider: Provider,
    config: RunConfig | None = None,
    templates: TemplateSet | None = None,
) -> tuple[HaraTable, Pipeline]:
    """Continue an interrupted run from its ledger.

    Recorded exchanges are replayed; only missing ones go to the provider,
    and their entries extend the same ledger.
    """
    ledger = Ledger.open(ledger_path)
    try:
        header = ledger.header
        if config is None:
            config = RunConfig.from_dict(header["config"])
        templates = templates or load_template_set(header.get("bundle_path") or None)
        _check_compatible(header, config, templates)
        ledger.fsync = config.ledger_fsync
        pipe = Pipeline(templates, provider, config, ledger, recorded=list(ledger.entries))
        return pipe.run(item_from_header(header), header.get("created", "")), pipe
    finally:
        ledger.close()


def completed_stage_markers(entries: Iterable[LedgerEntry]) -> tuple[set[str], bool]:
    done: set[str] = set()
    complete = False
    for e in entries:
        if e.kind != "decision":
            continue
        if e.data.get("event") == "stage-complete":
            done.add(e.stage)
        elif e.data.get("event") == "run-complete":
            complete = True
    return done, complete


def replay_table(ledger_path: str | Path, templates: TemplateSet | None = None) -> HaraTable:
    """Re-derive the table of a completed run from its ledger, without any provider."""
    header, entries = read_ledger(ledger_path)
    done, complete = completed_stage_markers(entries)
    if not complete:
        first_open = next((s for s in Stage if s.value not in done), Stage.CLUSTER_SELECT)
        raise IncompleteRunError(first_open)
    config = RunConfig.from_dict(header["config"])
    templates = templates or load_template_set(header.get("bundle_path") or None)
    _check_compatible(header, config, templates)
    pipe = Pipeline(templates, None, config, None, recorded=entries)
    return pipe.run(item_from_header(header), header.get("created", ""))


__all__ = [
    "ConfigMismatchError",
    "HaraRow",
    "HaraTable",
    "IncompleteRunError",
    "LedgerError",
    "Pipeline",
    "Provenance",
    "RunConfig",
    "StageError",
    "replay_table",
    "resume",
    "run",
]
