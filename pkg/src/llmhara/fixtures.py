"""Deterministic scripted-provider fixtures for whole pipeline runs.

:func:`build_fixtures` plays the part of the model: from a seed it authors
every reply a run will ask for (malfunctions, geometries, one expansion
table per pair, a severity per event, a goal per gated event and a
selection per crowded quadrant) and keys them the way the orchestrator
will ask. Replies are wrapped in varying amounts of prose, code fences and
markdown so the parser is exercised on every call.

The returned :class:`FixtureTruth` records what the run must produce, so
tests can check the pipeline against it.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from importlib import resources

from .domain import GuidewordKind, ItemDefinition, Quadrant, Severity, SeverityBand, Stage, sequence_ids
from .parsing import format_csv_row
from .provider import ScriptedKey, ScriptedProvider, ScriptedReply

CAEM_MALFUNCTIONS = [
    ("Omission", "", "No evasive steering although a collision with the object ahead is imminent"),
    ("Omission", "too late", "Evasive steering starts too late to avoid the collision"),
    ("Omission", "too weak", "Steering torque too low, the vehicle does not clear the object"),
    ("Commission", "", "Evasive steering without an object ahead"),
    ("Commission", "wrong direction", "Evasion into an occupied adjacent lane"),
    ("Commission", "too strong", "Excessive steering torque destabilises the vehicle"),
]

ELK_MALFUNCTIONS = [
    ("Omission", "", "No corrective steering while the vehicle drifts towards an approaching vehicle"),
    ("Omission", "too late", "Corrective steering begins after the vehicle has left the lane"),
    ("Commission", "", "Corrective steering while the driver changes lane deliberately"),
    ("Commission", "too strong", "Corrective steering overshoots into the opposite lane"),
    ("Commission", "wrong direction", "Steering torque applied towards the road edge"),
]

SHAPES = ["straight", "gentle left curve", "gentle right curve", "sharp bend", "junction", "roundabout",
          "merge lane", "exit lane", "S-curve", "T-junction"]
SLOPES = ["level", "uphill", "downhill", "crest", "dip"]
FEATURES = ["bridge", "tunnel", "construction zone", "guard rail", "narrow shoulder", "pedestrian crossing",
            "bus stop", "wet surface"]
AGENTS = [("truck", "ahead in the same lane, braking"), ("passenger car", "in the adjacent lane, overtaking"),
          ("motorcycle", "in the adjacent lane, being overtaken"), ("pedestrian", "crossing from the right"),
          ("bicycle", "ahead at the road edge"), ("bus", "oncoming"), ("broken-down vehicle", "stationary ahead"),
          ("passenger car", "cutting in from the left")]
HARMS = {
    Severity.S0: ["the vehicle swerves but stays in free space, nobody is harmed",
                  "the manoeuvre is noticed by the driver only, no collision"],
    Severity.S1: ["low-speed side contact causing light injuries to the occupants",
                  "rear-end collision at low relative speed with moderate injuries"],
    Severity.S2: ["collision with the crossing cyclist at moderate speed with severe injuries",
                  "side impact into the overtaking car causing severe injuries"],
    Severity.S3: ["high-speed collision with the truck, fatal injuries to the occupants likely",
                  "collision with the pedestrian at speed, survival uncertain"],
}
GOALS = ["{fn} shall not steer into an occupied lane",
         "{fn} shall avoid a collision with the object ahead whenever a free evasive path exists",
         "{fn} shall not apply a steering torque that destabilises the vehicle",
         "{fn} shall not cause a lane departure unless it avoids a collision"]


def load_item(name: str) -> ItemDefinition:
    """One of the bundled item definitions: ``"caem"`` or ``"elk"``."""
    text = (resources.files("llmhara") / "data" / "items" / f"{name}.md").read_text(encoding="utf-8")
    return ItemDefinition.from_text(text)


@dataclass
class FixtureEvent:
    id: str
    malfunction_id: str
    geometry_id: str
    kind: GuidewordKind
    severity: Severity

    @property
    def quadrant(self) -> Quadrant:
        return Quadrant(self.kind, SeverityBand.of(self.severity))


@dataclass
class FixtureTruth:
    malfunction_ids: list[str]
    geometry_ids: list[str]
    events: list[FixtureEvent]
    selected: dict[Quadrant, list[str]] = field(default_factory=dict)

    @property
    def pairs(self) -> int:
        return len(self.malfunction_ids) * len(self.geometry_ids)

    def quadrant_sizes(self) -> dict[Quadrant, int]:
        sizes = {q: 0 for q in Quadrant.all()}
        for ev in self.events:
            sizes[ev.quadrant] += 1
        return sizes

    @property
    def selected_ids(self) -> list[str]:
        out = []
        for q in sorted(self.selected, key=lambda q: q.sort_key):
            out.extend(sorted(self.selected[q]))
        return out


def _wrap(rng: random.Random, header: list[str], rows: list[list[str]], style: str) -> str:
    """Render a table as a chat model might: plain, in prose, fenced or as markdown."""
    if style == "mixed":
        style = rng.choice(["plain", "prose", "fenced", "markdown"])
    if style == "markdown":
        def md(cells: list[str]) -> str:
            return "| " + " | ".join(c.replace("|", "\\|").replace("\n", "<br>") for c in cells) + " |"
        table = "\n".join([md(header), "|" + "---|" * len(header)] + [md(r) for r in rows])
        return f"Here is the requested table:\n\n{table}\n\nLet me know if you need more detail."
    table = "\n".join([format_csv_row(header)] + [format_csv_row(r) for r in rows]) + "\n"
    if style == "plain":
        return table
    if style == "fenced":
        return f"```csv\n{table}```\n"
    return f"Sure. Based on the item definition, the result is:\n\n{table}\nThese entries follow the template."


def build_fixtures(
    item: ItemDefinition,
    malfunctions: list[tuple[str, str, str]] | None = None,
    *,
    seed: int = 0,
    geometries: int = 20,
    events_per_pair: tuple[int, int] = (0, 2),
    representatives: int = 5,
    severity_weights: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25),
    style: str = "mixed",
) -> tuple[ScriptedProvider, FixtureTruth]:
    rng = random.Random(seed)
    if malfunctions is None:
        malfunctions = CAEM_MALFUNCTIONS
    fx: dict[ScriptedKey, ScriptedReply] = {}

    def put(stage: Stage, key: str, text: str) -> None:
        fx[ScriptedKey(stage, key, 1)] = ScriptedReply(text)

    put(Stage.HAZARDS, "", _wrap(rng, ["Guideword", "Qualifier", "Malfunction"], [list(m) for m in malfunctions], style))
    m_ids = sequence_ids("M", len(malfunctions))
    kinds = {mid: GuidewordKind.parse(m[0]) for mid, m in zip(m_ids, malfunctions)}

    combos = [(lanes, shape, slope) for lanes in (1, 2, 3, 4) for shape in SHAPES for slope in SLOPES]
    rng.shuffle(combos)
    geo_rows = []
    for lanes, shape, slope in combos[:geometries]:
        feats = rng.sample(FEATURES, rng.randint(0, 2))
        geo_rows.append([str(lanes), shape, slope, "; ".join(feats)])
    put(Stage.GEOMETRIES, "", _wrap(rng, ["Lanes", "Shape", "Slope", "Features"], geo_rows, style))
    g_ids = sequence_ids("G", geometries)

    pending: list[tuple[str, str, Severity]] = []
    lo, hi = events_per_pair
    levels = list(Severity)
    for mid in m_ids:
        for gid in g_ids:
            rows = []
            for _ in range(rng.randint(lo, hi)):
                sev = rng.choices(levels, weights=severity_weights)[0]
                agents = rng.sample(AGENTS, rng.randint(1, 2))
                agent_cell = "; ".join(f"{a}: {t}" for a, t in agents)
                scenario = (
                    f"Ego vehicle at {rng.choice([50, 70, 90, 110, 130])} km/h on {gid}, "
                    f"{agents[0][0]} {agents[0][1]}, \"{mid}\" occurs"
                )
                rows.append([agent_cell, scenario, rng.choice(HARMS[sev])])
                pending.append((mid, gid, sev))
            put(Stage.EXPANSION, f"{mid}/{gid}",
                _wrap(rng, ["Agents", "Detailed Scenario", "Hazardous Event"], rows, style))

    e_ids = sequence_ids("E", len(pending), min_width=3)
    events = [FixtureEvent(eid, mid, gid, kinds[mid], sev) for eid, (mid, gid, sev) in zip(e_ids, pending)]
    for ev in events:
        rationale = {
            Severity.S0: "No person is exposed to harm, the vehicle remains in free space",
            Severity.S1: "Low relative speed, protected occupants, light to moderate injuries expected",
            Severity.S2: "Moderate relative speed, severe injuries probable but survival likely",
            Severity.S3: "High relative speed or vulnerable road user involved, fatal injuries possible",
        }[ev.severity]
        put(Stage.SEVERITY, ev.id, _wrap(rng, ["Severity", "Rationale"], [[ev.severity.value, rationale]], style))
        if ev.severity > Severity.S0:
            goal = rng.choice(GOALS).format(fn=item.function_name)
            put(Stage.SAFETY_GOAL, ev.id, _wrap(rng, ["Safety Goal"], [[goal]], style))

    truth = FixtureTruth(m_ids, g_ids, events)
    for q in Quadrant.all():
        members = sorted(ev.id for ev in events if ev.quadrant == q)
        if len(members) <= representatives:
            truth.selected[q] = members
            continue
        pick = sorted(rng.sample(members, representatives))
        truth.selected[q] = pick
        put(Stage.CLUSTER_SELECT, str(q),
            _wrap(rng, ["ID", "Reason"], [[i, "covers a distinct collision partner"] for i in pick], style))
    return ScriptedProvider(fx), truth
