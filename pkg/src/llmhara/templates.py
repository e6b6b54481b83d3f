"""Prompt template bundles: loading, validation, rendering and token budgeting.

A bundle is a directory holding ``manifest.json`` and one UTF-8 text file per
stage. Each stage file is split into three sections by the marker lines
``[context]``, ``[task]`` and ``[template]``. Placeholders are written as
``{name}`` with a lowercase identifier; ``{{`` and ``}}`` produce literal
braces.
"""

from __future__ import annotations

import json
import math
import re
from collections.abc import Mapping
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .domain import Stage

SECTIONS = ("context", "task", "template")

# {{ or }} (escapes) or {identifier}
_TOKEN = re.compile(r"\{\{|\}\}|\{([a-z_][a-z0-9_]*)\}")
_MARKER = re.compile(r"^\[(context|task|template)\]\s*$")

CHARS_PER_TOKEN = 4

DEFAULT_STAGE_BUDGETS: dict[Stage, int] = {
    Stage.HAZARDS: 6000,
    Stage.GEOMETRIES: 6000,
    Stage.EXPANSION: 6000,
    Stage.SEVERITY: 6000,
    Stage.SAFETY_GOAL: 6000,
    Stage.CLUSTER_SELECT: 12000,
}


class TemplateError(Exception):
    """Raised when a template bundle cannot be loaded or a template cannot be rendered."""


class RenderError(TemplateError):
    pass


def estimate_tokens(text: str) -> int:
    """Heuristic token count: ``ceil(len(text) / 4)``.

    Not tied to any tokenizer. Deterministic and monotone in the length of
    the text, which is all the budget guard relies on.
    """
    return math.ceil(len(text) / CHARS_PER_TOKEN)


def placeholders_in(text: str) -> set[str]:
    return {m.group(1) for m in _TOKEN.finditer(text) if m.group(1)}


def _substitute(text: str, bindings: Mapping[str, str]) -> str:
    def repl(m: re.Match[str]) -> str:
        tok = m.group(0)
        if tok == "{{":
            return "{"
        if tok == "}}":
            return "}"
        return bindings[m.group(1)]

    return _TOKEN.sub(repl, text)


@dataclass(frozen=True)
class PromptTemplate:
    stage: Stage
    context_section: str
    task_section: str
    template_section: str
    declared_placeholders: frozenset[str]

    def __post_init__(self) -> None:
        if not self.template_section.strip():
            raise TemplateError(f"{self.stage.value}: empty response template section")
        used: dict[str, str] = {}
        for name in SECTIONS:
            for ph in placeholders_in(self.section(name)):
                used.setdefault(ph, name)
        undeclared = sorted(set(used) - self.declared_placeholders)
        if undeclared:
            ph = undeclared[0]
            raise TemplateError(
                f"{self.stage.value}: placeholder {{{ph}}} used in {used[ph]} section but not declared"
            )
        unused = sorted(self.declared_placeholders - set(used))
        if unused:
            raise TemplateError(
                f"{self.stage.value}: declared placeholder {{{unused[0]}}} is never used"
            )

    def section(self, name: str) -> str:
        return getattr(self, f"{name}_section")

    @classmethod
    def parse(cls, stage: Stage, text: str, declared: frozenset[str]) -> "PromptTemplate":
        sections: dict[str, list[str]] = {}
        current: str | None = None
        for line in text.split("\n"):
            m = _MARKER.match(line)
            if m:
                current = m.group(1)
                if current in sections:
                    raise TemplateError(f"{stage.value}: duplicate [{current}] section")
                sections[current] = []
            elif current is not None:
                sections[current].append(line)
            elif line.strip():
                raise TemplateError(f"{stage.value}: text before the first section marker")
        missing = [s for s in SECTIONS if s not in sections]
        if missing:
            raise TemplateError(f"{stage.value}: missing [{missing[0]}] section")
        body = {k: "\n".join(v).strip("\n") for k, v in sections.items()}
        return cls(
            stage=stage,
            context_section=body["context"],
            task_section=body["task"],
            template_section=body["template"],
            declared_placeholders=declared,
        )


@dataclass(frozen=True)
class RenderedPrompt:
    stage: Stage
    text: str
    bindings: Mapping[str, str]
    token_estimate: int
    template_section: str = ""


@dataclass(frozen=True)
class TemplateSet:
    version: str
    templates: Mapping[Stage, PromptTemplate]
    reconstruction: bool = False
    source: str = ""

    def __len__(self) -> int:
        return len(self.templates)

    def __getitem__(self, stage: Stage) -> PromptTemplate:
        return self.templates[stage]


def render(template: PromptTemplate, bindings: Mapping[str, str]) -> RenderedPrompt:
    missing = sorted(template.declared_placeholders - set(bindings))
    if missing:
        raise RenderError(f"{template.stage.value}: missing binding for {{{missing[0]}}}")
    extra = sorted(set(bindings) - template.declared_placeholders)
    if extra:
        raise RenderError(f"{template.stage.value}: unexpected binding {{{extra[0]}}}")
    empty = sorted(k for k, v in bindings.items() if not str(v).strip())
    if empty:
        raise RenderError(f"{template.stage.value}: empty binding for {{{empty[0]}}}")
    parts = [_substitute(template.section(s), bindings) for s in SECTIONS]
    text = "\n\n".join(parts) + "\n"
    return RenderedPrompt(
        stage=template.stage,
        text=text,
        bindings=dict(bindings),
        token_estimate=estimate_tokens(text),
        template_section=parts[2],
    )


def default_bundle_path() -> Path:
    return Path(str(resources.files("llmhara") / "data" / "templates" / "v1"))


def load_template_set(source: str | Path | None = None) -> TemplateSet:
    """Load and validate a template bundle directory (the shipped one by default)."""
    root = Path(source) if source is not None else default_bundle_path()
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise TemplateError(f"no manifest.json in template bundle {root}") from None
    except json.JSONDecodeError as exc:
        raise TemplateError(f"malformed manifest in {root}: {exc}") from None

    version = manifest.get("version")
    if not isinstance(version, str) or not version:
        raise TemplateError(f"{root}: manifest lacks a version string")
    entries = manifest.get("stages", {})
    known = {s.value for s in Stage}
    unknown = sorted(set(entries) - known)
    if unknown:
        raise TemplateError(f"unknown stage in manifest: {unknown[0]}")

    templates: dict[Stage, PromptTemplate] = {}
    files_seen: dict[str, str] = {}
    for stage in Stage:
        entry = entries.get(stage.value)
        if entry is None:
            raise TemplateError(f"missing stage: {stage.value}")
        fname = entry["file"]
        if fname in files_seen:
            raise TemplateError(
                f"duplicate stage file {fname} for {files_seen[fname]} and {stage.value}"
            )
        files_seen[fname] = stage.value
        try:
            raw = (root / fname).read_bytes()
        except OSError as exc:
            raise TemplateError(f"{stage.value}: cannot read {fname}: {exc}") from None
        if b"\r" in raw:
            raise TemplateError(f"{fname}: CR line endings are not allowed")
        text = raw.decode("utf-8")
        templates[stage] = PromptTemplate.parse(
            stage, text, frozenset(entry.get("placeholders", []))
        )

    return TemplateSet(
        version=version,
        templates=templates,
        reconstruction=bool(manifest.get("reconstruction", False)),
        source=str(root),
    )

