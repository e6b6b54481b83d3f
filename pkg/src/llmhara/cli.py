"""Command-line interface: run, resume, export, verify-ledger, validate, probe.

Configuration lives in one TOML file; every value can be overridden by a
flag. Relative paths in the file are resolved against the file's directory.
The live-provider credential is only ever read from the environment variable
named by ``provider.api_key_env``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .domain import ItemDefinition
from .export import CsvFormatError, validate_csv, write_csv
from .ledger import LedgerError, LedgerIntegrityError, verify
from .orchestrator import (
    ConfigMismatchError,
    IncompleteRunError,
    RunConfig,
    StageError,
    replay_table,
    resume,
    run,
)
from .provider import HttpProvider, Provider, ReplayProvider, RetryPolicy, ScriptedProvider
from .templates import TemplateError, load_template_set

log = logging.getLogger("llmhara")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_CONFIG = 2
EXIT_PROBE = 3
EXIT_STAGE = 4
EXIT_LEDGER_IO = 5
EXIT_INTEGRITY = 6
EXIT_CSV_PARSE = 7
EXIT_INCOMPLETE = 8


class ConfigError(Exception):
    pass


@dataclass
class CliConfig:
    item_definition: Path | None = None
    templates: Path | None = None
    ledger: Path | None = None
    output: Path | None = None
    provider: dict[str, Any] = field(default_factory=lambda: {"kind": "scripted"})
    run: dict[str, Any] = field(default_factory=dict)

    def run_config(self) -> RunConfig:
        params = dict(self.run)
        params.setdefault("model_id", self.provider.get("model_id", "scripted"))
        try:
            return RunConfig.from_dict(params)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [run] settings: {exc}") from exc


def load_config(path: str | Path | None) -> CliConfig:
    if path is None:
        return CliConfig()
    p = Path(path)
    try:
        data = tomllib.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    base = p.parent
    provider = dict(data.get("provider", {}))
    if any("key" in k and k != "api_key_env" for k in provider):
        raise ConfigError("credentials must not be stored in the config file; use provider.api_key_env")

    def path_of(value: Any) -> Path | None:
        return None if not value else (base / value).resolve()

    for key in ("fixtures", "recording"):
        if provider.get(key):
            provider[key] = str(path_of(provider[key]))
    known = {"item_definition", "templates", "ledger", "output", "provider", "run"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    return CliConfig(
        item_definition=path_of(data.get("item_definition")),
        templates=path_of(data.get("templates")),
        ledger=path_of(data.get("ledger")),
        output=path_of(data.get("output")),
        provider=provider or {"kind": "scripted"},
        run=dict(data.get("run", {})),
    )


def apply_overrides(cfg: CliConfig, args: argparse.Namespace) -> CliConfig:
    for name in ("item_definition", "templates", "ledger", "output"):
        value = getattr(args, name, None)
        if value:
            setattr(cfg, name, Path(value).resolve())
    for flag, key in (
        ("provider", "kind"),
        ("fixtures", "fixtures"),
        ("recording", "recording"),
        ("endpoint", "endpoint"),
        ("model_id", "model_id"),
        ("api_key_env", "api_key_env"),
        ("max_retries", "max_retries"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            cfg.provider[key] = str(Path(value).resolve()) if flag in ("fixtures", "recording") else value
    for flag in (
        "temperature",
        "max_output_tokens",
        "concurrency_limit",
        "repair_budget",
        "geometries_requested",
        "representatives_per_quadrant",
        "on_pair_failure",
    ):
        value = getattr(args, flag, None)
        if value is not None:
            cfg.run[flag] = value
    if getattr(args, "no_fsync", False):
        cfg.run["ledger_fsync"] = False
    return cfg


def build_provider(cfg: CliConfig, concurrency: int) -> Provider:
    p = cfg.provider
    kind = p.get("kind", "scripted")
    retry = RetryPolicy(max_retries=int(p.get("max_retries", 3)))
    in_flight = int(p.get("max_in_flight", concurrency))
    if kind == "scripted":
        if not p.get("fixtures"):
            raise ConfigError("scripted provider needs provider.fixtures")
        try:
            return ScriptedProvider.from_directory(p["fixtures"], max_in_flight=in_flight)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot load fixtures {p['fixtures']}: {exc}") from exc
    if kind == "replay":
        if not p.get("recording"):
            raise ConfigError("replay provider needs provider.recording")
        try:
            return ReplayProvider.from_file(p["recording"], max_in_flight=in_flight)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot load recording {p['recording']}: {exc}") from exc
    if kind == "live":
        for key in ("endpoint", "model_id"):
            if not p.get(key):
                raise ConfigError(f"live provider needs provider.{key}")
        return HttpProvider(
            p["endpoint"],
            p["model_id"],
            api_key_env=p.get("api_key_env", "OPENAI_API_KEY"),
            retry=retry,
            max_in_flight=in_flight,
        )
    raise ConfigError(f"unknown provider kind {kind!r}")


def _read_item(cfg: CliConfig) -> ItemDefinition:
    if cfg.item_definition is None:
        raise ConfigError("no item definition given")
    try:
        text = cfg.item_definition.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read item definition: {exc}") from None
    try:
        return ItemDefinition.from_text(text)
    except ValueError as exc:
        raise ConfigError(f"invalid item definition: {exc}") from None


def _emit(table: Any, output: Path | None, ledger: Path) -> int:
    if output is None:
        output = ledger.with_suffix(".csv")
    write_csv(table, output)
    print(f"wrote {output} ({len(table)} rows)")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    item = _read_item(cfg)
    try:
        templates = load_template_set(cfg.templates)
    except (TemplateError, OSError) as exc:
        raise ConfigError(f"template bundle: {exc}") from None
    config = cfg.run_config()
    if cfg.ledger is None:
        raise ConfigError("no ledger path given")
    if cfg.ledger.exists():
        if not args.force:
            raise ConfigError(f"ledger {cfg.ledger} exists; use resume, or --force to start over")
        cfg.ledger.unlink()
    provider = build_provider(cfg, config.concurrency_limit)
    report = provider.probe()
    if not report.ready:
        print(f"probe failed: {report}", file=sys.stderr)
        return EXIT_PROBE
    try:
        table, _ = run(item, config, provider, cfg.ledger, templates)
    except StageError as exc:
        print(f"{exc}\nledger: {cfg.ledger}", file=sys.stderr)
        return EXIT_STAGE
    return _emit(table, cfg.output, cfg.ledger)


def cmd_resume(args: argparse.Namespace) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    if cfg.ledger is None:
        raise ConfigError("no ledger path given")
    templates = load_template_set(cfg.templates) if cfg.templates else None
    config = cfg.run_config() if args.config or cfg.run else None
    concurrency = config.concurrency_limit if config else 4
    provider = build_provider(cfg, concurrency)
    report = provider.probe()
    if not report.ready:
        print(f"probe failed: {report}", file=sys.stderr)
        return EXIT_PROBE
    try:
        table, _ = resume(cfg.ledger, provider, config, templates)
    except StageError as exc:
        print(f"{exc}\nledger: {cfg.ledger}", file=sys.stderr)
        return EXIT_STAGE
    return _emit(table, cfg.output, cfg.ledger)


def cmd_export(args: argparse.Namespace) -> int:
    templates = load_template_set(args.templates) if args.templates else None
    try:
        table = replay_table(args.ledger, templates)
    except IncompleteRunError as exc:
        print(f"{exc}", file=sys.stderr)
        return EXIT_INCOMPLETE
    write_csv(table, args.output)
    print(f"wrote {args.output} ({len(table)} rows)")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    report = verify(args.ledger)
    print(report)
    return EXIT_OK if report.clean else EXIT_INTEGRITY


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        report = validate_csv(args.csv)
    except CsvFormatError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_CSV_PARSE
    for v in report.violations:
        print(f"{v.entity}: [{v.code}] {v.detail}".rstrip())
    print(f"{report.rows} rows, {len(report.violations)} violations")
    return EXIT_OK if report.clean else EXIT_INVALID


def cmd_probe(args: argparse.Namespace) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    provider = build_provider(cfg, 1)
    report = provider.probe()
    print(report)
    return EXIT_OK if report.ready else EXIT_PROBE


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="TOML configuration file")
    p.add_argument("--item-definition", dest="item_definition")
    p.add_argument("--templates", help="template bundle directory")
    p.add_argument("--ledger")
    p.add_argument("--output", "-o")
    p.add_argument("--provider", choices=["live", "scripted", "replay"])
    p.add_argument("--fixtures", help="scripted provider fixture directory")
    p.add_argument("--recording", help="replay provider recording (JSON lines)")
    p.add_argument("--endpoint")
    p.add_argument("--model-id", dest="model_id")
    p.add_argument("--api-key-env", dest="api_key_env")
    p.add_argument("--max-retries", dest="max_retries", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-output-tokens", dest="max_output_tokens", type=int)
    p.add_argument("--concurrency-limit", dest="concurrency_limit", type=int)
    p.add_argument("--repair-budget", dest="repair_budget", type=int)
    p.add_argument("--geometries", dest="geometries_requested", type=int)
    p.add_argument("--representatives", dest="representatives_per_quadrant", type=int)
    p.add_argument("--on-pair-failure", dest="on_pair_failure", choices=["abort", "skip"])
    p.add_argument("--no-fsync", dest="no_fsync", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="llmhara", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the full pipeline and write the HARA CSV")
    _run_flags(p)
    p.add_argument("--force", action="store_true", help="overwrite an existing ledger")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("resume", help="continue an interrupted run from its ledger")
    _run_flags(p)
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("export", help="re-derive the CSV of a completed run from its ledger")
    p.add_argument("ledger")
    p.add_argument("output")
    p.add_argument("--templates")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("verify-ledger", help="check the ledger hash chain")
    p.add_argument("ledger")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("validate", help="check an exported HARA CSV against the domain rules")
    p.add_argument("csv")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("probe", help="check that the configured provider is ready")
    _run_flags(p)
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigMismatchError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LedgerIntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except LedgerError as exc:
        print(f"ledger I/O error: {exc}", file=sys.stderr)
        return EXIT_LEDGER_IO
    except TemplateError as exc:
        print(f"config error: template bundle: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
