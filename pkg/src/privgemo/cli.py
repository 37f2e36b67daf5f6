"""Command-line front end: ingest, ask, eval and memory maintenance."""

from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path
import sys
from typing import Any, Sequence

from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from .config import EngineConfig, load_config
from .controller import PrivGemoEngine
from .embedder import HashingEmbedder
from .errors import ConfigError, MemoryKeyError, NoTopicEntities, ParseError, PrivGemoError
from .evaluation import EngineFactory, EvalReport, evaluate, load_questions, sweep_ratios, write_report
from .gateway import build_gateway
from .kg_store import load_graph
from .memory import ExperienceMemory
from .memory_store import MemoryStore, generate_memory_key, load_memory_key
from .settings import Settings

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_KEY = 3

out = Console()
err = Console(stderr=True)


def _split_overrides(argv: Sequence[str]) -> tuple[list[str], dict[str, str]]:
    """Pull `--section.key value` / `--section.key=value` pairs out before argparse sees them."""
    rest: list[str] = []
    overrides: dict[str, str] = {}
    items = list(argv)
    idx = 0
    while idx < len(items):
        token = items[idx]
        name = token[2:].split("=", 1)[0] if token.startswith("--") else ""
        if "." in name:
            if "=" in token:
                overrides[name] = token.split("=", 1)[1]
            elif idx + 1 < len(items):
                overrides[name] = items[idx + 1]
                idx += 1
            else:
                raise ConfigError(f"missing value for --{name}")
        else:
            rest.append(token)
        idx += 1
    return rest, overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="privgemo",
        description="Privacy-preserving question answering over a knowledge graph.",
        epilog="Any config key can be overridden as --section.key VALUE, e.g. --privacy.ratio 0.5.",
    )
    parser.add_argument("--config", type=Path, default=None, help="JSON engine config")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("-v", "--verbose", action="store_true", help="shorthand for --log-level INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", help="load a graph file and report its statistics")
    ingest.add_argument("graph", type=Path)
    ingest.add_argument("--format", choices=("tsv", "ntriples"), default=None)
    ingest.add_argument("--json", action="store_true", help="print statistics as JSON")

    ask = sub.add_parser("ask", help="answer one question")
    ask.add_argument("graph", type=Path)
    ask.add_argument("question")
    ask.add_argument("--mock", default=None, help="scripted scenario name or path")
    ask.add_argument("--transcript", type=Path, default=None, help="write the run transcript as JSONL")
    ask.add_argument("--json", action="store_true", help="print the result as JSON")
    ask.add_argument("--store", type=Path, default=None, help="encrypted memory store (needs a key)")
    ask.add_argument("--key", type=Path, default=None, help="memory key file")

    ev = sub.add_parser("eval", help="evaluate a question file")
    ev.add_argument("questions", type=Path)
    ev.add_argument("--graph", type=Path, default=None, help="graph for records that do not name one")
    ev.add_argument("--mock", default=None, help="scenario for records that do not name one")
    ev.add_argument("--workers", type=int, default=1)
    ev.add_argument("--report", type=Path, default=None, help="write the report as JSON")
    ev.add_argument("--sweep-ratios", default=None, help="comma-separated anonymization ratios")
    ev.add_argument("--store", type=Path, default=None)
    ev.add_argument("--key", type=Path, default=None)

    mem = sub.add_parser("memory", help="inspect or maintain the encrypted experience store")
    mem.add_argument("action", choices=("inspect", "export", "import", "clear", "keygen"))
    mem.add_argument("path", nargs="?", type=Path, default=None, help="JSONL file for export/import")
    mem.add_argument("--store", type=Path, default=None)
    mem.add_argument("--key", type=Path, default=None)
    mem.add_argument("--top", type=int, default=5, help="templates to list on inspect")
    return parser


def _configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.WARNING),
        format="%(name)s: %(message)s",
        handlers=[RichHandler(console=err, show_time=False, show_path=False)],
        force=True,
    )


def _store_path(args: argparse.Namespace, config: EngineConfig, settings: Settings) -> Path:
    if args.store is not None:
        return args.store
    if config.memory.store_path:
        return Path(config.memory.store_path)
    return settings.memory_store


def _key_path(args: argparse.Namespace, settings: Settings) -> Path:
    path = args.key or settings.memory_key_path
    if path is None:
        raise MemoryKeyError("no memory key configured; pass --key or set PRIVGEMO_MEMORY_KEY")
    return path


def _open_store(args: argparse.Namespace, config: EngineConfig, settings: Settings, *, required: bool) -> MemoryStore | None:
    if not required and args.store is None and args.key is None and settings.memory_key_path is None:
        return None
    key = load_memory_key(_key_path(args, settings))
    return MemoryStore(_store_path(args, config, settings), key)


def cmd_ingest(args: argparse.Namespace, config: EngineConfig, settings: Settings) -> int:
    graph = load_graph(args.graph, args.format)
    stats = graph.stats.to_dict()
    if args.json:
        out.print_json(json.dumps(stats))
        return EXIT_OK
    table = Table(title=str(args.graph))
    table.add_column("metric")
    table.add_column("count", justify="right")
    for name, value in stats.items():
        table.add_row(name, str(value))
    out.print(table)
    return EXIT_OK


def _print_result(result: Any) -> None:
    if result.answers:
        out.print(f"[bold green]{', '.join(result.answers)}[/bold green]")
    else:
        out.print("[yellow]no answer: evidence insufficient[/yellow]")
    table = Table(show_header=False, box=None)
    table.add_row("source", result.answer_source.value)
    table.add_row("gate", result.gate_decision)
    table.add_row("trajectory", " > ".join(result.trajectory) or "-")
    table.add_row("brain calls", str(result.brain_calls))
    table.add_row("hand calls", str(result.hand_calls))
    table.add_row("kg expansions", str(result.exposure["kg_expansions"]))
    table.add_row("reduction", f"{result.reduction_ratio:.2f} ({result.entities_before} -> {result.entities_after})")
    out.print(table)
    for head, relation, tail in result.evidence:
        out.print(f"  ({head}, {relation}, {tail})")
    if result.model_knowledge_answers:
        out.print(f"[dim]model knowledge: {', '.join(result.model_knowledge_answers)}[/dim]")


def cmd_ask(args: argparse.Namespace, config: EngineConfig, settings: Settings) -> int:
    graph = load_graph(args.graph)
    store = _open_store(args, config, settings, required=False)
    embedder = HashingEmbedder(config.embedder.dim, config.embedder.ngram)
    memory = ExperienceMemory(config.memory, embedder, store) if config.memory.enabled else None
    gateway = build_gateway(config, scenario=args.mock) if args.mock else build_gateway(config)
    engine = PrivGemoEngine(graph, gateway, config, memory, embedder=embedder)
    result = engine.run(args.question)
    if args.transcript is not None:
        result.transcript.write(args.transcript)
    if args.json:
        out.print_json(json.dumps(result.to_dict(), ensure_ascii=False))
    else:
        _print_result(result)
    return EXIT_OK


def _report_table(report: EvalReport) -> Table:
    table = Table(title=f"Hits@1 {report.hits_text()} over {report.total} questions")
    for column in ("id", "answer", "match", "source", "brain", "hand", "reduction"):
        table.add_column(column)
    for o in report.outcomes:
        table.add_row(
            o.question_id,
            ", ".join(o.answers) or (o.error or "-"),
            "yes" if o.matched else "no",
            o.answer_source,
            str(o.brain_calls),
            str(o.hand_calls),
            f"{o.reduction_ratio:.2f}",
        )
    return table


def cmd_eval(args: argparse.Namespace, config: EngineConfig, settings: Settings) -> int:
    cases = load_questions(args.questions)
    if args.graph is not None and not args.graph.exists():
        raise FileNotFoundError(f"graph not found: {args.graph}")
    base_dir = args.questions.resolve().parent
    if args.sweep_ratios:
        try:
            ratios = [float(part) for part in args.sweep_ratios.split(",") if part.strip()]
        except ValueError as e:
            raise ConfigError(f"--sweep-ratios: {e}") from e
        reports = sweep_ratios(
            cases, config, ratios, graph_path=args.graph, mock=args.mock, base_dir=base_dir, workers=args.workers
        )
        table = Table(title="Hits@1 by anonymization ratio")
        table.add_column("ratio", justify="right")
        table.add_column("Hits@1", justify="right")
        table.add_column("mean brain calls", justify="right")
        table.add_column("mean reduction", justify="right")
        for report in reports:
            table.add_row(
                f"{report.ratio:.2f}", report.hits_text(), f"{report.mean_brain_calls:.2f}", f"{report.mean_reduction:.2f}"
            )
        out.print(table)
        if args.report is not None:
            write_report(reports, args.report)
        return EXIT_OK

    store = _open_store(args, config, settings, required=False)
    factory = EngineFactory(config, graph_path=args.graph, mock=args.mock, store=store, base_dir=base_dir)
    report = evaluate(cases, factory, workers=args.workers)
    out.print(_report_table(report))
    out.print(f"answer sources: {report.source_counts()}")
    out.print(f"brain calls: {report.brain_call_histogram()}")
    if args.report is not None:
        write_report(report, args.report)
    return EXIT_OK


def cmd_memory(args: argparse.Namespace, config: EngineConfig, settings: Settings) -> int:
    if args.action == "keygen":
        path = generate_memory_key(args.path or _key_path(args, settings))
        out.print(str(path))
        return EXIT_OK
    store = _open_store(args, config, settings, required=True)
    assert store is not None
    if args.action == "inspect":
        embedder = HashingEmbedder(config.embedder.dim, config.embedder.ngram)
        memory = ExperienceMemory(config.memory, embedder, store)
        records = sorted(memory.pool, key=lambda r: (-r.hit_count, r.created_at))
        out.print(f"records: {len(memory)}")
        table = Table(title="most used experience")
        for column in ("record", "hits", "outcome", "indicator", "templates"):
            table.add_column(column)
        for record in records[: max(0, args.top)]:
            table.add_row(
                record.record_id[:12],
                str(record.hit_count),
                "success" if record.outcome.sufficient else "warning",
                record.anon_indicator,
                "\n".join(record.path_templates) or "-",
            )
        out.print(table)
        out.print(f"buffer capacity: {memory.buffer.capacity}, pool cap: {memory.pool.cap}")
        return EXIT_OK
    if args.action == "clear":
        removed = store.clear()
        out.print(f"removed {removed}; records: {store.count()}")
        return EXIT_OK
    if args.path is None:
        raise ValueError(f"memory {args.action} needs a JSONL path")
    if args.action == "export":
        out.print(f"exported {store.export_jsonl(args.path)}")
    else:
        if not args.path.exists():
            raise FileNotFoundError(f"import file not found: {args.path}")
        out.print(f"imported {store.import_jsonl(args.path)}")
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "ask": cmd_ask,
    "eval": cmd_eval,
    "memory": cmd_memory,
}


def main(argv: Sequence[str] | None = None) -> int:
    settings = Settings.load()
    try:
        rest, overrides = _split_overrides(sys.argv[1:] if argv is None else argv)
    except ConfigError as e:
        err.print(f"[red]{e}[/red]")
        return EXIT_USAGE
    parser = build_parser()
    try:
        args = parser.parse_args(rest)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    _configure_logging(args.log_level or ("INFO" if args.verbose else settings.log_level))

    try:
        config = load_config(args.config or settings.config_path, overrides)
        return COMMANDS[args.command](args, config, settings)
    except MemoryKeyError as e:
        err.print(f"[red]memory key: {e}[/red]")
        return EXIT_KEY
    except (ConfigError, ParseError, FileNotFoundError, ValueError) as e:
        err.print(f"[red]{e}[/red]")
        return EXIT_USAGE
    except NoTopicEntities as e:
        err.print(f"[red]no topic entities: {e}[/red]")
        return EXIT_RUNTIME
    except PrivGemoError as e:
        err.print(f"[red]{type(e).__name__}: {e}[/red]")
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
