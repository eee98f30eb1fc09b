"""Operator command line: serve, ingest, query, maintain, benchmark.

Every command except ``serve`` and ``bench`` works directly on a data
directory through the same engine the HTTP service uses, so local and
served results cannot disagree. Exit codes: 0 success, 1 usage or input
error, 2 internal failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

from .bench import BENCH_MODES, BenchFixtureError, format_table, render_figures, run_bench, write_report
from .config import ServiceConfig
from .corpus import IngestionError, UnsupportedFormatError
from .engine import Engine, SnapshotVersionError, UnknownBotError
from .feedback import InvalidFeedbackError, UnknownRecordError
from .store import DuplicateBotNameError, DuplicateUploadError

USER_ERRORS = (
    BenchFixtureError,
    DuplicateBotNameError,
    DuplicateUploadError,
    IngestionError,
    InvalidFeedbackError,
    SnapshotVersionError,
    UnsupportedFormatError,
    UnknownBotError,
    UnknownRecordError,
    FileNotFoundError,
    ValueError,
)

FORMAT_BY_SUFFIX = {".md": "markdown", ".markdown": "markdown", ".csv": "csv"}


def _load_config(args: argparse.Namespace) -> ServiceConfig:
    if getattr(args, "config", None):
        config = ServiceConfig.load(args.config)
    else:
        config = ServiceConfig()
    if getattr(args, "data_dir", None):
        config.data_dir = Path(args.data_dir)
    return config


def _resolve_bot(engine: Engine, ref: str) -> str:
    """Accept a bot id or a bot name."""
    if ref in engine.bots:
        return ref
    for bot_id, bot in engine.bots.items():
        if bot.config.name == ref:
            return bot_id
    raise UnknownBotError(ref)


def _emit(args: argparse.Namespace, payload: dict, human: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2))
    else:
        print(human)


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .api import create_app

    config = _load_config(args)
    engine = Engine(config)
    app = create_app(engine)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")
    return 0


def cmd_create_bot(args: argparse.Namespace) -> int:
    engine = Engine(_load_config(args))
    try:
        config = engine.create_bot(args.name, args.greeting, args.openness)
        _emit(
            args,
            {
                "bot_id": config.bot_id,
                "name": config.name,
                "openness": config.openness,
                "public_key": config.public_key,
            },
            f"created bot {config.name!r} ({config.bot_id})",
        )
        return 0
    finally:
        engine.close()


def cmd_ingest(args: argparse.Namespace) -> int:
    engine = Engine(_load_config(args))
    try:
        bot_id = _resolve_bot(engine, args.bot)
        reports = []
        for file_path in args.files:
            path = Path(file_path)
            fmt = args.format or FORMAT_BY_SUFFIX.get(path.suffix.lower(), "plain")
            report = engine.upload_document(
                bot_id, path.name, path.read_text(encoding="utf-8"), fmt
            )
            reports.append(
                {
                    "source_name": path.name,
                    "doc_id": report.doc_id,
                    "chunk_count": report.chunk_count,
                    "token_total": report.token_total,
                }
            )
            if not args.json:
                print(f"{path.name}: {report.chunk_count} chunks, {report.token_total} tokens")
        if args.json:
            print(json.dumps({"ingested": reports}, indent=2))
        return 0
    finally:
        engine.close()


def cmd_query(args: argparse.Namespace) -> int:
    engine = Engine(_load_config(args))
    try:
        bot_id = _resolve_bot(engine, args.bot)
        result = engine.query(bot_id, args.session, args.text)
        bot = engine.get_bot(bot_id)
        payload = {
            "answer": result.answer_text,
            "record_id": result.record_id,
            "degraded": result.degraded,
            "passages": [
                {
                    "chunk_ref": p.chunk_ref,
                    "heading": p.heading,
                    "snippet": p.body[:200],
                    "rerank_score": p.rerank_score,
                }
                for p in result.passages
            ],
        }
        if args.json:
            print(json.dumps(payload, indent=2))
        else:
            print(result.answer_text)
            for i, p in enumerate(result.passages, start=1):
                head = f" ({p.heading})" if p.heading else ""
                print(f"  [{i}]{head} {p.body[:120]}")
        return 0
    finally:
        engine.close()


def cmd_rebuild(args: argparse.Namespace) -> int:
    engine = Engine(_load_config(args))
    try:
        bot_id = _resolve_bot(engine, args.bot)
        engine.rebuild(bot_id)
        bot = engine.get_bot(bot_id)
        assert bot.index_parity(), "index parity violated after rebuild"
        _emit(
            args,
            {"bot_id": bot_id, "chunks": len(bot.chunks)},
            f"rebuilt {len(bot.chunks)} chunks for bot {bot_id}",
        )
        return 0
    finally:
        engine.close()


def cmd_snapshot(args: argparse.Namespace) -> int:
    engine = Engine(_load_config(args))
    try:
        bot_id = _resolve_bot(engine, args.bot)
        path = engine.snapshot(bot_id, args.output)
        _emit(args, {"archive": str(path)}, f"wrote {path}")
        return 0
    finally:
        engine.close()


def cmd_restore(args: argparse.Namespace) -> int:
    engine = Engine(_load_config(args))
    try:
        config = engine.restore(args.input, force=args.force)
        _emit(
            args,
            {"bot_id": config.bot_id, "name": config.name},
            f"restored bot {config.name!r} ({config.bot_id})",
        )
        return 0
    finally:
        engine.close()


def cmd_export_records(args: argparse.Namespace) -> int:
    engine = Engine(_load_config(args))
    try:
        bot_id = _resolve_bot(engine, args.bot)
        path = engine.export_records_csv(bot_id, args.output)
        _emit(args, {"csv": str(path)}, f"wrote {path}")
        return 0
    finally:
        engine.close()


def cmd_bench(args: argparse.Namespace) -> int:
    modes = tuple(args.modes.split(",")) if args.modes else BENCH_MODES
    report = run_bench(args.corpus, args.queries, modes=modes, k=args.k)
    out_dir = Path(args.output)
    paths = write_report(report, out_dir, as_json=True)
    paths.update(render_figures(report, out_dir))
    if args.json:
        from dataclasses import asdict

        print(
            json.dumps(
                {"report": asdict(report), "files": {k: str(v) for k, v in paths.items()}},
                indent=2,
            )
        )
    else:
        print(format_table(report))
        for kind, path in paths.items():
            print(f"  {kind}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ragserve",
        description="Grounded question answering over a curated corpus.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser, bot: bool = True):
        p.add_argument("--config", help="service config JSON file")
        p.add_argument("--data-dir", help="data directory (overrides config)")
        p.add_argument("--json", action="store_true", help="machine-readable output")
        if bot:
            p.add_argument("--bot", required=True, help="bot id or name")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--config", help="service config JSON file")
    p.add_argument("--data-dir", help="data directory (overrides config)")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("create-bot", help="create a chatbot")
    add_common(p, bot=False)
    p.add_argument("--name", required=True)
    p.add_argument("--greeting", default="")
    p.add_argument("--openness", type=int, default=0)
    p.set_defaults(func=cmd_create_bot)

    p = sub.add_parser("ingest", help="upload documents into a bot's corpus")
    add_common(p)
    p.add_argument("files", nargs="+", help="text/markdown/csv files")
    p.add_argument("--format", choices=["plain", "markdown", "csv"])
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("query", help="ask a bot a question")
    add_common(p)
    p.add_argument("text")
    p.add_argument("--session", default="cli")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("rebuild", help="rebuild both indexes from stored documents")
    add_common(p)
    p.set_defaults(func=cmd_rebuild)

    p = sub.add_parser("snapshot", help="archive a bot to a portable file")
    add_common(p)
    p.add_argument("--output", "-o", required=True)
    p.set_defaults(func=cmd_snapshot)

    p = sub.add_parser("restore", help="restore a bot from an archive")
    add_common(p, bot=False)
    p.add_argument("--input", "-i", required=True)
    p.add_argument("--force", action="store_true", help="replace an existing bot")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("export-records", help="export interaction records to CSV")
    add_common(p)
    p.add_argument("--output", "-o", required=True)
    p.set_defaults(func=cmd_export_records)

    p = sub.add_parser("bench", help="benchmark retrieval modes on a labeled fixture")
    p.add_argument("--corpus", required=True, help="directory of corpus files")
    p.add_argument("--queries", required=True, help="CSV of query,relevant_ids")
    p.add_argument("--modes", help=f"comma-separated subset of {','.join(BENCH_MODES)}")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--output", "-o", default="bench-out", help="report directory")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
