"""Command line entry point: ``sitewarden <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

from . import evalkit, orchestrator, regstore
from .errors import ConfigError, SitewardenError
from .inference import LiveBackend
from .ingest import extract_frames

log = logging.getLogger("sitewarden")


def _cmd_extract(args) -> int:
    frames = extract_frames(args.video, Fraction(args.rate), args.out_dir, time_sep=args.sep)
    print(f"wrote {len(frames)} frames to {args.out_dir}")
    return 0


def _cmd_build_index(args) -> int:
    chunks = regstore.chunk_clauses(regstore.load_corpus(args.corpus), args.max_chars, args.overlap)
    embedder = None
    if args.embedder == "remote":
        embedder = regstore.RemoteEmbedder(LiveBackend(args.base_url), args.embed_model)
    index = regstore.build_index(chunks, embedder)
    index.save(args.out)
    print(f"indexed {len(chunks)} chunks (dimension {index.dimension}) -> {args.out}")
    return 0


def _cmd_search(args) -> int:
    index = regstore.EmbeddingIndex.load(args.index)
    for hit in regstore.search(index, args.query, args.k):
        print(f"{hit.score:.4f}  {hit.chunk.chunk_id}")
    return 0


def _cmd_run(args) -> int:
    config = orchestrator.RunConfig.load(args.config)
    for name in ("output_dir", "backend", "report_mode", "cassette", "base_url"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(config, name, str(Path(value).resolve()) if name in ("output_dir", "cassette") else value)
    artifacts = orchestrator.run(config)
    print(f"run {artifacts.run_id}: {len(artifacts.assessments)} frames assessed, {len(artifacts.errors)} failed")
    for stage, counts in artifacts.stats.items():
        print(f"  {stage}: {counts['hits']} cached, {counts['misses']} computed")
    print(f"report: {artifacts.report_path}")
    return 0 if not artifacts.errors else 3


def _cmd_record(args) -> int:
    args.backend = "record"
    return _cmd_run(args)


def _cmd_report(args) -> int:
    kept = orchestrator.render_report(args.run_dir, mode=args.mode, template_path=args.template, force=args.force)
    print(("kept" if kept else "wrote") + f" {Path(args.run_dir) / orchestrator.REPORT}")
    return 0


def _cmd_verify(args) -> int:
    problems = orchestrator.verify_ledger(args.run_dir)
    for p in problems:
        print(p)
    print("ledger ok" if not problems else f"{len(problems)} problem(s)")
    return 0 if not problems else 1


def _cmd_eval(args) -> int:
    truth = evalkit.load_truth(args.truth)
    predictions = {}
    for path in args.predictions:
        for system, preds in evalkit.load_predictions(path, args.scenario, args.run).items():
            predictions.setdefault(system, {}).update(preds)
    rows = evalkit.aggregate(evalkit.evaluate(truth, predictions), macro=args.macro)
    if args.json:
        print(json.dumps(evalkit.table_json(rows, args.macro), indent=2))
    else:
        print(evalkit.format_table(rows))
    return 0


def _cmd_build_fixtures(args) -> int:
    from . import fixtures

    fixtures.build_eval_fixtures()
    fixtures.build_replay_fixture()
    print(f"rebuilt fixtures under {fixtures.FIXTURES_DIR}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sitewarden", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="sample frames from a video")
    p.add_argument("video")
    p.add_argument("out_dir")
    p.add_argument("--rate", default="1", help="samples per second (may be a fraction such as 1/2)")
    p.add_argument("--sep", default=":", choices=[":", "_"], help="separator inside time labels")
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("build-index", help="chunk and embed a regulation corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", default=str(orchestrator.BUNDLED_CORPUS))
    p.add_argument("--embedder", choices=["lexical", "remote"], default="lexical")
    p.add_argument("--embed-model", default="nomic-embed-text")
    p.add_argument("--base-url")
    p.add_argument("--max-chars", type=int, default=regstore.DEFAULT_MAX_CHARS)
    p.add_argument("--overlap", type=int, default=regstore.DEFAULT_OVERLAP)
    p.set_defaults(func=_cmd_build_index)

    p = sub.add_parser("search", help="query a saved index")
    p.add_argument("index")
    p.add_argument("query")
    p.add_argument("-k", type=int, default=regstore.DEFAULT_K)
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("run", help="run the full pipeline from a JSON config")
    p.add_argument("config")
    p.add_argument("--output-dir")
    p.add_argument("--backend", choices=["live", "replay", "record"])
    p.add_argument("--cassette")
    p.add_argument("--base-url")
    p.add_argument("--report-mode", choices=["deterministic", "model"])
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("record", help="run a config against a live server and record its cassette")
    p.add_argument("config")
    p.add_argument("--cassette", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--base-url")
    p.add_argument("--report-mode", choices=["deterministic", "model"])
    p.set_defaults(func=_cmd_record)

    p = sub.add_parser("report", help="re-render the report of an existing run")
    p.add_argument("run_dir")
    p.add_argument("--mode", choices=["deterministic", "model"])
    p.add_argument("--template")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("verify", help="check a run's provenance ledger")
    p.add_argument("run_dir")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("eval", help="score predictions against frame-level truth")
    p.add_argument("--truth", required=True)
    p.add_argument("--pred", dest="predictions", nargs="+", required=True)
    p.add_argument("--scenario", help="scenario for records that lack one (e.g. assessments.jsonl)")
    p.add_argument("--run", help="run id for records that lack one")
    p.add_argument("--macro", action="store_true", help="average per-run metrics instead of pooling")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("build-fixtures", help="regenerate the bundled eval and replay fixtures")
    p.set_defaults(func=_cmd_build_fixtures)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config: {v}", file=sys.stderr)
        return 2
    except (SitewardenError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
