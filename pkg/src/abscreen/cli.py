"""Command-line surface: ingest, build, run, screen, evaluate, diagnose, serve.

Exit codes: 0 success, 1 validation error (bad arguments, malformed inputs),
2 runtime failure (provider errors, corrupt state). All artifacts land under
the given run directory so the CLI and the HTTP service share one on-disk
model.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import adjudicate, diagnostics, engine, evaluation, pipeline
from .adjudicate import FinalDecision, ScreeningDecision
from .corpus import CorpusError, load_corpus, load_labels, save_corpus, write_stats
from .engine import EngineError, RateBudget
from .prompts import CriteriaError, PromptOptions, load_criteria
from .providers import ProviderError, resolve_provider


def _budget_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--rpm", type=int, default=pipeline.DEFAULT_BUDGET.requests_per_minute)
    parser.add_argument("--tpm", type=int, default=pipeline.DEFAULT_BUDGET.tokens_per_minute)
    parser.add_argument("--max-in-flight", type=int, default=pipeline.DEFAULT_BUDGET.max_in_flight)
    parser.add_argument("--max-attempts", type=int, default=pipeline.DEFAULT_BUDGET.max_attempts)
    parser.add_argument("--base-backoff", type=float, default=pipeline.DEFAULT_BUDGET.base_backoff)


def _budget_from(args: argparse.Namespace) -> RateBudget:
    return RateBudget(
        requests_per_minute=args.rpm,
        tokens_per_minute=args.tpm,
        max_in_flight=args.max_in_flight,
        max_attempts=args.max_attempts,
        base_backoff=args.base_backoff,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abscreen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="normalize a corpus CSV and emit stats")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--column-map", help="JSON mapping of logical to actual column names")

    p = sub.add_parser("build", help="write the request file for a corpus + criteria")
    p.add_argument("--corpus", required=True)
    p.add_argument("--criteria", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="requests.jsonl path")
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--max-output-tokens", type=int, default=512)
    p.add_argument("--temperature", type=float, default=0.0)

    p = sub.add_parser("run", help="execute a request file against a provider")
    p.add_argument("--requests", help="requests.jsonl (defaults to run dir's copy)")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--resume", action="store_true")
    _budget_args(p)

    p = sub.add_parser("screen", help="full pipeline: actor [+ critic] -> final decisions")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("evaluate", help="score a finals CSV against human labels")
    p.add_argument("--finals", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--includes", required=True)
    p.add_argument("--excludes", required=True)
    p.add_argument("--level", required=True, choices=["fulltext", "final"])
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("diagnose", help="corpus-comparison statistics")
    p.add_argument("--corpus-a", required=True)
    p.add_argument("--corpus-b", required=True)
    p.add_argument("--out", required=True, help="report JSON path")

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--state-dir", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def cmd_ingest(args: argparse.Namespace) -> int:
    column_map = json.loads(args.column_map) if args.column_map else None
    corpus = load_corpus(args.corpus, column_map=column_map)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out / "corpus.csv")
    write_stats(corpus.stats, out / "stats.json")
    print(f"ingested {len(corpus)} records ({corpus.stats.n_missing_abstract} missing abstracts, "
          f"{corpus.n_rejected_no_title} rejected for empty titles) -> {out}")
    return 0


def cmd_build(args: argparse.Namespace) -> int:
    corpus = load_corpus(args.corpus)
    criteria = load_criteria(args.criteria)
    requests = engine.build_requests(
        corpus,
        criteria,
        args.model,
        PromptOptions(role="actor"),
        args.out,
        replicates=args.replicates,
        max_output_tokens=args.max_output_tokens,
        temperature=args.temperature,
    )
    print(f"wrote {len(requests)} requests -> {args.out}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    budget = _budget_from(args)
    if args.resume:
        requests_path = run_dir / engine.REQUESTS_FILE
        model_id = engine.read_requests(requests_path)[0].model_id
        _, ledger = engine.resume(run_dir, resolve_provider(model_id), budget)
    else:
        requests_path = Path(args.requests) if args.requests else run_dir / engine.REQUESTS_FILE
        model_id = engine.read_requests(requests_path)[0].model_id
        _, ledger = engine.run_batch(requests_path, resolve_provider(model_id), budget, run_dir)
    print(f"run {ledger.run_id}: {len(ledger.completed_ids)} completed, "
          f"{len(ledger.pending_ids)} pending, {ledger.n_failed} failed")
    return 0


def cmd_screen(args: argparse.Namespace) -> int:
    config = pipeline.validate_run_config(json.loads(Path(args.config).read_text(encoding="utf-8")))
    summary = pipeline.run_screening(config, args.run_dir, resume=args.resume)
    print(f"screened {summary['n_records']} records under rule {summary['rule']}: "
          f"{summary['n_finals']} final decisions, {summary['n_errors']} errors "
          f"-> {summary['finals_path']}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    corpus = load_corpus(args.corpus)
    labels = load_labels(args.includes, args.excludes, args.level, corpus)
    finals = []
    for row in adjudicate.read_finals(args.finals):
        actor = ScreeningDecision(
            record_id=row["record_id"],
            role="actor",
            decision=row["decision"],
            confidence=row["aggregated_confidence"],
        )
        finals.append(
            FinalDecision(
                record_id=row["record_id"],
                decision=row["decision"],
                aggregated_confidence=row["aggregated_confidence"],
                rule="single",
                actor=actor,
            )
        )
    report = evaluation.evaluate(finals, labels, args.level)
    preds = evaluation.scored_predictions(finals, labels)
    evaluation.write_report(report, preds, args.out)
    d = report.to_dict()["display"]
    print(f"level={args.level} sensitivity={d['sensitivity']} specificity={d['specificity']} "
          f"accuracy={d['accuracy']} precision={d['precision']} auc={d['auc']} "
          f"brier={d['brier']} ece={d['ece']}")
    return 0


def cmd_diagnose(args: argparse.Namespace) -> int:
    stats_a = load_corpus(args.corpus_a).stats
    stats_b = load_corpus(args.corpus_b).stats
    report = diagnostics.compare_corpora(stats_a, stats_b)
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"diagnostic report -> {args.out}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(args.state_dir), host=args.host, port=args.port)
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "build": cmd_build,
    "run": cmd_run,
    "screen": cmd_screen,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; those are validation failures here.
        return 0 if exc.code == 0 else 1
    try:
        return COMMANDS[args.command](args)
    except (pipeline.ConfigValidation, CorpusError, CriteriaError, ValueError,
            FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (EngineError, ProviderError, evaluation.EvaluationError,
            diagnostics.DiagnosticsError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
