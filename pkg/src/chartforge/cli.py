"""Command-line entry points.

Every command reads one declarative config file plus flags. ``generate``
runs screening -> proposal -> build; ``--dry-run`` swaps in the scripted
backend (and, when the fixture scripts it, the scripted sandbox) so a full
pipeline runs with zero network.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import Config, load_config
from .errors import ChartforgeError
from .evaluation import aggregate_accuracy, centered_effects, emit_report, run_evaluation
from .gateway import Gateway, HTTPBackend, ScriptedBackend
from .ingest import discover_datasets, fetch_listing, load_dataset
from .pipeline import GenerateRun, annotate_run
from .sandbox import CommandSandbox, InProcessRunner, ScriptedSandbox
from .store import RunStore, Workspace, corpus_stats
from .util import wall_ulid

logger = logging.getLogger(__name__)


def _load_fixture(path: Path) -> tuple[ScriptedBackend, ScriptedSandbox | None]:
    raw = json.loads(path.read_text(encoding="utf-8"))
    if isinstance(raw, list):
        return ScriptedBackend.from_file(path), None
    backend = ScriptedBackend.from_pairs(
        [
            (entry["match"], _fixture_response(entry), entry.get("times", 1))
            for entry in raw.get("llm", [])
        ]
    )
    sandbox = None
    if "sandbox" in raw:
        outcomes = []
        for entry in raw["sandbox"]:
            kind = entry["kind"]
            if kind == "ok":
                outcomes.append(("ok", entry["details"]))
            elif kind == "exec_error":
                outcomes.append(("exec_error", entry.get("stderr", "")))
            else:
                outcomes.append((kind,))
        sandbox = ScriptedSandbox(outcomes)
    return backend, sandbox


def _fixture_response(entry: dict) -> str:
    response = entry["response"]
    if isinstance(response, str):
        return response
    return json.dumps(response)


def _gateway_and_sandbox(config: Config, args) -> tuple[Gateway, object]:
    transcript = getattr(args, "transcript", None)
    if getattr(args, "dry_run", False):
        fixture = getattr(args, "fixture", None) or config.fixture_path
        if not fixture:
            raise ChartforgeError(
                "--dry-run needs a fixture (--fixture or fixture_path in config)"
            )
        backend, scripted_sandbox = _load_fixture(Path(fixture))
        gateway = Gateway(backend, backoff_base=0.0, transcript_path=transcript)
        sandbox = scripted_sandbox or InProcessRunner()
        return gateway, sandbox
    gateway = Gateway(HTTPBackend(), transcript_path=transcript)
    if config.sandbox.runner_command:
        sandbox = CommandSandbox(config.sandbox.runner_command)
    else:
        sandbox = InProcessRunner()
    return gateway, sandbox


def _cmd_ingest(config: Config, args) -> int:
    if args.from_listing:
        created = fetch_listing(args.from_listing, args.source)
        print(f"fetched {len(created)} dataset(s) into {args.source}")
    paths = discover_datasets(args.source)
    print(f"{len(paths)} dataset directory(ies) under {args.source}")
    bad = 0
    for path in paths:
        try:
            context = load_dataset(path, preview_rows=config.pipeline.preview_rows)
            print(
                f"  {context.dataset_id}: {context.n_instances} rows x "
                f"{context.n_features} features"
            )
        except ChartforgeError as exc:
            bad += 1
            print(f"  {path.name}: LOAD ERROR: {exc}")
    return 1 if bad else 0


def _cmd_generate(config: Config, args) -> int:
    workspace = Workspace(args.workspace)
    run_id = args.run_id or f"run-{wall_ulid()}"
    gateway, sandbox = _gateway_and_sandbox(config, args)
    deterministic = config.pipeline.seed is not None
    store = workspace.open_run(run_id, deterministic=deterministic)
    summary = GenerateRun(store, config, gateway, sandbox, run_id).execute(args.ingest)
    print(json.dumps(summary.to_dict(), indent=2))
    return 0


def _cmd_annotate(config: Config, args) -> int:
    workspace = Workspace(args.workspace)
    gateway, _ = _gateway_and_sandbox(config, args)
    deterministic = config.pipeline.seed is not None
    store = workspace.open_run(args.run_id, deterministic=deterministic)
    summary = annotate_run(store, config, gateway)
    print(json.dumps(summary.to_dict(), indent=2))
    return 0


def _cmd_evaluate(config: Config, args) -> int:
    workspace = Workspace(args.workspace)
    gateway, _ = _gateway_and_sandbox(config, args)
    store = RunStore(workspace.run_dir(args.run_id))
    items = store.eval_items()
    if not items:
        print("no annotated charts to evaluate", file=sys.stderr)
        return 1
    candidates = [config.endpoint(role) for role in config.eval.candidate_models]
    if not candidates:
        print("eval.candidate_models is empty", file=sys.stderr)
        return 1
    judge = config.endpoint(config.eval.judge_model)
    out_dir = workspace.eval_dir(args.eval_id)
    result = run_evaluation(items, candidates, judge, gateway, config.eval, out_dir)
    print(
        f"evaluated {len(result.verdicts)} answers "
        f"({len(result.unanswered)} unanswered, {len(result.unjudged)} unjudged) "
        f"-> {out_dir}"
    )
    return 0


def _cmd_report(config: Config, args) -> int:
    workspace = Workspace(args.workspace)
    store = RunStore(workspace.run_dir(args.run_id))
    out_dir = workspace.eval_dir(args.eval_id)
    verdicts_path = out_dir / "verdicts.jsonl"
    if not verdicts_path.is_file():
        print(f"no verdicts at {verdicts_path}", file=sys.stderr)
        return 1
    from .evaluation import VerdictRow

    qa_index: dict[tuple[str, str], tuple[str, str]] = {}
    for chart_id in store.list_charts():
        record = store.load_chart_record(chart_id)
        for qa in record.qa:
            qa_index[(chart_id, qa.qa_id)] = (
                qa.qtype.value if qa.qtype else "",
                record.chart_family,
            )
    rows = []
    for line in verdicts_path.read_text(encoding="utf-8").splitlines():
        v = json.loads(line)
        qtype, family = qa_index.get((v["chart_id"], v["qa_id"]), ("", ""))
        rows.append(
            VerdictRow(
                model_id=v["model_id"],
                chart_id=v["chart_id"],
                qa_id=v["qa_id"],
                qtype=qtype,
                chart_family=family,
                correct=v["correct"],
            )
        )
    cells = (
        aggregate_accuracy(rows, ("model",), config.eval)
        + aggregate_accuracy(rows, ("model", "qtype"), config.eval)
        + aggregate_accuracy(rows, ("model", "chart_family"), config.eval)
    )
    effects = centered_effects(rows, "qtype") + centered_effects(rows, "chart_family")
    written = emit_report(cells, effects, out_dir, figures=args.figures)
    for path in written:
        print(path)
    return 0


def _cmd_stats(config: Config, args) -> int:
    workspace = Workspace(args.workspace)
    stats = corpus_stats(workspace.run_dir(args.run_id))
    if args.json:
        print(json.dumps(stats.to_dict(), indent=2))
    else:
        d = stats.to_dict()
        width = max(len(k) for k in d)
        for key, value in d.items():
            if key == "discard_rate" and value is not None:
                value = f"{value:.4f}"
            print(f"{key:<{width}}  {value}")
        if stats.orphans:
            print(f"orphans: {len(stats.orphans)} (first 10)")
            for orphan in stats.orphans[:10]:
                print(f"  {orphan}")
    return 0


def _cmd_inspect(config: Config, args) -> int:
    workspace = Workspace(args.workspace)
    store = RunStore(workspace.run_dir(args.run_id))
    lineage = store.inspect(args.chart_id)
    print(f"chart {lineage['chart_id']} [{lineage['chart_family']}]")
    ds = lineage["dataset"]
    print(f"dataset {ds['dataset_id']} ({ds['name']})")
    print(f"  summary: {ds['clean_summary']}")
    if lineage["proposal"]:
        p = lineage["proposal"]
        print(f"proposal: {p['chart_family']} on {', '.join(p['features'])}")
        print(f"  intent: {p['intent']}")
    print(
        f"code versions: {len(lineage['code_versions'])}, "
        f"renders: {len(lineage['renders'])}, retries: {lineage['retries_used']}"
    )
    for i, verdict in enumerate(lineage["verdicts"], start=1):
        state = "needs correction" if verdict["needs_correction"] else "pass"
        problems = "; ".join(p["category"] for p in verdict["problems"])
        print(f"  check {i}: {state}" + (f" ({problems})" if problems else ""))
    print(f"description: {lineage['description'] or '(unannotated)'}")
    print(f"qa items: {len(lineage['qa'])}")
    for qa in lineage["qa"]:
        print(f"  [{qa['difficulty']}/{qa['qtype']}] {qa['question']} -> {qa['answer']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chartforge",
        description="Table-to-chart generation pipeline and evaluation harness",
    )
    parser.add_argument("--config", type=Path, help="YAML config file")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate (or fetch) an ingest directory")
    p.add_argument("--source", required=True, help="ingest directory")
    p.add_argument("--from-listing", help="listing JSON path/URL to fetch first")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("generate", help="run screening, proposal, and chart building")
    p.add_argument("--workspace", required=True)
    p.add_argument("--ingest", required=True)
    p.add_argument("--run-id")
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--fixture", help="scripted backend fixture (JSON)")
    p.add_argument("--transcript", help="request/response transcript file")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("annotate", help="describe and QA retained charts")
    p.add_argument("--workspace", required=True)
    p.add_argument("--run-id", required=True)
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--fixture")
    p.add_argument("--transcript")
    p.set_defaults(func=_cmd_annotate)

    p = sub.add_parser("evaluate", help="collect and judge model answers")
    p.add_argument("--workspace", required=True)
    p.add_argument("--run-id", required=True)
    p.add_argument("--eval-id", required=True)
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--fixture")
    p.add_argument("--transcript")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="emit accuracy/effects tables and figures")
    p.add_argument("--workspace", required=True)
    p.add_argument("--run-id", required=True)
    p.add_argument("--eval-id", required=True)
    p.add_argument("--figures", action="store_true")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("stats", help="corpus bookkeeping for one run")
    p.add_argument("--workspace", required=True)
    p.add_argument("--run-id", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("inspect", help="print the full lineage of one chart")
    p.add_argument("chart_id")
    p.add_argument("--workspace", required=True)
    p.add_argument("--run-id", required=True)
    p.set_defaults(func=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config) if args.config else Config()
    except ChartforgeError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(config, args)
    except ChartforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
