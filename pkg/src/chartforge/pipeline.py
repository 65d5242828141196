"""Run orchestration: screening -> proposal -> build, then annotation.

Every milestone is an idempotent event (natural-key ids), and every
sub-state machine folds from its log, so a run killed between any two events
resumes to exactly the state an uninterrupted run would have reached.
Identifiers derive from the run seed and stable namespaces, never from a
process-local counter, for the same reason.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from .annotate import ChartInputs, annotate_chart
from .builder import BuilderDeps, CandidateWorkspace, run_candidate
from .config import Config
from .errors import (
    AnnotationFailure,
    ContractViolation,
    GatewayError,
    InfrastructureError,
    ProposalShortfallError,
)
from .gateway import Gateway
from .ingest import (
    discover_datasets,
    load_dataset,
    prefilter,
    rewrite_feature_labels,
    sample_datasets,
    screen_dataset,
)
from .model import CandidateState, ChartProposal, ChartRecord, DatasetContext
from .proposal import propose_plots
from .store import RunStore
from .util import DerivedIds, sha256_hex, canonical_json

logger = logging.getLogger(__name__)


@dataclass
class RunSummary:
    run_id: str
    datasets_loaded: int = 0
    datasets_rejected_prefilter: int = 0
    datasets_rejected_screen: int = 0
    datasets_ready: int = 0
    candidates_retained: int = 0
    candidates_discarded: int = 0
    candidates_failed: int = 0
    charts_annotated: int = 0
    charts_unannotated: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _manifest_index(store: RunStore) -> dict[str, dict]:
    return {e["event_id"]: e for e in store.manifest_events()}


def _dataset_progress(store: RunStore, dataset_id: str) -> dict:
    progress: dict = {"loaded": False}
    for event in store.dataset_events(dataset_id):
        etype, payload = event["type"], event["payload"]
        if etype == "dataset_loaded":
            progress["loaded"] = True
        elif etype == "prefiltered":
            progress["prefilter"] = payload
        elif etype == "screened":
            progress["screened"] = payload
        elif etype == "labels_rewritten":
            progress["labels"] = True
        elif etype == "proposals":
            progress["proposals"] = [
                ChartProposal.from_dict(p) for p in payload["proposals"]
            ]
    return progress


class GenerateRun:
    """Drives one generation run over an ingest directory."""

    def __init__(
        self,
        store: RunStore,
        config: Config,
        gateway: Gateway,
        sandbox,
        run_id: str,
    ):
        self.store = store
        self.config = config
        self.gateway = gateway
        self.sandbox = sandbox
        self.run_id = run_id
        self.ids = DerivedIds(config.pipeline.seed)
        self.summary = RunSummary(run_id=run_id)

    def execute(self, ingest_dir: str | Path) -> RunSummary:
        config_digest = sha256_hex(canonical_json(_config_fingerprint(self.config)))
        self.store.append_manifest(
            "run_opened",
            {
                "run_id": self.run_id,
                "seed": self.config.pipeline.seed,
                "config_digest": config_digest,
            },
            event_id="run_opened",
        )
        paths = sample_datasets(
            discover_datasets(ingest_dir),
            self.config.pipeline.sample_size,
            self.config.pipeline.seed,
        )
        for path in paths:
            try:
                self._process_dataset(path)
            except (GatewayError, ContractViolation, InfrastructureError) as exc:
                logger.error("dataset %s failed: %s", path.name, exc)
                self.store.append_manifest(
                    "dataset_done",
                    {"dataset_id": path.name, "disposition": "error", "reason": str(exc)},
                    event_id=f"dataset_done:{path.name}",
                )
        self.store.append_manifest(
            "run_completed", self.summary.to_dict(), event_id="run_completed"
        )
        return self.summary

    # -- dataset stage ----------------------------------------------------------

    def _process_dataset(self, path: Path) -> None:
        dataset_id = path.name
        store = self.store
        pipeline_cfg = self.config.pipeline
        progress = _dataset_progress(store, dataset_id)

        if not progress["loaded"]:
            context = load_dataset(
                path, preview_rows=pipeline_cfg.preview_rows, dataset_id=dataset_id
            )
            store.import_dataset_table(dataset_id, path / "data.csv")
            store.append_dataset_event(
                dataset_id, "dataset_loaded", {"context": context.to_dict()}
            )
            progress = _dataset_progress(store, dataset_id)
        context = store.fold_dataset_context(dataset_id)
        self.summary.datasets_loaded += 1

        if "prefilter" not in progress:
            decision = prefilter(context, pipeline_cfg)
            store.append_dataset_event(dataset_id, "prefiltered", decision.to_dict())
            progress["prefilter"] = decision.to_dict()
        if not progress["prefilter"]["keep"]:
            self.summary.datasets_rejected_prefilter += 1
            store.append_manifest(
                "dataset_done",
                {
                    "dataset_id": dataset_id,
                    "disposition": "rejected_prefilter",
                    "reason": progress["prefilter"]["reason"],
                },
                event_id=f"dataset_done:{dataset_id}",
            )
            return

        if "screened" not in progress:
            outcome = screen_dataset(
                context, self.gateway, self.config.endpoint("generator"), pipeline_cfg
            )
            store.append_dataset_event(dataset_id, "screened", outcome.to_dict())
            progress["screened"] = outcome.to_dict()
        if not progress["screened"]["keep"]:
            self.summary.datasets_rejected_screen += 1
            store.append_manifest(
                "dataset_done",
                {
                    "dataset_id": dataset_id,
                    "disposition": "rejected_screen",
                    "reason": progress["screened"]["reject_reason"],
                },
                event_id=f"dataset_done:{dataset_id}",
            )
            return
        context = store.fold_dataset_context(dataset_id)

        if "labels" not in progress:
            relabeled = rewrite_feature_labels(
                context, self.gateway, self.config.endpoint("generator"), pipeline_cfg
            )
            store.append_dataset_event(
                dataset_id, "labels_rewritten", {"context": relabeled.to_dict()}
            )
            context = relabeled
        else:
            context = store.fold_dataset_context(dataset_id)

        self.summary.datasets_ready += 1
        store.append_manifest(
            "dataset_done",
            {"dataset_id": dataset_id, "disposition": "ready"},
            event_id=f"dataset_done:{dataset_id}",
        )

        # -- proposal stage ----------------------------------------------------

        progress = _dataset_progress(store, dataset_id)
        if "proposals" not in progress:
            try:
                proposals = propose_plots(
                    context,
                    self.gateway,
                    self.config.endpoint("generator"),
                    pipeline_cfg,
                    make_id=lambda i: self.ids.id_for(f"{dataset_id}:proposal", i),
                )
            except ProposalShortfallError as exc:
                logger.error("%s: %s", dataset_id, exc)
                self.store.append_manifest(
                    "proposals_failed",
                    {"dataset_id": dataset_id, "reason": str(exc)},
                    event_id=f"proposals_failed:{dataset_id}",
                )
                return
            store.append_dataset_event(
                dataset_id,
                "proposals",
                {"proposals": [p.to_dict() for p in proposals]},
            )
            store.write_proposals(dataset_id, proposals)
        else:
            proposals = progress["proposals"]

        # -- candidate stage ---------------------------------------------------

        for proposal in proposals:
            self._process_candidate(dataset_id, context, proposal)

    # -- candidate stage -----------------------------------------------------------

    def _process_candidate(
        self, dataset_id: str, context: DatasetContext, proposal: ChartProposal
    ) -> None:
        candidate_id = proposal.proposal_id
        store = self.store
        manifest = _manifest_index(store)
        terminal_key = f"candidate_terminal:{candidate_id}"

        if terminal_key in manifest:
            state = manifest[terminal_key]["payload"]["state"]
        else:
            deps = BuilderDeps(
                gateway=self.gateway,
                generator=self.config.endpoint("generator"),
                checker=self.config.endpoint("checker"),
                sandbox=self.sandbox,
                config=self.config.pipeline,
                dataset_csv=store.dataset_dir(dataset_id) / "data.csv",
                wall_seconds=self.config.sandbox.wall_seconds,
                memory_mb=self.config.sandbox.memory_mb,
            )
            workspace = CandidateWorkspace(
                root=store.candidate_dir(candidate_id), rel_root=store.run_dir
            )
            try:
                candidate = run_candidate(
                    candidate_id,
                    proposal,
                    context,
                    deps,
                    workspace,
                    store.candidate_log(candidate_id),
                )
                state = candidate.state.value
            except (GatewayError, ContractViolation, InfrastructureError) as exc:
                logger.error("candidate %s infrastructure failure: %s", candidate_id, exc)
                state = CandidateState.FAILED.value
                store.append_manifest(
                    "candidate_terminal",
                    {
                        "candidate_id": candidate_id,
                        "dataset_id": dataset_id,
                        "state": state,
                        "retries_used": None,
                        "chart_family": proposal.chart_family,
                        "infra": str(exc),
                    },
                    event_id=terminal_key,
                )
                self.summary.candidates_failed += 1
                return
            store.append_manifest(
                "candidate_terminal",
                {
                    "candidate_id": candidate_id,
                    "dataset_id": dataset_id,
                    "state": state,
                    "retries_used": candidate.retries_used,
                    "chart_family": proposal.chart_family,
                },
                event_id=terminal_key,
            )

        if state == CandidateState.RETAINED.value:
            self.summary.candidates_retained += 1
            if f"chart_retained:{candidate_id}" not in _manifest_index(store):
                self._materialize_chart(candidate_id, dataset_id)
        elif state == CandidateState.DISCARDED.value:
            self.summary.candidates_discarded += 1
        else:
            self.summary.candidates_failed += 1

    def _materialize_chart(self, candidate_id: str, dataset_id: str) -> None:
        from .builder import fold_candidate

        events = [
            {"type": e["type"], "payload": e["payload"]}
            for e in self.store.candidate_events(candidate_id)
        ]
        candidate = fold_candidate(events)
        final_render = candidate.renders[-1]
        record = ChartRecord(
            chart_id=candidate_id,
            dataset_id=dataset_id,
            chart_family=candidate.proposal.chart_family,
            image_ref=final_render.image_ref,
            final_code=candidate.code_versions[-1],
            details=final_render.details,
            description="",
            qa=(),
            candidate_trace_ref=f"candidates/{candidate_id}",
        )
        self.store.create_chart(record, candidate_id)


def annotate_run(store: RunStore, config: Config, gateway: Gateway) -> RunSummary:
    """Describe and QA every retained chart that is not yet annotated."""
    ids = DerivedIds(config.pipeline.seed)
    summary = RunSummary(run_id=store.run_dir.name)
    manifest = {e["event_id"] for e in store.manifest_events()}
    endpoint = config.endpoint("generator")
    for chart_id in store.list_charts():
        done_key = f"chart_annotated:{chart_id}"
        failed_key = f"annotation_failed:{chart_id}"
        if done_key in manifest:
            summary.charts_annotated += 1
            continue
        if failed_key in manifest:
            summary.charts_unannotated += 1
            continue
        record = store.load_chart_record(chart_id)
        context = store.load_context(record.dataset_id)
        inputs = ChartInputs(
            image_bytes=(store.chart_dir(chart_id) / "chart.png").read_bytes(),
            code=record.final_code,
            details=record.details,
            context=context,
            chart_family=record.chart_family,
        )
        try:
            annotation = annotate_chart(
                inputs,
                gateway,
                endpoint,
                config.pipeline,
                make_id=lambda i: ids.id_for(f"{chart_id}:qa", i),
            )
        except (AnnotationFailure, GatewayError) as exc:
            logger.error("chart %s unannotated: %s", chart_id, exc)
            store.flag_unannotated(chart_id, str(exc))
            summary.charts_unannotated += 1
            continue
        store.annotate_chart(chart_id, annotation.description, list(annotation.qa))
        summary.charts_annotated += 1
    return summary


def _config_fingerprint(config: Config) -> dict:
    """The determinism-relevant slice of the config document."""
    return {
        "pipeline": {
            "min_instances": config.pipeline.min_instances,
            "max_features": config.pipeline.max_features,
            "proposal_count": config.pipeline.proposal_count,
            "retry_budget": config.pipeline.retry_budget,
            "qa_total": config.pipeline.qa_total,
            "qa_mix": list(config.pipeline.qa_mix),
            "seed": config.pipeline.seed,
            "allowed_families": list(config.pipeline.allowed_families),
        },
        "sandbox": {
            "wall_seconds": config.sandbox.wall_seconds,
            "memory_mb": config.sandbox.memory_mb,
            "allow_network": config.sandbox.allow_network,
        },
    }
