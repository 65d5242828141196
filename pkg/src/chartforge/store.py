"""Durable, inspectable persistence for runs, candidates, charts, and evals.

The store is a plain directory tree plus newline-delimited event logs --
diffable, portable, no database. Every mutation is an appended event;
``candidate.json`` / ``chart.json`` snapshots are rewritten atomically after
each append and can always be rebuilt from the logs alone.

Layout:
    <workspace>/runs/<run_id>/
        manifest.jsonl
        datasets/<dataset_id>/{events.jsonl, context.json, data.csv, ...}
        candidates/<candidate_id>/{events.jsonl, candidate.json, code_vN.py,
                                   render_vN.png, details_vN.json, ...}
        charts/<chart_id>/{chart.json, chart.png, code_final.py, details.json,
                           description.md, qa.jsonl, trace/}
    <workspace>/evals/<eval_id>/{answers.jsonl, verdicts.jsonl, accuracy.csv, ...}
"""

from __future__ import annotations

import json
import logging
import shutil
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .builder import fold_candidate
from .errors import StoreError
from .evaluation import EvalItem
from .model import ChartRecord, DatasetContext, QAItem
from .util import canonical_json, write_text_atomic

logger = logging.getLogger(__name__)


class SimulatedCrash(BaseException):
    """Raised by the fail-after-N-events hook; used by crash-replay tests.

    Derives from BaseException so ordinary error handling never swallows it,
    mimicking a hard kill.
    """


def _read_events(path: Path) -> list[dict]:
    if not path.is_file():
        return []
    events = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            events.append(json.loads(line))
        except json.JSONDecodeError:
            # A torn final line from a crash mid-append is ignored; every
            # complete event before it survives.
            logger.warning("skipping torn event line in %s", path)
    return events


class EventLog:
    """One append-only newline-delimited log with idempotent event ids."""

    def __init__(self, path: Path, deterministic: bool):
        self.path = path
        self._deterministic = deterministic
        self._lock = threading.Lock()
        self._seen: set[str] | None = None
        self._count: int | None = None

    def _ensure_loaded(self) -> None:
        if self._seen is None:
            events = _read_events(self.path)
            self._seen = {e["event_id"] for e in events}
            self._count = len(events)

    def events(self) -> list[dict]:
        return _read_events(self.path)

    def append(self, event_type: str, payload: dict, event_id: str | None = None) -> int:
        """Append one event; duplicates (by event id) are rejected
        idempotently, returning the existing offset."""
        with self._lock:
            self._ensure_loaded()
            seq = self._count
            eid = event_id or f"{self.path.parent.name}:{seq:06d}"
            if eid in self._seen:
                return -1
            ts = float(seq) if self._deterministic else time.time()
            record = {"event_id": eid, "seq": seq, "ts": ts, "type": event_type, "payload": payload}
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(canonical_json(record) + "\n")
                fh.flush()
            self._seen.add(eid)
            self._count = seq + 1
            return seq


@dataclass
class _CrashHook:
    fail_after_events: int | None = None
    crash_mode: str = "post_log"  # post_log | post_snapshot
    appended: int = 0

    def tick_post_log(self):
        if self.fail_after_events is None:
            return
        self.appended += 1
        if self.crash_mode == "post_log" and self.appended >= self.fail_after_events:
            raise SimulatedCrash(f"simulated crash after {self.appended} events")

    def tick_post_snapshot(self):
        if self.fail_after_events is None:
            return
        if self.crash_mode == "post_snapshot" and self.appended >= self.fail_after_events:
            raise SimulatedCrash(f"simulated crash after {self.appended} events")


class StoreCandidateLog:
    """Adapter satisfying the builder's CandidateLog protocol: each append
    lands in the candidate's event log and refreshes candidate.json."""

    def __init__(self, store: "RunStore", candidate_id: str):
        self._store = store
        self.candidate_id = candidate_id

    def append(self, event_type: str, payload: dict) -> None:
        self._store.append_candidate_event(self.candidate_id, event_type, payload)

    def events(self) -> list[dict]:
        return [
            {"type": e["type"], "payload": e["payload"]}
            for e in self._store.candidate_events(self.candidate_id)
        ]


class RunStore:
    """One generation run: manifest, datasets, candidates, charts."""

    def __init__(
        self,
        run_dir: str | Path,
        deterministic: bool = False,
        fail_after_events: int | None = None,
        crash_mode: str = "post_log",
    ):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "datasets").mkdir(exist_ok=True)
        (self.run_dir / "candidates").mkdir(exist_ok=True)
        (self.run_dir / "charts").mkdir(exist_ok=True)
        self.deterministic = deterministic
        self._crash = _CrashHook(fail_after_events, crash_mode)
        self._manifest = EventLog(self.run_dir / "manifest.jsonl", deterministic)
        self._logs: dict[Path, EventLog] = {}
        self._lock = threading.Lock()

    # -- generic log plumbing -------------------------------------------------

    def _log(self, path: Path) -> EventLog:
        with self._lock:
            log = self._logs.get(path)
            if log is None:
                log = EventLog(path, self.deterministic)
                self._logs[path] = log
            return log

    def append_manifest(
        self, event_type: str, payload: dict, event_id: str | None = None
    ) -> int:
        offset = self._manifest.append(event_type, payload, event_id)
        if offset >= 0:
            self._crash.tick_post_log()
            self._crash.tick_post_snapshot()
        return offset

    def manifest_events(self) -> list[dict]:
        return self._manifest.events()

    # -- datasets ---------------------------------------------------------------

    def dataset_dir(self, dataset_id: str) -> Path:
        return self.run_dir / "datasets" / dataset_id

    def append_dataset_event(self, dataset_id: str, event_type: str, payload: dict) -> int:
        log = self._log(self.dataset_dir(dataset_id) / "events.jsonl")
        offset = log.append(event_type, payload)
        if offset >= 0:
            self._crash.tick_post_log()
            self._write_dataset_snapshot(dataset_id)
            self._crash.tick_post_snapshot()
        return offset

    def dataset_events(self, dataset_id: str) -> list[dict]:
        return self._log(self.dataset_dir(dataset_id) / "events.jsonl").events()

    def _write_dataset_snapshot(self, dataset_id: str) -> None:
        context = self.fold_dataset_context(dataset_id)
        if context is not None:
            write_text_atomic(
                self.dataset_dir(dataset_id) / "context.json",
                canonical_json(context.to_dict()) + "\n",
            )

    def fold_dataset_context(self, dataset_id: str) -> DatasetContext | None:
        """Latest dataset context implied by the dataset's event log."""
        context = None
        for event in self.dataset_events(dataset_id):
            etype = event["type"]
            payload = event["payload"]
            if etype == "dataset_loaded":
                context = DatasetContext.from_dict(payload["context"])
            elif etype == "screened" and payload.get("keep") and context is not None:
                context = context.with_summary(payload["clean_summary"])
            elif etype == "labels_rewritten" and context is not None:
                context = DatasetContext.from_dict(payload["context"])
        return context

    def import_dataset_table(self, dataset_id: str, src_csv: Path) -> Path:
        dest = self.dataset_dir(dataset_id) / "data.csv"
        if not dest.is_file():
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src_csv, dest)
        return dest

    def write_proposals(self, dataset_id: str, proposals) -> None:
        write_text_atomic(
            self.dataset_dir(dataset_id) / "proposals.json",
            canonical_json([p.to_dict() for p in proposals]) + "\n",
        )

    # -- candidates --------------------------------------------------------------

    def candidate_dir(self, candidate_id: str) -> Path:
        return self.run_dir / "candidates" / candidate_id

    def candidate_log(self, candidate_id: str) -> StoreCandidateLog:
        return StoreCandidateLog(self, candidate_id)

    def append_candidate_event(
        self, candidate_id: str, event_type: str, payload: dict
    ) -> int:
        log = self._log(self.candidate_dir(candidate_id) / "events.jsonl")
        offset = log.append(event_type, payload)
        if offset >= 0:
            self._crash.tick_post_log()
            self._write_candidate_snapshot(candidate_id)
            self._crash.tick_post_snapshot()
        return offset

    def candidate_events(self, candidate_id: str) -> list[dict]:
        return self._log(self.candidate_dir(candidate_id) / "events.jsonl").events()

    def _write_candidate_snapshot(self, candidate_id: str) -> None:
        events = [
            {"type": e["type"], "payload": e["payload"]}
            for e in self.candidate_events(candidate_id)
        ]
        if not events:
            return
        candidate = fold_candidate(events)
        write_text_atomic(
            self.candidate_dir(candidate_id) / "candidate.json",
            canonical_json(candidate.to_dict()) + "\n",
        )

    def list_candidates(self) -> list[str]:
        root = self.run_dir / "candidates"
        return sorted(p.name for p in root.iterdir() if p.is_dir())

    # -- charts --------------------------------------------------------------------

    def chart_dir(self, chart_id: str) -> Path:
        return self.run_dir / "charts" / chart_id

    def create_chart(self, record: ChartRecord, candidate_id: str) -> None:
        """Materialize a retained candidate as a chart bundle.

        Idempotent: files are rewritten atomically and the manifest event is
        keyed by chart id, so a resumed run converges on identical state.
        """
        cdir = self.chart_dir(record.chart_id)
        cdir.mkdir(parents=True, exist_ok=True)
        image_src = self.run_dir / record.image_ref
        if not image_src.is_file():
            raise StoreError(f"chart {record.chart_id}: missing render {record.image_ref}")
        shutil.copyfile(image_src, cdir / "chart.png")
        (cdir / "code_final.py").write_text(
            record.final_code.source_text, encoding="utf-8"
        )
        write_text_atomic(
            cdir / "details.json", canonical_json(record.details.to_dict()) + "\n"
        )
        trace_dir = cdir / "trace"
        trace_dir.mkdir(exist_ok=True)
        cand_dir = self.candidate_dir(candidate_id)
        for name in ("events.jsonl", "candidate.json"):
            src = cand_dir / name
            if src.is_file():
                shutil.copyfile(src, trace_dir / name)
        write_text_atomic(
            cdir / "chart.json", canonical_json(record.to_dict()) + "\n"
        )
        self.append_manifest(
            "chart_retained",
            {"record": record.to_dict(), "candidate_id": candidate_id},
            event_id=f"chart_retained:{record.chart_id}",
        )

    def annotate_chart(self, chart_id: str, description: str, qa: list[QAItem]) -> None:
        record = self.load_chart_record(chart_id)
        annotated = ChartRecord(
            chart_id=record.chart_id,
            dataset_id=record.dataset_id,
            chart_family=record.chart_family,
            image_ref=record.image_ref,
            final_code=record.final_code,
            details=record.details,
            description=description,
            qa=tuple(qa),
            candidate_trace_ref=record.candidate_trace_ref,
        )
        cdir = self.chart_dir(chart_id)
        write_text_atomic(cdir / "description.md", description + "\n")
        write_text_atomic(
            cdir / "qa.jsonl",
            "".join(canonical_json(item.to_dict()) + "\n" for item in qa),
        )
        write_text_atomic(cdir / "chart.json", canonical_json(annotated.to_dict()) + "\n")
        self.append_manifest(
            "chart_annotated",
            {
                "chart_id": chart_id,
                "description": description,
                "qa": [item.to_dict() for item in qa],
            },
            event_id=f"chart_annotated:{chart_id}",
        )

    def flag_unannotated(self, chart_id: str, reason: str) -> None:
        self.append_manifest(
            "annotation_failed",
            {"chart_id": chart_id, "reason": reason},
            event_id=f"annotation_failed:{chart_id}",
        )

    def load_chart_record(self, chart_id: str) -> ChartRecord:
        path = self.chart_dir(chart_id) / "chart.json"
        if not path.is_file():
            raise StoreError(f"unknown chart id: {chart_id}")
        return ChartRecord.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def list_charts(self) -> list[str]:
        root = self.run_dir / "charts"
        return sorted(p.name for p in root.iterdir() if p.is_dir())

    def load_context(self, dataset_id: str) -> DatasetContext:
        path = self.dataset_dir(dataset_id) / "context.json"
        if not path.is_file():
            raise StoreError(f"unknown dataset id: {dataset_id}")
        return DatasetContext.from_dict(json.loads(path.read_text(encoding="utf-8")))

    # -- replay / rebuild -------------------------------------------------------------

    def rebuild_snapshots(self) -> None:
        """Rebuild every snapshot from the event logs. Idempotent and
        byte-stable: running it twice changes nothing."""
        for candidate_id in self.list_candidates():
            self._write_candidate_snapshot(candidate_id)
        datasets_root = self.run_dir / "datasets"
        for ds_dir in sorted(datasets_root.iterdir()):
            if ds_dir.is_dir() and (ds_dir / "events.jsonl").is_file():
                self._write_dataset_snapshot(ds_dir.name)
        # chart.json derives from the manifest milestones.
        records: dict[str, dict] = {}
        candidate_of: dict[str, str] = {}
        for event in self.manifest_events():
            if event["type"] == "chart_retained":
                record = dict(event["payload"]["record"])
                records[record["chart_id"]] = record
                candidate_of[record["chart_id"]] = event["payload"]["candidate_id"]
            elif event["type"] == "chart_annotated":
                chart_id = event["payload"]["chart_id"]
                if chart_id in records:
                    records[chart_id]["description"] = event["payload"]["description"]
                    records[chart_id]["qa"] = event["payload"]["qa"]
        for chart_id, record in records.items():
            cdir = self.chart_dir(chart_id)
            cdir.mkdir(parents=True, exist_ok=True)
            write_text_atomic(cdir / "chart.json", canonical_json(record) + "\n")
            if record.get("description"):
                write_text_atomic(
                    cdir / "description.md", record["description"] + "\n"
                )
            if record.get("qa"):
                write_text_atomic(
                    cdir / "qa.jsonl",
                    "".join(canonical_json(q) + "\n" for q in record["qa"]),
                )

    # -- evaluation feed -----------------------------------------------------------

    def eval_items(self) -> list[EvalItem]:
        items = []
        for chart_id in self.list_charts():
            record = self.load_chart_record(chart_id)
            if not record.qa:
                continue
            context = self.load_context(record.dataset_id)
            items.append(
                EvalItem(
                    chart_id=chart_id,
                    chart_family=record.chart_family,
                    image_path=self.chart_dir(chart_id) / "chart.png",
                    clean_summary=context.clean_summary,
                    qa=record.qa,
                )
            )
        return items

    # -- lineage -------------------------------------------------------------------

    def inspect(self, chart_id: str) -> dict:
        """Full lineage of one chart: dataset summary, proposal, code
        versions, verdicts, QA."""
        record = self.load_chart_record(chart_id)
        context = self.load_context(record.dataset_id)
        trace_events = _read_events(self.chart_dir(chart_id) / "trace" / "events.jsonl")
        candidate = None
        if trace_events:
            candidate = fold_candidate(
                [{"type": e["type"], "payload": e["payload"]} for e in trace_events]
            )
        return {
            "chart_id": chart_id,
            "dataset": {
                "dataset_id": context.dataset_id,
                "name": context.name,
                "clean_summary": context.clean_summary,
            },
            "chart_family": record.chart_family,
            "proposal": candidate.proposal.to_dict() if candidate else None,
            "code_versions": [c.to_dict() for c in candidate.code_versions]
            if candidate
            else [],
            "renders": [r.to_dict() for r in candidate.renders] if candidate else [],
            "verdicts": [v.to_dict() for v in candidate.verdicts] if candidate else [],
            "retries_used": candidate.retries_used if candidate else None,
            "description": record.description,
            "qa": [q.to_dict() for q in record.qa],
        }


@dataclass(frozen=True)
class CorpusStats:
    n_charts: int
    n_datasets: int
    n_qa: int
    n_families: int
    n_candidates: int
    n_discarded: int
    n_failed: int
    discard_rate: float | None
    orphans: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "n_charts": self.n_charts,
            "n_datasets": self.n_datasets,
            "n_qa": self.n_qa,
            "n_families": self.n_families,
            "n_candidates": self.n_candidates,
            "n_discarded": self.n_discarded,
            "n_failed": self.n_failed,
            "discard_rate": self.discard_rate,
            "n_orphans": len(self.orphans),
        }


def corpus_stats(run_dir: str | Path, check_files: bool = True) -> CorpusStats:
    """Exact corpus bookkeeping from the run manifest.

    ``n_candidates`` counts candidates that reached retained or discarded
    (infrastructure failures are tallied separately and excluded from the
    discard rate). Orphan checks verify that every retained chart still
    references an existing image, QA file, and candidate trace.
    """
    run_dir = Path(run_dir)
    manifest = _read_events(run_dir / "manifest.jsonl")
    n_retained = n_discarded = n_failed = 0
    charts: dict[str, dict] = {}
    qa_counts: dict[str, int] = {}
    for event in manifest:
        etype = event["type"]
        payload = event["payload"]
        if etype == "candidate_terminal":
            state = payload["state"]
            if state == "retained":
                n_retained += 1
            elif state == "discarded":
                n_discarded += 1
            elif state == "failed":
                n_failed += 1
        elif etype == "chart_retained":
            record = payload["record"]
            charts[record["chart_id"]] = record
            if record.get("qa"):
                qa_counts[record["chart_id"]] = len(record["qa"])
        elif etype == "chart_annotated":
            qa_counts[payload["chart_id"]] = len(payload["qa"])

    n_candidates = n_retained + n_discarded
    orphans: list[str] = []
    if check_files:
        for chart_id in sorted(charts):
            cdir = run_dir / "charts" / chart_id
            for required in ("chart.png", "chart.json"):
                if not (cdir / required).is_file():
                    orphans.append(f"{chart_id}:{required}")
            if qa_counts.get(chart_id) and not (cdir / "qa.jsonl").is_file():
                orphans.append(f"{chart_id}:qa.jsonl")
            if not (cdir / "trace" / "events.jsonl").is_file():
                orphans.append(f"{chart_id}:trace")

    return CorpusStats(
        n_charts=len(charts),
        n_datasets=len({r["dataset_id"] for r in charts.values()}),
        n_qa=sum(qa_counts.get(c, 0) for c in charts),
        n_families=len({r["chart_family"] for r in charts.values()}),
        n_candidates=n_candidates,
        n_discarded=n_discarded,
        n_failed=n_failed,
        discard_rate=(n_discarded / n_candidates) if n_candidates else None,
        orphans=tuple(orphans),
    )


class Workspace:
    """Root directory holding runs/ and evals/."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def run_dir(self, run_id: str) -> Path:
        return self.root / "runs" / run_id

    def open_run(self, run_id: str, **kwargs) -> RunStore:
        return RunStore(self.run_dir(run_id), **kwargs)

    def eval_dir(self, eval_id: str) -> Path:
        path = self.root / "evals" / eval_id
        path.mkdir(parents=True, exist_ok=True)
        return path

    def list_runs(self) -> list[str]:
        runs = self.root / "runs"
        if not runs.is_dir():
            return []
        return sorted(p.name for p in runs.iterdir() if p.is_dir())
