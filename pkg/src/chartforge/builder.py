"""The render-check-regenerate loop driving each chart candidate.

Every step appends one event to the candidate's log; the in-memory candidate
is always the fold of that log, and the next action is a pure function of
the folded state. That makes the loop resumable after a crash: replaying the
log lands exactly where the run died.

Terminal states: retained (a check passed), discarded (the check after the
last budgeted retry still requested correction), failed (infrastructure
fault, excluded from discard statistics).
"""

from __future__ import annotations

import json
import logging
import re
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

from .config import PipelineConfig
from .errors import (
    ContractViolation,
    GatewayError,
    InfrastructureError,
    StructuredParseError,
    ValidationError,
)
from .gateway import ChatRequest, Gateway, ImagePart, Message, ModelEndpoint
from .model import (
    CandidateState,
    ChartCandidate,
    ChartDetails,
    ChartProposal,
    CheckerVerdict,
    DatasetContext,
    PlotCode,
    ProblemCategory,
    RenderResult,
    RenderStatus,
)
from .prompting import render as render_prompt
from .prompting import schema_block
from .sandbox import PlotJob
from .util import canonical_json

logger = logging.getLogger(__name__)

_VERDICT_SCHEMA = {
    "type": "object",
    "properties": {
        "needs_correction": {"type": "boolean"},
        "problems": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "category": {"type": "string"},
                    "note": {"type": "string"},
                },
                "required": ["category"],
            },
        },
    },
    "required": ["needs_correction"],
}

_CODE_FENCE_RE = re.compile(r"```(?:python|py)?\s*\n(.*?)\n?\s*```", re.DOTALL)
_CODE_HINT_RE = re.compile(r"^\s*(import |from |def |plt\.|matplotlib)", re.MULTILINE)


class CandidateLog(Protocol):
    """Append-only event log for one candidate."""

    def append(self, event_type: str, payload: dict) -> None: ...

    def events(self) -> list[dict]: ...


class MemoryLog:
    """In-memory CandidateLog for direct builder tests."""

    def __init__(self):
        self._events: list[dict] = []

    def append(self, event_type: str, payload: dict) -> None:
        self._events.append({"type": event_type, "payload": payload})

    def events(self) -> list[dict]:
        return list(self._events)


def fold_candidate(events: list[dict]) -> ChartCandidate:
    """Rebuild a candidate from its event log.

    The fold is total and deterministic: replaying a log always reconstructs
    byte-identical state.
    """
    candidate: ChartCandidate | None = None
    for event in events:
        etype = event["type"]
        payload = event["payload"]
        if etype == "candidate_opened":
            candidate = ChartCandidate(
                candidate_id=payload["candidate_id"],
                dataset_id=payload["dataset_id"],
                proposal=ChartProposal.from_dict(payload["proposal"]),
            )
            continue
        if candidate is None:
            raise ValidationError("candidate log does not start with candidate_opened")
        if etype == "code_generated":
            if candidate.state in (CandidateState.PROPOSED, CandidateState.NEEDS_FIX):
                candidate = candidate.advance(CandidateState.CODED)
            candidate = candidate.add_code(PlotCode.from_dict(payload))
        elif etype == "render_recorded":
            result = RenderResult.from_dict(payload["result"])
            candidate = candidate.add_render(result)
            if result.status is RenderStatus.OK:
                candidate = candidate.advance(CandidateState.RENDERED)
        elif etype == "exec_fix":
            candidate = candidate.spend_retry()
        elif etype == "verdict_recorded":
            candidate = candidate.advance(CandidateState.CHECKING)
            candidate = candidate.add_verdict(CheckerVerdict.from_dict(payload["verdict"]))
        elif etype == "decision":
            action = payload["action"]
            if action == "fix":
                candidate = candidate.add_feedback(candidate.verdicts[-1])
                candidate = candidate.spend_retry()
                candidate = candidate.advance(CandidateState.NEEDS_FIX)
            elif action == "retain":
                candidate = candidate.advance(CandidateState.RETAINED)
            elif action == "discard":
                candidate = candidate.advance(CandidateState.DISCARDED)
            else:
                raise ValidationError(f"unknown decision action {action!r}")
        elif etype == "failed":
            candidate = candidate.advance(
                CandidateState.FAILED, failure_reason=payload.get("reason")
            )
        else:
            raise ValidationError(f"unknown candidate event type {etype!r}")
    if candidate is None:
        raise ValidationError("empty candidate log")
    return candidate


def next_step(candidate: ChartCandidate) -> str:
    """The next action implied by the folded state: one of generate, render,
    check, decide, exec_decide, done."""
    state = candidate.state
    if state in (CandidateState.RETAINED, CandidateState.DISCARDED, CandidateState.FAILED):
        return "done"
    if state is CandidateState.PROPOSED or state is CandidateState.NEEDS_FIX:
        return "generate"
    if state is CandidateState.CODED:
        if len(candidate.renders) < len(candidate.code_versions):
            return "render"
        # Last render failed to execute. Either a fix is already booked
        # (retry counted, code not yet regenerated) or we must decide.
        pending_fix = candidate.retries_used - (len(candidate.code_versions) - 1)
        return "generate" if pending_fix == 1 else "exec_decide"
    if state is CandidateState.RENDERED:
        return "check"
    if state is CandidateState.CHECKING:
        return "decide"
    raise ValidationError(f"unhandled candidate state {state}")


@dataclass(frozen=True)
class CandidateWorkspace:
    """Filesystem layout for one candidate's artifacts.

    ``rel_root`` anchors the run-relative paths stored in events, so logs
    stay byte-identical regardless of where the run directory lives.
    """

    root: Path
    rel_root: Path

    def __post_init__(self):
        self.root.mkdir(parents=True, exist_ok=True)

    def code_path(self, version: int) -> Path:
        return self.root / f"code_v{version}.py"

    def render_path(self, version: int) -> Path:
        return self.root / f"render_v{version}.png"

    def details_path(self, version: int) -> Path:
        return self.root / f"details_v{version}.json"

    def verdict_path(self, version: int) -> Path:
        return self.root / f"verdict_v{version}.json"

    def job_dir(self, version: int) -> Path:
        return self.root / "jobs" / f"v{version}"

    def rel(self, path: Path) -> str:
        return path.relative_to(self.rel_root).as_posix()

    def resolve(self, ref: str) -> Path:
        return self.rel_root / ref


@dataclass
class BuilderDeps:
    gateway: Gateway
    generator: ModelEndpoint
    checker: ModelEndpoint
    sandbox: object
    config: PipelineConfig
    dataset_csv: Path
    wall_seconds: float = 60.0
    memory_mb: int = 1024


def _extract_code(text: str) -> str | None:
    match = _CODE_FENCE_RE.search(text)
    if match:
        code = match.group(1).strip()
        return code or None
    if _CODE_HINT_RE.search(text):
        return text.strip()
    return None


def generate_plot_code(
    proposal: ChartProposal,
    context: DatasetContext,
    prior: tuple[PlotCode, str] | None,
    gateway: Gateway,
    endpoint: ModelEndpoint,
    config: PipelineConfig,
    version: int,
) -> PlotCode:
    """One codegen (or regeneration) call.

    On regeneration the prompt pins the chart family and variables and cites
    the triggering feedback. A response without code gets one repair
    re-prompt, then raises :class:`ContractViolation`.
    """
    if prior is None:
        prompt = render_prompt(
            "generate_code",
            name=context.name,
            clean_summary=context.clean_summary,
            chart_family=proposal.chart_family,
            features=", ".join(proposal.features),
            intent=proposal.intent,
            schema_block=schema_block(context.schema),
            image_dpi=config.image_dpi,
        )
        feedback_ref = None
    else:
        prior_code, feedback = prior
        prompt = render_prompt(
            "regenerate_code",
            name=context.name,
            clean_summary=context.clean_summary,
            chart_family=proposal.chart_family,
            features=", ".join(proposal.features),
            intent=proposal.intent,
            prior_code=prior_code.source_text,
            feedback=feedback,
            image_dpi=config.image_dpi,
        )
        feedback_ref = feedback

    request = ChatRequest(
        messages=(Message.user(prompt),),
        temperature=config.temperature_generation,
        max_output_tokens=config.max_output_tokens,
    )
    response = gateway.complete(endpoint, request)
    code = _extract_code(response.text)
    if code is None:
        repair = ChatRequest(
            messages=request.messages
            + (
                Message.assistant(response.text),
                Message.user(
                    "That reply contained no code. Respond with ONLY the complete "
                    "Python script in a fenced code block."
                ),
            ),
            temperature=config.temperature_generation,
            max_output_tokens=config.max_output_tokens,
        )
        response = gateway.complete(endpoint, repair)
        code = _extract_code(response.text)
    if code is None:
        raise ContractViolation(
            f"codegen for proposal {proposal.proposal_id} returned no script"
        )
    return PlotCode(version=version, source_text=code, generated_from_feedback=feedback_ref)


def _details_violations(
    details: ChartDetails, proposal: ChartProposal, context: DatasetContext
) -> list[str]:
    allowed = set(proposal.features)
    derived = {
        v for v in details.variables if any(v in t for t in details.transformations)
    }
    problems = []
    for var in details.variables:
        if var not in allowed and var not in derived:
            problems.append(
                f"details variable {var!r} is not a selected feature or a "
                "derived name listed in transformations"
            )
    if details.row_count_used > context.n_instances:
        problems.append(
            f"row_count_used {details.row_count_used} exceeds the dataset's "
            f"{context.n_instances} instances"
        )
    return problems


def render_code(
    code: PlotCode,
    proposal: ChartProposal,
    context: DatasetContext,
    dataset_csv: Path,
    sandbox,
    workspace: CandidateWorkspace,
    candidate_id: str,
    wall_seconds: float = 60.0,
    memory_mb: int = 1024,
) -> RenderResult:
    """Execute one code version through the sandbox protocol.

    Copies the protocol outputs to the candidate's flat ``render_vN.png`` /
    ``details_vN.json`` names and validates the details record against the
    proposal; invalid details demote the render to missing_output. Sandbox
    unreachability surfaces as :class:`InfrastructureError`, which is not a
    candidate failure mode.
    """
    code_path = workspace.code_path(code.version)
    code_path.write_text(code.source_text, encoding="utf-8")
    job_dir = workspace.job_dir(code.version)
    job = PlotJob(
        job_id=f"{candidate_id}-v{code.version}",
        code_path=code_path,
        dataset_path=dataset_csv,
        output_dir=job_dir,
        wall_seconds=wall_seconds,
        memory_mb=memory_mb,
    )
    outcome = sandbox.run_job(job)

    if outcome.status == "ok":
        render_path = workspace.render_path(code.version)
        details_path = workspace.details_path(code.version)
        shutil.copyfile(outcome.image_path, render_path)
        try:
            details = ChartDetails.from_dict(outcome.details)
        except (ValidationError, KeyError, TypeError) as exc:
            return RenderResult(
                status=RenderStatus.MISSING_OUTPUT,
                stderr_excerpt=f"details.json failed validation: {exc}",
                wall_time=outcome.wall_time,
            )
        problems = _details_violations(details, proposal, context)
        if problems:
            return RenderResult(
                status=RenderStatus.MISSING_OUTPUT,
                stderr_excerpt="details.json violates the render contract: "
                + "; ".join(problems),
                wall_time=outcome.wall_time,
            )
        if code.version > 1 and set(details.variables) != set(proposal.features):
            logger.warning(
                "%s v%d: regenerated chart uses variables %s, proposal selected %s "
                "(preservation warning)",
                candidate_id,
                code.version,
                sorted(details.variables),
                sorted(proposal.features),
            )
        details_path.write_text(
            json.dumps(details.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
        )
        return RenderResult(
            status=RenderStatus.OK,
            image_ref=workspace.rel(render_path),
            details=details,
            wall_time=outcome.wall_time,
        )
    status = {
        "exec_error": RenderStatus.EXEC_ERROR,
        "timeout": RenderStatus.TIMEOUT,
        "missing_output": RenderStatus.MISSING_OUTPUT,
    }[outcome.status]
    return RenderResult(
        status=status,
        stderr_excerpt=outcome.stderr_tail or None,
        wall_time=outcome.wall_time,
    )


def check_rendered(
    image_bytes: bytes,
    code: PlotCode,
    proposal: ChartProposal,
    context: DatasetContext,
    gateway: Gateway,
    endpoint: ModelEndpoint,
    config: PipelineConfig,
) -> CheckerVerdict:
    """One vision call reviewing the rendered chart plus its code and intent.

    A verdict that requests correction but names no problems is treated as a
    checker malfunction (raises), never as a silent pass.
    """
    prompt = render_prompt(
        "check_chart",
        chart_family=proposal.chart_family,
        intent=proposal.intent,
        code=code.source_text,
    )
    payload = gateway.complete_structured(
        endpoint,
        ChatRequest(
            messages=(Message.user(prompt, images=(ImagePart(image_bytes),)),),
            temperature=config.temperature_checker,
            max_output_tokens=config.max_output_tokens,
            response_schema=_VERDICT_SCHEMA,
        ),
    )
    problems = []
    for entry in payload.get("problems", []):
        raw_category = str(entry.get("category", "other")).strip().lower()
        try:
            category = ProblemCategory(raw_category)
        except ValueError:
            category = ProblemCategory.OTHER
        note = entry.get("note", "") or raw_category
        problems.append((category, note))
    if payload["needs_correction"] and not problems:
        raise ContractViolation(
            "checker requested correction without naming any problem"
        )
    return CheckerVerdict(
        needs_correction=payload["needs_correction"],
        problems=tuple(problems),
        raw_response=canonical_json(payload),
    )


def _feedback_text(candidate: ChartCandidate) -> str:
    """What to tell the regenerator: the last verdict's problems, or the last
    failed render's stderr."""
    if candidate.state is CandidateState.NEEDS_FIX:
        verdict = candidate.feedback_log[-1]
        return "checker problems: " + verdict.problem_summary()
    last = candidate.renders[-1]
    excerpt = last.stderr_excerpt or "(no stderr captured)"
    return f"{last.status.value} while executing the script:\n{excerpt}"


def refine_until_valid(
    candidate_id: str,
    proposal: ChartProposal,
    context: DatasetContext,
    deps: BuilderDeps,
    workspace: CandidateWorkspace,
    log: CandidateLog,
) -> ChartCandidate:
    """Drive one candidate to a terminal state under the retry budget.

    The initial generate-render-check plus up to ``retry_budget`` fix cycles;
    execution errors and timeouts consume the same budget as visual
    corrections, carrying stderr as feedback. Total render attempts never
    exceed budget + 1.
    """
    budget = deps.config.retry_budget
    events = log.events()
    if not events:
        log.append(
            "candidate_opened",
            {
                "candidate_id": candidate_id,
                "dataset_id": context.dataset_id,
                "proposal": proposal.to_dict(),
            },
        )
        events = log.events()
    candidate = fold_candidate(events)

    while True:
        step = next_step(candidate)
        if step == "done":
            return candidate

        if step == "generate":
            version = len(candidate.code_versions) + 1
            if candidate.state is CandidateState.PROPOSED:
                prior = None
            else:
                prior = (candidate.code_versions[-1], _feedback_text(candidate))
            code = generate_plot_code(
                proposal, context, prior, deps.gateway, deps.generator, deps.config, version
            )
            log.append("code_generated", code.to_dict())

        elif step == "render":
            code = candidate.code_versions[-1]
            result = render_code(
                code,
                proposal,
                context,
                deps.dataset_csv,
                deps.sandbox,
                workspace,
                candidate_id,
                wall_seconds=deps.wall_seconds,
                memory_mb=deps.memory_mb,
            )
            log.append(
                "render_recorded",
                {"version": code.version, "result": result.to_dict()},
            )

        elif step == "exec_decide":
            last = candidate.renders[-1]
            if candidate.retries_used < budget:
                log.append(
                    "exec_fix",
                    {"reason": last.status.value, "stderr": last.stderr_excerpt},
                )
            else:
                log.append(
                    "failed",
                    {
                        "reason": f"execution still failing ({last.status.value}) "
                        f"after {budget} fix cycles"
                    },
                )

        elif step == "check":
            version = candidate.code_versions[-1].version
            image_ref = candidate.renders[-1].image_ref
            image_bytes = workspace.resolve(image_ref).read_bytes()
            try:
                verdict = check_rendered(
                    image_bytes,
                    candidate.code_versions[-1],
                    proposal,
                    context,
                    deps.gateway,
                    deps.checker,
                    deps.config,
                )
            except (StructuredParseError, ContractViolation) as exc:
                log.append("failed", {"reason": f"checker malfunction: {exc}"})
                candidate = fold_candidate(log.events())
                continue
            workspace.verdict_path(version).write_text(
                verdict.raw_response + "\n", encoding="utf-8"
            )
            log.append(
                "verdict_recorded",
                {"version": version, "verdict": verdict.to_dict()},
            )

        elif step == "decide":
            verdict = candidate.verdicts[-1]
            if not verdict.needs_correction:
                log.append("decision", {"action": "retain"})
            elif candidate.retries_used < budget:
                log.append("decision", {"action": "fix"})
            else:
                log.append("decision", {"action": "discard"})

        candidate = fold_candidate(log.events())


def run_candidate(
    candidate_id: str,
    proposal: ChartProposal,
    context: DatasetContext,
    deps: BuilderDeps,
    workspace: CandidateWorkspace,
    log: CandidateLog,
) -> ChartCandidate:
    """refine_until_valid with infrastructure faults folded into the log
    where the state machine permits, re-raised otherwise."""
    try:
        return refine_until_valid(candidate_id, proposal, context, deps, workspace, log)
    except (InfrastructureError, GatewayError, ContractViolation) as exc:
        candidate = fold_candidate(log.events())
        if candidate.state in (CandidateState.CODED, CandidateState.RENDERED):
            log.append("failed", {"reason": f"infrastructure: {exc}"})
            return fold_candidate(log.events())
        raise
