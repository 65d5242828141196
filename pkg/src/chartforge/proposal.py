"""Plot proposal: ten candidate charts per dataset from a single joint call.

Joint generation (instead of one call per chart) is what buys diversity in
families and feature selections, so the stage issues exactly one generation
call, plus at most one repair re-prompt when the response is short, invalid,
or not diverse enough.
"""

from __future__ import annotations

import logging
from typing import Callable, Sequence

from .config import PipelineConfig
from .errors import ProposalShortfallError
from .gateway import ChatRequest, Gateway, Message, ModelEndpoint
from .model import (
    ChartProposal,
    DatasetContext,
    Violation,
    normalize_chart_family,
)
from .prompting import preview_block, render, schema_block

logger = logging.getLogger(__name__)

_PROPOSALS_SCHEMA = {
    "type": "object",
    "properties": {
        "proposals": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "chart_family": {"type": "string"},
                    "features": {"type": "array", "items": {"type": "string"}},
                    "intent": {"type": "string"},
                },
                "required": ["chart_family", "features", "intent"],
            },
        }
    },
    "required": ["proposals"],
}


def validate_proposal(
    proposal: ChartProposal,
    schema: Sequence,
    allowed_families: Sequence[str],
) -> list[Violation]:
    """Structural checks: family in vocabulary, features resolve, intent set."""
    violations: list[Violation] = []
    if proposal.chart_family not in allowed_families:
        violations.append(
            Violation("unknown_family", f"unknown_family({proposal.chart_family!r})")
        )
    names = {f.raw_name for f in schema}
    if not proposal.features:
        violations.append(Violation("no_features", "proposal selects no features"))
    for feat in proposal.features:
        if feat not in names:
            violations.append(
                Violation("unknown_feature", f"unknown_feature({feat!r})")
            )
    if not proposal.intent.strip():
        violations.append(Violation("empty_intent", "proposal intent is empty"))
    return violations


def _parse_proposals(
    payload: dict,
    context: DatasetContext,
    config: PipelineConfig,
    make_id: Callable[[int], str],
) -> tuple[list[ChartProposal], list[str]]:
    valid: list[ChartProposal] = []
    problems: list[str] = []
    for i, entry in enumerate(payload.get("proposals", [])):
        family_raw = entry.get("chart_family", "")
        if not str(family_raw).strip():
            problems.append(f"proposal {i}: empty chart_family")
            continue
        family = normalize_chart_family(str(family_raw), config.family_synonyms)
        proposal = ChartProposal(
            proposal_id=make_id(len(valid)),
            chart_family=family,
            features=tuple(entry.get("features", [])),
            intent=str(entry.get("intent", "")),
        )
        violations = validate_proposal(
            proposal, context.schema, config.allowed_families
        )
        if violations:
            problems.append(
                f"proposal {i} ({family_raw!r}): " + "; ".join(str(v) for v in violations)
            )
        else:
            valid.append(proposal)
    return valid, problems


def _diverse_enough(proposals: list[ChartProposal], config: PipelineConfig) -> bool:
    if not config.diversity_check:
        return True
    floor = min(config.diversity_floor, config.proposal_count)
    return len({p.chart_family for p in proposals}) >= floor


def propose_plots(
    context: DatasetContext,
    gateway: Gateway,
    endpoint: ModelEndpoint,
    config: PipelineConfig,
    make_id: Callable[[int], str],
) -> list[ChartProposal]:
    """Obtain ``config.proposal_count`` validated proposals for one dataset.

    Exactly one generation call; one repair re-prompt if the first response
    falls short (invalid entries, wrong count, or too few distinct families).
    A persistent diversity shortfall is logged, not fatal; a persistent count
    shortfall raises :class:`ProposalShortfallError` carrying the valid subset.
    """
    prompt = render(
        "propose_plots",
        name=context.name,
        clean_summary=context.clean_summary,
        schema_block=schema_block(context.schema),
        table_preview=preview_block(context.table_preview),
        proposal_count=config.proposal_count,
        allowed_families=", ".join(config.allowed_families),
    )
    request = ChatRequest(
        messages=(Message.user(prompt),),
        temperature=config.temperature_generation,
        max_output_tokens=config.max_output_tokens,
        response_schema=_PROPOSALS_SCHEMA,
    )
    payload = gateway.complete_structured(endpoint, request)
    valid, problems = _parse_proposals(payload, context, config, make_id)

    if len(valid) >= config.proposal_count and _diverse_enough(valid, config):
        return valid[: config.proposal_count]

    # One repair pass, citing what was wrong.
    complaints = list(problems)
    if len(valid) < config.proposal_count:
        complaints.append(
            f"only {len(valid)} of {config.proposal_count} proposals were valid"
        )
    if not _diverse_enough(valid, config):
        complaints.append(
            f"proposals cover too few distinct chart types "
            f"(need at least {min(config.diversity_floor, config.proposal_count)})"
        )
    repair_prompt = (
        prompt
        + "\n\nYour previous proposals had problems:\n- "
        + "\n- ".join(complaints)
        + f"\n\nPropose exactly {config.proposal_count} valid charts again."
    )
    repair_request = ChatRequest(
        messages=(Message.user(repair_prompt),),
        temperature=config.temperature_generation,
        max_output_tokens=config.max_output_tokens,
        response_schema=_PROPOSALS_SCHEMA,
    )
    payload = gateway.complete_structured(endpoint, repair_request)
    valid, problems = _parse_proposals(payload, context, config, make_id)

    if len(valid) < config.proposal_count:
        raise ProposalShortfallError(
            f"{context.dataset_id}: {len(valid)} valid proposals after repair "
            f"(requested {config.proposal_count}): {problems}",
            valid_proposals=valid,
        )
    if not _diverse_enough(valid, config):
        logger.warning(
            "%s: proposals still under the diversity floor after repair "
            "(%d distinct families); proceeding",
            context.dataset_id,
            len({p.chart_family for p in valid}),
        )
    return valid[: config.proposal_count]
