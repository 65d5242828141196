"""Description, QA generation, and question-type labeling for retained charts.

Per chart: one description call, one QA call targeting the 20-question
7/6/7 difficulty mix (with one corrective re-prompt for quota misses), and
one labeling call assigning each question a type. Difficulty is self-declared
by the generator; answerability is enforced at prompt level only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable

from .config import PipelineConfig
from .errors import AnnotationFailure, StructuredParseError
from .gateway import ChatRequest, Gateway, ImagePart, Message, ModelEndpoint
from .model import (
    ChartDetails,
    DatasetContext,
    Difficulty,
    PlotCode,
    QAItem,
    parse_difficulty,
    parse_question_type,
)
from .prompting import render
from .util import canonical_json

logger = logging.getLogger(__name__)

_QA_SCHEMA = {
    "type": "object",
    "properties": {
        "items": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "question": {"type": "string"},
                    "answer": {"type": "string"},
                    "difficulty": {"type": "string"},
                },
                "required": ["question", "answer", "difficulty"],
            },
        }
    },
    "required": ["items"],
}

_LABELS_SCHEMA = {
    "type": "object",
    "properties": {
        "labels": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "index": {"type": "integer"},
                    "qtype": {"type": "string"},
                },
                "required": ["index", "qtype"],
            },
        }
    },
    "required": ["labels"],
}

_DIFFICULTIES = (Difficulty.EASY, Difficulty.MEDIUM, Difficulty.HARD)


@dataclass(frozen=True)
class ChartInputs:
    """The four grounding inputs every annotation call sees."""

    image_bytes: bytes
    code: PlotCode
    details: ChartDetails
    context: DatasetContext
    chart_family: str


def describe_chart(
    inputs: ChartInputs,
    gateway: Gateway,
    endpoint: ModelEndpoint,
    config: PipelineConfig,
) -> str:
    """Generate the chart description; one repair on an empty reply.

    Raises :class:`AnnotationFailure` if the model returns nothing twice.
    """
    prompt = render(
        "describe_chart",
        clean_summary=inputs.context.clean_summary,
        chart_family=inputs.chart_family,
        code=inputs.code.source_text,
        details=canonical_json(inputs.details.to_dict()),
    )
    request = ChatRequest(
        messages=(Message.user(prompt, images=(ImagePart(inputs.image_bytes),)),),
        temperature=config.temperature_generation,
        max_output_tokens=config.max_output_tokens,
    )
    response = gateway.complete(endpoint, request)
    text = response.text.strip()
    if not text:
        logger.info("empty description; sending repair re-prompt")
        repair = ChatRequest(
            messages=request.messages
            + (
                Message.assistant(""),
                Message.user("Your reply was empty. Write the description now."),
            ),
            temperature=config.temperature_generation,
            max_output_tokens=config.max_output_tokens,
        )
        text = gateway.complete(endpoint, repair).text.strip()
    if not text:
        raise AnnotationFailure("description empty after repair")
    return text


def _parse_items(payload: dict) -> list[QAItem]:
    items = []
    for entry in payload.get("items", []):
        question = entry["question"].strip()
        answer = entry["answer"].strip()
        if not question or not answer:
            continue
        items.append(
            QAItem(
                qa_id="pending",
                question=question,
                answer=answer,
                difficulty=parse_difficulty(entry["difficulty"]),
            )
        )
    return items


def _dedupe(items: list[QAItem]) -> list[QAItem]:
    seen: set[str] = set()
    out = []
    for item in items:
        if item.question in seen:
            continue
        seen.add(item.question)
        out.append(item)
    return out


def _difficulty_counts(items: list[QAItem]) -> dict[Difficulty, int]:
    counts = {d: 0 for d in _DIFFICULTIES}
    for item in items:
        counts[item.difficulty] += 1
    return counts


def _quota_met(items: list[QAItem], config: PipelineConfig) -> bool:
    counts = _difficulty_counts(items)
    observed = tuple(counts[d] for d in _DIFFICULTIES)
    total = sum(observed)
    lo, hi = config.qa_total_band
    return lo <= total <= hi and all(
        abs(o - t) <= config.qa_mix_tolerance for o, t in zip(observed, config.qa_mix)
    )


def _trim_excess(items: list[QAItem], config: PipelineConfig) -> list[QAItem]:
    """Drop trailing items of any over-quota difficulty."""
    targets = dict(zip(_DIFFICULTIES, config.qa_mix))
    counts = _difficulty_counts(items)
    out = []
    for item in reversed(items):
        if counts[item.difficulty] > targets[item.difficulty]:
            counts[item.difficulty] -= 1
            continue
        out.append(item)
    return list(reversed(out))


def generate_qa(
    inputs: ChartInputs,
    description: str,
    gateway: Gateway,
    endpoint: ModelEndpoint,
    config: PipelineConfig,
    make_id: Callable[[int], str],
) -> list[QAItem]:
    """Generate the QA set for one chart, enforcing the difficulty quota.

    Exact duplicates are dropped before counting. If the counts miss the
    7/6/7 target, excess items are trimmed locally and one corrective
    re-prompt asks for just the missing difficulties. A set that still falls
    outside the acceptance band raises :class:`AnnotationFailure`. Ids are
    assigned to the accepted set in final order.
    """
    n_easy, n_medium, n_hard = config.qa_mix
    prompt = render(
        "generate_qa",
        qa_total=config.qa_total,
        n_easy=n_easy,
        n_medium=n_medium,
        n_hard=n_hard,
        clean_summary=inputs.context.clean_summary,
        chart_family=inputs.chart_family,
        description=description,
        details=canonical_json(inputs.details.to_dict()),
    )
    payload = gateway.complete_structured(
        endpoint,
        ChatRequest(
            messages=(Message.user(prompt, images=(ImagePart(inputs.image_bytes),)),),
            temperature=config.temperature_generation,
            max_output_tokens=config.max_output_tokens,
            response_schema=_QA_SCHEMA,
        ),
    )
    items = _dedupe(_parse_items(payload))

    exact = _difficulty_counts(items)
    if tuple(exact[d] for d in _DIFFICULTIES) != config.qa_mix:
        items = _trim_excess(items, config)
        missing = {
            d: t - _difficulty_counts(items)[d]
            for d, t in zip(_DIFFICULTIES, config.qa_mix)
            if t > _difficulty_counts(items)[d]
        }
        if missing:
            missing_block = ", ".join(
                f"{n} {d.value} question(s)" for d, n in missing.items()
            )
            existing = "\n".join(f"- {i.question}" for i in items)
            repair_prompt = render(
                "repair_qa",
                missing_block=missing_block,
                existing_questions=existing,
            )
            payload = gateway.complete_structured(
                endpoint,
                ChatRequest(
                    messages=(
                        Message.user(
                            repair_prompt, images=(ImagePart(inputs.image_bytes),)
                        ),
                    ),
                    temperature=config.temperature_generation,
                    max_output_tokens=config.max_output_tokens,
                    response_schema=_QA_SCHEMA,
                ),
            )
            items = _dedupe(items + _parse_items(payload))
            items = _trim_excess(items, config)

    if not _quota_met(items, config):
        counts = _difficulty_counts(items)
        raise AnnotationFailure(
            f"QA quota not met after repair: "
            f"{tuple(counts[d] for d in _DIFFICULTIES)} vs target {config.qa_mix} "
            f"(band {config.qa_total_band}, tolerance {config.qa_mix_tolerance})"
        )
    return [replace(item, qa_id=make_id(i)) for i, item in enumerate(items)]


def label_question_types(
    items: list[QAItem],
    description: str,
    gateway: Gateway,
    endpoint: ModelEndpoint,
    config: PipelineConfig,
) -> list[QAItem]:
    """One structured call assigning every question exactly one type.

    The response must label each input index exactly once with a parseable
    type; anything else is an :class:`AnnotationFailure` (the structured
    repair pass inside the gateway is the one retry we grant).
    """
    questions_block = "\n".join(f"{i}. {item.question}" for i, item in enumerate(items))
    prompt = render(
        "label_questions", description=description, questions_block=questions_block
    )
    try:
        payload = gateway.complete_structured(
            endpoint,
            ChatRequest(
                messages=(Message.user(prompt),),
                temperature=config.temperature_checker,
                max_output_tokens=config.max_output_tokens,
                response_schema=_LABELS_SCHEMA,
            ),
        )
    except StructuredParseError as exc:
        raise AnnotationFailure(f"type labeling unparseable: {exc}") from exc

    labels: dict[int, str] = {}
    for entry in payload["labels"]:
        idx = entry["index"]
        if idx in labels:
            raise AnnotationFailure(f"type labeling assigned index {idx} twice")
        labels[idx] = entry["qtype"]
    if set(labels) != set(range(len(items))):
        raise AnnotationFailure(
            f"type labeling covered {sorted(labels)} but expected indexes "
            f"0..{len(items) - 1}"
        )
    labeled = []
    for i, item in enumerate(items):
        try:
            qtype = parse_question_type(labels[i])
        except Exception as exc:
            raise AnnotationFailure(f"bad type label for question {i}: {exc}") from exc
        labeled.append(item.with_qtype(qtype))
    return labeled


@dataclass(frozen=True)
class Annotation:
    description: str
    qa: tuple[QAItem, ...]


def annotate_chart(
    inputs: ChartInputs,
    gateway: Gateway,
    endpoint: ModelEndpoint,
    config: PipelineConfig,
    make_id: Callable[[int], str],
) -> Annotation:
    """Description, QA, and type labels for one retained chart."""
    description = describe_chart(inputs, gateway, endpoint, config)
    items = generate_qa(inputs, description, gateway, endpoint, config, make_id)
    labeled = label_question_types(items, description, gateway, endpoint, config)
    return Annotation(description=description, qa=tuple(labeled))
