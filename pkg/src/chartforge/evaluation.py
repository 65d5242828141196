"""Downstream diagnostic evaluation.

Candidate models answer each chart question free-form (chart image, dataset
summary, question -- nothing else); a separate judge labels answers correct
or incorrect; accuracies aggregate per model, question type, and chart
family with chart-level bootstrap confidence intervals, plus per-model
centered effects.

Bootstrap resampling is over whole charts, not questions, so correlated
questions attached to one chart move together. All randomness is seeded and
keyed per group: permuting input order or re-running never changes a table
byte.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .config import EvalConfig
from .errors import GatewayError, ValidationError
from .gateway import ChatRequest, Gateway, ImagePart, Message, ModelEndpoint
from .model import EvalVerdict, QAItem, QuestionType
from .prompting import NUMERIC_CLOSENESS_NOTE, render
from .util import canonical_json, stable_int_digest, write_text_atomic

logger = logging.getLogger(__name__)

_JUDGE_SCHEMA = {
    "type": "object",
    "properties": {
        "correct": {"type": "boolean"},
        "rationale": {"type": "string"},
    },
    "required": ["correct"],
}

GROUP_DIMENSIONS = ("model", "qtype", "chart_family")


@dataclass(frozen=True)
class EvalItem:
    """One chart as the evaluator sees it."""

    chart_id: str
    chart_family: str
    image_path: Path
    clean_summary: str
    qa: tuple[QAItem, ...]


@dataclass(frozen=True)
class VerdictRow:
    """A judged answer enriched with the grouping attributes."""

    model_id: str
    chart_id: str
    qa_id: str
    qtype: str
    chart_family: str
    correct: bool


@dataclass(frozen=True)
class AccuracyCell:
    model_id: str | None
    qtype: str | None
    chart_family: str | None
    n_questions: int
    n_correct: int
    accuracy: float | None
    ci_low: float | None
    ci_high: float | None

    def key(self) -> tuple[str, str, str]:
        return (self.model_id or "", self.qtype or "", self.chart_family or "")


@dataclass(frozen=True)
class EffectRow:
    model_id: str
    dimension: str
    group: str
    n_questions: int
    accuracy: float
    overall_accuracy: float
    deviation: float


def collect_answer(
    model: ModelEndpoint,
    item: EvalItem,
    qa: QAItem,
    gateway: Gateway,
    config: EvalConfig,
) -> str:
    """One vision call: exactly the chart image, the dataset summary, and the
    question. The answer is stored verbatim."""
    prompt = render(
        "answer_question", clean_summary=item.clean_summary, question=qa.question
    )
    response = gateway.complete(
        model,
        ChatRequest(
            messages=(
                Message.user(prompt, images=(ImagePart(item.image_path.read_bytes()),)),
            ),
            temperature=config.temperature_answer,
            max_output_tokens=config.max_output_tokens,
        ),
    )
    return response.text


def judge_answer(
    judge: ModelEndpoint,
    clean_summary: str,
    question: str,
    reference_answer: str,
    candidate_answer: str,
    qtype: QuestionType | None,
    gateway: Gateway,
    config: EvalConfig,
    model_id: str = "",
    chart_id: str = "",
    qa_id: str = "",
) -> EvalVerdict:
    """Label one candidate answer correct/incorrect.

    Identical reference and candidate strings short-circuit to correct
    without a judge call. Value-extraction questions add the
    numeric-closeness instruction to the judge prompt.
    """
    if candidate_answer.strip() == reference_answer.strip():
        return EvalVerdict(
            model_id=model_id,
            chart_id=chart_id,
            qa_id=qa_id,
            model_answer=candidate_answer,
            correct=True,
            judge_rationale="exact match with reference answer",
        )
    closeness = (
        NUMERIC_CLOSENESS_NOTE if qtype is QuestionType.VALUE_EXTRACTION else ""
    )
    prompt = render(
        "judge_answer",
        clean_summary=clean_summary,
        question=question,
        reference_answer=reference_answer,
        candidate_answer=candidate_answer,
        closeness_note=closeness,
    )
    payload = gateway.complete_structured(
        judge,
        ChatRequest(
            messages=(Message.user(prompt),),
            temperature=config.temperature_judge,
            max_output_tokens=config.max_output_tokens,
            response_schema=_JUDGE_SCHEMA,
        ),
    )
    return EvalVerdict(
        model_id=model_id,
        chart_id=chart_id,
        qa_id=qa_id,
        model_answer=candidate_answer,
        correct=bool(payload["correct"]),
        judge_rationale=payload.get("rationale", ""),
    )


# --- aggregation ---------------------------------------------------------------


def _row_value(row: VerdictRow, dim: str) -> str:
    if dim == "model":
        return row.model_id
    if dim == "qtype":
        return row.qtype
    if dim == "chart_family":
        return row.chart_family
    raise ValidationError(f"unknown grouping dimension {dim!r}")


def bootstrap_ci(
    rows: Sequence[VerdictRow], config: EvalConfig, group_key: str = ""
) -> tuple[float, float]:
    """Percentile bootstrap over whole charts.

    Charts are resampled with replacement (sample size = number of charts);
    each replicate's accuracy pools every question of the sampled charts. The
    RNG stream is derived from the configured seed plus the group key, so
    output is reproducible and independent of question order.
    """
    if not rows:
        raise ValidationError("bootstrap_ci needs at least one verdict")
    per_chart: dict[str, list[int]] = {}
    for row in rows:
        bucket = per_chart.setdefault(row.chart_id, [0, 0])
        bucket[0] += int(row.correct)
        bucket[1] += 1
    chart_ids = sorted(per_chart)
    corrects = np.array([per_chart[c][0] for c in chart_ids], dtype=np.int64)
    counts = np.array([per_chart[c][1] for c in chart_ids], dtype=np.int64)
    n_charts = len(chart_ids)

    rng = np.random.default_rng(
        [abs(int(config.bootstrap_seed)), stable_int_digest(group_key)]
    )
    idx = rng.integers(0, n_charts, size=(config.bootstrap_resamples, n_charts))
    replicate_acc = corrects[idx].sum(axis=1) / counts[idx].sum(axis=1)
    alpha = (1.0 - config.ci_level) / 2.0
    lo = float(np.quantile(replicate_acc, alpha))
    hi = float(np.quantile(replicate_acc, 1.0 - alpha))
    return lo, hi


def aggregate_accuracy(
    rows: Sequence[VerdictRow],
    group_by: Sequence[str],
    config: EvalConfig,
    domains: Mapping[str, Sequence[str]] | None = None,
    with_ci: bool = True,
) -> list[AccuracyCell]:
    """Accuracy cells for every combination of the requested dimensions.

    The qtype dimension defaults to the full five-type domain so empty
    groups are emitted with n=0 and no interval; other dimensions default to
    the observed values. Cells are ordered lexicographically.
    """
    for dim in group_by:
        if dim not in GROUP_DIMENSIONS:
            raise ValidationError(f"unknown grouping dimension {dim!r}")
    domains = dict(domains or {})
    resolved: dict[str, list[str]] = {}
    for dim in GROUP_DIMENSIONS:
        if dim not in group_by:
            continue
        if dim in domains:
            resolved[dim] = list(domains[dim])
        elif dim == "qtype":
            resolved[dim] = [qt.value for qt in QuestionType]
        else:
            resolved[dim] = sorted({_row_value(r, dim) for r in rows})

    grouped: dict[tuple, list[VerdictRow]] = {}
    for row in rows:
        key = tuple(_row_value(row, dim) for dim in GROUP_DIMENSIONS if dim in group_by)
        grouped.setdefault(key, []).append(row)

    def _cells_for(key: tuple) -> AccuracyCell:
        values = dict(zip([d for d in GROUP_DIMENSIONS if d in group_by], key))
        members = grouped.get(key, [])
        n = len(members)
        n_correct = sum(r.correct for r in members)
        if n == 0:
            return AccuracyCell(
                model_id=values.get("model"),
                qtype=values.get("qtype"),
                chart_family=values.get("chart_family"),
                n_questions=0,
                n_correct=0,
                accuracy=None,
                ci_low=None,
                ci_high=None,
            )
        accuracy = n_correct / n
        ci_low = ci_high = None
        if with_ci:
            ci_low, ci_high = bootstrap_ci(members, config, group_key="|".join(key))
        return AccuracyCell(
            model_id=values.get("model"),
            qtype=values.get("qtype"),
            chart_family=values.get("chart_family"),
            n_questions=n,
            n_correct=n_correct,
            accuracy=accuracy,
            ci_low=ci_low,
            ci_high=ci_high,
        )

    keys: list[tuple] = [()]
    for dim in GROUP_DIMENSIONS:
        if dim not in group_by:
            continue
        keys = [key + (value,) for key in keys for value in resolved[dim]]
    cells = [_cells_for(key) for key in sorted(keys)]
    return cells


def centered_effects(
    rows: Sequence[VerdictRow], dimension: str
) -> list[EffectRow]:
    """Per-model deviations of group accuracy from the model's own overall
    accuracy. The question-weighted mean deviation is zero per model."""
    if dimension not in ("qtype", "chart_family"):
        raise ValidationError("dimension must be qtype or chart_family")
    by_model: dict[str, list[VerdictRow]] = {}
    for row in rows:
        by_model.setdefault(row.model_id, []).append(row)

    out: list[EffectRow] = []
    for model_id in sorted(by_model):
        member_rows = by_model[model_id]
        overall = sum(r.correct for r in member_rows) / len(member_rows)
        groups: dict[str, list[VerdictRow]] = {}
        for row in member_rows:
            groups.setdefault(_row_value(row, dimension), []).append(row)
        for group in sorted(groups):
            members = groups[group]
            accuracy = sum(r.correct for r in members) / len(members)
            out.append(
                EffectRow(
                    model_id=model_id,
                    dimension=dimension,
                    group=group,
                    n_questions=len(members),
                    accuracy=accuracy,
                    overall_accuracy=overall,
                    deviation=accuracy - overall,
                )
            )
    return out


# --- answer collection and judging runs ----------------------------------------


@dataclass
class EvalRunResult:
    answers: dict[tuple[str, str, str], str]
    verdicts: list[EvalVerdict]
    rows: list[VerdictRow]
    unanswered: list[tuple[str, str, str]]
    unjudged: list[tuple[str, str, str]]


def run_evaluation(
    items: Sequence[EvalItem],
    candidates: Sequence[ModelEndpoint],
    judge: ModelEndpoint,
    gateway: Gateway,
    config: EvalConfig,
    out_dir: Path,
) -> EvalRunResult:
    """Collect answers and judge them for every (model, chart, question).

    Gateway failures leave cells unanswered/unjudged; those are excluded
    from accuracy denominators and reported in coverage.json. Outputs are
    sorted by key, so reruns with identical fixtures overwrite idempotently.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    qa_index: dict[tuple[str, str], QAItem] = {}
    tasks: list[tuple[ModelEndpoint, EvalItem, QAItem]] = []
    for item in items:
        for qa in item.qa:
            qa_index[(item.chart_id, qa.qa_id)] = qa
            for model in candidates:
                tasks.append((model, item, qa))

    answers: dict[tuple[str, str, str], str] = {}
    unanswered: list[tuple[str, str, str]] = []

    def _collect(task):
        model, item, qa = task
        key = (model.model_id, item.chart_id, qa.qa_id)
        try:
            return key, collect_answer(model, item, qa, gateway, config)
        except GatewayError as exc:
            logger.warning("unanswered %s: %s", key, exc)
            return key, None

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            collected = list(pool.map(_collect, tasks))
    else:
        collected = [_collect(t) for t in tasks]
    for key, answer in collected:
        if answer is None:
            unanswered.append(key)
        else:
            answers[key] = answer

    items_by_id = {item.chart_id: item for item in items}
    verdicts: list[EvalVerdict] = []
    unjudged: list[tuple[str, str, str]] = []

    def _judge(entry):
        key, answer = entry
        model_id, chart_id, qa_id = key
        item = items_by_id[chart_id]
        qa = qa_index[(chart_id, qa_id)]
        try:
            return key, judge_answer(
                judge,
                item.clean_summary,
                qa.question,
                qa.answer,
                answer,
                qa.qtype,
                gateway,
                config,
                model_id=model_id,
                chart_id=chart_id,
                qa_id=qa_id,
            )
        except GatewayError as exc:
            logger.warning("unjudged %s: %s", key, exc)
            return key, None

    entries = sorted(answers.items())
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            judged = list(pool.map(_judge, entries))
    else:
        judged = [_judge(e) for e in entries]
    for key, verdict in judged:
        if verdict is None:
            unjudged.append(key)
        else:
            verdicts.append(verdict)

    rows = [
        VerdictRow(
            model_id=v.model_id,
            chart_id=v.chart_id,
            qa_id=v.qa_id,
            qtype=qa_index[(v.chart_id, v.qa_id)].qtype.value
            if qa_index[(v.chart_id, v.qa_id)].qtype
            else "",
            chart_family=items_by_id[v.chart_id].chart_family,
            correct=v.correct,
        )
        for v in sorted(verdicts, key=lambda v: v.key())
    ]

    _write_jsonl(
        out_dir / "answers.jsonl",
        (
            {
                "model_id": k[0],
                "chart_id": k[1],
                "qa_id": k[2],
                "answer": answers[k],
            }
            for k in sorted(answers)
        ),
    )
    _write_jsonl(
        out_dir / "verdicts.jsonl",
        (v.to_dict() for v in sorted(verdicts, key=lambda v: v.key())),
    )
    coverage = {
        "requested": len(tasks),
        "answered": len(answers),
        "judged": len(verdicts),
        "unanswered": [list(k) for k in sorted(unanswered)],
        "unjudged": [list(k) for k in sorted(unjudged)],
    }
    write_text_atomic(out_dir / "coverage.json", canonical_json(coverage) + "\n")
    return EvalRunResult(
        answers=answers,
        verdicts=sorted(verdicts, key=lambda v: v.key()),
        rows=rows,
        unanswered=sorted(unanswered),
        unjudged=sorted(unjudged),
    )


def _write_jsonl(path: Path, records: Iterable[dict]) -> None:
    text = "".join(canonical_json(record) + "\n" for record in records)
    write_text_atomic(path, text)


# --- report emission ------------------------------------------------------------


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


def emit_report(
    cells: Sequence[AccuracyCell],
    effects: Sequence[EffectRow],
    out_dir: Path,
    figures: bool = False,
) -> list[Path]:
    """Write accuracy.csv and effects.csv (deterministic bytes), plus
    optional static figures of overall/per-type accuracy and centered
    effects."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    lines = ["model,qtype,chart_family,n_questions,n_correct,accuracy,ci_low,ci_high"]
    for cell in sorted(cells, key=lambda c: c.key()):
        lines.append(
            ",".join(
                [
                    cell.model_id or "",
                    cell.qtype or "",
                    cell.chart_family or "",
                    str(cell.n_questions),
                    str(cell.n_correct),
                    _fmt(cell.accuracy),
                    _fmt(cell.ci_low),
                    _fmt(cell.ci_high),
                ]
            )
        )
    accuracy_path = out_dir / "accuracy.csv"
    write_text_atomic(accuracy_path, "\n".join(lines) + "\n")
    written.append(accuracy_path)

    lines = ["model,dimension,group,n_questions,accuracy,overall_accuracy,deviation"]
    for row in sorted(effects, key=lambda r: (r.model_id, r.dimension, r.group)):
        lines.append(
            ",".join(
                [
                    row.model_id,
                    row.dimension,
                    row.group,
                    str(row.n_questions),
                    _fmt(row.accuracy),
                    _fmt(row.overall_accuracy),
                    _fmt(row.deviation),
                ]
            )
        )
    effects_path = out_dir / "effects.csv"
    write_text_atomic(effects_path, "\n".join(lines) + "\n")
    written.append(effects_path)

    if figures:
        written.extend(_emit_figures(cells, effects, out_dir))
    return written


def _emit_figures(
    cells: Sequence[AccuracyCell], effects: Sequence[EffectRow], out_dir: Path
) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    overall = [
        c for c in cells if c.model_id and c.qtype is None and c.chart_family is None
    ]
    if overall:
        fig, ax = plt.subplots(figsize=(max(4, len(overall) * 0.9), 4))
        xs = range(len(overall))
        accs = [c.accuracy or 0.0 for c in overall]
        errs = [
            [max(0.0, (c.accuracy or 0) - (c.ci_low or 0)) for c in overall],
            [max(0.0, (c.ci_high or 0) - (c.accuracy or 0)) for c in overall],
        ]
        ax.bar(xs, accs, yerr=errs, capsize=3, color="#4878A8")
        ax.set_xticks(list(xs))
        ax.set_xticklabels([c.model_id for c in overall], rotation=45, ha="right")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1.05)
        ax.set_title("Overall accuracy by model (95% chart-level bootstrap CI)")
        fig.tight_layout()
        path = out_dir / "fig_overall.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)

    per_type = [c for c in cells if c.model_id and c.qtype and c.n_questions > 0]
    if per_type:
        qtypes = sorted({c.qtype for c in per_type})
        models = sorted({c.model_id for c in per_type})
        fig, axes = plt.subplots(
            1, len(qtypes), figsize=(3 * len(qtypes), 4), sharey=True
        )
        if len(qtypes) == 1:
            axes = [axes]
        for ax, qtype in zip(axes, qtypes):
            sub = {c.model_id: c for c in per_type if c.qtype == qtype}
            accs = [sub[m].accuracy if m in sub else 0.0 for m in models]
            ax.bar(range(len(models)), accs, color="#70A870")
            ax.set_xticks(range(len(models)))
            ax.set_xticklabels(models, rotation=45, ha="right")
            ax.set_title(qtype)
            ax.set_ylim(0, 1.05)
        axes[0].set_ylabel("accuracy")
        fig.suptitle("Accuracy by question type")
        fig.tight_layout()
        path = out_dir / "fig_qtype.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)

    if effects:
        dims = sorted({e.dimension for e in effects})
        fig, axes = plt.subplots(1, len(dims), figsize=(6 * len(dims), 4))
        if len(dims) == 1:
            axes = [axes]
        for ax, dim in zip(axes, dims):
            rows = [e for e in effects if e.dimension == dim]
            groups = sorted({e.group for e in rows})
            for model in sorted({e.model_id for e in rows}):
                devs = {e.group: e.deviation for e in rows if e.model_id == model}
                ax.plot(
                    range(len(groups)),
                    [devs.get(g, float("nan")) for g in groups],
                    marker="o",
                    label=model,
                )
            ax.axhline(0.0, color="grey", lw=0.8)
            ax.set_xticks(range(len(groups)))
            ax.set_xticklabels(groups, rotation=45, ha="right")
            ax.set_title(f"Centered {dim} effects")
            ax.set_ylabel("deviation from model overall accuracy")
        axes[-1].legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / "fig_effects.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)
    return written
