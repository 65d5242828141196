"""Domain types shared across the pipeline and the evaluator.

Value objects are frozen dataclasses with explicit ``to_dict``/``from_dict``
pairs; serialized field names are snake_case and stable because they double
as the corpus store schema. Nothing in this module executes code or calls
models.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping, Sequence

from .errors import QuestionTypeParseError, ValidationError


class FeatureKind(str, Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"
    ORDINAL = "ordinal"
    DATETIME = "datetime"
    TEXT = "text"
    IDENTIFIER = "identifier"
    UNKNOWN = "unknown"


class CandidateState(str, Enum):
    PROPOSED = "proposed"
    CODED = "coded"
    RENDERED = "rendered"
    CHECKING = "checking"
    NEEDS_FIX = "needs_fix"
    RETAINED = "retained"
    DISCARDED = "discarded"
    FAILED = "failed"


# Legal state changes for a chart candidate. `failed` is reachable only from
# coded/rendered: an infrastructure fault strikes while we are waiting on a
# render or on the checker, never after a verdict has been accepted.
CANDIDATE_TRANSITIONS: dict[CandidateState, frozenset[CandidateState]] = {
    CandidateState.PROPOSED: frozenset({CandidateState.CODED}),
    CandidateState.CODED: frozenset({CandidateState.RENDERED, CandidateState.FAILED}),
    CandidateState.RENDERED: frozenset(
        {CandidateState.CHECKING, CandidateState.FAILED}
    ),
    CandidateState.CHECKING: frozenset(
        {CandidateState.NEEDS_FIX, CandidateState.RETAINED, CandidateState.DISCARDED}
    ),
    CandidateState.NEEDS_FIX: frozenset({CandidateState.CODED}),
    CandidateState.RETAINED: frozenset(),
    CandidateState.DISCARDED: frozenset(),
    CandidateState.FAILED: frozenset(),
}


class RenderStatus(str, Enum):
    OK = "ok"
    EXEC_ERROR = "exec_error"
    TIMEOUT = "timeout"
    MISSING_OUTPUT = "missing_output"


class ProblemCategory(str, Enum):
    CLUTTER = "clutter"
    LABEL_COLLISION = "label_collision"
    WEAK_LEGEND = "weak_legend"
    POOR_SCALING = "poor_scaling"
    INDISTINGUISHABLE_GROUPS = "indistinguishable_groups"
    UNREADABLE_TEXT = "unreadable_text"
    ENCODING_MISMATCH = "encoding_mismatch"
    LOW_CONTRAST = "low_contrast"
    OVERPLOTTING = "overplotting"
    OTHER = "other"


class Difficulty(str, Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"


class QuestionType(str, Enum):
    CHART_SYNTAX = "chart_syntax"
    VALUE_EXTRACTION = "value_extraction"
    COMPARISON = "comparison"
    TRENDS = "trends"
    REASONING = "reasoning"


ENCODING_CHANNELS = ("x", "y", "color", "size", "facet", "angle", "other")


@dataclass(frozen=True)
class FeatureField:
    raw_name: str
    display_label: str = ""
    kind: FeatureKind = FeatureKind.UNKNOWN
    description: str | None = None

    def __post_init__(self):
        if not self.raw_name:
            raise ValidationError("feature raw_name must be nonempty")
        if not self.display_label:
            object.__setattr__(self, "display_label", self.raw_name)

    def to_dict(self) -> dict:
        return {
            "raw_name": self.raw_name,
            "display_label": self.display_label,
            "kind": self.kind.value,
            "description": self.description,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureField":
        return cls(
            raw_name=d["raw_name"],
            display_label=d.get("display_label") or d["raw_name"],
            kind=FeatureKind(d.get("kind", "unknown")),
            description=d.get("description"),
        )


@dataclass(frozen=True)
class DatasetContext:
    """A tabular dataset plus metadata; the unit of screening."""

    dataset_id: str
    name: str
    raw_description: str
    n_instances: int
    schema: tuple[FeatureField, ...]
    table_preview: tuple[tuple[str, ...], ...] = ()
    clean_summary: str = ""
    source_uri: str | None = None

    def __post_init__(self):
        if self.n_instances < 0:
            raise ValidationError("n_instances must be >= 0")
        names = [f.raw_name for f in self.schema]
        if len(set(names)) != len(names):
            raise ValidationError("schema feature names must be unique")
        object.__setattr__(self, "schema", tuple(self.schema))
        object.__setattr__(
            self, "table_preview", tuple(tuple(r) for r in self.table_preview)
        )

    @property
    def n_features(self) -> int:
        return len(self.schema)

    def feature_names(self) -> list[str]:
        return [f.raw_name for f in self.schema]

    def with_summary(self, clean_summary: str) -> "DatasetContext":
        return replace(self, clean_summary=clean_summary)

    def with_schema(self, schema: Sequence[FeatureField]) -> "DatasetContext":
        return replace(self, schema=tuple(schema))

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "name": self.name,
            "raw_description": self.raw_description,
            "clean_summary": self.clean_summary,
            "n_instances": self.n_instances,
            "n_features": self.n_features,
            "schema": [f.to_dict() for f in self.schema],
            "table_preview": [list(r) for r in self.table_preview],
            "source_uri": self.source_uri,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetContext":
        return cls(
            dataset_id=d["dataset_id"],
            name=d["name"],
            raw_description=d["raw_description"],
            clean_summary=d.get("clean_summary", ""),
            n_instances=d["n_instances"],
            schema=tuple(FeatureField.from_dict(f) for f in d["schema"]),
            table_preview=tuple(tuple(r) for r in d.get("table_preview", [])),
            source_uri=d.get("source_uri"),
        )


@dataclass(frozen=True)
class ChartProposal:
    proposal_id: str
    chart_family: str
    features: tuple[str, ...]
    intent: str

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))

    def to_dict(self) -> dict:
        return {
            "proposal_id": self.proposal_id,
            "chart_family": self.chart_family,
            "features": list(self.features),
            "intent": self.intent,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ChartProposal":
        return cls(
            proposal_id=d["proposal_id"],
            chart_family=d["chart_family"],
            features=tuple(d["features"]),
            intent=d["intent"],
        )


@dataclass(frozen=True)
class ChartDetails:
    """What the rendered chart actually used, as recorded by the plot script."""

    variables: tuple[str, ...]
    encodings: Mapping[str, str]
    transformations: tuple[str, ...] = ()
    filters: tuple[str, ...] = ()
    aggregations: tuple[str, ...] = ()
    row_count_used: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "encodings", dict(self.encodings))
        object.__setattr__(self, "transformations", tuple(self.transformations))
        object.__setattr__(self, "filters", tuple(self.filters))
        object.__setattr__(self, "aggregations", tuple(self.aggregations))
        if self.row_count_used < 0:
            raise ValidationError("row_count_used must be >= 0")

    def to_dict(self) -> dict:
        return {
            "variables": list(self.variables),
            "encodings": dict(self.encodings),
            "transformations": list(self.transformations),
            "filters": list(self.filters),
            "aggregations": list(self.aggregations),
            "row_count_used": self.row_count_used,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ChartDetails":
        if "row_count_used" not in d:
            raise ValidationError("details record missing row_count_used")
        return cls(
            variables=tuple(d.get("variables", [])),
            encodings=dict(d.get("encodings", {})),
            transformations=tuple(d.get("transformations", [])),
            filters=tuple(d.get("filters", [])),
            aggregations=tuple(d.get("aggregations", [])),
            row_count_used=int(d["row_count_used"]),
        )


@dataclass(frozen=True)
class PlotCode:
    version: int
    source_text: str
    generated_from_feedback: str | None = None

    def __post_init__(self):
        if self.version < 1:
            raise ValidationError("code version must be >= 1")

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "source_text": self.source_text,
            "generated_from_feedback": self.generated_from_feedback,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PlotCode":
        return cls(
            version=d["version"],
            source_text=d["source_text"],
            generated_from_feedback=d.get("generated_from_feedback"),
        )


@dataclass(frozen=True)
class RenderResult:
    status: RenderStatus
    image_ref: str | None = None
    details: ChartDetails | None = None
    stderr_excerpt: str | None = None
    wall_time: float = 0.0

    def __post_init__(self):
        if self.status is RenderStatus.OK and (
            self.image_ref is None or self.details is None
        ):
            raise ValidationError("ok render must carry image_ref and details")

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "image_ref": self.image_ref,
            "details": self.details.to_dict() if self.details else None,
            "stderr_excerpt": self.stderr_excerpt,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RenderResult":
        return cls(
            status=RenderStatus(d["status"]),
            image_ref=d.get("image_ref"),
            details=ChartDetails.from_dict(d["details"]) if d.get("details") else None,
            stderr_excerpt=d.get("stderr_excerpt"),
            wall_time=d.get("wall_time", 0.0),
        )


@dataclass(frozen=True)
class CheckerVerdict:
    needs_correction: bool
    problems: tuple[tuple[ProblemCategory, str], ...] = ()
    raw_response: str = ""

    def __post_init__(self):
        object.__setattr__(
            self,
            "problems",
            tuple((ProblemCategory(c), n) for c, n in self.problems),
        )
        if self.needs_correction and not self.problems:
            raise ValidationError(
                "a verdict requesting correction must name at least one problem"
            )

    def problem_summary(self) -> str:
        return "; ".join(f"{c.value}: {n}" for c, n in self.problems)

    def to_dict(self) -> dict:
        return {
            "needs_correction": self.needs_correction,
            "problems": [{"category": c.value, "note": n} for c, n in self.problems],
            "raw_response": self.raw_response,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CheckerVerdict":
        return cls(
            needs_correction=d["needs_correction"],
            problems=tuple(
                (ProblemCategory(p["category"]), p.get("note", ""))
                for p in d.get("problems", [])
            ),
            raw_response=d.get("raw_response", ""),
        )


@dataclass(frozen=True)
class ChartCandidate:
    """One proposed chart moving through the codegen/render/check loop.

    Histories are append-only tuples; `advance` and the `add_*` helpers return
    new instances, so replaying an event log reconstructs identical state.
    """

    candidate_id: str
    dataset_id: str
    proposal: ChartProposal
    state: CandidateState = CandidateState.PROPOSED
    code_versions: tuple[PlotCode, ...] = ()
    renders: tuple[RenderResult, ...] = ()
    verdicts: tuple[CheckerVerdict, ...] = ()
    feedback_log: tuple[CheckerVerdict, ...] = ()
    retries_used: int = 0
    failure_reason: str | None = None

    def advance(self, state: CandidateState, failure_reason: str | None = None):
        if state not in CANDIDATE_TRANSITIONS[self.state]:
            raise ValidationError(
                f"illegal candidate transition {self.state.value} -> {state.value}"
            )
        return replace(self, state=state, failure_reason=failure_reason)

    def add_code(self, code: PlotCode) -> "ChartCandidate":
        if self.code_versions and code.version != self.code_versions[-1].version + 1:
            raise ValidationError("code versions must increase by one")
        if not self.code_versions and code.version != 1:
            raise ValidationError("first code version must be 1")
        return replace(self, code_versions=self.code_versions + (code,))

    def add_render(self, result: RenderResult) -> "ChartCandidate":
        return replace(self, renders=self.renders + (result,))

    def add_verdict(self, verdict: CheckerVerdict) -> "ChartCandidate":
        return replace(self, verdicts=self.verdicts + (verdict,))

    def add_feedback(self, verdict: CheckerVerdict) -> "ChartCandidate":
        return replace(self, feedback_log=self.feedback_log + (verdict,))

    def spend_retry(self) -> "ChartCandidate":
        return replace(self, retries_used=self.retries_used + 1)

    def to_dict(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "dataset_id": self.dataset_id,
            "proposal": self.proposal.to_dict(),
            "state": self.state.value,
            "code_versions": [c.to_dict() for c in self.code_versions],
            "renders": [r.to_dict() for r in self.renders],
            "verdicts": [v.to_dict() for v in self.verdicts],
            "feedback_log": [v.to_dict() for v in self.feedback_log],
            "retries_used": self.retries_used,
            "failure_reason": self.failure_reason,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ChartCandidate":
        return cls(
            candidate_id=d["candidate_id"],
            dataset_id=d["dataset_id"],
            proposal=ChartProposal.from_dict(d["proposal"]),
            state=CandidateState(d["state"]),
            code_versions=tuple(PlotCode.from_dict(c) for c in d["code_versions"]),
            renders=tuple(RenderResult.from_dict(r) for r in d["renders"]),
            verdicts=tuple(CheckerVerdict.from_dict(v) for v in d.get("verdicts", [])),
            feedback_log=tuple(
                CheckerVerdict.from_dict(v) for v in d.get("feedback_log", [])
            ),
            retries_used=d.get("retries_used", 0),
            failure_reason=d.get("failure_reason"),
        )


@dataclass(frozen=True)
class QAItem:
    qa_id: str
    question: str
    answer: str
    difficulty: Difficulty
    qtype: QuestionType | None = None

    def __post_init__(self):
        if not self.question.strip() or not self.answer.strip():
            raise ValidationError("question and answer must be nonempty")

    def with_qtype(self, qtype: QuestionType) -> "QAItem":
        return replace(self, qtype=qtype)

    def to_dict(self) -> dict:
        return {
            "qa_id": self.qa_id,
            "question": self.question,
            "answer": self.answer,
            "difficulty": self.difficulty.value,
            "qtype": self.qtype.value if self.qtype else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "QAItem":
        return cls(
            qa_id=d["qa_id"],
            question=d["question"],
            answer=d["answer"],
            difficulty=Difficulty(d["difficulty"]),
            qtype=QuestionType(d["qtype"]) if d.get("qtype") else None,
        )


@dataclass(frozen=True)
class ChartRecord:
    """A retained chart bundle, the unit of the generated corpus."""

    chart_id: str
    dataset_id: str
    chart_family: str
    image_ref: str
    final_code: PlotCode
    details: ChartDetails
    description: str = ""
    qa: tuple[QAItem, ...] = ()
    candidate_trace_ref: str = ""

    def __post_init__(self):
        object.__setattr__(self, "qa", tuple(self.qa))

    def to_dict(self) -> dict:
        return {
            "chart_id": self.chart_id,
            "dataset_id": self.dataset_id,
            "chart_family": self.chart_family,
            "image_ref": self.image_ref,
            "final_code": self.final_code.to_dict(),
            "details": self.details.to_dict(),
            "description": self.description,
            "qa": [q.to_dict() for q in self.qa],
            "candidate_trace_ref": self.candidate_trace_ref,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ChartRecord":
        return cls(
            chart_id=d["chart_id"],
            dataset_id=d["dataset_id"],
            chart_family=d["chart_family"],
            image_ref=d["image_ref"],
            final_code=PlotCode.from_dict(d["final_code"]),
            details=ChartDetails.from_dict(d["details"]),
            description=d.get("description", ""),
            qa=tuple(QAItem.from_dict(q) for q in d.get("qa", [])),
            candidate_trace_ref=d.get("candidate_trace_ref", ""),
        )


@dataclass(frozen=True)
class EvalVerdict:
    model_id: str
    chart_id: str
    qa_id: str
    model_answer: str
    correct: bool
    judge_rationale: str = ""

    def key(self) -> tuple[str, str, str]:
        return (self.model_id, self.chart_id, self.qa_id)

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "chart_id": self.chart_id,
            "qa_id": self.qa_id,
            "model_answer": self.model_answer,
            "correct": self.correct,
            "judge_rationale": self.judge_rationale,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalVerdict":
        return cls(
            model_id=d["model_id"],
            chart_id=d["chart_id"],
            qa_id=d["qa_id"],
            model_answer=d["model_answer"],
            correct=d["correct"],
            judge_rationale=d.get("judge_rationale", ""),
        )


@dataclass(frozen=True)
class Violation:
    """One violated invariant. Violations are data, not faults."""

    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


# --- chart family vocabulary ------------------------------------------------

# The corpus observed 24 families; the taxonomy is not enumerated anywhere
# authoritative, so this list is a documented superset guess and is config,
# not code. Everything here renders with a standard scientific Python stack.
DEFAULT_ALLOWED_FAMILIES: tuple[str, ...] = (
    "scatter",
    "scatter_3d",
    "bar",
    "stacked_bar",
    "grouped_bar",
    "line",
    "area",
    "histogram",
    "box",
    "violin",
    "density",
    "heatmap",
    "pie_donut",
    "radar",
    "parallel_coordinates",
    "set_composition",
    "bubble",
    "hexbin",
    "strip",
    "swarm",
    "ecdf",
    "regression",
    "pair_plot",
    "treemap",
)

DEFAULT_FAMILY_SYNONYMS: dict[str, str] = {
    "scatter_plot": "scatter",
    "scatterplot": "scatter",
    "3d_scatter": "scatter_3d",
    "3_d_scatter": "scatter_3d",
    "scatter_3_d": "scatter_3d",
    "bar_chart": "bar",
    "bar_plot": "bar",
    "barplot": "bar",
    "barchart": "bar",
    "column": "bar",
    "line_chart": "line",
    "line_plot": "line",
    "lineplot": "line",
    "area_chart": "area",
    "stacked_area": "area",
    "hist": "histogram",
    "box_plot": "box",
    "boxplot": "box",
    "violin_plot": "violin",
    "violinplot": "violin",
    "kde": "density",
    "density_plot": "density",
    "heat_map": "heatmap",
    "correlation_heatmap": "heatmap",
    "pie": "pie_donut",
    "donut": "pie_donut",
    "pie_chart": "pie_donut",
    "donut_chart": "pie_donut",
    "radar_chart": "radar",
    "spider": "radar",
    "spider_chart": "radar",
    "parallel_coordinate": "parallel_coordinates",
    "parallel_coordinates_plot": "parallel_coordinates",
    "venn": "set_composition",
    "upset": "set_composition",
    "venn_diagram": "set_composition",
    "bubble_chart": "bubble",
    "bubble_plot": "bubble",
    "hexbin_plot": "hexbin",
    "strip_plot": "strip",
    "stripplot": "strip",
    "swarm_plot": "swarm",
    "swarmplot": "swarm",
    "ecdf_plot": "ecdf",
    "cumulative_distribution": "ecdf",
    "regression_plot": "regression",
    "regplot": "regression",
    "pairplot": "pair_plot",
    "scatter_matrix": "pair_plot",
    "tree_map": "treemap",
}

_SEPARATOR_RE = re.compile(r"[\s/\-]+")


def normalize_chart_family(
    label: str, synonyms: Mapping[str, str] | None = None
) -> str:
    """Canonicalize a free-text chart family label.

    Lowercases, trims, collapses spaces/hyphens/slashes to single underscores,
    then applies the synonym table. The result is canonical but not
    necessarily *allowed*; membership is checked against the configured
    vocabulary by callers (see :func:`validate_proposal_families`).
    """
    if not label or not label.strip():
        raise ValidationError("chart family label is empty")
    slug = _SEPARATOR_RE.sub("_", label.strip().lower())
    slug = re.sub(r"_+", "_", slug).strip("_")
    if not slug:
        raise ValidationError(f"chart family label has no content: {label!r}")
    table = DEFAULT_FAMILY_SYNONYMS if synonyms is None else synonyms
    return table.get(slug, slug)


# --- question type parsing ----------------------------------------------------

_QTYPE_ALIASES: dict[str, QuestionType] = {}
for _qt in QuestionType:
    _QTYPE_ALIASES[_qt.value] = _qt
    _QTYPE_ALIASES[_qt.value.replace("_", " ")] = _qt


def parse_question_type(
    text: str, extra_aliases: Mapping[str, QuestionType] | None = None
) -> QuestionType:
    """Map a label to one of the five question types.

    Matching is case-insensitive over the exact enum values and their spaced
    forms; there is no fuzzy matching, so e.g. "trend" fails unless an alias
    for it is configured explicitly.
    """
    key = text.strip().lower()
    if extra_aliases:
        for alias, qt in extra_aliases.items():
            if key == alias.strip().lower():
                return qt
    try:
        return _QTYPE_ALIASES[key]
    except KeyError:
        raise QuestionTypeParseError(text) from None


def parse_difficulty(text: str) -> Difficulty:
    try:
        return Difficulty(text.strip().lower())
    except ValueError:
        raise ValidationError(f"unrecognized difficulty label: {text!r}") from None


# --- record validation --------------------------------------------------------


def _derived_names(details: ChartDetails) -> set[str]:
    # A variable counts as derived when its name is mentioned by some
    # transformation string, e.g. "log_y" in "log_y = log(y)".
    out: set[str] = set()
    for var in details.variables:
        if any(var in t for t in details.transformations):
            out.add(var)
    return out


def validate_chart_record(
    record: ChartRecord,
    schema: Sequence[FeatureField],
    qa_mix: tuple[int, int, int] = (7, 6, 7),
    qa_total_band: tuple[int, int] | None = None,
    qa_mix_tolerance: int = 0,
    allowed_families: Sequence[str] | None = None,
) -> list[Violation]:
    """Check a retained chart bundle against the corpus invariants.

    Returns the list of violated invariants; an empty list means valid. The
    difficulty-mix check is strict by default (exactly the 7/6/7 target);
    pass the annotator's acceptance band and per-difficulty tolerance to
    validate at annotation-time laxity instead.
    """
    violations: list[Violation] = []
    names = {f.raw_name for f in schema}
    derived = _derived_names(record.details)

    for var in record.details.variables:
        if var not in names and var not in derived:
            violations.append(
                Violation(
                    "unknown_variable",
                    f"details variable {var!r} is neither a schema feature nor a "
                    "derived name listed in transformations",
                )
            )

    if record.details.row_count_used < 0:
        violations.append(Violation("row_count", "row_count_used must be >= 0"))

    if not record.description.strip():
        violations.append(Violation("empty_description", "description is empty"))
    if not record.image_ref:
        violations.append(Violation("missing_image", "image_ref is empty"))
    if not record.final_code.source_text.strip():
        violations.append(Violation("empty_code", "final code is empty"))

    if allowed_families is not None and record.chart_family not in allowed_families:
        violations.append(
            Violation(
                "unknown_family",
                f"chart_family {record.chart_family!r} is not in the allowed vocabulary",
            )
        )

    counts = {d: 0 for d in Difficulty}
    for item in record.qa:
        counts[item.difficulty] += 1
    observed = (
        counts[Difficulty.EASY],
        counts[Difficulty.MEDIUM],
        counts[Difficulty.HARD],
    )
    total = sum(observed)
    band = qa_total_band if qa_total_band is not None else (sum(qa_mix), sum(qa_mix))
    lo, hi = band
    mix_ok = total >= lo and total <= hi and all(
        abs(o - t) <= qa_mix_tolerance for o, t in zip(observed, qa_mix)
    )
    if not mix_ok:
        violations.append(
            Violation(
                "difficulty_mix",
                f"observed easy/medium/hard counts {observed} (total {total}) "
                f"miss the {qa_mix} target (band {band}, "
                f"per-difficulty tolerance {qa_mix_tolerance})",
            )
        )

    seen_questions: set[str] = set()
    for item in record.qa:
        if item.qtype is None:
            violations.append(
                Violation("unlabeled_question", f"qa {item.qa_id} has no question type")
            )
        if item.question in seen_questions:
            violations.append(
                Violation(
                    "duplicate_question", f"duplicate question text: {item.question!r}"
                )
            )
        seen_questions.add(item.question)

    return violations
