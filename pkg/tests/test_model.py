"""Domain type invariants, family normalization, qtype parsing, and record
validation."""

from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from chartforge.errors import QuestionTypeParseError, ValidationError
from chartforge.model import (
    CANDIDATE_TRANSITIONS,
    CandidateState,
    ChartCandidate,
    ChartDetails,
    ChartProposal,
    CheckerVerdict,
    DEFAULT_ALLOWED_FAMILIES,
    DEFAULT_FAMILY_SYNONYMS,
    Difficulty,
    FeatureField,
    ProblemCategory,
    QAItem,
    QuestionType,
    RenderResult,
    RenderStatus,
    normalize_chart_family,
    parse_question_type,
    validate_chart_record,
)
from conftest import make_context, make_details, make_qa_items, make_record


class TestNormalizeChartFamily:
    def test_scatter_plot(self):
        assert normalize_chart_family("Scatter Plot") == "scatter"

    def test_pie_donut(self):
        assert normalize_chart_family("Pie / Donut") == "pie_donut"

    def test_3d_scatter_synonym(self):
        assert normalize_chart_family("3-D scatter") == "scatter_3d"

    def test_empty_label_rejected(self):
        with pytest.raises(ValidationError):
            normalize_chart_family("   ")

    def test_separator_only_label_rejected(self):
        with pytest.raises(ValidationError):
            normalize_chart_family(" -/ ")

    def test_custom_synonym_table(self):
        assert normalize_chart_family("foo chart", {"foo_chart": "bar"}) == "bar"

    def test_shipped_synonyms_round_trip(self):
        # Every synonym target is canonical: in the allowed vocabulary and a
        # fixed point of normalization.
        for target in DEFAULT_FAMILY_SYNONYMS.values():
            assert target in DEFAULT_ALLOWED_FAMILIES
            assert normalize_chart_family(target) == target

    def test_vocabulary_spans_24_families(self):
        assert len(DEFAULT_ALLOWED_FAMILIES) == 24

    @given(st.text(min_size=1).filter(lambda s: s.strip()))
    def test_idempotent(self, label):
        try:
            once = normalize_chart_family(label)
        except ValidationError:
            return  # separator-only labels are rejected, consistently
        assert normalize_chart_family(once) == once


class TestParseQuestionType:
    def test_spaced_label(self):
        assert parse_question_type("Value Extraction") == QuestionType.VALUE_EXTRACTION

    def test_paper_label(self):
        assert parse_question_type("chart syntax") == QuestionType.CHART_SYNTAX

    def test_singular_trend_is_strict(self):
        with pytest.raises(QuestionTypeParseError):
            parse_question_type("trend")

    def test_configured_alias(self):
        assert (
            parse_question_type("trend", {"trend": QuestionType.TRENDS})
            == QuestionType.TRENDS
        )

    def test_all_enum_values(self):
        for qt in QuestionType:
            assert parse_question_type(qt.value) == qt
            assert parse_question_type(qt.value.replace("_", " ").upper()) == qt


class TestTypeInvariants:
    def test_feature_field_defaults_label(self):
        field = FeatureField(raw_name="trestbps")
        assert field.display_label == "trestbps"

    def test_schema_names_unique(self):
        with pytest.raises(ValidationError):
            make_context(features=("a", "a"))

    def test_ok_render_requires_image_and_details(self):
        with pytest.raises(ValidationError):
            RenderResult(status=RenderStatus.OK)

    def test_correction_verdict_requires_problems(self):
        with pytest.raises(ValidationError):
            CheckerVerdict(needs_correction=True, problems=())

    def test_verdict_pass_with_notes_is_legal(self):
        verdict = CheckerVerdict(
            needs_correction=False,
            problems=((ProblemCategory.CLUTTER, "minor"),),
        )
        assert not verdict.needs_correction

    def test_qa_item_nonempty(self):
        with pytest.raises(ValidationError):
            QAItem(qa_id="q", question=" ", answer="a", difficulty=Difficulty.EASY)

    def test_code_versions_strictly_increase(self):
        candidate = ChartCandidate(
            candidate_id="c",
            dataset_id="d",
            proposal=ChartProposal("p", "scatter", ("age",), "x"),
        )
        from chartforge.model import PlotCode

        candidate = candidate.add_code(PlotCode(1, "a"))
        with pytest.raises(ValidationError):
            candidate.add_code(PlotCode(3, "b"))

    def test_round_trip_serialization(self):
        record = make_record()
        from chartforge.model import ChartRecord

        assert ChartRecord.from_dict(record.to_dict()) == record

    def test_candidate_round_trip(self):
        candidate = ChartCandidate(
            candidate_id="c",
            dataset_id="d",
            proposal=ChartProposal("p", "scatter", ("age",), "x"),
        )
        assert ChartCandidate.from_dict(candidate.to_dict()) == candidate


_STATES = list(CandidateState)


class TestStateMachine:
    def test_legal_chain(self):
        candidate = ChartCandidate(
            candidate_id="c",
            dataset_id="d",
            proposal=ChartProposal("p", "scatter", ("age",), "x"),
        )
        for state in (
            CandidateState.CODED,
            CandidateState.RENDERED,
            CandidateState.CHECKING,
            CandidateState.NEEDS_FIX,
            CandidateState.CODED,
            CandidateState.RENDERED,
            CandidateState.CHECKING,
            CandidateState.RETAINED,
        ):
            candidate = candidate.advance(state)
        assert candidate.state is CandidateState.RETAINED

    @given(st.sampled_from(_STATES), st.sampled_from(_STATES))
    def test_only_listed_transitions_accepted(self, src, dst):
        candidate = ChartCandidate(
            candidate_id="c",
            dataset_id="d",
            proposal=ChartProposal("p", "scatter", ("age",), "x"),
            state=src,
        )
        if dst in CANDIDATE_TRANSITIONS[src]:
            assert candidate.advance(dst).state is dst
        else:
            with pytest.raises(ValidationError):
                candidate.advance(dst)

    def test_failed_only_from_coded_or_rendered(self):
        sources = [
            src
            for src, dsts in CANDIDATE_TRANSITIONS.items()
            if CandidateState.FAILED in dsts
        ]
        assert sorted(s.value for s in sources) == ["coded", "rendered"]


class TestValidateChartRecord:
    def test_valid_record_has_empty_report(self):
        record = make_record()
        assert validate_chart_record(record, make_context().schema) == []

    def test_unknown_variable_flagged(self):
        import dataclasses

        record = make_record()
        bad_details = make_details(variables=("age", "ghost"))
        record = dataclasses.replace(record, details=bad_details)
        report = validate_chart_record(record, make_context().schema)
        assert len(report) == 1
        assert report[0].code == "unknown_variable"
        assert "ghost" in report[0].message

    def test_derived_variable_allowed_via_transformations(self):
        import dataclasses

        details = ChartDetails(
            variables=("age", "log_chol"),
            encodings={"x": "age", "y": "log_chol"},
            transformations=("log_chol = log(chol)",),
            row_count_used=300,
        )
        record = dataclasses.replace(make_record(), details=details)
        assert validate_chart_record(record, make_context().schema) == []

    def test_difficulty_mix_violation_reports_counts(self):
        record = make_record(qa=make_qa_items(counts=(7, 6, 6)))
        report = validate_chart_record(record, make_context().schema)
        codes = [v.code for v in report]
        assert "difficulty_mix" in codes
        message = next(v.message for v in report if v.code == "difficulty_mix")
        assert "(7, 6, 6)" in message

    def test_annotator_tolerance_accepts_near_misses(self):
        record = make_record(qa=make_qa_items(counts=(6, 6, 6)))
        assert (
            validate_chart_record(
                record,
                make_context().schema,
                qa_total_band=(18, 22),
                qa_mix_tolerance=1,
            )
            == []
        )
        # Strict default flags the same record.
        assert [
            v.code for v in validate_chart_record(record, make_context().schema)
        ] == ["difficulty_mix"]

    def test_unlabeled_question_flagged(self):
        record = make_record(qa=make_qa_items(with_types=False))
        report = validate_chart_record(record, make_context().schema)
        assert all(v.code == "unlabeled_question" for v in report)
        assert len(report) == 20

    def test_empty_description_flagged(self):
        record = make_record(description="")
        codes = [v.code for v in validate_chart_record(record, make_context().schema)]
        assert codes == ["empty_description"]
