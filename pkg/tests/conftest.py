"""Shared fixtures: demo datasets, scripted-backend builders, and a complete
dry-run fixture covering every pipeline stage."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from chartforge.config import Config, config_from_dict
from chartforge.gateway import Gateway, ModelEndpoint, ScriptedBackend
from chartforge.model import (
    ChartDetails,
    ChartProposal,
    DatasetContext,
    FeatureField,
    FeatureKind,
    PlotCode,
    QAItem,
    Difficulty,
    QuestionType,
)

ENDPOINT = ModelEndpoint(model_id="scripted")


@pytest.fixture
def endpoint():
    return ENDPOINT


def make_context(
    dataset_id="heart",
    name="Heart Study",
    n_instances=300,
    features=("age", "chol", "sex"),
    clean_summary="A clinical study of heart disease risk factors.",
):
    schema = tuple(
        FeatureField(
            raw_name=f,
            kind=FeatureKind.NUMERIC if f != "sex" else FeatureKind.CATEGORICAL,
        )
        for f in features
    )
    return DatasetContext(
        dataset_id=dataset_id,
        name=name,
        raw_description=(
            "This dataset was collected over several years at a clinic and "
            "contains anonymized measurements of cardiovascular health for a "
            "population level cohort of adults, including laboratory values."
        ),
        clean_summary=clean_summary,
        n_instances=n_instances,
        schema=schema,
        table_preview=(tuple(str(i) for i in range(len(features))),),
    )


@pytest.fixture
def context():
    return make_context()


@pytest.fixture
def proposal():
    return ChartProposal(
        proposal_id="prop1",
        chart_family="scatter",
        features=("age", "chol"),
        intent="Relationship between age and cholesterol",
    )


def make_details(variables=("age", "chol"), row_count=300, **kwargs):
    return ChartDetails(
        variables=tuple(variables),
        encodings={"x": variables[0], "y": variables[-1]},
        row_count_used=row_count,
        **kwargs,
    )


def details_dict(variables=("age", "chol"), row_count=300):
    return {
        "variables": list(variables),
        "encodings": {"x": variables[0], "y": variables[-1]},
        "transformations": [],
        "filters": [],
        "aggregations": [],
        "row_count_used": row_count,
    }


def make_qa_items(counts=(7, 6, 7), with_types=True):
    items = []
    k = 0
    qtypes = list(QuestionType)
    for difficulty, n in zip((Difficulty.EASY, Difficulty.MEDIUM, Difficulty.HARD), counts):
        for _ in range(n):
            items.append(
                QAItem(
                    qa_id=f"q{k:02d}",
                    question=f"Q{k}: what does the chart show at step {k}?",
                    answer=f"A{k}",
                    difficulty=difficulty,
                    qtype=qtypes[k % len(qtypes)] if with_types else None,
                )
            )
            k += 1
    return items


def make_record(qa=None, description="A scatter of age versus cholesterol."):
    from chartforge.model import ChartRecord

    return ChartRecord(
        chart_id="chart1",
        dataset_id="heart",
        chart_family="scatter",
        image_ref="charts/chart1/chart.png",
        final_code=PlotCode(version=1, source_text="import chart_details\n"),
        details=make_details(),
        description=description,
        qa=tuple(make_qa_items() if qa is None else qa),
        candidate_trace_ref="candidates/chart1",
    )


def qa_payload(counts=(7, 6, 7), start=0, prefix="What is point"):
    items = []
    k = start
    for difficulty, n in zip(("easy", "medium", "hard"), counts):
        for _ in range(n):
            items.append(
                {
                    "question": f"{prefix} {k} on the chart?",
                    "answer": f"value-{k}",
                    "difficulty": difficulty,
                }
            )
            k += 1
    return {"items": items}


def labels_payload(n, qtype_cycle=None):
    qtypes = qtype_cycle or [qt.value for qt in QuestionType]
    return {
        "labels": [{"index": i, "qtype": qtypes[i % len(qtypes)]} for i in range(n)]
    }


def scripted_gateway(pairs, **kwargs) -> tuple[Gateway, ScriptedBackend]:
    backend = ScriptedBackend.from_pairs(pairs)
    return Gateway(backend, backoff_base=0.0, **kwargs), backend


def write_dataset_dir(root: Path, name="heart", n_rows=300, n_cols=3, description=None):
    """Materialize an ingest-layout dataset directory."""
    ds = root / name
    ds.mkdir(parents=True, exist_ok=True)
    cols = [f"col{i}" if i else "age" for i in range(n_cols)]
    lines = [",".join(cols)]
    for r in range(n_rows):
        lines.append(",".join(str((r * 7 + c) % 100) for c in range(n_cols)))
    (ds / "data.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = {
        "name": name.replace("_", " ").title(),
        "description": description
        or (
            "A long-form description of this dataset explaining the population, "
            "collection protocol, and the meaning of every recorded column in "
            "enough prose to be clearly longer than any summary."
        ),
    }
    (ds / "meta.json").write_text(json.dumps(meta), encoding="utf-8")
    return ds


# --- full dry-run fixture -------------------------------------------------------


def pipeline_fixture_entries(
    proposals_per_dataset=2,
    verdict_plan=("pass", "pass"),
    qa_counts=(7, 6, 7),
):
    """Scripted-backend rules covering screen -> labels -> proposals ->
    codegen -> check -> describe -> QA -> label for any dataset.

    ``verdict_plan`` gives the checker verdict sequence per candidate, cycled
    across check calls.
    """
    families = ["scatter", "bar", "histogram", "box", "line", "heatmap"]
    proposals = [
        {
            "chart_family": families[i % len(families)],
            "features": ["age"],
            "intent": f"distribution sketch number {i}",
        }
        for i in range(proposals_per_dataset)
    ]
    entries = [
        {
            "match": "## TASK: dataset screening",
            "response": {"keep": True, "clean_summary": "Compact summary."},
            "times": None,
        },
        {
            "match": "## TASK: feature label rewrite",
            "response": {
                "labels": [
                    {"raw_name": "age", "display_label": "Age (years)"},
                    {"raw_name": "col1", "keep_as_is": True},
                    {"raw_name": "col2", "keep_as_is": True},
                ]
            },
            "times": None,
        },
        {
            "match": "## TASK: plot proposal",
            "response": {"proposals": proposals},
            "times": None,
        },
        {
            "match": "## TASK: plot code generation",
            "response": "```python\nimport chart_details\nchart_details.record("
            "variables=['age'], encodings={'x': 'age'}, row_count_used=250)\n```",
            "times": None,
        },
        {
            "match": "## TASK: plot code regeneration",
            "response": "```python\nimport chart_details\nchart_details.record("
            "variables=['age'], encodings={'x': 'age'}, row_count_used=250)\n"
            "# fixed\n```",
            "times": None,
        },
        {
            "match": "## TASK: chart description",
            "response": "A clean single-variable distribution chart.",
            "times": None,
        },
        {
            "match": "## TASK: chart QA generation",
            "response": qa_payload(qa_counts),
            "times": None,
        },
        {
            "match": "## TASK: question type labeling",
            "response": labels_payload(sum(qa_counts)),
            "times": None,
        },
    ]
    for verdict in verdict_plan:
        if verdict == "pass":
            response = {"needs_correction": False, "problems": []}
        else:
            response = {
                "needs_correction": True,
                "problems": [{"category": "overplotting", "note": "dense"}],
            }
        entries.append({"match": "## TASK: rendered chart check", "response": response})
    return entries


def eval_fixture_entries(answer="value-0"):
    return [
        {"match": "## TASK: chart question", "response": answer, "times": None},
        {
            "match": "## TASK: answer judging",
            "response": {"correct": True, "rationale": "matches reference"},
            "times": None,
        },
    ]


def sandbox_fixture_entries(n_ok, variables=("age",), row_count=250):
    return [
        {
            "kind": "ok",
            "details": {
                "variables": list(variables),
                "encodings": {"x": variables[0]},
                "row_count_used": row_count,
            },
        }
        for _ in range(n_ok)
    ]


def write_dry_run_fixture(
    path: Path,
    proposals_per_dataset=2,
    verdicts=("pass", "pass"),
    n_renders=2,
):
    fixture = {
        "llm": pipeline_fixture_entries(
            proposals_per_dataset=proposals_per_dataset, verdict_plan=verdicts
        )
        + eval_fixture_entries(),
        "sandbox": sandbox_fixture_entries(n_renders),
    }
    path.write_text(json.dumps(fixture, indent=2), encoding="utf-8")
    return path


def dry_run_config(seed=7, proposals=2, candidate_models=("model_a", "model_b")):
    return config_from_dict(
        {
            "endpoints": {
                "model_a": {"model_id": "model-a"},
                "model_b": {"model_id": "model-b"},
            },
            "pipeline": {
                "proposal_count": proposals,
                "diversity_floor": 2,
                "seed": seed,
                "min_instances": 100,
            },
            "eval": {
                "candidate_models": list(candidate_models),
                "bootstrap_resamples": 200,
                "bootstrap_seed": seed,
            },
        }
    )
