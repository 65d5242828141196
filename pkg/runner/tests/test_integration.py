"""End-to-end: the generation pipeline rendering through the external
runner binary, communicating only via the job-file protocol."""

from __future__ import annotations

import json
import shutil

import pytest

from chartforge.gateway import Gateway, ScriptedBackend
from chartforge.pipeline import GenerateRun
from chartforge.sandbox import CommandSandbox
from chartforge.store import Workspace, corpus_stats
from chartforge.config import config_from_dict

from conftest import PNG_HEX

pytestmark = pytest.mark.skipif(
    shutil.which("plot-runner") is None, reason="plot-runner not installed"
)

REAL_SCRIPT_REPLY = f"""```python
import os

import chart_details

rows = open(os.environ["CHART_DATASET_PATH"]).read().splitlines()
with open("chart.png", "wb") as fh:
    fh.write(bytes.fromhex("{PNG_HEX}"))
chart_details.record(
    variables=["age"],
    encodings={{"x": "age"}},
    row_count_used=len(rows) - 1,
)
```"""


def test_generate_run_through_external_runner(tmp_path):
    ingest = tmp_path / "ingest"
    ds = ingest / "ages"
    ds.mkdir(parents=True)
    rows = ["age"] + [str(20 + i % 60) for i in range(250)]
    (ds / "data.csv").write_text("\n".join(rows) + "\n")
    (ds / "meta.json").write_text(
        json.dumps(
            {
                "name": "Ages",
                "description": "A single numeric column of ages, long enough "
                "to be clearly longer than the cleaned summary text.",
            }
        )
    )

    backend = ScriptedBackend.from_pairs(
        [
            (
                "## TASK: dataset screening",
                json.dumps({"keep": True, "clean_summary": "Ages of people."}),
                None,
            ),
            (
                "## TASK: feature label rewrite",
                json.dumps({"labels": [{"raw_name": "age", "display_label": "Age"}]}),
                None,
            ),
            (
                "## TASK: plot proposal",
                json.dumps(
                    {
                        "proposals": [
                            {
                                "chart_family": "histogram",
                                "features": ["age"],
                                "intent": "distribution of ages",
                            }
                        ]
                    }
                ),
                None,
            ),
            ("## TASK: plot code generation", REAL_SCRIPT_REPLY, None),
            (
                "## TASK: rendered chart check",
                json.dumps({"needs_correction": False, "problems": []}),
                None,
            ),
        ]
    )
    config = config_from_dict(
        {
            "pipeline": {
                "proposal_count": 1,
                "diversity_floor": 1,
                "seed": 3,
                "min_instances": 100,
            },
            "sandbox": {"runner_command": ["plot-runner"], "wall_seconds": 60},
        }
    )
    workspace = Workspace(tmp_path / "w")
    store = workspace.open_run("r1", deterministic=True)
    sandbox = CommandSandbox(config.sandbox.runner_command)
    summary = GenerateRun(store, config, Gateway(backend, backoff_base=0), sandbox, "r1").execute(
        ingest
    )
    assert summary.candidates_retained == 1
    chart_id = store.list_charts()[0]
    assert (store.chart_dir(chart_id) / "chart.png").stat().st_size > 0
    record = store.load_chart_record(chart_id)
    assert record.details.row_count_used == 250

    # The job directory holds the runner's protocol files.
    candidate_dir = store.candidate_dir(chart_id)
    status = json.loads((candidate_dir / "jobs" / "v1" / "status.json").read_text())
    assert status["status"] == "ok"
    assert status["versions"]["python"]

    stats = corpus_stats(store.run_dir, check_files=True)
    assert stats.n_charts == 1
    assert stats.orphans == ()
