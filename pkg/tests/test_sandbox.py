"""Sandbox clients on the primary side: scripted playback and the
in-process runner honoring the file protocol."""

from __future__ import annotations

import json
import textwrap

import pytest

from chartforge.errors import InfrastructureError
from chartforge.sandbox import (
    CommandSandbox,
    InProcessRunner,
    PlotJob,
    ScriptedSandbox,
    TINY_PNG,
)
from conftest import details_dict

PNG_SCRIPT = textwrap.dedent(
    f"""\
    import chart_details

    with open("chart.png", "wb") as fh:
        fh.write(bytes.fromhex("{TINY_PNG.hex()}"))
    chart_details.record(
        variables=["age"], encodings={{"x": "age"}}, row_count_used=12
    )
    """
)


def make_job(tmp_path, script=None, name="j1", **kwargs):
    code = tmp_path / f"{name}.py"
    code.write_text(script or PNG_SCRIPT, encoding="utf-8")
    csv = tmp_path / "data.csv"
    if not csv.exists():
        csv.write_text("age\n1\n2\n")
    return PlotJob(
        job_id=name,
        code_path=code,
        dataset_path=csv,
        output_dir=tmp_path / name / "out",
        **kwargs,
    )


class TestScriptedSandbox:
    def test_ok_outcome_writes_protocol_files(self, tmp_path):
        sandbox = ScriptedSandbox([("ok", details_dict())])
        job = make_job(tmp_path)
        outcome = sandbox.run_job(job)
        assert outcome.status == "ok"
        assert (job.output_dir / "chart.png").read_bytes() == TINY_PNG
        assert json.loads((job.output_dir / "details.json").read_text())[
            "row_count_used"
        ] == 300
        status = json.loads((job.output_dir / "status.json").read_text())
        assert set(status) == {
            "status", "exit_code", "stderr_tail", "wall_time", "versions",
            "isolation_violations",
        }

    def test_exhausted_outcomes_is_infrastructure_error(self, tmp_path):
        sandbox = ScriptedSandbox()
        with pytest.raises(InfrastructureError):
            sandbox.run_job(make_job(tmp_path))


class TestInProcessRunner:
    def test_good_script(self, tmp_path):
        outcome = InProcessRunner().run_job(make_job(tmp_path))
        assert outcome.status == "ok"
        assert outcome.exit_code == 0
        assert outcome.details["row_count_used"] == 12
        assert outcome.image_path.read_bytes() == TINY_PNG

    def test_exception_is_exec_error(self, tmp_path):
        job = make_job(tmp_path, script="raise ValueError('nope')\n", name="boom")
        outcome = InProcessRunner().run_job(job)
        assert outcome.status == "exec_error"
        assert outcome.exit_code == 1
        assert "ValueError" in outcome.stderr_tail

    def test_exit_zero_without_outputs_is_missing_output(self, tmp_path):
        job = make_job(tmp_path, script="x = 1\n", name="noop")
        outcome = InProcessRunner().run_job(job)
        assert outcome.status == "missing_output"

    def test_sleep_script_times_out(self, tmp_path):
        job = make_job(
            tmp_path,
            script="import time\ntime.sleep(5)\n",
            name="sleepy",
            wall_seconds=0.3,
        )
        outcome = InProcessRunner().run_job(job)
        assert outcome.status == "timeout"
        assert outcome.exit_code is None

    def test_script_reads_dataset_via_env(self, tmp_path):
        script = textwrap.dedent(
            f"""\
            import os

            import chart_details

            rows = open(os.environ["CHART_DATASET_PATH"]).read().splitlines()
            with open("chart.png", "wb") as fh:
                fh.write(bytes.fromhex("{TINY_PNG.hex()}"))
            chart_details.record(
                variables=["age"], encodings={{"x": "age"}},
                row_count_used=len(rows) - 1,
            )
            """
        )
        outcome = InProcessRunner().run_job(make_job(tmp_path, script, name="envjob"))
        assert outcome.status == "ok"
        assert outcome.details["row_count_used"] == 2

    def test_escape_write_detected(self, tmp_path):
        script = 'open("../escaped.txt", "w").write("leak")\n' + PNG_SCRIPT
        outcome = InProcessRunner().run_job(make_job(tmp_path, script, name="escape"))
        assert outcome.status == "ok"
        assert any(v.endswith("escaped.txt") for v in outcome.isolation_violations)

    def test_environment_restored_after_job(self, tmp_path):
        import os
        import sys

        before_cwd = os.getcwd()
        InProcessRunner().run_job(make_job(tmp_path))
        assert os.getcwd() == before_cwd
        assert "chart_details" not in sys.modules
        assert "CHART_OUTPUT_DIR" not in os.environ


class TestCommandSandbox:
    def test_missing_binary_is_infrastructure_error(self, tmp_path):
        sandbox = CommandSandbox(("definitely-not-a-real-binary",))
        with pytest.raises(InfrastructureError):
            sandbox.run_job(make_job(tmp_path))
