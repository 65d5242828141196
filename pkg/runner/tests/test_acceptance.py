"""Acceptance criteria for the runner component, with one pass/fail line
each: the sandbox contract and real-vs-stub protocol parity."""

from __future__ import annotations

import json
import time
from contextlib import contextmanager

from plot_runner.runner import PlotJob, execute_plot_job

from conftest import (
    GOLDEN_JOBS,
    ESCAPE_SCRIPT,
    GOOD_MATPLOTLIB_SCRIPT,
    INFINITE_LOOP_SCRIPT,
    NO_DETAILS_SCRIPT,
    prepare_job_dir,
)
from test_parity import load, run_real, run_stub


@contextmanager
def criterion(number: int, name: str, budget_s: float):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"\nACCEPTANCE {number} ({name}): FAIL [{time.perf_counter() - t0:.2f}s]")
        raise
    elapsed = time.perf_counter() - t0
    print(f"\nACCEPTANCE {number} ({name}): PASS [{elapsed:.2f}s]")
    assert elapsed < budget_s


def execute(tmp_path, dataset_csv, name, script, **kwargs):
    code_path, out_dir = prepare_job_dir(tmp_path, name, script)
    job = PlotJob(
        job_id=name, code_path=code_path, dataset_path=dataset_csv,
        output_dir=out_dir, **kwargs,
    )
    return execute_plot_job(job), out_dir


def test_criterion_10_sandbox_contract(tmp_path, dataset_csv):
    with criterion(10, "sandbox contract", budget_s=180.0):
        status, out_dir = execute(
            tmp_path, dataset_csv, "good", GOOD_MATPLOTLIB_SCRIPT, wall_seconds=120
        )
        assert status.status == "ok"
        assert (out_dir / "chart.png").stat().st_size > 0
        details = json.loads((out_dir / "details.json").read_text())
        assert {
            "variables", "encodings", "transformations", "filters",
            "aggregations", "row_count_used",
        } <= set(details)

        wall = 3.0
        t0 = time.monotonic()
        status, _ = execute(
            tmp_path, dataset_csv, "spin", INFINITE_LOOP_SCRIPT, wall_seconds=wall
        )
        assert status.status == "timeout"
        assert time.monotonic() - t0 <= wall + 5.0

        status, _ = execute(tmp_path, dataset_csv, "escape", ESCAPE_SCRIPT)
        assert any(v.endswith("escape.txt") for v in status.isolation_violations)

        status, _ = execute(tmp_path, dataset_csv, "nodetails", NO_DETAILS_SCRIPT)
        assert status.status == "missing_output"


def test_criterion_11_protocol_parity(tmp_path, dataset_csv):
    with criterion(11, "protocol parity", budget_s=120.0):
        for name, (script, expected) in sorted(GOLDEN_JOBS.items()):
            real_dir = run_real(tmp_path, dataset_csv, name, script)
            stub_dir = run_stub(tmp_path, dataset_csv, name, script)
            real_status = load(real_dir / "status.json")
            stub_status = load(stub_dir / "status.json")
            assert set(real_status) == set(stub_status)
            assert real_status["status"] == stub_status["status"] == expected
            assert real_status["exit_code"] == stub_status["exit_code"]
            if (real_dir / "details.json").is_file():
                assert (real_dir / "details.json").read_bytes() == (
                    stub_dir / "details.json"
                ).read_bytes()
