"""plot-runner CLI: one job per invocation.

Exit codes: 0 iff the job finished ok; 1 for any script-level failure
(exec_error, timeout, missing_output); 2 for runner-internal faults.
"""

from __future__ import annotations

import argparse
import sys

from .runner import PlotJob, RunnerError, execute_plot_job


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="plot-runner")
    parser.add_argument("--job", required=True, help="path to job.json")
    args = parser.parse_args(argv)
    try:
        job = PlotJob.from_file(args.job)
        status = execute_plot_job(job)
    except RunnerError as exc:
        print(f"runner error: {exc}", file=sys.stderr)
        return 2
    return 0 if status.status == "ok" else 1


if __name__ == "__main__":
    sys.exit(main())
