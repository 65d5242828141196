"""Sandbox clients for executing generated plotting scripts.

Three clients honor one file protocol. A job directory ends up holding
``chart.png`` and ``details.json`` (written by the script) plus
``status.json`` (written by the client):

* :class:`ScriptedSandbox` -- canned outcomes for pipeline tests and dry
  runs; writes protocol-shaped files without executing anything.
* :class:`InProcessRunner` -- really executes the script inside this
  process; the reference stub for protocol-parity checks against the
  external runner.
* :class:`CommandSandbox` -- shells out to an external runner binary
  (``plot-runner --job job.json``), communicating only through files.

The ``status.json`` schema is identical across clients: status, exit_code,
stderr_tail, wall_time, versions, isolation_violations.
"""

from __future__ import annotations

import io
import json
import os
import socket
import subprocess
import sys
import threading
import time
import traceback
import types
from contextlib import redirect_stderr, redirect_stdout
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InfrastructureError, ValidationError
from .util import canonical_json, write_text_atomic

STDERR_TAIL_CHARS = 4000

# Smallest valid PNG (1x1 transparent); scripted renders write it so that
# every "ok" job directory looks protocol-complete.
TINY_PNG = bytes.fromhex(
    "89504e470d0a1a0a0000000d49484452000000010000000108060000001f15c489"
    "0000000d4944415478da63fcffff3f030005fe02fea35981840000000049454e44"
    "ae426082"
)


@dataclass(frozen=True)
class PlotJob:
    """One script-execution request; matches the runner's job.json schema."""

    job_id: str
    code_path: Path
    dataset_path: Path
    output_dir: Path
    wall_seconds: float = 60.0
    memory_mb: int = 1024
    allow_network: bool = False

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "code_path": str(self.code_path),
            "dataset_path": str(self.dataset_path),
            "output_dir": str(self.output_dir),
            "limits": {"wall_seconds": self.wall_seconds, "memory_mb": self.memory_mb},
            "allow_network": self.allow_network,
        }


@dataclass(frozen=True)
class JobOutcome:
    """Parsed contents of a finished job directory."""

    status: str  # ok | exec_error | timeout | missing_output
    exit_code: int | None = None
    stderr_tail: str = ""
    wall_time: float = 0.0
    image_path: Path | None = None
    details: dict | None = None
    isolation_violations: tuple[str, ...] = ()
    versions: dict = field(default_factory=dict)

    def status_dict(self) -> dict:
        return {
            "status": self.status,
            "exit_code": self.exit_code,
            "stderr_tail": self.stderr_tail,
            "wall_time": self.wall_time,
            "versions": dict(self.versions),
            "isolation_violations": list(self.isolation_violations),
        }


REQUIRED_DETAIL_KEYS = (
    "variables",
    "encodings",
    "transformations",
    "filters",
    "aggregations",
    "row_count_used",
)


def details_are_wellformed(value) -> bool:
    return (
        isinstance(value, dict)
        and "row_count_used" in value
        and isinstance(value.get("variables", []), list)
        and isinstance(value.get("encodings", {}), dict)
    )


def classify_outputs(output_dir: Path, exit_code: int) -> tuple[str, dict | None]:
    """Shared protocol rule: ok needs a zero exit, chart.png, and a
    well-formed details.json; a clean exit without them is missing_output."""
    if exit_code != 0:
        return "exec_error", None
    image = output_dir / "chart.png"
    details_path = output_dir / "details.json"
    if not image.is_file() or image.stat().st_size == 0:
        return "missing_output", None
    if not details_path.is_file():
        return "missing_output", None
    try:
        details = json.loads(details_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return "missing_output", None
    if not details_are_wellformed(details):
        return "missing_output", None
    return "ok", details


def runtime_versions() -> dict:
    """Plotting-stack versions for provenance in status.json."""
    from importlib import metadata

    versions = {"python": sys.version.split()[0]}
    for dist in ("matplotlib", "pandas", "numpy"):
        try:
            versions[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            versions[dist] = None
    return versions


def snapshot_tree(root: Path, exclude: Path) -> dict[str, int]:
    """Map of path -> size under ``root``, excluding the ``exclude`` subtree.

    Used to detect a script writing outside its output directory.
    """
    root = root.resolve()
    exclude = exclude.resolve()
    snap: dict[str, int] = {}
    for dirpath, dirnames, filenames in os.walk(root):
        here = Path(dirpath).resolve()
        if here == exclude or exclude in here.parents:
            dirnames[:] = []
            continue
        for fname in filenames:
            p = Path(dirpath) / fname
            try:
                snap[str(p)] = p.stat().st_size
            except OSError:
                pass
    return snap


def diff_snapshots(before: dict[str, int], after: dict[str, int]) -> list[str]:
    changed = []
    for path, size in after.items():
        if path not in before or before[path] != size:
            changed.append(path)
    return sorted(changed)


def write_status(output_dir: Path, outcome: JobOutcome) -> None:
    write_text_atomic(
        output_dir / "status.json", canonical_json(outcome.status_dict()) + "\n"
    )


def reset_output_dir(path: Path) -> None:
    """Honor the protocol's empty-at-start invariant, including when a
    crashed run left a partial job directory behind."""
    import shutil

    path = Path(path)
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)


class ScriptedSandbox:
    """Plays back canned job outcomes, writing protocol-shaped files.

    Each canned entry is consumed in order:
      ("ok", details_dict)
      ("exec_error", stderr_text)
      ("timeout",)
      ("missing_output",)
      ("infra", message)           -> raises InfrastructureError
    """

    def __init__(self, outcomes=()):
        self._outcomes = list(outcomes)
        self._lock = threading.Lock()
        self.jobs_run = 0

    def push(self, *outcomes) -> None:
        self._outcomes.extend(outcomes)

    def run_job(self, job: PlotJob) -> JobOutcome:
        with self._lock:
            if not self._outcomes:
                raise InfrastructureError(
                    f"scripted sandbox has no outcome for job {job.job_id}"
                )
            entry = self._outcomes.pop(0)
            self.jobs_run += 1
        kind = entry[0]
        out_dir = Path(job.output_dir)
        reset_output_dir(out_dir)
        if kind == "infra":
            raise InfrastructureError(entry[1])
        if kind == "ok":
            details = dict(entry[1])
            details.setdefault("transformations", [])
            details.setdefault("filters", [])
            details.setdefault("aggregations", [])
            (out_dir / "chart.png").write_bytes(TINY_PNG)
            write_text_atomic(out_dir / "details.json", canonical_json(details) + "\n")
            outcome = JobOutcome(
                status="ok",
                exit_code=0,
                wall_time=0.0,
                image_path=out_dir / "chart.png",
                details=details,
            )
        elif kind == "exec_error":
            outcome = JobOutcome(
                status="exec_error",
                exit_code=1,
                stderr_tail=str(entry[1])[-STDERR_TAIL_CHARS:],
                wall_time=0.0,
            )
        elif kind == "timeout":
            outcome = JobOutcome(
                status="timeout", exit_code=None, wall_time=job.wall_seconds
            )
        elif kind == "missing_output":
            outcome = JobOutcome(status="missing_output", exit_code=0, wall_time=0.0)
        else:
            raise ValidationError(f"unknown scripted outcome kind {kind!r}")
        write_status(out_dir, outcome)
        return outcome


class _DetailsShim(types.ModuleType):
    """In-process stand-in for the runner's chart_details helper module."""

    def __init__(self, output_dir: Path):
        super().__init__("chart_details")
        self._output_dir = output_dir
        self._written = False

    def record(
        self,
        variables,
        encodings,
        row_count_used,
        transformations=(),
        filters=(),
        aggregations=(),
    ):
        if self._written:
            print(
                "chart_details.record called more than once; overwriting details.json",
                file=sys.stderr,
            )
        payload = {
            "variables": list(variables),
            "encodings": dict(encodings),
            "transformations": list(transformations),
            "filters": list(filters),
            "aggregations": list(aggregations),
            "row_count_used": int(row_count_used),
        }
        write_text_atomic(
            self._output_dir / "details.json", canonical_json(payload) + "\n"
        )
        self._written = True


_EXEC_LOCK = threading.Lock()


class InProcessRunner:
    """Executes plot scripts inside the current process, one at a time.

    Honors the same file protocol and classification rules as the external
    runner. Wall limits are enforced by abandoning the worker thread, and
    memory limits are not enforced at all, so this client is for trusted
    fixture scripts (tests, dry runs, protocol parity), not hostile code.
    """

    def run_job(self, job: PlotJob) -> JobOutcome:
        code_path = Path(job.code_path)
        dataset_path = Path(job.dataset_path)
        out_dir = Path(job.output_dir)
        if not code_path.is_file():
            raise InfrastructureError(f"job {job.job_id}: code file missing")
        if not dataset_path.is_file():
            raise InfrastructureError(f"job {job.job_id}: dataset file missing")
        reset_output_dir(out_dir)

        source = code_path.read_text(encoding="utf-8")
        stderr_buf = io.StringIO()
        result: dict = {}

        with _EXEC_LOCK:
            snap_before = snapshot_tree(out_dir.parent, exclude=out_dir)
            old_cwd = os.getcwd()
            old_env = {
                k: os.environ.get(k)
                for k in ("CHART_DATASET_PATH", "CHART_OUTPUT_DIR", "MPLBACKEND")
            }
            shim = _DetailsShim(out_dir)
            old_module = sys.modules.get("chart_details")
            old_connect = socket.socket.connect

            def _blocked_connect(self_sock, *args, **kwargs):
                raise OSError("network access is disabled for plot jobs")

            os.chdir(out_dir)
            os.environ["CHART_DATASET_PATH"] = str(dataset_path)
            os.environ["CHART_OUTPUT_DIR"] = str(out_dir)
            os.environ["MPLBACKEND"] = "Agg"
            sys.modules["chart_details"] = shim
            if not job.allow_network:
                socket.socket.connect = _blocked_connect

            def worker():
                ns = {"__name__": "__main__", "__file__": str(code_path)}
                try:
                    with redirect_stderr(stderr_buf), redirect_stdout(io.StringIO()):
                        exec(compile(source, str(code_path), "exec"), ns)
                    result["exit_code"] = 0
                except SystemExit as exc:
                    result["exit_code"] = int(exc.code or 0)
                except BaseException:
                    stderr_buf.write(traceback.format_exc())
                    result["exit_code"] = 1

            t0 = time.monotonic()
            thread = threading.Thread(target=worker, daemon=True)
            thread.start()
            thread.join(timeout=job.wall_seconds)
            wall_time = time.monotonic() - t0
            timed_out = thread.is_alive()

            os.chdir(old_cwd)
            for key, value in old_env.items():
                if value is None:
                    os.environ.pop(key, None)
                else:
                    os.environ[key] = value
            if old_module is None:
                sys.modules.pop("chart_details", None)
            else:
                sys.modules["chart_details"] = old_module
            socket.socket.connect = old_connect
            snap_after = snapshot_tree(out_dir.parent, exclude=out_dir)

        violations = diff_snapshots(snap_before, snap_after)
        stderr_tail = stderr_buf.getvalue()[-STDERR_TAIL_CHARS:]
        if timed_out:
            outcome = JobOutcome(
                status="timeout",
                exit_code=None,
                stderr_tail=stderr_tail,
                wall_time=wall_time,
                isolation_violations=tuple(violations),
                versions=runtime_versions(),
            )
        else:
            status, details = classify_outputs(out_dir, result.get("exit_code", 1))
            outcome = JobOutcome(
                status=status,
                exit_code=result.get("exit_code", 1),
                stderr_tail=stderr_tail,
                wall_time=wall_time,
                image_path=out_dir / "chart.png" if status == "ok" else None,
                details=details,
                isolation_violations=tuple(violations),
                versions=runtime_versions(),
            )
        write_status(out_dir, outcome)
        return outcome


class CommandSandbox:
    """Talks to an external runner binary through the file protocol only."""

    def __init__(self, command: tuple[str, ...] = ("plot-runner",)):
        if not command:
            raise ValidationError("runner command must be nonempty")
        self._command = tuple(command)

    def run_job(self, job: PlotJob) -> JobOutcome:
        out_dir = Path(job.output_dir)
        reset_output_dir(out_dir)
        job_path = out_dir.parent / f"{job.job_id}.job.json"
        write_text_atomic(job_path, canonical_json(job.to_dict()) + "\n")
        try:
            proc = subprocess.run(
                [*self._command, "--job", str(job_path)],
                capture_output=True,
                text=True,
                timeout=job.wall_seconds + 60,
            )
        except FileNotFoundError as exc:
            raise InfrastructureError(
                f"runner command not found: {self._command[0]}"
            ) from exc
        except subprocess.TimeoutExpired as exc:
            raise InfrastructureError(
                f"runner did not return for job {job.job_id}"
            ) from exc

        status_path = out_dir / "status.json"
        if not status_path.is_file():
            raise InfrastructureError(
                f"runner wrote no status.json for job {job.job_id} "
                f"(exit {proc.returncode}): {proc.stderr[:300]}"
            )
        status = json.loads(status_path.read_text(encoding="utf-8"))
        details = None
        details_path = out_dir / "details.json"
        if status.get("status") == "ok" and details_path.is_file():
            details = json.loads(details_path.read_text(encoding="utf-8"))
        return JobOutcome(
            status=status["status"],
            exit_code=status.get("exit_code"),
            stderr_tail=status.get("stderr_tail", ""),
            wall_time=status.get("wall_time", 0.0),
            image_path=out_dir / "chart.png" if status.get("status") == "ok" else None,
            details=details,
            isolation_violations=tuple(status.get("isolation_violations", [])),
            versions=status.get("versions", {}),
        )
