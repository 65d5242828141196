"""Execute one plot job in a resource-limited child process.

One job in, three files out: the script's ``chart.png`` and ``details.json``
plus the runner's ``status.json``. The child gets the dataset path and
output directory via environment variables, runs headless with the helper
shim on its PYTHONPATH, and is killed (whole process group) at the wall
limit. Runner-internal faults raise :class:`RunnerError` and are reported
distinctly from script faults.
"""

from __future__ import annotations

import json
import os
import resource
import signal
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

STDERR_TAIL_CHARS = 4000
SHIM_DIR = Path(__file__).parent / "shim"


class RunnerError(Exception):
    """The runner itself failed (bad job file, cannot spawn, dirty output
    dir); distinct from any script outcome."""


@dataclass(frozen=True)
class PlotJob:
    job_id: str
    code_path: Path
    dataset_path: Path
    output_dir: Path
    wall_seconds: float = 60.0
    memory_mb: int = 1024
    allow_network: bool = False

    @classmethod
    def from_file(cls, path: str | Path) -> "PlotJob":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise RunnerError(f"cannot read job file {path}: {exc}") from exc
        try:
            limits = raw.get("limits", {})
            return cls(
                job_id=raw["job_id"],
                code_path=Path(raw["code_path"]),
                dataset_path=Path(raw["dataset_path"]),
                output_dir=Path(raw["output_dir"]),
                wall_seconds=float(limits.get("wall_seconds", 60.0)),
                memory_mb=int(limits.get("memory_mb", 1024)),
                allow_network=bool(raw.get("allow_network", False)),
            )
        except KeyError as exc:
            raise RunnerError(f"job file {path} missing field {exc}") from exc

    def validate(self) -> None:
        if not self.code_path.is_file():
            raise RunnerError(f"code file not found: {self.code_path}")
        if not self.dataset_path.is_file():
            raise RunnerError(f"dataset file not found: {self.dataset_path}")
        if self.output_dir.exists() and any(self.output_dir.iterdir()):
            raise RunnerError(f"output dir not empty: {self.output_dir}")


@dataclass(frozen=True)
class JobStatus:
    status: str  # ok | exec_error | timeout | missing_output
    exit_code: int | None
    stderr_tail: str
    wall_time: float
    isolation_violations: tuple[str, ...] = ()
    versions: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "exit_code": self.exit_code,
            "stderr_tail": self.stderr_tail,
            "wall_time": self.wall_time,
            "versions": dict(self.versions),
            "isolation_violations": list(self.isolation_violations),
        }


def _stack_versions() -> dict:
    from importlib import metadata

    versions = {"python": sys.version.split()[0]}
    for dist in ("matplotlib", "pandas", "numpy"):
        try:
            versions[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            versions[dist] = None
    return versions


def _snapshot(root: Path, exclude: Path) -> dict[str, int]:
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


def _classify(output_dir: Path, exit_code: int) -> str:
    """ok needs a zero exit, a nonempty chart.png, and well-formed
    details.json; a clean exit without them is missing_output."""
    if exit_code != 0:
        return "exec_error"
    image = output_dir / "chart.png"
    details_path = output_dir / "details.json"
    if not image.is_file() or image.stat().st_size == 0 or not details_path.is_file():
        return "missing_output"
    try:
        details = json.loads(details_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return "missing_output"
    if not isinstance(details, dict) or "row_count_used" not in details:
        return "missing_output"
    if not isinstance(details.get("variables", []), list) or not isinstance(
        details.get("encodings", {}), dict
    ):
        return "missing_output"
    return "ok"


def _child_env(job: PlotJob) -> dict[str, str]:
    env = dict(os.environ)
    shim = str(SHIM_DIR)
    existing = env.get("PYTHONPATH", "")
    env["PYTHONPATH"] = shim + (os.pathsep + existing if existing else "")
    env["CHART_DATASET_PATH"] = str(job.dataset_path.resolve())
    env["CHART_OUTPUT_DIR"] = str(job.output_dir.resolve())
    env["CHART_ALLOW_NETWORK"] = "1" if job.allow_network else "0"
    env["MPLBACKEND"] = "Agg"
    return env


def _limits_preexec(memory_mb: int):
    def apply():
        os.setsid()
        limit = memory_mb * 1024 * 1024
        resource.setrlimit(resource.RLIMIT_AS, (limit, limit))

    return apply


def execute_plot_job(job: PlotJob) -> JobStatus:
    """Run the job to completion, write status.json, and return the status."""
    job.validate()
    job.output_dir.mkdir(parents=True, exist_ok=True)
    watch_root = job.output_dir.resolve().parent
    before = _snapshot(watch_root, exclude=job.output_dir)

    t0 = time.monotonic()
    try:
        proc = subprocess.Popen(
            [sys.executable, str(job.code_path.resolve())],
            cwd=job.output_dir,
            env=_child_env(job),
            stdout=subprocess.DEVNULL,
            stderr=subprocess.PIPE,
            text=True,
            preexec_fn=_limits_preexec(job.memory_mb),
        )
    except OSError as exc:
        raise RunnerError(f"cannot spawn interpreter: {exc}") from exc

    timed_out = False
    try:
        _, stderr = proc.communicate(timeout=job.wall_seconds)
        exit_code: int | None = proc.returncode
    except subprocess.TimeoutExpired:
        timed_out = True
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        _, stderr = proc.communicate()
        exit_code = None
    wall_time = time.monotonic() - t0

    after = _snapshot(watch_root, exclude=job.output_dir)
    # Job files live next to output_dir and belong to the caller, not the script.
    violations = sorted(
        path
        for path, size in after.items()
        if (path not in before or before[path] != size)
        and not path.endswith(".job.json")
    )

    stderr_tail = (stderr or "")[-STDERR_TAIL_CHARS:]
    if timed_out:
        status = "timeout"
    else:
        status = _classify(job.output_dir, exit_code)

    job_status = JobStatus(
        status=status,
        exit_code=exit_code,
        stderr_tail=stderr_tail,
        wall_time=wall_time,
        isolation_violations=tuple(violations),
        versions=_stack_versions(),
    )
    _write_status(job.output_dir, job_status)
    return job_status


def _write_status(output_dir: Path, status: JobStatus) -> None:
    text = json.dumps(
        status.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False
    )
    tmp = output_dir / ".status.json.tmp"
    tmp.write_text(text + "\n", encoding="utf-8")
    os.replace(tmp, output_dir / "status.json")
