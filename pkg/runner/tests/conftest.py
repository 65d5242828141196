"""Golden job scripts shared by the contract and parity suites."""

from __future__ import annotations

from pathlib import Path

import pytest

# 1x1 transparent PNG, embedded so fast golden jobs skip matplotlib.
PNG_HEX = (
    "89504e470d0a1a0a0000000d49484452000000010000000108060000001f15c489"
    "0000000d4944415478da63fcffff3f030005fe02fea35981840000000049454e44"
    "ae426082"
)

GOOD_FAST_SCRIPT = f"""\
import chart_details

with open("chart.png", "wb") as fh:
    fh.write(bytes.fromhex("{PNG_HEX}"))
chart_details.record(
    variables=["age", "chol"],
    encodings={{"x": "age", "y": "chol"}},
    transformations=["log_chol = log(chol)"],
    row_count_used=300,
)
"""

GOOD_MATPLOTLIB_SCRIPT = """\
import os

import matplotlib.pyplot as plt
import pandas as pd

import chart_details

df = pd.read_csv(os.environ["CHART_DATASET_PATH"])
fig, ax = plt.subplots(figsize=(4, 3))
ax.scatter(df["age"], df["chol"], s=12, alpha=0.7)
ax.set_xlabel("age")
ax.set_ylabel("chol")
fig.tight_layout()
fig.savefig("chart.png", dpi=100)
chart_details.record(
    variables=["age", "chol"],
    encodings={"x": "age", "y": "chol"},
    row_count_used=len(df),
)
"""

CRASH_SCRIPT = """\
raise KeyError("missing column 'chol'")
"""

NO_DETAILS_SCRIPT = f"""\
with open("chart.png", "wb") as fh:
    fh.write(bytes.fromhex("{PNG_HEX}"))
"""

MISSING_ROWCOUNT_SCRIPT = """\
import chart_details
chart_details.record(variables=["age"], encodings={"x": "age"})
"""

ESCAPE_SCRIPT = f"""\
import chart_details

with open("../escape.txt", "w") as fh:
    fh.write("leaked")
with open("chart.png", "wb") as fh:
    fh.write(bytes.fromhex("{PNG_HEX}"))
chart_details.record(variables=["age"], encodings={{"x": "age"}}, row_count_used=10)
"""

INFINITE_LOOP_SCRIPT = """\
while True:
    pass
"""

GOLDEN_JOBS = {
    "good_fast": (GOOD_FAST_SCRIPT, "ok"),
    "crash": (CRASH_SCRIPT, "exec_error"),
    "no_details": (NO_DETAILS_SCRIPT, "missing_output"),
    "missing_rowcount": (MISSING_ROWCOUNT_SCRIPT, "exec_error"),
}


@pytest.fixture
def dataset_csv(tmp_path) -> Path:
    path = tmp_path / "data.csv"
    rows = ["age,chol"] + [f"{20 + i % 50},{150 + (i * 7) % 120}" for i in range(300)]
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return path


def prepare_job_dir(tmp_path: Path, name: str, script: str) -> tuple[Path, Path]:
    job_root = tmp_path / name
    job_root.mkdir(parents=True, exist_ok=True)
    code_path = job_root / "script.py"
    code_path.write_text(script, encoding="utf-8")
    out_dir = job_root / "out"
    return code_path, out_dir
