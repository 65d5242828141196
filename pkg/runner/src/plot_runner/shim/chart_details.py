"""Helper importable by generated plotting scripts.

Scripts call ``chart_details.record(...)`` once to describe what the final
chart actually used. The record lands as ``details.json`` in the job's
output directory (taken from the CHART_OUTPUT_DIR environment variable),
with exact snake_case keys; the optional list fields default to empty and
``row_count_used`` is required.
"""

import json
import os
import sys

_written = False


def record(
    variables,
    encodings,
    row_count_used,
    transformations=(),
    filters=(),
    aggregations=(),
):
    global _written
    if _written:
        print(
            "chart_details.record called more than once; overwriting details.json",
            file=sys.stderr,
        )
    out_dir = os.environ.get("CHART_OUTPUT_DIR", ".")
    payload = {
        "variables": list(variables),
        "encodings": dict(encodings),
        "transformations": list(transformations),
        "filters": list(filters),
        "aggregations": list(aggregations),
        "row_count_used": int(row_count_used),
    }
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    tmp = os.path.join(out_dir, ".details.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    os.replace(tmp, os.path.join(out_dir, "details.json"))
    _written = True
