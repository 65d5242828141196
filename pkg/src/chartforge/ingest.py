"""Dataset loading, size pre-filtering, LLM screening, and label rewrite.

A dataset on disk is one directory holding ``data.csv`` (RFC-4180, header
row) and ``meta.json`` (name, description, optional per-feature metadata).
Loading never calls a model; screening and label rewriting are each one
structured gateway call, in that order.
"""

from __future__ import annotations

import csv
import json
import logging
import random
import re
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path

from .config import PipelineConfig
from .errors import ContractViolation, IngestError
from .gateway import ChatRequest, Gateway, Message, ModelEndpoint
from .model import DatasetContext, FeatureField, FeatureKind
from .prompting import render, schema_block

logger = logging.getLogger(__name__)

SCREEN_REJECT_REASONS = (
    "identifiers",
    "opaque_codes",
    "poorly_described",
    "no_relationships",
    "other",
)

_SCREEN_SCHEMA = {
    "type": "object",
    "properties": {
        "keep": {"type": "boolean"},
        "clean_summary": {"type": "string"},
        "reject_reason": {"type": "string", "enum": list(SCREEN_REJECT_REASONS)},
        "note": {"type": "string"},
    },
    "required": ["keep"],
}

_LABELS_SCHEMA = {
    "type": "object",
    "properties": {
        "labels": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "raw_name": {"type": "string"},
                    "display_label": {"type": "string"},
                    "keep_as_is": {"type": "boolean"},
                },
                "required": ["raw_name"],
            },
        }
    },
    "required": ["labels"],
}

# Kind-inference knobs. Local heuristics; meta.json may override per feature.
NUMERIC_PARSE_RATE = 0.95
CATEGORICAL_MAX_DISTINCT = 20

_ID_NAME_RE = re.compile(r"(^id$|_id$|^index$|^identifier$)", re.IGNORECASE)


def _parses_numeric(value: str) -> bool:
    try:
        float(value)
        return True
    except ValueError:
        return False


def _parses_datetime(value: str) -> bool:
    try:
        datetime.fromisoformat(value)
        return True
    except ValueError:
        return False


def infer_kind(name: str, values: list[str]) -> FeatureKind:
    """Heuristic column typing: numeric parse rate, then distinct counts."""
    filled = [v for v in values if v.strip()]
    if not filled:
        return FeatureKind.UNKNOWN
    n = len(filled)
    if sum(_parses_numeric(v) for v in filled) / n >= NUMERIC_PARSE_RATE:
        if _ID_NAME_RE.search(name) and len(set(filled)) == n:
            return FeatureKind.IDENTIFIER
        return FeatureKind.NUMERIC
    if sum(_parses_datetime(v) for v in filled) / n >= NUMERIC_PARSE_RATE:
        return FeatureKind.DATETIME
    distinct = len(set(filled))
    if distinct <= CATEGORICAL_MAX_DISTINCT:
        return FeatureKind.CATEGORICAL
    if _ID_NAME_RE.search(name) and distinct == n:
        return FeatureKind.IDENTIFIER
    return FeatureKind.TEXT


def load_dataset(
    path: str | Path,
    preview_rows: int = 10,
    dataset_id: str | None = None,
) -> DatasetContext:
    """Load one dataset directory into a context. No model calls.

    Raises :class:`IngestError` for an unreadable table, missing metadata,
    or rows whose width disagrees with the header.
    """
    path = Path(path)
    table_path = path / "data.csv"
    meta_path = path / "meta.json"
    if not table_path.is_file():
        raise IngestError(f"{path}: data.csv not found")
    if not meta_path.is_file():
        raise IngestError(f"{path}: meta.json not found")

    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IngestError(f"{path}: meta.json is not valid JSON: {exc}") from exc
    name = meta.get("name")
    description = meta.get("description")
    if not name or not description:
        raise IngestError(f"{path}: meta.json must provide name and description")

    with open(table_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: data.csv is empty") from None
        rows: list[list[str]] = []
        for i, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise IngestError(
                    f"{path}: row {i} has {len(row)} cells, header has {len(header)}"
                )
            rows.append(row)

    feature_meta = meta.get("features", {})
    schema = []
    for col, raw_name in enumerate(header):
        fmeta = feature_meta.get(raw_name, {})
        kind_override = fmeta.get("kind")
        kind = (
            FeatureKind(kind_override)
            if kind_override
            else infer_kind(raw_name, [r[col] for r in rows])
        )
        schema.append(
            FeatureField(
                raw_name=raw_name,
                display_label=fmeta.get("label", raw_name),
                kind=kind,
                description=fmeta.get("description"),
            )
        )

    return DatasetContext(
        dataset_id=dataset_id or path.name,
        name=name,
        raw_description=description,
        n_instances=len(rows),
        schema=tuple(schema),
        table_preview=tuple(tuple(r) for r in rows[:preview_rows]),
        source_uri=meta.get("source_uri"),
    )


@dataclass(frozen=True)
class PrefilterDecision:
    keep: bool
    reason: str | None = None

    def to_dict(self) -> dict:
        return {"keep": self.keep, "reason": self.reason}


def prefilter(context: DatasetContext, config: PipelineConfig) -> PrefilterDecision:
    """Size gate: at least ``min_instances`` rows and at most ``max_features``
    columns, both bounds inclusive. Pure; no model involved."""
    if context.n_instances < config.min_instances:
        return PrefilterDecision(
            False,
            f"min_instances: n_instances={context.n_instances} < {config.min_instances}",
        )
    if context.n_features > config.max_features:
        return PrefilterDecision(
            False,
            f"max_features: n_features={context.n_features} > {config.max_features}",
        )
    return PrefilterDecision(True)


@dataclass(frozen=True)
class ScreenOutcome:
    keep: bool
    clean_summary: str = ""
    reject_reason: str | None = None
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "keep": self.keep,
            "clean_summary": self.clean_summary,
            "reject_reason": self.reject_reason,
            "note": self.note,
        }


def screen_dataset(
    context: DatasetContext,
    gateway: Gateway,
    endpoint: ModelEndpoint,
    config: PipelineConfig,
) -> ScreenOutcome:
    """One structured call deciding keep/reject and, on keep, rewriting the
    raw description into a shorter data-focused summary.

    The raw description is never mutated; the summary is additive.
    """
    prompt = render(
        "screen_dataset",
        name=context.name,
        n_instances=context.n_instances,
        n_features=context.n_features,
        schema_block=schema_block(context.schema),
        raw_description=context.raw_description,
    )
    payload = gateway.complete_structured(
        endpoint,
        ChatRequest(
            messages=(Message.user(prompt),),
            temperature=config.temperature_generation,
            max_output_tokens=config.max_output_tokens,
            response_schema=_SCREEN_SCHEMA,
        ),
    )
    if not payload["keep"]:
        reason = payload.get("reject_reason")
        if reason not in SCREEN_REJECT_REASONS:
            raise ContractViolation(
                f"{context.dataset_id}: screening rejected without a valid reason "
                f"category (got {reason!r})"
            )
        return ScreenOutcome(False, reject_reason=reason, note=payload.get("note", ""))

    summary = payload.get("clean_summary", "").strip()
    if not summary:
        raise ContractViolation(
            f"{context.dataset_id}: screening kept the dataset but returned an "
            "empty clean_summary"
        )
    if len(summary) >= len(context.raw_description):
        raise ContractViolation(
            f"{context.dataset_id}: clean_summary ({len(summary)} chars) is not "
            f"shorter than the raw description ({len(context.raw_description)} chars)"
        )
    return ScreenOutcome(True, clean_summary=summary)


def rewrite_feature_labels(
    context: DatasetContext,
    gateway: Gateway,
    endpoint: ModelEndpoint,
    config: PipelineConfig,
) -> DatasetContext:
    """Second structured call: per-feature display labels.

    The response must cover exactly the input feature list; features marked
    unconfident keep their raw names.
    """
    prompt = render(
        "rewrite_labels",
        name=context.name,
        clean_summary=context.clean_summary,
        schema_block=schema_block(context.schema),
    )
    payload = gateway.complete_structured(
        endpoint,
        ChatRequest(
            messages=(Message.user(prompt),),
            temperature=config.temperature_generation,
            max_output_tokens=config.max_output_tokens,
            response_schema=_LABELS_SCHEMA,
        ),
    )
    by_name = {}
    for entry in payload["labels"]:
        raw = entry["raw_name"]
        if raw in by_name:
            raise ContractViolation(
                f"{context.dataset_id}: label rewrite listed feature {raw!r} twice"
            )
        by_name[raw] = entry
    expected = set(context.feature_names())
    if set(by_name) != expected:
        missing = sorted(expected - set(by_name))
        extra = sorted(set(by_name) - expected)
        raise ContractViolation(
            f"{context.dataset_id}: label rewrite must cover the feature list "
            f"exactly (missing {missing}, extra {extra})"
        )

    new_schema = []
    for feat in context.schema:
        entry = by_name[feat.raw_name]
        label = (entry.get("display_label") or "").strip()
        if entry.get("keep_as_is") or not label:
            new_schema.append(replace(feat, display_label=feat.raw_name))
        else:
            new_schema.append(replace(feat, display_label=label))
    return context.with_schema(new_schema)


def discover_datasets(ingest_dir: str | Path) -> list[Path]:
    """Dataset directories under the ingest root, sorted by name."""
    root = Path(ingest_dir)
    if not root.is_dir():
        raise IngestError(f"ingest directory not found: {root}")
    return sorted(
        (p for p in root.iterdir() if p.is_dir() and (p / "data.csv").is_file()),
        key=lambda p: p.name,
    )


def sample_datasets(
    paths: list[Path], sample_size: int | None, seed: int | None
) -> list[Path]:
    """Uniform sample over the ingest directory with a seeded RNG; processing
    order stays name-sorted for reproducibility."""
    if sample_size is None or sample_size >= len(paths):
        return list(paths)
    rng = random.Random(seed)
    return sorted(rng.sample(paths, sample_size), key=lambda p: p.name)


def fetch_listing(listing: str | Path, dest_dir: str | Path) -> list[Path]:
    """Best-effort fetch helper: materialize the ingest layout from a listing.

    The listing is a JSON array of {name, description, csv_url | csv_path,
    source_uri?} entries, given as a local path or an http(s) URL. Entries
    that fail to download are skipped with a warning.
    """
    dest = Path(dest_dir)
    dest.mkdir(parents=True, exist_ok=True)
    listing_str = str(listing)
    if listing_str.startswith(("http://", "https://")):
        import requests

        entries = requests.get(listing_str, timeout=60).json()
    else:
        entries = json.loads(Path(listing).read_text(encoding="utf-8"))

    created = []
    for entry in entries:
        name = entry.get("name")
        if not name or not entry.get("description"):
            logger.warning("fetch: skipping listing entry without name/description")
            continue
        slug = re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")
        ds_dir = dest / slug
        try:
            if "csv_path" in entry:
                csv_text = Path(entry["csv_path"]).read_text(encoding="utf-8")
            else:
                import requests

                csv_text = requests.get(entry["csv_url"], timeout=120).text
        except Exception as exc:
            logger.warning("fetch: %s failed: %s", name, exc)
            continue
        ds_dir.mkdir(parents=True, exist_ok=True)
        (ds_dir / "data.csv").write_text(csv_text, encoding="utf-8")
        meta = {
            "name": name,
            "description": entry["description"],
            "source_uri": entry.get("source_uri"),
        }
        (ds_dir / "meta.json").write_text(
            json.dumps(meta, indent=2, ensure_ascii=False), encoding="utf-8"
        )
        created.append(ds_dir)
    return created
