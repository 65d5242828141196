"""Prompt template loading.

Templates live in a versioned directory (``prompts/v1``) and are rendered
with :class:`string.Template` so that JSON braces inside templates never
collide with substitution syntax. The wording is non-normative and may be
revised; code depends only on the placeholder names.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from string import Template

PROMPT_VERSION = "v1"

# The numeric-closeness instruction added to judge prompts for
# value-extraction questions.
NUMERIC_CLOSENESS_NOTE = (
    "This is a value-extraction question: accept numerically close answers "
    "when the difference is consistent with approximate visual reading of "
    "the chart.\n"
)


@lru_cache(maxsize=None)
def _template(template_name: str) -> Template:
    text = (
        resources.files("chartforge")
        .joinpath(f"prompts/{PROMPT_VERSION}/{template_name}.md")
        .read_text(encoding="utf-8")
    )
    return Template(text)


def render(template_name: str, /, **values) -> str:
    """Render a named template; unknown placeholders raise KeyError."""
    return _template(template_name).substitute(**values)


def schema_block(schema) -> str:
    lines = []
    for f in schema:
        desc = f" -- {f.description}" if f.description else ""
        label = f" (label: {f.display_label})" if f.display_label != f.raw_name else ""
        lines.append(f"- {f.raw_name} [{f.kind.value}]{label}{desc}")
    return "\n".join(lines)


def preview_block(preview) -> str:
    return "\n".join(", ".join(row) for row in preview)
