"""Prompt template registry.

Templates live as plain text files next to this module, one per file, with
{{slot}} placeholders. Keeping them as files rather than string constants
makes diffs reviewable and lets the CLI list and render them without
importing anything heavy.
"""

from __future__ import annotations

import re
from functools import lru_cache
from pathlib import Path
from typing import Mapping

from .errors import ConfigError

__all__ = ["list_templates", "load_template", "render", "template_slots"]

# Slot names are lowercase words; spaces are allowed because some templates
# use multi-word slot names.
_SLOT_RE = re.compile(r"\{\{([a-z0-9_ ]+)\}\}")

_PROMPT_DIR = Path(__file__).with_name("prompts")


def list_templates() -> list[str]:
    return sorted(p.stem for p in _PROMPT_DIR.glob("*.txt"))


@lru_cache(maxsize=None)
def load_template(template_id: str) -> str:
    path = _PROMPT_DIR / f"{template_id}.txt"
    if not path.exists():
        raise ConfigError(
            f"unknown prompt template {template_id!r}; available: {list_templates()}"
        )
    return path.read_text(encoding="utf-8")


def template_slots(template_id: str) -> list[str]:
    """Slot names in first-appearance order, deduplicated."""
    seen: list[str] = []
    for match in _SLOT_RE.finditer(load_template(template_id)):
        name = match.group(1)
        if name not in seen:
            seen.append(name)
    return seen


def render(template_id: str, values: Mapping[str, str]) -> str:
    """Fill every {{slot}} in the template from values.

    A slot with no value is an error; extra keys in values are ignored. The
    substitution is a single pass, so slot-like text inside a value is never
    re-expanded.
    """
    template = load_template(template_id)
    missing: list[str] = []

    def _sub(match: re.Match[str]) -> str:
        name = match.group(1)
        if name not in values:
            missing.append(name)
            return match.group(0)
        return str(values[name])

    out = _SLOT_RE.sub(_sub, template)
    if missing:
        raise ConfigError(
            f"template {template_id!r} is missing values for slots: {sorted(set(missing))}"
        )
    return out
