"""Prompt templates stored as text resources, keyed by template id."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

from dcrkit.core import DcrError, Sample

IMAGE_MARKER = "<image>"
_PLACEHOLDER = re.compile(r"\{(text|reasoning|feedback)\}")


class MissingPlaceholder(DcrError, KeyError):
    pass


class TemplateId(enum.Enum):
    ROLLOUT_SYSTEM = "rollout_system"
    ROLLOUT_FOLLOWUP = "rollout_followup"
    ROLLOUT_QUESTION = "rollout_question"
    DRAFT = "draft"
    FIXED_DRAFT = "fixed_draft"
    GENERIC_DRAFT = "generic_draft"
    CRITIC = "critic"
    REVISE = "revise"


DRAFT_TEMPLATES = {
    "dynamic": TemplateId.DRAFT,
    "fixed": TemplateId.FIXED_DRAFT,
    "generic": TemplateId.GENERIC_DRAFT,
}


@dataclass(frozen=True)
class PromptTemplate:
    template_id: TemplateId
    body: str

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER.findall(self.body))


def load_template(template_id: TemplateId, prompt_dir: str | Path | None = None) -> PromptTemplate:
    """Load a template, preferring ``prompt_dir/<id>.txt`` when it exists."""
    name = f"{template_id.value}.txt"
    if prompt_dir is not None:
        override = Path(prompt_dir) / name
        if override.is_file():
            return PromptTemplate(template_id, override.read_text(encoding="utf-8"))
    body = resources.files("dcrkit.structio").joinpath("prompts", name).read_text(encoding="utf-8")
    return PromptTemplate(template_id, body)


def render_prompt(template: PromptTemplate, sample: Sample | None, context: Mapping[str, str]) -> str:
    """Substitute ``{text}``, ``{reasoning}`` and ``{feedback}``.

    ``{text}`` comes from the sample unless the context overrides it. Other
    braces in the body (the JSON example in the rollout prompt) are left alone.
    """
    values = dict(context)
    if sample is not None:
        values.setdefault("text", sample.text)
    missing = sorted(template.placeholders - values.keys())
    if missing:
        raise MissingPlaceholder(f"{template.template_id.value}: missing {', '.join(missing)}")
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], template.body).rstrip("\n")


class PromptBook:
    """All templates for one run, loaded once."""

    def __init__(self, prompt_dir: str | Path | None = None, draft_style: str = "dynamic") -> None:
        self._templates = {tid: load_template(tid, prompt_dir) for tid in TemplateId}
        self.draft_id = DRAFT_TEMPLATES[draft_style]

    def __getitem__(self, tid: TemplateId) -> PromptTemplate:
        return self._templates[tid]

    def render(self, tid: TemplateId, sample: Sample | None = None, **context: str) -> str:
        return render_prompt(self._templates[tid], sample, context)

    def draft(self, sample: Sample) -> str:
        return self.render(self.draft_id, sample)
