"""Prompt templating and structured-output parsing."""

from dcrkit.structio.parsing import (
    BadNextAction,
    InvalidAnswer,
    MissingKey,
    NotJson,
    StepParseError,
    flatten_trajectory,
    format_reward,
    parse_answer_text,
    parse_critique,
    parse_reasoning,
    parse_role_step,
)
from dcrkit.structio.prompts import (
    IMAGE_MARKER,
    MissingPlaceholder,
    PromptBook,
    PromptTemplate,
    TemplateId,
    load_template,
    render_prompt,
)

__all__ = [
    "BadNextAction",
    "IMAGE_MARKER",
    "InvalidAnswer",
    "MissingKey",
    "MissingPlaceholder",
    "NotJson",
    "PromptBook",
    "PromptTemplate",
    "StepParseError",
    "TemplateId",
    "flatten_trajectory",
    "format_reward",
    "load_template",
    "parse_answer_text",
    "parse_critique",
    "parse_reasoning",
    "parse_role_step",
    "render_prompt",
]
