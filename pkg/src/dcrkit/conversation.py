"""Conversation builders shared by synthesis and the inference pipeline."""

from __future__ import annotations

from dcrkit.backend import ChatMessage, ImageRef
from dcrkit.core import Sample
from dcrkit.structio import IMAGE_MARKER, PromptBook, TemplateId


def user_turn(rendered: str, image_ref: str | None, *, image_first: bool = False) -> ChatMessage:
    """Split a rendered prompt at the ``<image>`` marker into content parts.

    Without a marker the image (if any) is prepended when ``image_first``.
    Without an image the marker line is dropped.
    """
    if IMAGE_MARKER in rendered:
        before, after = rendered.split(IMAGE_MARKER, 1)
        if image_ref is None:
            text = (before.rstrip("\n") + "\n" + after.lstrip("\n")).strip("\n")
            return ChatMessage.user(text)
        parts = [p for p in (before, ImageRef(image_ref), after) if p != ""]
        return ChatMessage.user(*parts)
    if image_ref is not None and image_first:
        return ChatMessage.user(ImageRef(image_ref), rendered)
    return ChatMessage.user(rendered)


def draft_messages(book: PromptBook, sample: Sample) -> list[ChatMessage]:
    return [user_turn(book.draft(sample), sample.image_ref)]


def critic_messages(book: PromptBook, sample: Sample, reasoning: str) -> list[ChatMessage]:
    rendered = book.render(TemplateId.CRITIC, sample, reasoning=reasoning)
    return [user_turn(rendered, sample.image_ref, image_first=True)]


def revise_messages(book: PromptBook, sample: Sample, previous: str, feedback: str) -> list[ChatMessage]:
    """Draft exchange followed by the revision request."""
    return [
        *draft_messages(book, sample),
        ChatMessage.assistant(previous),
        ChatMessage.user(book.render(TemplateId.REVISE, sample, feedback=feedback)),
    ]


def prompt_text(messages: list[ChatMessage]) -> list[dict]:
    """Serializable form of a request, written into batch files."""
    return [m.to_dict() for m in messages]
