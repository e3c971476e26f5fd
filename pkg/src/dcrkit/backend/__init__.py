"""Text-generation backends: scripted (tests) and HTTP (chat completions)."""

from __future__ import annotations

from typing import Sequence

from dcrkit.backend.base import (
    Backend,
    BackendError,
    BackendSpec,
    BackendTimeout,
    ChatMessage,
    DecodeParams,
    HttpStatus,
    ImageRef,
    MalformedResponse,
    Role,
    ScriptExhausted,
    Text,
    request_key,
)
from dcrkit.backend.http import HttpBackend, backoff_delays, build_payload
from dcrkit.backend.scripted import ScriptedBackend


def make_backend(spec: BackendSpec) -> Backend:
    if spec.kind == "scripted":
        return ScriptedBackend(spec.script)
    return HttpBackend(spec)


def generate(backend: Backend, messages: Sequence[ChatMessage], params: DecodeParams) -> list[str]:
    """Return exactly ``params.n`` completions for ``messages``."""
    out = backend.generate(messages, params)
    if len(out) != params.n:
        raise MalformedResponse(f"expected {params.n} completions, got {len(out)}")
    return out


__all__ = [
    "Backend",
    "BackendError",
    "BackendSpec",
    "BackendTimeout",
    "ChatMessage",
    "DecodeParams",
    "HttpBackend",
    "HttpStatus",
    "ImageRef",
    "MalformedResponse",
    "Role",
    "ScriptExhausted",
    "ScriptedBackend",
    "Text",
    "backoff_delays",
    "build_payload",
    "generate",
    "make_backend",
    "request_key",
]
