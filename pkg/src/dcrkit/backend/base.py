from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence
from urllib.parse import urlparse

from dcrkit.core import DcrError, ValidationError


class BackendError(DcrError):
    pass


class BackendTimeout(BackendError):
    pass


class HttpStatus(BackendError):
    def __init__(self, code: int, body: str = "") -> None:
        super().__init__(f"HTTP {code}: {body[:200]}")
        self.code = code


class ScriptExhausted(BackendError):
    pass


class MalformedResponse(BackendError):
    pass


class Role(enum.Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class Text:
    text: str


@dataclass(frozen=True)
class ImageRef:
    ref: str


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    parts: tuple[Text | ImageRef, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "parts", tuple(self.parts))
        if not self.parts:
            raise ValidationError("a chat message needs at least one part")
        if self.role is not Role.USER and any(isinstance(p, ImageRef) for p in self.parts):
            raise ValidationError("image parts are only allowed on user messages")

    @classmethod
    def system(cls, text: str) -> "ChatMessage":
        return cls(Role.SYSTEM, (Text(text),))

    @classmethod
    def user(cls, *parts: str | Text | ImageRef) -> "ChatMessage":
        return cls(Role.USER, tuple(Text(p) if isinstance(p, str) else p for p in parts))

    @classmethod
    def assistant(cls, text: str) -> "ChatMessage":
        return cls(Role.ASSISTANT, (Text(text),))

    def text(self) -> str:
        return "".join(p.text for p in self.parts if isinstance(p, Text))

    def to_dict(self) -> dict[str, Any]:
        """Engine-level serialization (image refs kept verbatim)."""
        parts = [
            {"type": "text", "text": p.text} if isinstance(p, Text) else {"type": "image", "ref": p.ref}
            for p in self.parts
        ]
        return {"role": self.role.value, "content": parts}


def request_key(messages: Sequence[ChatMessage]) -> str:
    """Content hash identifying a request; used by scripted backends."""
    blob = json.dumps([m.to_dict() for m in messages], sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = 0.0
    max_new_tokens: int = 512
    n: int = 1
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValidationError("temperature must be non-negative")
        if self.n < 1 or self.max_new_tokens < 1:
            raise ValidationError("n and max_new_tokens must be >= 1")


@dataclass(frozen=True)
class BackendSpec:
    """Either ``kind="scripted"`` with a script, or ``kind="http"``."""

    kind: str
    script: Any = None
    base_url: str = ""
    model_name: str = ""
    timeout_s: float = 60.0
    max_retries: int = 3
    backoff_base_s: float = 0.5
    backoff_cap_s: float = 8.0
    api_key_env: str | None = None
    max_concurrency: int = 8
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ("scripted", "http"):
            raise ValidationError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http":
            url = urlparse(self.base_url)
            if not (url.scheme in ("http", "https") and url.netloc):
                raise ValidationError(f"base_url must be an absolute URL: {self.base_url!r}")
            if self.timeout_s <= 0 or self.max_retries < 0:
                raise ValidationError("need timeout_s > 0 and max_retries >= 0")
        if self.max_concurrency < 1:
            raise ValidationError("max_concurrency must be >= 1")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BackendSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown backend keys: {sorted(unknown)}")
        return cls(**data)


class Backend(Protocol):
    def generate(self, messages: Sequence[ChatMessage], params: DecodeParams) -> list[str]: ...
