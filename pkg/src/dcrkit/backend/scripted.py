"""Deterministic scripted backend for tests and dry runs.

A script is a mapping (or a path to a JSON file holding one)::

    {
      "by_key":  {"<request_key>": ["resp", ...]},
      "rules":   [{"contains": "text" | ["a", "b"], "scope": "last" | "all",
                   "responses": ["resp", ...], "cycle": false}],
      "default": ["resp", ...],
      "cycle":   false,
      "order":   "sequential" | "hashed"
    }

Lookup order is content hash, then matching rules in order, then the
responder, then the default queue. Each queue hands out its responses in
order; a queue that cannot serve the request falls through to the next.

With ``"order": "hashed"`` every queue behaves as an endless pool and each
response is picked by hashing the request with the number of times that
exact request was seen before. Output then does not depend on thread
scheduling, which keeps concurrent batch runs byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import threading
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

from dcrkit.backend.base import ChatMessage, DecodeParams, ScriptExhausted, request_key
from dcrkit.core import ValidationError

Responder = Callable[[Sequence[ChatMessage], DecodeParams], "list[str] | str"]


class _Queue:
    def __init__(self, responses: Sequence[str], cycle: bool = False) -> None:
        self.responses = list(responses)
        self.cycle = cycle
        self.pos = 0

    def can_take(self, n: int, hashed: bool = False) -> bool:
        if hashed or self.cycle:
            return bool(self.responses)
        return self.pos + n <= len(self.responses)

    def pick(self, n: int, key: str, seen: int) -> list[str]:
        out = []
        for j in range(n):
            digest = hashlib.sha256(f"{key}:{seen}:{j}".encode()).digest()
            out.append(self.responses[int.from_bytes(digest[:8], "little") % len(self.responses)])
        return out

    def take(self, n: int, label: str) -> list[str]:
        out = []
        for _ in range(n):
            if self.pos >= len(self.responses):
                if not (self.cycle and self.responses):
                    raise ScriptExhausted(f"script queue {label!r} exhausted")
                self.pos = 0
            out.append(self.responses[self.pos])
            self.pos += 1
        return out


@dataclass
class _Rule:
    needles: tuple[str, ...]
    scope: str
    queue: _Queue

    def matches(self, messages: Sequence[ChatMessage]) -> bool:
        hay = messages[-1].text() if self.scope == "last" else "\n".join(m.text() for m in messages)
        return all(n in hay for n in self.needles)


class ScriptedBackend:
    def __init__(self, script: dict[str, Any] | str | Path | None = None, *, responder: Responder | None = None) -> None:
        if isinstance(script, (str, Path)):
            script = json.loads(Path(script).read_text(encoding="utf-8"))
        script = script or {}
        self._lock = threading.Lock()
        self._by_key = {k: _Queue(v) for k, v in script.get("by_key", {}).items()}
        self._rules = []
        for rule in script.get("rules", []):
            needles = rule["contains"]
            if isinstance(needles, str):
                needles = [needles]
            self._rules.append(
                _Rule(tuple(needles), rule.get("scope", "last"), _Queue(rule["responses"], rule.get("cycle", False)))
            )
        self._default = _Queue(script.get("default", []), script.get("cycle", False))
        self._responder = responder
        order = script.get("order", "sequential")
        if order not in ("sequential", "hashed"):
            raise ValidationError(f"unknown script order {order!r}")
        self._hashed = order == "hashed"
        self._seen: Counter[str] = Counter()
        self.calls: list[tuple[tuple[ChatMessage, ...], DecodeParams]] = []

    def generate(self, messages: Sequence[ChatMessage], params: DecodeParams) -> list[str]:
        if not messages:
            raise ValueError("messages must be non-empty")
        with self._lock:
            self.calls.append((tuple(messages), params))
            key = request_key(messages)
            seen = self._seen[key]
            self._seen[key] += 1

            def serve(queue: _Queue, label: str) -> list[str]:
                return queue.pick(params.n, key, seen) if self._hashed else queue.take(params.n, label)

            queue = self._by_key.get(key)
            if queue is not None and queue.can_take(params.n, self._hashed):
                return serve(queue, key[:12])
            for i, rule in enumerate(self._rules):
                if rule.queue.can_take(params.n, self._hashed) and rule.matches(messages):
                    return serve(rule.queue, f"rule {i}")
            if self._responder is not None:
                out = self._responder(messages, params)
                out = [out] * params.n if isinstance(out, str) else list(out)
                if len(out) != params.n:
                    raise ScriptExhausted(f"responder returned {len(out)} of {params.n} completions")
                return out
            if self._hashed and self._default.can_take(params.n, True):
                return serve(self._default, "default")
            return self._default.take(params.n, "default")
