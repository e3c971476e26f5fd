"""Client for OpenAI-compatible chat-completions services."""

from __future__ import annotations

import base64
import logging
import mimetypes
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Sequence

import httpx

from dcrkit.backend.base import (
    BackendError,
    BackendSpec,
    BackendTimeout,
    ChatMessage,
    DecodeParams,
    HttpStatus,
    ImageRef,
    MalformedResponse,
)

log = logging.getLogger(__name__)

_RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}


def image_url(ref: str) -> str:
    """URIs pass through; existing local files become base64 data URIs."""
    if "://" in ref or ref.startswith("data:"):
        return ref
    path = Path(ref)
    if not path.is_file():
        return ref
    mime = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
    return f"data:{mime};base64,{base64.b64encode(path.read_bytes()).decode('ascii')}"


def wire_message(msg: ChatMessage) -> dict[str, Any]:
    content = []
    for part in msg.parts:
        if isinstance(part, ImageRef):
            content.append({"type": "image_url", "image_url": {"url": image_url(part.ref)}})
        else:
            content.append({"type": "text", "text": part.text})
    return {"role": msg.role.value, "content": content}


def build_payload(model: str, messages: Sequence[ChatMessage], params: DecodeParams, n: int) -> dict[str, Any]:
    payload: dict[str, Any] = {
        "model": model,
        "messages": [wire_message(m) for m in messages],
        "temperature": params.temperature,
        "max_tokens": params.max_new_tokens,
        "n": n,
    }
    if params.seed is not None:
        payload["seed"] = params.seed
    return payload


def backoff_delays(base: float, cap: float, retries: int) -> list[float]:
    """Nondecreasing exponential schedule capped at ``cap``."""
    return [min(cap, base * 2**i) for i in range(retries)]


class HttpBackend:
    def __init__(
        self,
        spec: BackendSpec,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.spec = spec
        headers = {"Content-Type": "application/json"}
        if spec.api_key_env:
            key = os.environ.get(spec.api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        # httpx honours HTTP(S)_PROXY / NO_PROXY from the environment by default
        self._client = httpx.Client(timeout=spec.timeout_s, headers=headers, transport=transport)
        self._url = spec.base_url.rstrip("/") + "/v1/chat/completions"
        self._slots = threading.BoundedSemaphore(spec.max_concurrency)
        self._sleep = sleep
        self._single_only = False

    def close(self) -> None:
        self._client.close()

    def _post(self, payload: dict[str, Any]) -> dict[str, Any]:
        delays = backoff_delays(self.spec.backoff_base_s, self.spec.backoff_cap_s, self.spec.max_retries)
        last: BackendError | None = None
        for attempt in range(self.spec.max_retries + 1):
            if attempt:
                self._sleep(delays[attempt - 1])
            try:
                with self._slots:
                    resp = self._client.post(self._url, json=payload)
            except httpx.TimeoutException as exc:
                last = BackendTimeout(f"timeout after {self.spec.timeout_s}s: {exc}")
                continue
            except httpx.TransportError as exc:
                last = BackendError(f"transport error: {exc}")
                continue
            if resp.status_code == 200:
                try:
                    return resp.json()
                except ValueError:
                    raise MalformedResponse("response body is not JSON") from None
            last = HttpStatus(resp.status_code, resp.text)
            if resp.status_code not in _RETRY_STATUS:
                break
            log.warning("attempt %d got HTTP %d", attempt + 1, resp.status_code)
        assert last is not None
        raise last

    @staticmethod
    def _contents(body: dict[str, Any]) -> list[str]:
        try:
            choices = body["choices"]
            out = [c["message"]["content"] for c in choices]
        except (KeyError, TypeError, IndexError):
            raise MalformedResponse("missing choices[i].message.content") from None
        if any(not isinstance(c, str) for c in out):
            raise MalformedResponse("non-string message content")
        return out

    def _single(self, messages: Sequence[ChatMessage], params: DecodeParams) -> str:
        return self._contents(self._post(build_payload(self.spec.model_name, messages, params, 1)))[0]

    def generate(self, messages: Sequence[ChatMessage], params: DecodeParams) -> list[str]:
        if not messages:
            raise ValueError("messages must be non-empty")
        if params.n == 1:
            return [self._single(messages, params)]
        if not self._single_only:
            try:
                out = self._contents(self._post(build_payload(self.spec.model_name, messages, params, params.n)))
            except HttpStatus as exc:
                if exc.code not in (400, 422):
                    raise
                log.info("service rejected n=%d; falling back to single-choice requests", params.n)
                self._single_only = True
            else:
                if len(out) >= params.n:
                    return out[: params.n]
                rest = self._fanout(messages, params, params.n - len(out))
                return out + rest
        return self._fanout(messages, params, params.n)

    def _fanout(self, messages: Sequence[ChatMessage], params: DecodeParams, count: int) -> list[str]:
        with ThreadPoolExecutor(max_workers=min(count, self.spec.max_concurrency)) as pool:
            return list(pool.map(lambda _: self._single(messages, params), range(count)))
