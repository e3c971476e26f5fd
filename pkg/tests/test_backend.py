import base64
import threading

import httpx
import pytest

from conftest import completion
from dcrkit.backend import (
    BackendSpec,
    BackendTimeout,
    ChatMessage,
    DecodeParams,
    HttpBackend,
    HttpStatus,
    ImageRef,
    MalformedResponse,
    ScriptedBackend,
    ScriptExhausted,
    backoff_delays,
    generate,
    make_backend,
    request_key,
)
from dcrkit.core import ValidationError

P1 = DecodeParams()


def msgs(text="hi"):
    return [ChatMessage.user(text)]


def test_scripted_lookup_order():
    key = request_key(msgs("exact"))
    be = ScriptedBackend({
        "by_key": {key: ["by-key"]},
        "rules": [{"contains": "exact", "responses": ["rule"]}, {"contains": ["a", "b"], "responses": ["ab"]}],
        "default": ["d1", "d2"],
    })
    assert be.generate(msgs("exact"), P1) == ["by-key"]
    assert be.generate(msgs("exact"), P1) == ["rule"]
    assert be.generate(msgs("b then a"), P1) == ["ab"]
    assert be.generate(msgs("zzz"), P1) == ["d1"]
    assert be.generate(msgs("zzz"), P1) == ["d2"]
    with pytest.raises(ScriptExhausted):
        be.generate(msgs("zzz"), P1)
    assert len(be.calls) == 6


def test_scripted_cycle_and_n():
    be = ScriptedBackend({"default": ["x", "y"], "cycle": True})
    assert be.generate(msgs(), DecodeParams(n=5)) == ["x", "y", "x", "y", "x"]


def test_scripted_rule_scope():
    be = ScriptedBackend({"rules": [{"contains": "sys", "scope": "all", "responses": ["hit"]}], "default": ["miss"]})
    conv = [ChatMessage.system("sys"), ChatMessage.user("q")]
    assert be.generate(conv, P1) == ["hit"]
    be2 = ScriptedBackend({"rules": [{"contains": "sys", "responses": ["hit"]}], "default": ["miss"]})
    assert be2.generate(conv, P1) == ["miss"]


def test_scripted_responder_and_file(tmp_path):
    be = ScriptedBackend(responder=lambda m, p: [m[-1].text().upper()] * p.n)
    assert be.generate(msgs("abc"), DecodeParams(n=2)) == ["ABC", "ABC"]
    path = tmp_path / "s.json"
    path.write_text('{"default": ["from-file"]}')
    assert make_backend(BackendSpec("scripted", script=str(path))).generate(msgs(), P1) == ["from-file"]


def test_generate_enforces_count():
    class Short:
        def generate(self, messages, params):
            return ["only one"]

    with pytest.raises(MalformedResponse):
        generate(Short(), msgs(), DecodeParams(n=2))


def test_request_key_is_content_sensitive():
    assert request_key(msgs("a")) == request_key(msgs("a"))
    assert request_key(msgs("a")) != request_key([ChatMessage.user("a", ImageRef("x.png"))])


def test_images_only_on_user_messages():
    with pytest.raises(ValidationError):
        ChatMessage(ChatMessage.system("x").role, (ImageRef("a.png"),))


def test_backoff_schedule():
    assert backoff_delays(0.5, 3.0, 5) == [0.5, 1.0, 2.0, 3.0, 3.0]


def test_spec_validation():
    with pytest.raises(ValidationError):
        BackendSpec("http", base_url="localhost:8000")
    with pytest.raises(ValidationError):
        BackendSpec.from_dict({"kind": "scripted", "bogus": 1})


def spec(url, **kw):
    base = {"kind": "http", "base_url": url, "model_name": "proposal", "timeout_s": 2.0,
            "max_retries": 3, "backoff_base_s": 0.0, "backoff_cap_s": 0.0}
    return BackendSpec.from_dict({**base, **kw})


def test_http_payload_schema(stub_server, tmp_path, monkeypatch):
    img = tmp_path / "pic.png"
    img.write_bytes(b"\x89PNG fake")
    monkeypatch.setenv("TEST_KEY", "sekret")
    stub_server.queue.append((200, completion("a", "b")))
    be = HttpBackend(spec(stub_server.url, api_key_env="TEST_KEY"))
    conv = [ChatMessage.system("be terse"), ChatMessage.user(ImageRef(str(img)), "Text: hi")]
    assert be.generate(conv, DecodeParams(temperature=1.0, max_new_tokens=64, n=2)) == ["a", "b"]
    req = stub_server.requests[0]
    assert req["path"] == "/v1/chat/completions"
    assert req["headers"]["Authorization"] == "Bearer sekret"
    body = req["body"]
    assert body["model"] == "proposal" and body["n"] == 2 and body["max_tokens"] == 64
    assert body["temperature"] == 1.0
    assert body["messages"][0] == {"role": "system", "content": [{"type": "text", "text": "be terse"}]}
    user = body["messages"][1]
    assert user["role"] == "user"
    assert user["content"][0]["type"] == "image_url"
    url = user["content"][0]["image_url"]["url"]
    assert url.startswith("data:image/png;base64,")
    assert base64.b64decode(url.split(",", 1)[1]) == b"\x89PNG fake"
    assert user["content"][1] == {"type": "text", "text": "Text: hi"}


def test_http_remote_image_url_passes_through(stub_server):
    be = HttpBackend(spec(stub_server.url))
    be.generate([ChatMessage.user(ImageRef("https://x/y.jpg"), "t")], P1)
    assert stub_server.requests[0]["body"]["messages"][0]["content"][0]["image_url"]["url"] == "https://x/y.jpg"


def test_http_retries_then_succeeds(stub_server):
    stub_server.queue += [(500, {"error": "x"}), (500, {"error": "x"}), (200, completion("done"))]
    sleeps = []
    be = HttpBackend(spec(stub_server.url, backoff_base_s=0.25, backoff_cap_s=0.3), sleep=sleeps.append)
    assert be.generate(msgs(), P1) == ["done"]
    assert len(stub_server.requests) == 3
    assert sleeps == [0.25, 0.3]


def test_http_retries_stop_at_limit(stub_server):
    stub_server.default = (503, {"error": "busy"})
    be = HttpBackend(spec(stub_server.url, max_retries=2), sleep=lambda s: None)
    with pytest.raises(HttpStatus) as info:
        be.generate(msgs(), P1)
    assert info.value.code == 503
    assert len(stub_server.requests) == 3


def test_http_no_retry_on_client_error(stub_server):
    stub_server.default = (401, {"error": "no"})
    with pytest.raises(HttpStatus):
        HttpBackend(spec(stub_server.url)).generate(msgs(), P1)
    assert len(stub_server.requests) == 1


def test_http_falls_back_when_n_rejected(stub_server):
    def reply(body):
        return completion(f"single-{body['n']}")

    stub_server.queue.append((400, {"error": "n>1 unsupported"}))
    stub_server.default = (200, reply)
    be = HttpBackend(spec(stub_server.url))
    assert be.generate(msgs(), DecodeParams(n=3)) == ["single-1"] * 3
    assert [r["body"]["n"] for r in stub_server.requests] == [3, 1, 1, 1]
    be.generate(msgs(), DecodeParams(n=2))
    assert all(r["body"]["n"] == 1 for r in stub_server.requests[4:])


def test_http_malformed_body(stub_server):
    stub_server.default = (200, {"choices": [{"text": "legacy"}]})
    with pytest.raises(MalformedResponse):
        HttpBackend(spec(stub_server.url)).generate(msgs(), P1)


def test_http_timeout_is_retried():
    calls = []

    def handler(request):
        calls.append(request)
        raise httpx.ReadTimeout("slow", request=request)

    be = HttpBackend(spec("http://stub", max_retries=1), transport=httpx.MockTransport(handler), sleep=lambda s: None)
    with pytest.raises(BackendTimeout):
        be.generate(msgs(), P1)
    assert len(calls) == 2


def test_http_concurrency_limit():
    active, peak = [0], [0]
    lock = threading.Lock()
    gate = threading.Event()

    def handler(request):
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        gate.wait(0.05)
        with lock:
            active[0] -= 1
        return httpx.Response(200, json=completion("x"))

    be = HttpBackend(spec("http://stub", max_concurrency=2), transport=httpx.MockTransport(handler))
    threads = [threading.Thread(target=be.generate, args=(msgs(), P1)) for _ in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert peak[0] <= 2


def test_hashed_order_ignores_call_interleaving():
    script = {"default": [f"r{i}" for i in range(50)], "order": "hashed"}
    a, b = ScriptedBackend(script), ScriptedBackend(script)
    first = [a.generate(msgs(t), DecodeParams(n=3)) for t in ("x", "y", "x")]
    second = [b.generate(msgs(t), DecodeParams(n=3)) for t in ("y", "x", "x")]
    assert first[0] == second[1] and first[2] == second[2] and first[1] == second[0]
    assert first[0] != first[2]  # a repeated request draws fresh responses


def test_unknown_order_rejected():
    with pytest.raises(ValidationError):
        ScriptedBackend({"order": "random"})
