import base64
import json
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from visreflect.gateway import (
    FAIL,
    ChatMessage,
    ChatRequest,
    ChatResponse,
    GatewayError,
    HttpChatClient,
    RequestError,
    ScriptExhausted,
    ScriptedClient,
    TransportError,
    backoff_delays,
    mock_script,
    request_payload,
    script_from_json,
)


def req(*texts, image=None):
    msgs = [ChatMessage("user", t) for t in texts]
    if image:
        msgs[-1] = ChatMessage("user", texts[-1], image_ref=image)
    return ChatRequest("m", tuple(msgs))


def test_scripted_reply():
    r = mock_script(["X"]).complete(req("hi"))
    assert (r.text, r.finish_reason) == ("X", "stop")


def test_script_order_and_exhaustion():
    client = mock_script(["a", "b"])
    assert client.complete(req("1")).text == "a"
    assert client.complete(req("2")).text == "b"
    with pytest.raises(ScriptExhausted):
        client.complete(req("3"))
    with pytest.raises(ValueError):
        mock_script([])


def test_retry_then_success():
    delays = []
    client = mock_script([FAIL, FAIL, "ok"], max_attempts=3, sleep=delays.append)
    assert client.complete(req("q")).text == "ok"
    assert client.attempts_made == 3
    assert len(delays) == 2


def test_retry_budget_exhausted():
    client = mock_script([FAIL] * 5, max_attempts=3)
    with pytest.raises(TransportError):
        client.complete(req("q"))
    assert client.attempts_made == 3
    assert client.remaining == 2


def test_script_from_json():
    assert script_from_json(["a", {"fail": True}]) == ["a", FAIL]
    with pytest.raises(ValueError):
        script_from_json([3])


@given(st.integers(1, 12), st.floats(0.01, 2.0), st.floats(0.5, 30.0), st.integers(0, 10**6))
def test_backoff_non_decreasing(attempts, base, cap, seed):
    d = backoff_delays(attempts, base, cap, random.Random(seed))
    assert len(d) == attempts - 1
    assert all(b >= a for a, b in zip(d, d[1:]))
    assert all(x <= cap for x in d)


def test_message_validation():
    with pytest.raises(ValueError):
        ChatMessage("assistant", "x", image_ref="a.png")
    with pytest.raises(ValueError):
        ChatRequest("m", ())
    with pytest.raises(ValueError):
        ChatResponse("", "stop")


# --- HTTP ----------------------------------------------------------------------


def ok_body(text="hello"):
    return {
        "choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 3, "completion_tokens": 2},
    }


def http_client(handler, **kw):
    kw.setdefault("sleep", lambda _s: None)
    return HttpChatClient("http://llm.test/v1/", "qwq", "sk-test", transport=httpx.MockTransport(handler), **kw)


def test_http_success_and_payload():
    seen = {}

    def handler(request: httpx.Request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json=ok_body("X"))

    client = http_client(handler)
    r = client.complete(
        ChatRequest(
            "qwq",
            (ChatMessage("system", "s"), ChatMessage("user", "u1"), ChatMessage("assistant", "a"), ChatMessage("user", "u2")),
            temperature=0.2,
            max_tokens=77,
        )
    )
    assert r.text == "X" and r.usage.completion_tokens == 2
    assert seen["url"] == "http://llm.test/v1/chat/completions"
    assert seen["auth"] == "Bearer sk-test"
    body = seen["body"]
    assert [m["content"] for m in body["messages"]] == ["s", "u1", "a", "u2"]
    assert (body["model"], body["temperature"], body["max_tokens"]) == ("qwq", 0.2, 77)


@pytest.mark.parametrize("status", [429, 500, 503])
def test_http_retries_transient_status(status):
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(status) if len(calls) < 3 else httpx.Response(200, json=ok_body())

    assert http_client(handler).complete(req("q")).text == "hello"
    assert len(calls) == 3


def test_http_timeout_exhausts_budget():
    calls = []

    def handler(request):
        calls.append(1)
        raise httpx.ReadTimeout("slow", request=request)

    with pytest.raises(TransportError):
        http_client(handler, max_attempts=3).complete(req("q"))
    assert len(calls) == 3


def test_http_client_error_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(400, json={"error": {"message": "bad model"}})

    with pytest.raises(RequestError, match="bad model") as info:
        http_client(handler).complete(req("q"))
    assert info.value.status == 400
    assert len(calls) == 1


def test_image_url_and_base64(tmp_path):
    img = tmp_path / "pic.png"
    img.write_bytes(b"\x89PNGfake")
    r = req("describe", image=str(img))
    as_url = request_payload(r, "url")["messages"][0]["content"]
    assert as_url[0] == {"type": "image_url", "image_url": {"url": str(img)}}
    assert as_url[1] == {"type": "text", "text": "describe"}
    as_b64 = request_payload(r, "base64")["messages"][0]["content"][0]["image_url"]["url"]
    assert as_b64 == "data:image/png;base64," + base64.b64encode(b"\x89PNGfake").decode()
    remote = req("d", image="https://x.test/a.jpg")
    assert request_payload(remote, "base64")["messages"][0]["content"][0]["image_url"]["url"] == "https://x.test/a.jpg"


def test_from_env(monkeypatch):
    monkeypatch.delenv("REFLECT_LLM_API_KEY", raising=False)
    with pytest.raises(GatewayError):
        HttpChatClient.from_env("http://x", "m", "REFLECT_LLM_API_KEY")
    monkeypatch.setenv("REFLECT_LLM_API_KEY", "k")
    assert HttpChatClient.from_env("http://x", "m", "REFLECT_LLM_API_KEY").model == "m"


def test_concurrency_limit():
    in_flight = 0
    peak = 0
    lock = threading.Lock()

    class Slow(ScriptedClient):
        def _send(self, request):
            nonlocal in_flight, peak
            with lock:
                in_flight += 1
                peak = max(peak, in_flight)
            time.sleep(0.02)
            with lock:
                in_flight -= 1
            return super()._send(request)

    client = Slow(["x"] * 16, max_concurrency=2)
    with ThreadPoolExecutor(8) as pool:
        list(pool.map(lambda i: client.complete(req(str(i))), range(16)))
    assert peak <= 2
