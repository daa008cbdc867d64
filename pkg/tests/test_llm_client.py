import json
import threading

import httpx
import pytest

from expertrag.llm_client import (
    ConfigurationError,
    EndpointConfig,
    FlakyPolicy,
    FunctionPolicy,
    PolicyRequest,
    PolicyResponse,
    PromptError,
    RemotePolicy,
    RetryingPolicy,
    ScriptedPolicy,
    SeededChoicePolicy,
    TransportError,
    complete_many,
    parse_chat_completion,
    render_prompt,
    with_retries,
)

REQ = PolicyRequest("hello")


def test_scripted_replay_then_error():
    p = ScriptedPolicy(["a", "b"])
    assert p.complete(REQ).text == "a"
    assert p.complete(REQ).text == "b"
    with pytest.raises(TransportError, match="exhausted"):
        p.complete(REQ)


def test_retry_after_two_failures():
    sleeps = []
    flaky = FlakyPolicy(ScriptedPolicy(["ok"]), failures=2)
    out = RetryingPolicy(flaky, retry_cap=3, backoff_base=0.5, sleep=sleeps.append).complete(REQ)
    assert out.text == "ok" and flaky.calls == 3
    assert sleeps == [0.5, 1.0]


def test_retries_exhausted():
    flaky = FlakyPolicy(ScriptedPolicy(["ok"]), failures=5)
    with pytest.raises(TransportError, match="gave up after 2"):
        RetryingPolicy(flaky, retry_cap=2, sleep=lambda s: None).complete(REQ)


def test_retry_consumes_at_most_one_success():
    inner = ScriptedPolicy(["first", "second"])
    out = RetryingPolicy(FlakyPolicy(inner, 1), sleep=lambda s: None).complete(REQ)
    assert out.text == "first" and inner.remaining == 1


def test_non_transport_errors_are_not_retried():
    calls = []

    def boom():
        calls.append(1)
        raise ValueError("bad")

    with pytest.raises(ValueError):
        with_retries(boom, sleep=lambda s: None)
    assert len(calls) == 1


def test_temperature_zero_is_deterministic():
    p = SeededChoicePolicy(["x", "y", "z"], seed=1)
    req = PolicyRequest("q", temperature=0.0)
    assert {p.complete(req).text for _ in range(10)} == {"x"}


def test_seeded_choice_reproducible():
    a = [SeededChoicePolicy(["x", "y", "z"], seed=7).complete(REQ).text for _ in range(1)]
    pa, pb = SeededChoicePolicy(["x", "y", "z"], 7), SeededChoicePolicy(["x", "y", "z"], 7)
    assert [pa.complete(REQ).text for _ in range(20)] == [pb.complete(REQ).text for _ in range(20)]
    assert a


def test_request_response_validation():
    with pytest.raises(ValueError):
        PolicyRequest("p", temperature=-0.1)
    with pytest.raises(ValueError):
        PolicyRequest("p", max_tokens=0)
    with pytest.raises(ValueError):
        PolicyResponse("t", (0.1,))
    with pytest.raises(ValueError):
        PolicyResponse("t", finish_reason="done")


def test_render_prompt():
    assert render_prompt("Q: {query}", {"query": "x"}) == "Q: x"
    with pytest.raises(PromptError, match="history"):
        render_prompt("{query} {history}", {"query": "x"})
    # values containing braces are inserted verbatim, never re-expanded
    assert render_prompt("{a}|{b}", {"a": "{b}", "b": "{"}) == "{b}|{"


def _remote(handler, **kw):
    cfg = EndpointConfig("http://llm.local/v1", "m", api_key="k", **kw)
    return RemotePolicy(cfg, httpx.Client(transport=httpx.MockTransport(handler)), sleep=lambda s: None)


def _completion(text, logprobs=None, finish="stop"):
    choice = {"message": {"role": "assistant", "content": text}, "finish_reason": finish}
    if logprobs is not None:
        choice["logprobs"] = {"content": [{"token": "t", "logprob": x} for x in logprobs]}
    return {"choices": [choice]}


def test_remote_wire_format():
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json=_completion("hi", [-0.5, -0.25]))

    out = _remote(handler).complete(PolicyRequest("prompt", 0.7, 32, logprobs_requested=True))
    assert out.text == "hi" and out.token_logprobs == (-0.5, -0.25)
    assert seen["url"] == "http://llm.local/v1/chat/completions" and seen["auth"] == "Bearer k"
    assert seen["body"]["messages"] == [{"role": "user", "content": "prompt"}]
    assert seen["body"]["temperature"] == 0.7 and seen["body"]["max_tokens"] == 32 and seen["body"]["logprobs"]


def test_remote_retries_transient_status():
    statuses = iter([503, 429, 200])

    def handler(request):
        s = next(statuses)
        return httpx.Response(s, json=_completion("ok")) if s == 200 else httpx.Response(s)

    assert _remote(handler).complete(REQ).text == "ok"


def test_remote_gives_up():
    with pytest.raises(TransportError):
        _remote(lambda r: httpx.Response(502), retry_cap=1).complete(REQ)


def test_remote_connection_error_is_transport():
    def handler(request):
        raise httpx.ConnectError("refused")

    with pytest.raises(TransportError):
        _remote(handler, retry_cap=0).complete(REQ)


def test_remote_client_error_is_configuration():
    with pytest.raises(ConfigurationError, match="401"):
        _remote(lambda r: httpx.Response(401, text="no key")).complete(REQ)


def test_parse_completion_edge_cases():
    assert parse_chat_completion(_completion("x", finish="length")).finish_reason == "length"
    assert parse_chat_completion(_completion("x", [0.0001])).token_logprobs == (0.0,)
    assert parse_chat_completion(_completion("x")).token_logprobs is None
    with pytest.raises(TransportError):
        parse_chat_completion({"choices": []})


def test_endpoint_from_env(monkeypatch):
    for v in ("EXPERTRAG_API_BASE", "OPENAI_API_BASE", "OPENAI_BASE_URL", "EXPERTRAG_MODEL", "OPENAI_MODEL"):
        monkeypatch.delenv(v, raising=False)
    with pytest.raises(ConfigurationError, match="EXPERTRAG_API_BASE"):
        EndpointConfig.from_env()
    monkeypatch.setenv("EXPERTRAG_API_BASE", "http://x")
    with pytest.raises(ConfigurationError, match="EXPERTRAG_MODEL"):
        EndpointConfig.from_env()
    monkeypatch.setenv("EXPERTRAG_MODEL", "m")
    assert EndpointConfig.from_env(retry_cap=5).retry_cap == 5


def test_remote_concurrency_is_bounded():
    active, peak = [0], [0]
    lock = threading.Lock()

    def handler(request):
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        threading.Event().wait(0.01)
        with lock:
            active[0] -= 1
        return httpx.Response(200, json=_completion("x"))

    policy = _remote(handler, concurrency=2)
    out = complete_many(policy, [PolicyRequest(str(i)) for i in range(8)], concurrency=8)
    assert len(out) == 8 and peak[0] <= 2


def test_complete_many_keeps_order():
    policy = FunctionPolicy(lambda r: r.prompt.upper())
    reqs = [PolicyRequest(c) for c in "abcdef"]
    assert [r.text for r in complete_many(policy, reqs, concurrency=3)] == list("ABCDEF")
