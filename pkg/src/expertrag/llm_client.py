"""Policy interface, a remote chat-completions adapter and deterministic mocks."""

from __future__ import annotations

import logging
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence, runtime_checkable

import httpx

log = logging.getLogger(__name__)

FINISH_REASONS = ("stop", "length", "error")


class TransportError(RuntimeError):
    """A policy call failed (network, server, or exhausted mock script)."""


class ConfigurationError(ValueError):
    pass


class PromptError(KeyError):
    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class PolicyRequest:
    prompt: str
    temperature: float = 1.0
    max_tokens: int = 512
    logprobs_requested: bool = False
    # structured view of the prompt for policies that do not read text
    stage: str = "action"
    context: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


@dataclass(frozen=True)
class PolicyResponse:
    text: str
    token_logprobs: tuple[float, ...] | None = None
    finish_reason: str = "stop"
    # policy-private record of how the text was produced (used by the toy policy)
    trace: Any = None

    def __post_init__(self):
        if self.finish_reason not in FINISH_REASONS:
            raise ValueError(f"finish_reason must be one of {FINISH_REASONS}")
        if self.token_logprobs is not None:
            object.__setattr__(self, "token_logprobs", tuple(float(x) for x in self.token_logprobs))
            if any(x > 0 for x in self.token_logprobs):
                raise ValueError("token log-probabilities must be <= 0")


@runtime_checkable
class Policy(Protocol):
    def complete(self, request: PolicyRequest) -> PolicyResponse: ...


# --- prompts ---------------------------------------------------------------

_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


def placeholders(template: str) -> set[str]:
    return set(_PLACEHOLDER.findall(template))


def render_prompt(template: str, bindings: Mapping[str, Any]) -> str:
    """Substitute ``{name}`` placeholders in one pass.

    Values are inserted verbatim, so braces inside them are never treated as
    placeholders.
    """
    missing = sorted(placeholders(template) - set(bindings))
    if missing:
        raise PromptError(f"unbound placeholder {missing[0]!r} in prompt template")
    return _PLACEHOLDER.sub(lambda m: str(bindings[m.group(1)]), template)


# --- retries ---------------------------------------------------------------


def with_retries(
    call: Callable[[], PolicyResponse],
    retry_cap: int = 3,
    backoff_base: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
    retry_on: tuple[type[BaseException], ...] = (TransportError,),
) -> PolicyResponse:
    """Run ``call``, retrying transient failures up to ``retry_cap`` times.

    The wait before retry ``n`` (1-based) is ``backoff_base * 2**(n-1)``.
    """
    attempt = 0
    while True:
        try:
            return call()
        except retry_on as exc:
            if attempt >= retry_cap:
                raise TransportError(f"gave up after {attempt} retries: {exc}") from exc
            delay = backoff_base * (2**attempt)
            attempt += 1
            log.warning("policy call failed (%s); retry %d/%d in %.2fs", exc, attempt, retry_cap, delay)
            sleep(delay)


# --- mocks -----------------------------------------------------------------


class ScriptedPolicy:
    """Replays a fixed queue of emissions; raises once the queue is empty."""

    def __init__(self, outputs: Iterable[str | PolicyResponse]):
        self._queue = [o if isinstance(o, PolicyResponse) else PolicyResponse(o) for o in outputs]
        self._lock = threading.Lock()
        self.requests: list[PolicyRequest] = []

    def complete(self, request: PolicyRequest) -> PolicyResponse:
        with self._lock:
            self.requests.append(request)
            if not self._queue:
                raise TransportError("scripted policy exhausted")
            return self._queue.pop(0)

    @property
    def remaining(self) -> int:
        return len(self._queue)


class FunctionPolicy:
    """Adapts ``fn(request) -> str | PolicyResponse`` to the policy interface."""

    def __init__(self, fn: Callable[[PolicyRequest], str | PolicyResponse]):
        self.fn = fn

    def complete(self, request: PolicyRequest) -> PolicyResponse:
        out = self.fn(request)
        return out if isinstance(out, PolicyResponse) else PolicyResponse(out)


class FlakyPolicy:
    """Fails the first ``failures`` calls with TransportError, then delegates."""

    def __init__(self, inner: Policy, failures: int):
        self.inner = inner
        self.failures = failures
        self.calls = 0

    def complete(self, request: PolicyRequest) -> PolicyResponse:
        self.calls += 1
        if self.calls <= self.failures:
            raise TransportError(f"injected failure {self.calls}")
        return self.inner.complete(request)


class RetryingPolicy:
    def __init__(self, inner: Policy, retry_cap: int = 3, backoff_base: float = 0.5, sleep=time.sleep):
        self.inner = inner
        self.retry_cap = retry_cap
        self.backoff_base = backoff_base
        self.sleep = sleep

    def complete(self, request: PolicyRequest) -> PolicyResponse:
        return with_retries(lambda: self.inner.complete(request), self.retry_cap, self.backoff_base, self.sleep)


class SeededChoicePolicy:
    """Samples one of ``choices`` per call; greedy (first choice) at temperature 0."""

    def __init__(self, choices: Sequence[str], seed: int = 0):
        if not choices:
            raise ValueError("choices must be non-empty")
        self.choices = list(choices)
        self.rng = random.Random(seed)

    def complete(self, request: PolicyRequest) -> PolicyResponse:
        if request.temperature == 0:
            return PolicyResponse(self.choices[0])
        return PolicyResponse(self.rng.choice(self.choices))


# --- remote endpoint -------------------------------------------------------


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    api_key: str | None = None
    retry_cap: int = 3
    backoff_base: float = 0.5
    timeout: float = 60.0
    concurrency: int = 4

    @classmethod
    def from_env(cls, **overrides) -> EndpointConfig:
        """Read ``EXPERTRAG_API_BASE``/``_MODEL``/``_API_KEY`` (``OPENAI_*`` as fallback)."""
        env = os.environ
        base = env.get("EXPERTRAG_API_BASE") or env.get("OPENAI_API_BASE") or env.get("OPENAI_BASE_URL")
        model = env.get("EXPERTRAG_MODEL") or env.get("OPENAI_MODEL")
        key = env.get("EXPERTRAG_API_KEY") or env.get("OPENAI_API_KEY")
        values = {"base_url": base, "model": model, "api_key": key}
        values.update({k: v for k, v in overrides.items() if v is not None})
        if not values["base_url"]:
            raise ConfigurationError("endpoint URL not configured (set EXPERTRAG_API_BASE)")
        if not values["model"]:
            raise ConfigurationError("model not configured (set EXPERTRAG_MODEL)")
        return cls(**values)


_RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class RemotePolicy:
    """Policy backed by an OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(self, config: EndpointConfig, client: httpx.Client | None = None, sleep=time.sleep):
        self.config = config
        self.client = client or httpx.Client(timeout=config.timeout)
        self.sleep = sleep
        self._gate = threading.BoundedSemaphore(max(1, config.concurrency))

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        return headers

    def _post_once(self, request: PolicyRequest) -> PolicyResponse:
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.logprobs_requested:
            payload["logprobs"] = True
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        try:
            resp = self.client.post(url, json=payload, headers=self._headers())
        except httpx.HTTPError as exc:
            raise TransportError(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code in _RETRYABLE_STATUS:
            raise TransportError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ConfigurationError(f"endpoint rejected request: HTTP {resp.status_code} {resp.text[:200]}")
        return parse_chat_completion(resp.json())

    def complete(self, request: PolicyRequest) -> PolicyResponse:
        with self._gate:
            return with_retries(
                lambda: self._post_once(request), self.config.retry_cap, self.config.backoff_base, self.sleep
            )


def parse_chat_completion(body: Mapping) -> PolicyResponse:
    try:
        choice = body["choices"][0]
        text = choice["message"].get("content") or ""
    except (KeyError, IndexError, TypeError) as exc:
        raise TransportError(f"malformed completion payload: {exc!r}") from exc
    finish = choice.get("finish_reason") or "stop"
    if finish not in FINISH_REASONS:
        finish = "stop" if finish in ("tool_calls", "function_call", "eos") else "error"
    logprobs = None
    lp = choice.get("logprobs")
    if isinstance(lp, Mapping) and lp.get("content") is not None:
        logprobs = tuple(min(0.0, float(t["logprob"])) for t in lp["content"])
    return PolicyResponse(text, logprobs, finish)


def complete_many(policy: Policy, requests: Sequence[PolicyRequest], concurrency: int = 4) -> list[PolicyResponse]:
    """Issue requests with at most ``concurrency`` in flight; results keep input order."""
    if concurrency <= 1:
        return [policy.complete(r) for r in requests]
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        return list(pool.map(policy.complete, requests))
