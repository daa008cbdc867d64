"""Stepwise rewards: format gating, sub-query similarity, routing, answer scoring.

The action reward is ``format * (alpha * ask + beta * route)``; the
observation reward is ``format * answer``, where ``answer`` is token recall for
intermediate observations and normalized exact match for final answers.
"""

from __future__ import annotations

import math
import re
import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import httpx
import numpy as np
import yaml

from .experts import ExpertKind, tokenize
from .llm_client import ConfigurationError, TransportError, with_retries
from .orchestrator import NoRetrieval, ReasoningStep, Search, parse_action, parse_answer


class SimilarityProvider(Protocol):
    def similarity(self, a: str, b: str) -> float: ...


class LexicalCosine:
    """Cosine similarity of term-frequency vectors."""

    name = "lexical"

    def similarity(self, a: str, b: str) -> float:
        ca, cb = Counter(tokenize(a)), Counter(tokenize(b))
        if not ca or not cb:
            return 0.0
        dot = sum(n * cb[t] for t, n in ca.items())
        na = sum(n * n for n in ca.values())
        nb = sum(n * n for n in cb.values())
        # integer product under one sqrt keeps self-similarity exactly 1.0
        return min(1.0, dot / math.sqrt(na * nb))


class EmbeddingSimilarity:
    """Cosine of embeddings from an OpenAI-compatible ``/embeddings`` endpoint, clamped to [0, 1]."""

    name = "remote"

    def __init__(self, base_url: str, model: str, api_key: str | None = None,
                 client: httpx.Client | None = None, retry_cap: int = 3, backoff_base: float = 0.5, sleep=None):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.client = client or httpx.Client(timeout=30.0)
        self.retry_cap = retry_cap
        self.backoff_base = backoff_base
        self.sleep = sleep

    @classmethod
    def from_env(cls, **kw) -> EmbeddingSimilarity:
        import os

        base = os.environ.get("EXPERTRAG_EMBED_BASE") or os.environ.get("EXPERTRAG_API_BASE")
        model = os.environ.get("EXPERTRAG_EMBED_MODEL")
        if not base or not model:
            raise ConfigurationError("set EXPERTRAG_EMBED_BASE and EXPERTRAG_EMBED_MODEL for the remote provider")
        return cls(base, model, os.environ.get("EXPERTRAG_API_KEY"), **kw)

    def _embed_once(self, texts: list[str]) -> np.ndarray:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self.client.post(f"{self.base_url}/embeddings", json={"model": self.model, "input": texts}, headers=headers)
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransportError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ConfigurationError(f"embedding endpoint rejected request: HTTP {resp.status_code}")
        data = sorted(resp.json()["data"], key=lambda d: d["index"])
        return np.array([d["embedding"] for d in data], dtype=float)

    def similarity(self, a: str, b: str) -> float:
        if not a.strip():
            return 0.0
        kwargs = {"sleep": self.sleep} if self.sleep else {}
        vecs = with_retries(lambda: self._embed_once([a, b]), self.retry_cap, self.backoff_base, **kwargs)
        denom = float(np.linalg.norm(vecs[0]) * np.linalg.norm(vecs[1]))
        if denom == 0.0:
            return 0.0
        return float(min(1.0, max(0.0, vecs[0] @ vecs[1] / denom)))


def make_provider(name: str) -> SimilarityProvider:
    if name == "lexical":
        return LexicalCosine()
    if name == "remote":
        return EmbeddingSimilarity.from_env()
    raise ConfigurationError(f"unknown similarity provider {name!r}")


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.5
    beta: float = 0.5
    similarity_provider: str = "lexical"
    # target for intermediate observations: the golden step's observation or the final gold answer
    intermediate_target: str = "golden_observation"

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if abs(self.alpha + self.beta - 1.0) > 1e-9:
            raise ValueError(f"alpha + beta must equal 1, got {self.alpha + self.beta}")
        if self.intermediate_target not in ("golden_observation", "gold_answer"):
            raise ValueError(f"unknown intermediate_target {self.intermediate_target!r}")

    def provider(self) -> SimilarityProvider:
        return make_provider(self.similarity_provider)


def load_reward_config(path: str | Path) -> RewardConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    data = data.get("rewards", data)
    known = {k: data[k] for k in ("alpha", "beta", "similarity_provider", "intermediate_target") if k in data}
    return RewardConfig(**known)


@dataclass(frozen=True)
class RewardBreakdown:
    format: int
    ask: float = 0.0
    route: int = 0
    answer: float = 0.0
    composed: float = 0.0


# --- components ------------------------------------------------------------


def format_reward(emission: str, kind: str = "action") -> int:
    """1 iff the emission follows the action grammar (``kind="action"``) or is a single answer block."""
    if kind == "action":
        return int(parse_action(emission)[2])
    if kind == "answer":
        return int(parse_answer(emission)[1])
    raise ValueError(f"kind must be 'action' or 'answer', got {kind!r}")


def query_similarity(candidate: str, golden: str, provider: SimilarityProvider | None = None) -> float:
    if not tokenize(candidate):
        return 0.0
    provider = provider or LexicalCosine()
    return float(provider.similarity(candidate, golden))


def route_reward(selected: ExpertKind | None, golden_selected: ExpertKind | None) -> int:
    """``None`` stands for a NULL (no-retrieval) selection."""
    return int(selected == golden_selected)


def action_reward(
    step: ReasoningStep,
    golden_step: ReasoningStep,
    config: RewardConfig = RewardConfig(),
    provider: SimilarityProvider | None = None,
) -> RewardBreakdown:
    fmt = int(step.format_ok)
    action, gold = step.action, golden_step.action
    if isinstance(action, Search) and isinstance(gold, Search):
        ask = query_similarity(action.search, gold.search, provider)
    elif isinstance(action, NoRetrieval):
        ask = 1.0 if isinstance(gold, NoRetrieval) else 0.0
    else:
        ask = 0.0
    if isinstance(action, (Search, NoRetrieval)) and isinstance(gold, (Search, NoRetrieval)):
        route = route_reward(step.expert, golden_step.expert)
    else:
        route = 0
    composed = fmt * (config.alpha * ask + config.beta * route)
    return RewardBreakdown(fmt, ask, route, 0.0, composed)


# --- answer scoring --------------------------------------------------------

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_PUNCT_TO_SPACE = str.maketrans(string.punctuation, " " * len(string.punctuation))


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    text = text.lower().translate(_PUNCT_TABLE)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def recall_tokens(text: str) -> list[str]:
    # punctuation splits words here ("bay-breasted" -> "bay breasted")
    text = text.lower().translate(_PUNCT_TO_SPACE)
    return _ARTICLES.sub(" ", text).split()


def f1_recall(prediction: str, gold: str) -> float:
    """Fraction of gold tokens present in the prediction, counted with multiplicity."""
    gold_counts = Counter(recall_tokens(gold))
    if not gold_counts:
        raise ValueError("gold answer has no tokens after normalization")
    pred_counts = Counter(recall_tokens(prediction))
    matched = sum(min(n, pred_counts[t]) for t, n in gold_counts.items())
    return matched / sum(gold_counts.values())


def accuracy(prediction: str, gold: str) -> int:
    return int(normalize_answer(prediction) == normalize_answer(gold))


def observation_reward(emitted: str, gold: str, is_final: bool) -> RewardBreakdown:
    """Score a raw observation or final-answer emission (tags included)."""
    answer, ok = parse_answer(emitted)
    return score_answer(answer, ok, gold, is_final)


def score_answer(answer: str, format_ok: bool, gold: str, is_final: bool) -> RewardBreakdown:
    if not gold.strip():
        raise ValueError("gold must be non-empty")
    fmt = int(format_ok)
    value = float(accuracy(answer, gold)) if is_final else f1_recall(answer, gold)
    return RewardBreakdown(fmt, answer=value, composed=fmt * value)
