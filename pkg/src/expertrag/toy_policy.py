"""A differentiable routing policy small enough to train with exact gradients.

Every emission is a short sequence of categorical choices ("tokens"). Each
choice comes from a log-linear head: candidate ``j`` has feature row ``F[j]``
and probability ``softmax(F @ theta_head / temperature)[j]``. Heads:

``format``    well-formed vs malformed tags, per stage
``route``     text / image / table / NULL, from the query's bag of terms
``template``  which closed sub-query template to issue
``evidence``  which retrieved document to answer from (or none)
``answer``    which candidate term from the observations is the final answer
"""

from __future__ import annotations

import itertools
import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .experts import ExpertKind, ScoredDocument, tokenize
from .llm_client import PolicyRequest, PolicyResponse
from .orchestrator import DOC_CHAR_BUDGET, NULL_QUERY, ReasoningStep, Search
from .grpo import normalize_advantages
from .rewards import LexicalCosine

ROUTES: tuple[ExpertKind | None, ...] = (ExpertKind.TEXT, ExpertKind.IMAGE, ExpertKind.TABLE, None)
TEMPLATES = ("full", "content", "head2", "tail2")
STAGES = ("action", "observation", "answer")
HEADS = ("format", "route", "template", "evidence", "answer")
UNKNOWN_ANSWER = "unknown"
NO_EVIDENCE = "no relevant evidence"
MAX_ANSWER_CANDIDATES = 8
ANSWER_FEATURES = 4

STOPWORDS = frozenset(
    "a an the of in on at to for from by with and or is are was were be been what which who whom whose "
    "when where why how does do did this that these those it its as into about".split()
)


class StaleSnapshotError(RuntimeError):
    pass


def content_tokens(text: str) -> list[str]:
    return [t for t in tokenize(text) if t not in STOPWORDS]


def render_template(name: str, query: str) -> str:
    content = content_tokens(query)
    if name == "full" or not content:
        return " ".join(tokenize(query)) or query
    if name == "content":
        return " ".join(content)
    if name == "head2":
        return " ".join(content[:2])
    if name == "tail2":
        return " ".join(content[-2:])
    raise ValueError(f"unknown template {name!r}")


@dataclass(frozen=True)
class Decision:
    head: str
    features: np.ndarray  # (n_candidates, head_dim), already divided by the temperature
    chosen: int


@dataclass(frozen=True)
class Emission:
    stage: str
    decisions: tuple[Decision, ...]
    snapshot_id: int
    labels: tuple[str, ...] = ()

    @property
    def tokens(self) -> tuple[int, ...]:
        return tuple(d.chosen for d in self.decisions)


def _stack(decisions: Sequence[Decision]):
    feats = np.vstack([d.features for d in decisions])
    sizes = [d.features.shape[0] for d in decisions]
    offsets = np.zeros(len(decisions) + 1, dtype=np.int64)
    np.cumsum(sizes, out=offsets[1:])
    chosen = np.array([d.chosen for d in decisions], dtype=np.int64)
    return feats, offsets, chosen


class ToyRoutingPolicy:
    """Parameters and feature maps of the log-linear policy.

    ``snapshot()`` freezes the current parameters as the sampling (old) policy;
    samples remember the snapshot id they were drawn under.
    """

    def __init__(self, vocab: Iterable[str], max_steps: int = 3, top_k: int = 3, init_scale: float = 0.0, seed: int = 0):
        self.vocab = tuple(sorted(set(vocab)))
        self._vocab_pos = {t: i for i, t in enumerate(self.vocab)}
        self.max_steps = max_steps
        self.top_k = top_k
        self.query_dim = len(self.vocab) + 1 + max_steps
        dims = {
            "format": 2 * len(STAGES),
            "route": len(ROUTES) * self.query_dim,
            "template": len(TEMPLATES) * self.query_dim,
            "evidence": top_k + 2,
            "answer": ANSWER_FEATURES,
        }
        rng = np.random.default_rng(seed)
        self.params = {h: init_scale * rng.standard_normal(dims[h]) for h in HEADS}
        self.old_params = {h: p.copy() for h, p in self.params.items()}
        self.snapshot_id = 0
        self._cosine = LexicalCosine()

    @classmethod
    def from_queries(cls, queries: Iterable[str], **kw) -> ToyRoutingPolicy:
        vocab = set()
        for q in queries:
            vocab.update(tokenize(q))
        return cls(vocab, **kw)

    # -- parameter plumbing --

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[h] for h in HEADS])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for h in HEADS:
            n = self.params[h].shape[0]
            self.params[h] = np.array(vec[i : i + n], dtype=np.float64)
            i += n

    def split(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        out, i = {}, 0
        for h in HEADS:
            n = self.params[h].shape[0]
            out[h] = vec[i : i + n]
            i += n
        return out

    def snapshot(self) -> int:
        self.old_params = {h: p.copy() for h, p in self.params.items()}
        self.snapshot_id += 1
        return self.snapshot_id

    def save(self, path: str | Path) -> None:
        meta = {"vocab": list(self.vocab), "max_steps": self.max_steps, "top_k": self.top_k,
                "params": {h: self.params[h].tolist() for h in HEADS}}
        Path(path).write_text(json.dumps(meta))

    @classmethod
    def load(cls, path: str | Path) -> ToyRoutingPolicy:
        meta = json.loads(Path(path).read_text())
        policy = cls(meta["vocab"], meta["max_steps"], meta["top_k"])
        for h in HEADS:
            policy.params[h] = np.array(meta["params"][h], dtype=np.float64)
        policy.snapshot()
        return policy

    # -- features --

    def query_features(self, query: str, step: int) -> np.ndarray:
        x = np.zeros(self.query_dim)
        for tok in set(tokenize(query)):
            pos = self._vocab_pos.get(tok)
            if pos is not None:
                x[pos] = 1.0
        x[len(self.vocab)] = 1.0
        x[len(self.vocab) + 1 + min(max(step, 1), self.max_steps) - 1] = 1.0
        return x

    def format_features(self, stage: str) -> np.ndarray:
        s = STAGES.index(stage)
        f = np.zeros((2, 2 * len(STAGES)))
        f[0, 2 * s] = 1.0
        f[1, 2 * s + 1] = 1.0
        return f

    def evidence_features(self, search: str, documents: Sequence[ScoredDocument]) -> np.ndarray:
        docs = list(documents)[: self.top_k]
        f = np.zeros((len(docs) + 1, self.top_k + 2))
        for j, d in enumerate(docs):
            f[j, j] = 1.0
            f[j, -1] = self._cosine.similarity(search, d.doc.body)
        f[len(docs), self.top_k] = 1.0
        return f

    def answer_candidates(self, query: str, observations: Sequence[str]) -> tuple[list[str], np.ndarray]:
        query_toks = set(tokenize(query))
        counts: Counter[str] = Counter()
        first_seen: dict[str, int] = {}
        last_tokens = set()
        first_obs = set(content_tokens(observations[0])) if observations else set()
        for text in observations:
            toks = [t for t in content_tokens(text) if t not in query_toks]
            if toks:
                last_tokens.add(toks[-1])
            for t in toks:
                counts[t] += 1
                first_seen.setdefault(t, len(first_seen))
        ranked = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))[:MAX_ANSWER_CANDIDATES]
        total = sum(counts[t] for t in ranked) or 1
        feats = np.zeros((len(ranked) + 1, ANSWER_FEATURES))
        for j, t in enumerate(ranked):
            feats[j] = (0.0, counts[t] / total, float(t in last_tokens), float(t in first_obs))
        feats[len(ranked), 0] = 1.0
        return ranked + [UNKNOWN_ANSWER], feats

    # -- distributions --

    def probabilities(self, head: str, features: np.ndarray, old: bool = False) -> np.ndarray:
        theta = (self.old_params if old else self.params)[head]
        logits = features @ theta
        logits = logits - logits.max()
        p = np.exp(logits)
        return p / p.sum()

    def route_distribution(self, query: str, step: int = 1, old: bool = False) -> np.ndarray:
        return self.probabilities("route", np.kron(np.eye(len(ROUTES)), self.query_features(query, step)), old)

    def route_accuracy(self, query: str, gold: ExpertKind, step: int = 1, old: bool = False) -> float:
        """Probability of routing to ``gold`` given that some expert is searched."""
        p = self.route_distribution(query, step, old)
        return float(p[ROUTES.index(gold)] / (1.0 - p[ROUTES.index(None)]))

    def logprobs(self, decisions: Sequence[Decision], old: bool = False) -> np.ndarray:
        params = self.old_params if old else self.params
        out = np.empty(len(decisions))
        by_head: dict[str, list[int]] = {}
        for i, d in enumerate(decisions):
            by_head.setdefault(d.head, []).append(i)
        for head, idx in by_head.items():
            feats, offsets, chosen = _stack([decisions[i] for i in idx])
            out[idx] = kernels.choice_logprobs(feats, offsets, chosen, params[head])
        return out


def _tag(ok: bool, open_tag: str, body: str, close_tag: str) -> str:
    return f"{open_tag}{body}{close_tag}" if ok else f"{open_tag}{body}"


class ToyAgent:
    """Exposes a :class:`ToyRoutingPolicy` through the text policy interface.

    Samples from the snapshot (old) parameters, reads the structured request
    context, and returns the tagged text with per-choice log-probabilities.
    """

    def __init__(self, policy: ToyRoutingPolicy, seed: int | np.random.Generator = 0,
                 doc_char_budget: int = DOC_CHAR_BUDGET):
        self.policy = policy
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.doc_char_budget = doc_char_budget

    def _stage(self, request: PolicyRequest):
        """Head features for one request and a renderer from chosen indices to (text, decisions)."""
        greedy = request.temperature == 0
        scale = 1.0 if greedy else 1.0 / request.temperature
        stage = request.stage
        ctx = request.context
        heads = [("format", self.policy.format_features(stage) * scale)]

        if stage == "action":
            query, step = ctx["query"], int(ctx.get("step", 1))
            x = self.policy.query_features(query, step)
            heads.append(("route", np.kron(np.eye(len(ROUTES)), x) * scale))
            heads.append(("template", np.kron(np.eye(len(TEMPLATES)), x) * scale))

            def render(c):
                ok = c[0] == 0
                kind = ROUTES[c[1]]
                if kind is None:
                    # the template is never drawn for NULL, so it carries no log-probability
                    text = _tag(ok, f"<think>step {step}: evidence is sufficient</think>"
                                    '<search expert="text">', NULL_QUERY, "</search>")
                    return text, 2
                sub = render_template(TEMPLATES[c[2]], query)
                reason = f"step {step}: consult the {kind.value} expert"
                return _tag(ok, f'<think>{reason}</think><search expert="{kind.value}">', sub, "</search>"), 3

        elif stage == "observation":
            action: Search = ctx["action"]
            docs = list(ctx.get("documents", ()))[: self.policy.top_k]
            heads.append(("evidence", self.policy.evidence_features(action.search, docs) * scale))

            def render(c):
                body = docs[c[1]].doc.body[: self.doc_char_budget] if c[1] < len(docs) else NO_EVIDENCE
                return _tag(c[0] == 0, "<answer>", body, "</answer>"), 2

        elif stage == "answer":
            steps: Sequence[ReasoningStep] = ctx.get("steps", ())
            observations = [s.observation.answer for s in steps if isinstance(s.action, Search) and s.observation.answer]
            cands, ans_f = self.policy.answer_candidates(ctx["query"], observations)
            heads.append(("answer", ans_f * scale))

            def render(c):
                return _tag(c[0] == 0, "<answer>", cands[c[1]], "</answer>"), 2
        else:
            raise ValueError(f"unknown stage {stage!r}")
        return greedy, heads, render

    def sample_group(self, request: PolicyRequest, n: int) -> list[PolicyResponse]:
        """Draw ``n`` emissions for one request, sharing the feature construction."""
        greedy, heads, render = self._stage(request)
        draws = []
        for head, feats in heads:
            if greedy:
                draws.append(np.full(n, int(np.argmax(feats @ self.policy.old_params[head]))))
            else:
                p = self.policy.probabilities(head, feats, old=True)
                draws.append(self.rng.choice(p.shape[0], size=n, p=p))
        out = []
        sid = self.policy.snapshot_id
        for i in range(n):
            choice = [int(d[i]) for d in draws]
            text, used = render(choice)
            em = Emission(request.stage, tuple(Decision(h, f, c) for (h, f), c in zip(heads[:used], choice)), sid)
            lp = self.policy.logprobs(em.decisions, old=True)
            out.append(PolicyResponse(text, tuple(np.minimum(lp, 0.0)), "stop", em))
        return out

    def emission_table(self, request: PolicyRequest, score) -> tuple[list[tuple[int, ...]], np.ndarray]:
        """Every joint choice for ``request`` with ``score`` of its rendered text.

        The table depends only on the request, so callers may reuse it across
        parameter updates.
        """
        _, heads, render = self._stage(request)
        choices = list(itertools.product(*(range(f.shape[0]) for _, f in heads)))
        return choices, np.array([score(render(list(c))[0]) for c in choices])

    def expected_score(self, request: PolicyRequest, score=None, table=None) -> float:
        """Exact expectation of ``score(text)`` under the snapshot, by enumerating every emission."""
        _, heads, _ = self._stage(request)
        choices, scores = table if table is not None else self.emission_table(request, score)
        probs = [self.policy.probabilities(h, f, old=True) for h, f in heads]
        idx = np.array(choices)
        w = np.ones(len(choices))
        for j, p in enumerate(probs):
            w *= p[idx[:, j]]
        return math.fsum(w * scores)

    def complete(self, request: PolicyRequest) -> PolicyResponse:
        return self.sample_group(request, 1)[0]

    def rescore(self, response: PolicyResponse) -> np.ndarray:
        return self.policy.logprobs(response.trace.decisions)


# --- loss and analytic gradient -------------------------------------------


def _check_fresh(policy: ToyRoutingPolicy, groups) -> None:
    for g in groups:
        for s in g.samples:
            if not isinstance(s.trace, Emission):
                raise TypeError("toy gradient needs samples produced by ToyAgent")
            if s.trace.snapshot_id != policy.snapshot_id:
                raise StaleSnapshotError(
                    f"sample from snapshot {s.trace.snapshot_id}, policy snapshot is {policy.snapshot_id}"
                )


def _group_terms(policy: ToyRoutingPolicy, groups):
    """Advantages, current ratios and flattened decisions for every group."""
    flat: list[Decision] = []
    owner: list[int] = []
    old_sums = []
    for g in groups:
        for s in g.samples:
            for d in s.trace.decisions:
                flat.append(d)
                owner.append(len(old_sums))
            old_sums.append(float(s.logprob_old.sum()))
    owner_arr = np.array(owner, dtype=np.int64)
    lp_new = policy.logprobs(flat) if flat else np.zeros(0)
    new_sums = np.zeros(len(old_sums))
    np.add.at(new_sums, owner_arr, lp_new)
    ratios = np.exp(new_sums - np.array(old_sums))
    advs = []
    offsets = [0]
    for g in groups:
        advs.append(normalize_advantages(g.rewards))
        offsets.append(offsets[-1] + len(g.samples))
    return flat, owner_arr, ratios, advs, offsets


def toy_total_loss(policy: ToyRoutingPolicy, groups, epsilon: float = 0.2) -> float:
    """Sum of group losses with ratios recomputed from the current parameters."""
    _, _, ratios, advs, offsets = _group_terms(policy, groups)
    total = 0.0
    for gi, adv in enumerate(advs):
        r = ratios[offsets[gi] : offsets[gi + 1]]
        surr, _ = kernels.clipped_surrogates(r, adv, epsilon)
        total += -math.fsum(surr - adv) / adv.shape[0]
    return total


def toy_policy_gradient(policy: ToyRoutingPolicy, groups, epsilon: float = 0.2) -> np.ndarray:
    """Exact gradient of :func:`toy_total_loss` w.r.t. ``policy.flat()``.

    Samples whose clip branch binds contribute nothing through their ratio.
    """
    _check_fresh(policy, groups)
    flat, owner, ratios, advs, offsets = _group_terms(policy, groups)
    sample_w = np.zeros(ratios.shape[0])
    for gi, adv in enumerate(advs):
        lo, hi = offsets[gi], offsets[gi + 1]
        _, coef = kernels.clipped_surrogates(ratios[lo:hi], adv, epsilon)
        # d(-mean(surr))/d logp = -(dsurr/dratio) * ratio / G
        sample_w[lo:hi] = -coef * ratios[lo:hi] / adv.shape[0]
    dec_w = sample_w[owner] if flat else np.zeros(0)
    grads = {h: np.zeros_like(p) for h, p in policy.params.items()}
    by_head: dict[str, list[int]] = {}
    for i, d in enumerate(flat):
        by_head.setdefault(d.head, []).append(i)
    for head, idx in by_head.items():
        feats, offs, chosen = _stack([flat[i] for i in idx])
        grads[head] = kernels.choice_grad(feats, offs, chosen, policy.params[head], 1.0, dec_w[idx])
    return np.concatenate([grads[h] for h in HEADS])


def mean_route_accuracy(policy: ToyRoutingPolicy, items: Iterable[tuple[str, ExpertKind, int]], old: bool = False) -> float:
    vals = [policy.route_accuracy(q, k, step, old) for q, k, step in items]
    return math.fsum(vals) / len(vals) if vals else float("nan")


def routing_items(golden_list) -> list[tuple[str, ExpertKind, int]]:
    """(query, golden expert, step) for every golden retrieval step."""
    items = []
    for g in golden_list:
        for t, s in enumerate(g.golden_steps, 1):
            items.append((g.trajectory.query, s.action.select, t))
    return items


def params_equal(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> bool:
    return all(np.array_equal(a[h], b[h]) for h in HEADS)
