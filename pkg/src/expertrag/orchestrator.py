"""Reason-act-observe episodes over the expert pool.

Policy emissions follow a small tag grammar::

    <think>REASON</think><search expert="text|image|table">QUERY</search>
    <think>REASON</think><answer>TEXT</answer>

A search query of ``NULL`` means "no retrieval needed". Observation and final
answer emissions are a single ``<answer>TEXT</answer>`` block, optionally
preceded by one ``<think>`` block.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence, Union

from .experts import DEFAULT_TOP_K, Document, ExpertKind, ScoredDocument
from .llm_client import Policy, PolicyRequest, PolicyResponse, PromptError, placeholders, render_prompt

NULL_QUERY = "NULL"
DOC_CHAR_BUDGET = 1500


# --- actions ---------------------------------------------------------------


@dataclass(frozen=True)
class Search:
    select: ExpertKind
    search: str

    def __post_init__(self):
        if not self.search.strip() or self.search.strip() == NULL_QUERY:
            raise ValueError("search query must be non-empty and not NULL")


@dataclass(frozen=True)
class NoRetrieval:
    pass


@dataclass(frozen=True)
class FinalAnswer:
    text: str


Action = Union[Search, NoRetrieval, FinalAnswer]


@dataclass(frozen=True)
class Observation:
    documents: tuple[ScoredDocument, ...] = ()
    answer: str = ""
    format_ok: bool = True
    doc_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.documents and not self.doc_ids:
            object.__setattr__(self, "doc_ids", tuple(d.doc.id for d in self.documents))

    @property
    def empty(self) -> bool:
        return not self.doc_ids and not self.answer


@dataclass(frozen=True)
class ReasoningStep:
    reason: str
    action: Action
    observation: Observation = field(default_factory=Observation)
    format_ok: bool = True

    @property
    def expert(self) -> ExpertKind | None:
        return self.action.select if isinstance(self.action, Search) else None


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    gold_answer: str | None = None
    gold_modality: ExpertKind | None = None
    gold_subquery: str | None = None

    @classmethod
    def from_record(cls, rec: Mapping) -> Query:
        modality = rec.get("gold_modality")
        return cls(
            id=str(rec["query_id"]),
            text=rec["query"],
            gold_answer=rec.get("gold_answer"),
            gold_modality=ExpertKind.parse(modality) if modality else None,
            gold_subquery=rec.get("gold_subquery"),
        )

    def to_record(self) -> dict:
        rec = {"query_id": self.id, "query": self.text, "gold_answer": self.gold_answer}
        if self.gold_modality is not None:
            rec["gold_modality"] = self.gold_modality.value
        if self.gold_subquery is not None:
            rec["gold_subquery"] = self.gold_subquery
        return rec


@dataclass
class Trajectory:
    query_id: str
    query: str
    steps: list[ReasoningStep] = field(default_factory=list)
    answer: str = ""
    gold_answer: str | None = None
    answer_format_ok: bool = True
    error: str | None = None

    @property
    def retrieval_steps(self) -> list[ReasoningStep]:
        return [s for s in self.steps if isinstance(s.action, Search)]

    def experts_used(self) -> list[str]:
        return [s.action.select.value for s in self.retrieval_steps]

    def to_record(self) -> dict:
        return {
            "query_id": self.query_id,
            "query": self.query,
            "steps": [_step_record(s) for s in self.steps],
            "answer": self.answer,
            "gold_answer": self.gold_answer,
            "answer_format_ok": self.answer_format_ok,
            "error": self.error,
        }

    @classmethod
    def from_record(cls, rec: Mapping, experts: Mapping[ExpertKind, object] | None = None) -> Trajectory:
        return cls(
            query_id=str(rec["query_id"]),
            query=rec["query"],
            steps=[_step_from_record(s, experts) for s in rec.get("steps", [])],
            answer=rec.get("answer", ""),
            gold_answer=rec.get("gold_answer"),
            answer_format_ok=rec.get("answer_format_ok", True),
            error=rec.get("error"),
        )


def _step_record(step: ReasoningStep) -> dict:
    action = step.action
    kind = "search" if isinstance(action, Search) else "null" if isinstance(action, NoRetrieval) else "answer"
    return {
        "reason": step.reason,
        "action": kind,
        "expert": action.select.value if isinstance(action, Search) else None,
        "search_query": action.search if isinstance(action, Search) else (NULL_QUERY if kind == "null" else None),
        "answer_text": action.text if isinstance(action, FinalAnswer) else None,
        "doc_ids": list(step.observation.doc_ids),
        "intermediate_answer": step.observation.answer,
        "observation_format_ok": step.observation.format_ok,
        "format_ok": step.format_ok,
    }


def _step_from_record(rec: Mapping, experts) -> ReasoningStep:
    kind = rec.get("action") or ("search" if rec.get("expert") else "null")
    if kind == "search":
        action: Action = Search(ExpertKind.parse(rec["expert"]), rec["search_query"])
    elif kind == "answer":
        action = FinalAnswer(rec.get("answer_text") or "")
    else:
        action = NoRetrieval()
    doc_ids = tuple(rec.get("doc_ids", ()))
    documents: tuple[ScoredDocument, ...] = ()
    if experts is not None and isinstance(action, Search) and doc_ids:
        index = experts[action.select]
        documents = tuple(ScoredDocument(index.documents[d], 0.0, r) for r, d in enumerate(doc_ids, 1))
    obs = Observation(documents, rec.get("intermediate_answer", ""), rec.get("observation_format_ok", True), doc_ids)
    return ReasoningStep(rec.get("reason", ""), action, obs, rec.get("format_ok", True))


def write_trajectories(path: str | Path, trajectories: Iterable[Trajectory], extra: Mapping | None = None) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajectories:
            rec = t.to_record()
            if extra:
                rec.update(extra)
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
            n += 1
    return n


def read_trajectories(path: str | Path, experts=None) -> Iterator[tuple[Trajectory, dict]]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                yield Trajectory.from_record(rec, experts), rec


# --- grammar ---------------------------------------------------------------

_TAGS = ("<think>", "</think>", "<search", "</search>", "<answer>", "</answer>")
_ACTION_RE = re.compile(
    r'\s*<think>(?P<reason>.*?)</think>\s*'
    r'(?:<search expert="(?P<expert>[^"]*)">(?P<query>.*?)</search>|<answer>(?P<answer>.*?)</answer>)\s*',
    re.DOTALL,
)
_ANSWER_RE = re.compile(r"\s*(?:<think>(?P<reason>.*?)</think>\s*)?<answer>(?P<answer>.*?)</answer>\s*", re.DOTALL)
_LOOSE_SEARCH = re.compile(r'<search expert="([^"]*)">(.*?)</search>', re.DOTALL)
_LOOSE_ANSWER = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
_LOOSE_THINK = re.compile(r"<think>(.*?)</think>", re.DOTALL)


def _tag_counts(text: str) -> dict[str, int]:
    return {t: text.count(t) for t in _TAGS}


def _best_effort(text: str) -> tuple[str, Action]:
    m = _LOOSE_THINK.search(text)
    reason = m.group(1).strip() if m else ""
    for expert, query in _LOOSE_SEARCH.findall(text):
        query = query.strip()
        if query == NULL_QUERY:
            return reason, NoRetrieval()
        try:
            return reason, Search(ExpertKind.parse(expert), query)
        except ValueError:
            continue
    m = _LOOSE_ANSWER.search(text)
    if m:
        return reason, FinalAnswer(m.group(1).strip())
    return reason, NoRetrieval()


def parse_action(text: str) -> tuple[str, Action, bool]:
    """Parse an action emission into ``(reason, action, format_ok)``.

    Never raises: a malformed emission returns ``format_ok=False`` with a
    best-effort action for logging.
    """
    m = _ACTION_RE.fullmatch(text)
    counts = _tag_counts(text)
    if m is None:
        reason, action = _best_effort(text)
        return reason, action, False
    reason = m.group("reason").strip()
    if m.group("expert") is not None:
        expected = {"<think>": 1, "</think>": 1, "<search": 1, "</search>": 1, "<answer>": 0, "</answer>": 0}
        query = m.group("query").strip()
        try:
            kind = ExpertKind(m.group("expert"))
        except ValueError:
            kind = None
        if counts != expected or kind is None or not query:
            _, action = _best_effort(text)
            return reason, action, False
        if query == NULL_QUERY:
            return reason, NoRetrieval(), True
        return reason, Search(kind, query), True
    expected = {"<think>": 1, "</think>": 1, "<search": 0, "</search>": 0, "<answer>": 1, "</answer>": 1}
    answer = m.group("answer").strip()
    if counts != expected or not answer:
        return reason, FinalAnswer(answer), False
    return reason, FinalAnswer(answer), True


def parse_answer(text: str) -> tuple[str, bool]:
    """Parse an observation or final-answer emission into ``(answer, format_ok)``."""
    m = _ANSWER_RE.fullmatch(text)
    counts = _tag_counts(text)
    ok = (
        m is not None
        and counts["<answer>"] == 1
        and counts["</answer>"] == 1
        and counts["<think>"] == counts["</think>"] <= 1
        and counts["<search"] == counts["</search>"] == 0
        and bool(m.group("answer").strip())
    )
    if ok:
        return m.group("answer").strip(), True
    loose = _LOOSE_ANSWER.search(text)
    return (loose.group(1).strip() if loose else text.strip()), False


# --- prompts ---------------------------------------------------------------

ACTION_TEMPLATE = (
    "You answer questions by consulting retrieval experts: text (encyclopedic passages), "
    "image (image-caption pairs) and table (structured tables).\n"
    "Think inside <think></think>, then either search one expert with "
    '<search expert="text|image|table">sub-query</search> (use NULL as the sub-query when the '
    "evidence is sufficient) or reply <answer>final answer</answer>.\n\n"
    "Question: {query}\n\nPrevious steps:\n{history}\n"
)
OBSERVATION_TEMPLATE = (
    "Using the retrieved evidence, write the intermediate answer inside <answer></answer>.\n\n"
    "Reasoning: {reason}\nSearch: {expert} expert, sub-query \"{search}\"\n\nRetrieved:\n{documents}\n"
)
OBSERVATION_TRAJECTORY_TEMPLATE = (
    "Question: {query}\n\nPrevious steps:\n{history}\n\n" + OBSERVATION_TEMPLATE
)
ANSWER_TEMPLATE = (
    "Answer the question using the reasoning trajectory. Reply with <answer>short answer</answer>.\n\n"
    "Question: {query}\n\nTrajectory:\n{history}\n"
)
EMPTY_HISTORY = "(no previous steps)"


def _truncate(text: str, budget: int) -> str:
    return text if len(text) <= budget else text[:budget] + "..."


def render_documents(documents: Sequence[ScoredDocument], budget: int = DOC_CHAR_BUDGET) -> str:
    if not documents:
        return "(no documents retrieved)"
    lines = []
    for d in documents:
        lines.append(f"({d.rank}) {d.doc.title}: {_truncate(d.doc.body, budget)}")
        if d.doc.image_ref:
            lines.append(f"    image: {d.doc.image_ref}")
    return "\n".join(lines)


def _describe_action(action: Action) -> str:
    if isinstance(action, Search):
        return f'search expert={action.select.value} query="{action.search}"'
    if isinstance(action, NoRetrieval):
        return "no retrieval (NULL)"
    return f"answer: {action.text}"


def render_history(steps: Sequence[ReasoningStep], budget: int = DOC_CHAR_BUDGET) -> str:
    if not steps:
        return EMPTY_HISTORY
    blocks = []
    for i, step in enumerate(steps, 1):
        block = [f"[Step {i}]", f"Reason: {step.reason}", f"Action: {_describe_action(step.action)}"]
        if isinstance(step.action, Search):
            block.append("Observation:")
            block.append(render_documents(step.observation.documents, budget))
            block.append(f"Intermediate answer: {step.observation.answer}")
        blocks.append("\n".join(block))
    return "\n\n".join(blocks)


def render_step_prompt(
    query: Query | str,
    prior_steps: Sequence[ReasoningStep],
    template: str = ACTION_TEMPLATE,
    doc_char_budget: int = DOC_CHAR_BUDGET,
    **extra,
) -> str:
    missing = {"query", "history"} - placeholders(template)
    if missing:
        raise PromptError(f"template lacks placeholder {sorted(missing)[0]!r}")
    text = query.text if isinstance(query, Query) else query
    return render_prompt(template, {"query": text, "history": render_history(prior_steps, doc_char_budget), **extra})


def render_observation_prompt(
    reason: str,
    action: Search,
    documents: Sequence[ScoredDocument],
    conditioning: str = "step",
    query: str = "",
    prior_steps: Sequence[ReasoningStep] = (),
    doc_char_budget: int = DOC_CHAR_BUDGET,
) -> str:
    bindings = {
        "reason": reason,
        "expert": action.select.value,
        "search": action.search,
        "documents": render_documents(documents, doc_char_budget),
    }
    if conditioning == "trajectory":
        bindings.update(query=query, history=render_history(prior_steps, doc_char_budget))
        return render_prompt(OBSERVATION_TRAJECTORY_TEMPLATE, bindings)
    if conditioning != "step":
        raise ValueError(f"unknown conditioning mode {conditioning!r}")
    return render_prompt(OBSERVATION_TEMPLATE, bindings)


# --- episodes --------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeConfig:
    max_steps: int = 3
    top_k: int = DEFAULT_TOP_K
    seed: int = 0
    temperature: float = 1.0
    max_tokens: int = 512
    doc_char_budget: int = DOC_CHAR_BUDGET
    # "step": observation prompt sees only (reason, action, documents); "trajectory": also query + history
    observation_conditioning: str = "step"

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


class EpisodeError(RuntimeError):
    def __init__(self, message: str, trajectory: Trajectory):
        super().__init__(message)
        self.trajectory = trajectory


def _call(policy: Policy, request: PolicyRequest, trajectory: Trajectory) -> PolicyResponse:
    try:
        return policy.complete(request)
    except Exception as exc:
        trajectory.error = f"{type(exc).__name__}: {exc}"
        raise EpisodeError(f"policy call failed during episode {trajectory.query_id}: {exc}", trajectory) from exc


def _search(expert, action: Search, k: int) -> tuple[ScoredDocument, ...]:
    try:
        return tuple(expert.search(action.search, k))
    except ValueError:
        # sub-query with no indexable tokens: record an empty observation
        return ()


def run_episode(
    policy: Policy,
    experts: Mapping[ExpertKind, object],
    query: Query | str,
    config: EpisodeConfig = EpisodeConfig(),
) -> Trajectory:
    """Drive ``policy`` through at most ``config.max_steps`` reasoning steps.

    Every emission is recorded; malformed actions consume a step with an empty
    observation. ``NULL`` searches and direct answers end the loop. If the step
    budget runs out, the policy is asked for the final answer.
    """
    missing = [k.value for k in ExpertKind if k not in experts]
    if missing:
        raise ValueError(f"missing experts: {missing}")
    if isinstance(query, str):
        query = Query("q", query)
    traj = Trajectory(query.id, query.text, gold_answer=query.gold_answer)

    def request(stage: str, prompt: str, **context) -> PolicyRequest:
        ctx = {"query": query.text, "query_id": query.id, "episode_seed": config.seed, **context}
        return PolicyRequest(prompt, config.temperature, config.max_tokens, stage=stage, context=ctx)

    for t in range(1, config.max_steps + 1):
        prompt = render_step_prompt(query, traj.steps, doc_char_budget=config.doc_char_budget)
        resp = _call(policy, request("action", prompt, step=t, steps=tuple(traj.steps)), traj)
        reason, action, ok = parse_action(resp.text)
        if not ok:
            traj.steps.append(ReasoningStep(reason, action, Observation(), False))
            continue
        if isinstance(action, FinalAnswer):
            traj.steps.append(ReasoningStep(reason, action, Observation(), True))
            traj.answer = action.text
            return traj
        if isinstance(action, NoRetrieval):
            traj.steps.append(ReasoningStep(reason, action, Observation(), True))
            break
        docs = _search(experts[action.select], action, config.top_k)
        obs_prompt = render_observation_prompt(
            reason, action, docs, config.observation_conditioning, query.text, traj.steps, config.doc_char_budget
        )
        obs_resp = _call(
            policy,
            request("observation", obs_prompt, step=t, reason=reason, action=action, documents=docs, steps=tuple(traj.steps)),
            traj,
        )
        answer, obs_ok = parse_answer(obs_resp.text)
        traj.steps.append(ReasoningStep(reason, action, Observation(docs, answer, obs_ok), True))

    prompt = render_step_prompt(query, traj.steps, ANSWER_TEMPLATE, config.doc_char_budget)
    resp = _call(policy, request("answer", prompt, steps=tuple(traj.steps)), traj)
    traj.answer, traj.answer_format_ok = parse_answer(resp.text)
    return traj


def with_documents(step: ReasoningStep, documents: Sequence[ScoredDocument]) -> ReasoningStep:
    return replace(step, observation=replace(step.observation, documents=tuple(documents)))
