"""Synthetic multi-expert QA task with vocabulary-separable routing.

Each query asks about an invented entity whose answer is planted in exactly
one expert's corpus. The modality is signalled only by cue words, so a bag of
terms router can learn it.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

from .experts import Corpus, Document, ExpertKind, build_index, serialize_table, Table
from .llm_client import PolicyRequest, PolicyResponse
from .orchestrator import NULL_QUERY, Query, Search

CUES = {
    ExpertKind.TEXT: ("biography", "history", "career", "founder", "origin", "legacy"),
    ExpertKind.IMAGE: ("photo", "picture", "color", "appearance", "depicted", "visual"),
    ExpertKind.TABLE: ("statistics", "total", "population", "percent", "ranking", "figure"),
}
_SYLLABLES = ("ka", "lo", "mi", "ver", "zu", "tan", "pe", "ri", "dos", "ne", "qua", "bel", "sor", "vi", "gan", "thu")
_FILLER = ("archive", "record", "notes", "catalog", "survey", "entry", "registry", "ledger", "index", "summary")


def _word(rng: random.Random, syllables: int) -> str:
    return "".join(rng.choice(_SYLLABLES) for _ in range(syllables))


@dataclass
class SyntheticTask:
    corpora: dict[ExpertKind, Corpus]
    queries: list[Query]

    def indexes(self):
        return {k: build_index(c) for k, c in self.corpora.items()}

    def write(self, directory: str | Path) -> None:
        """Write ``<kind>.jsonl`` corpora and ``dataset.jsonl`` into ``directory``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for kind, corpus in self.corpora.items():
            with open(d / f"{kind.value}.jsonl", "w", encoding="utf-8") as fh:
                for doc in corpus.documents:
                    rec = {"id": doc.id, "title": doc.title}
                    if doc.table is not None:
                        rec.update(header=list(doc.table.header), rows=[list(r) for r in doc.table.rows])
                    else:
                        rec["body"] = doc.body
                    if doc.image_ref:
                        rec["image_ref"] = doc.image_ref
                    fh.write(json.dumps(rec) + "\n")
        with open(d / "dataset.jsonl", "w", encoding="utf-8") as fh:
            for q in self.queries:
                fh.write(json.dumps(q.to_record()) + "\n")


def make_synthetic_task(per_modality: int = 20, distractors: int = 10, seed: int = 0) -> SyntheticTask:
    rng = random.Random(seed)
    used: set[str] = set()

    def fresh(syllables: int) -> str:
        while True:
            w = _word(rng, syllables)
            if w not in used:
                used.add(w)
                return w

    docs: dict[ExpertKind, list[Document]] = {k: [] for k in ExpertKind}
    queries = []
    for kind in ExpertKind:
        for i in range(per_modality):
            entity = f"{fresh(3)} {fresh(3)}"
            answer = fresh(4)
            cue_a, cue_b = rng.sample(CUES[kind], 2)
            qid = f"{kind.value}-{i:03d}"
            queries.append(Query(qid, f"What is the {cue_a} {cue_b} of {entity}?", answer, kind, entity))
            docs[kind].append(_planted_doc(kind, f"{kind.value}-doc-{i:03d}", entity, cue_a, answer, rng))
        for j in range(distractors):
            other = f"{fresh(3)} {fresh(3)}"
            docs[kind].append(_planted_doc(kind, f"{kind.value}-dis-{j:03d}", other, rng.choice(CUES[kind]), fresh(4), rng))
    rng.shuffle(queries)
    corpora = {k: Corpus(k, tuple(v)) for k, v in docs.items()}
    return SyntheticTask(corpora, queries)


def _planted_doc(kind: ExpertKind, doc_id: str, entity: str, cue: str, answer: str, rng: random.Random) -> Document:
    filler = " ".join(rng.sample(_FILLER, 2))
    title = entity.title()
    if kind is ExpertKind.TABLE:
        header, rows = ("Entity", "Attribute", "Value"), ((title, cue, answer.title()),)
        body = serialize_table(header, rows, title)
        return Document(doc_id, kind, title, body, table=Table(header, rows))
    if kind is ExpertKind.IMAGE:
        body = f"Photograph of {title} from the {filler}. The {cue} shown is {answer.title()}."
        return Document(doc_id, kind, title, body, image_ref=f"img://{doc_id}.jpg")
    body = f"{title} appears in the {filler}. Its {cue} is {answer.title()}."
    return Document(doc_id, kind, title, body)


class SyntheticTeacher:
    """Generator policy that knows each query's modality, sub-query and answer.

    With the error probabilities set, it routes to a random expert, emits
    malformed tags or answers wrongly, giving the dual filter a mixed pool.
    Randomness is drawn from ``(seed, query_id, episode_seed, stage, step)`` so
    every episode is reproducible on its own.
    """

    def __init__(self, queries, seed: int = 0, p_wrong_route: float = 0.0, p_malformed: float = 0.0,
                 p_wrong_answer: float = 0.0, p_extra_step: float = 0.0):
        self.by_id = {q.id: q for q in queries}
        self.seed = seed
        self.p_wrong_route = p_wrong_route
        self.p_malformed = p_malformed
        self.p_wrong_answer = p_wrong_answer
        self.p_extra_step = p_extra_step

    def _rng(self, request: PolicyRequest) -> random.Random:
        ctx = request.context
        key = f"{self.seed}|{ctx.get('query_id')}|{ctx.get('episode_seed')}|{request.stage}|{ctx.get('step', 0)}"
        return random.Random(key)

    def complete(self, request: PolicyRequest) -> PolicyResponse:
        rng = self._rng(request)
        ctx = request.context
        q = self.by_id[ctx["query_id"]]
        bad = rng.random() < self.p_malformed
        if request.stage == "action":
            steps = ctx.get("steps", ())
            searched = [s for s in steps if isinstance(s.action, Search)]
            want = 2 if rng.random() < self.p_extra_step else 1
            if len(searched) >= want:
                text = f'<think>the evidence is sufficient</think><search expert="text">{NULL_QUERY}</search>'
            else:
                kind = q.gold_modality
                if rng.random() < self.p_wrong_route:
                    kind = rng.choice([k for k in ExpertKind if k != q.gold_modality])
                text = (f"<think>look up {q.gold_subquery} with the {kind.value} expert</think>"
                        f'<search expert="{kind.value}">{q.gold_subquery}</search>')
            return PolicyResponse(text.replace("</search>", "") if bad else text)
        if request.stage == "observation":
            docs = ctx.get("documents", ())
            body = docs[0].doc.body if docs else "nothing relevant was retrieved"
            return PolicyResponse(body if bad else f"<answer>{body}</answer>")
        answer = q.gold_answer if rng.random() >= self.p_wrong_answer else "unknown"
        return PolicyResponse(answer if bad else f"<answer>{answer}</answer>")
