"""Candidate trajectory generation and golden-trajectory selection."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .experts import ExpertKind
from .llm_client import Policy
from .orchestrator import EpisodeConfig, EpisodeError, Query, ReasoningStep, Search, Trajectory, run_episode
from .rewards import accuracy, f1_recall, recall_tokens


@dataclass
class GoldenTrajectory:
    trajectory: Trajectory
    provenance: str = "unknown"

    @property
    def gold_answer(self) -> str:
        return self.trajectory.gold_answer or ""

    @property
    def golden_steps(self) -> list[ReasoningStep]:
        """Retrieval steps; these carry the golden actions and observations."""
        return self.trajectory.retrieval_steps

    def to_record(self) -> dict:
        rec = self.trajectory.to_record()
        rec.update(provenance=self.provenance, accepted=True)
        return rec

    @classmethod
    def from_record(cls, rec: Mapping, experts=None) -> GoldenTrajectory:
        return cls(Trajectory.from_record(rec, experts), rec.get("provenance", "unknown"))


def filter_violations(traj: Trajectory) -> list[str]:
    """Reasons a trajectory fails the answer or structure filter; empty if it passes."""
    problems = []
    if traj.error:
        problems.append(f"episode error: {traj.error}")
    if not traj.gold_answer or not recall_tokens(traj.gold_answer):
        problems.append("no gold answer")
    elif not accuracy(traj.answer, traj.gold_answer):
        problems.append("final answer does not match gold")
    if not traj.answer_format_ok:
        problems.append("final answer malformed")
    for i, step in enumerate(traj.steps, 1):
        if not step.format_ok:
            problems.append(f"step {i}: malformed action")
        if isinstance(step.action, Search):
            if not step.observation.doc_ids:
                problems.append(f"step {i}: empty retrieval")
            if not step.observation.format_ok:
                problems.append(f"step {i}: malformed observation")
    if not traj.retrieval_steps:
        problems.append("no retrieval steps")
    return problems


def validate_golden(golden: GoldenTrajectory) -> None:
    problems = filter_violations(golden.trajectory)
    if problems:
        raise ValueError(f"invalid golden trajectory {golden.trajectory.query_id}: {'; '.join(problems)}")


def sample_candidates(
    generator: Policy,
    query: Query,
    gold_answer: str,
    n: int,
    experts: Mapping[ExpertKind, object],
    config: EpisodeConfig = EpisodeConfig(),
) -> list[Trajectory]:
    """Run ``n`` independent episodes (episode seeds ``config.seed + i``).

    A failed episode is returned as its partial trajectory with ``error`` set,
    so one bad call never discards the rest of the pool.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    query = replace(query, gold_answer=gold_answer)
    out = []
    for i in range(n):
        cfg = replace(config, seed=config.seed + i)
        try:
            traj = run_episode(generator, experts, query, cfg)
        except EpisodeError as exc:
            traj = exc.trajectory
        traj.gold_answer = gold_answer
        out.append(traj)
    return out


def _mean_intermediate_recall(traj: Trajectory) -> float:
    scores = [f1_recall(s.observation.answer, traj.gold_answer) for s in traj.retrieval_steps]
    return math.fsum(scores) / len(scores) if scores else 0.0


def dual_filter(candidates: Sequence[Trajectory], keep_all: bool = False, provenance: str = "unknown"):
    """Keep candidates that reach the gold answer through well-formed, evidence-backed steps.

    Survivors are ranked by fewest steps, then highest mean intermediate recall
    against the gold answer, then candidate order. Returns the best survivor
    (or ``None``), or all survivors in rank order when ``keep_all`` is set.
    """
    survivors = [(i, c) for i, c in enumerate(candidates) if not filter_violations(c)]
    survivors.sort(key=lambda ic: (len(ic[1].steps), -_mean_intermediate_recall(ic[1]), ic[0]))
    ranked = [GoldenTrajectory(c, provenance) for _, c in survivors]
    if keep_all:
        return ranked
    return ranked[0] if ranked else None


@dataclass
class DatasetSummary:
    queries: int
    accepted: int
    acceptance_rate: float
    routing_distribution: dict[str, int] = field(default_factory=dict)
    rejected_ids: list[str] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "queries": self.queries,
            "accepted": self.accepted,
            "acceptance_rate": self.acceptance_rate,
            "routing_distribution": self.routing_distribution,
            "rejected_ids": self.rejected_ids,
        }


def build_dataset(
    queries: Sequence[Query],
    generator: Policy,
    n_per_query: int,
    out: str | Path,
    experts: Mapping[ExpertKind, object],
    config: EpisodeConfig = EpisodeConfig(),
    provenance: str = "generator",
    keep_all: bool = False,
) -> DatasetSummary:
    """Generate candidates per query, dual-filter them and write accepted golden trajectories as JSON lines."""
    if not queries:
        raise ValueError("query list is empty")
    out = Path(out)
    routing: Counter[str] = Counter()
    accepted = 0
    rejected = []
    # opening first surfaces an unwritable path before any generation
    with open(out, "w", encoding="utf-8") as fh:
        for qi, query in enumerate(queries):
            if not query.gold_answer:
                raise ValueError(f"query {query.id} has no gold answer")
            cfg = replace(config, seed=config.seed + qi * n_per_query)
            pool = sample_candidates(generator, query, query.gold_answer, n_per_query, experts, cfg)
            kept = dual_filter(pool, keep_all=True, provenance=provenance)
            if not keep_all:
                kept = kept[:1]
            if not kept:
                rejected.append(query.id)
                continue
            accepted += 1
            for golden in kept:
                routing.update(golden.trajectory.experts_used())
                fh.write(json.dumps(golden.to_record(), ensure_ascii=False) + "\n")
    dist = {k.value: routing.get(k.value, 0) for k in ExpertKind}
    return DatasetSummary(len(queries), accepted, accepted / len(queries), dist, rejected)


def load_golden(path: str | Path, experts=None, validate: bool = True) -> list[GoldenTrajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            golden = GoldenTrajectory.from_record(json.loads(line), experts)
            if validate:
                try:
                    validate_golden(golden)
                except ValueError as exc:
                    raise ValueError(f"line {lineno}: {exc}") from None
            out.append(golden)
    return out
