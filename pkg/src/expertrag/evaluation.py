"""Batch evaluation, metric aggregation and expert-usage histograms."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .experts import ExpertKind
from .llm_client import Policy
from .orchestrator import EpisodeConfig, EpisodeError, FinalAnswer, NoRetrieval, Query, Search, Trajectory, run_episode
from .rewards import accuracy, f1_recall, recall_tokens

NULL_BUCKET = "null"
INVALID_BUCKET = "invalid"
BUCKETS = tuple(k.value for k in ExpertKind) + (NULL_BUCKET, INVALID_BUCKET)


@dataclass
class EvalRecord:
    query_id: str
    f1_recall: float
    accuracy: int
    steps_used: int
    experts_used: list[str]
    answer: str = ""
    error: str | None = None

    @classmethod
    def from_record(cls, rec: Mapping) -> EvalRecord:
        return cls(**{k: rec[k] for k in ("query_id", "f1_recall", "accuracy", "steps_used", "experts_used")},
                   answer=rec.get("answer", ""), error=rec.get("error"))


@dataclass
class EvalReport:
    dataset_id: str
    records: list[EvalRecord]
    histogram: dict[int, dict[str, int]] = field(default_factory=dict)

    @property
    def mean_f1_recall(self) -> float:
        return _mean(r.f1_recall for r in self.records)

    @property
    def mean_accuracy(self) -> float:
        return _mean(r.accuracy for r in self.records)

    @property
    def mean_steps(self) -> float:
        return _mean(r.steps_used for r in self.records)

    @property
    def errors(self) -> int:
        return sum(r.error is not None for r in self.records)

    def summary(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "queries": len(self.records),
            "mean_f1_recall": self.mean_f1_recall,
            "mean_accuracy": self.mean_accuracy,
            "mean_steps": self.mean_steps,
            "errors": self.errors,
            "histogram": {str(t): counts for t, counts in sorted(self.histogram.items())},
        }


def _mean(values: Iterable[float]) -> float:
    vals = list(values)
    # fsum is exact, so the mean does not depend on record order
    return math.fsum(vals) / len(vals) if vals else 0.0


def step_bucket(step) -> str:
    if not step.format_ok:
        return INVALID_BUCKET
    if isinstance(step.action, Search):
        return step.action.select.value
    if isinstance(step.action, (NoRetrieval, FinalAnswer)):
        return NULL_BUCKET
    return INVALID_BUCKET


def expert_distribution(trajectories: Sequence[Trajectory]) -> dict[int, dict[str, int]]:
    """Per-step counts of the expert chosen, keyed by 1-based step index.

    Counts at step ``t`` sum to the number of trajectories that reached it.
    NULL searches and direct answers land in ``null``; malformed actions in
    ``invalid``.
    """
    hist: dict[int, dict[str, int]] = {}
    for traj in trajectories:
        for t, step in enumerate(traj.steps, 1):
            counts = hist.setdefault(t, dict.fromkeys(BUCKETS, 0))
            counts[step_bucket(step)] += 1
    return hist


def histogram_rows(hist: Mapping[int, Mapping[str, int]]) -> list[list]:
    """Plot-ready table: a header row then one row per step."""
    rows: list[list] = [["step", *BUCKETS]]
    for t in sorted(hist):
        rows.append([t, *(hist[t].get(b, 0) for b in BUCKETS)])
    return rows


def format_histogram(hist: Mapping[int, Mapping[str, int]]) -> str:
    rows = histogram_rows(hist)
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(str(c).rjust(w) for c, w in zip(r, widths)) for r in rows)


def score_trajectory(traj: Trajectory, gold: str) -> EvalRecord:
    if traj.error is not None:
        return EvalRecord(traj.query_id, 0.0, 0, len(traj.retrieval_steps), traj.experts_used(), traj.answer, traj.error)
    f1 = f1_recall(traj.answer, gold) if recall_tokens(gold) else 0.0
    return EvalRecord(traj.query_id, f1, accuracy(traj.answer, gold), len(traj.retrieval_steps),
                      traj.experts_used(), traj.answer)


def evaluate(
    dataset: Sequence[Query],
    policy: Policy,
    experts: Mapping[ExpertKind, object],
    config: EpisodeConfig = EpisodeConfig(),
    concurrency: int = 1,
    dataset_id: str = "dataset",
) -> tuple[EvalReport, list[Trajectory]]:
    """Run one episode per query and score it against its gold answer.

    Episode ``i`` uses seed ``config.seed + i``. A failed episode scores 0 and
    keeps its error note. Records come back in dataset order regardless of
    ``concurrency``.
    """
    if not dataset:
        raise ValueError("evaluation dataset is empty")
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")

    def one(i: int) -> Trajectory:
        query = dataset[i]
        try:
            return run_episode(policy, experts, query, replace(config, seed=config.seed + i))
        except EpisodeError as exc:
            return exc.trajectory

    if concurrency == 1:
        trajs = [one(i) for i in range(len(dataset))]
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            trajs = list(pool.map(one, range(len(dataset))))
    records = [score_trajectory(t, q.gold_answer or "") for t, q in zip(trajs, dataset)]
    return EvalReport(dataset_id, records, expert_distribution(trajs)), trajs


def write_report(report: EvalReport, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records_path, summary_path = out / "records.jsonl", out / "summary.json"
    with open(records_path, "w", encoding="utf-8") as fh:
        for r in report.records:
            fh.write(json.dumps(asdict(r), ensure_ascii=False) + "\n")
    summary_path.write_text(json.dumps(report.summary(), indent=2, ensure_ascii=False) + "\n")
    return records_path, summary_path


def read_report(out_dir: str | Path) -> EvalReport:
    """Rebuild a report from persisted records; aggregates are recomputed, not read."""
    out = Path(out_dir)
    summary = json.loads((out / "summary.json").read_text())
    with open(out / "records.jsonl", encoding="utf-8") as fh:
        records = [EvalRecord.from_record(json.loads(line)) for line in fh if line.strip()]
    hist = {int(t): dict(c) for t, c in summary.get("histogram", {}).items()}
    return EvalReport(summary["dataset_id"], records, hist)
