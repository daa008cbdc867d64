"""Stepwise GRPO training loop for the toy routing policy."""

from __future__ import annotations

import functools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .experts import ExpertKind
from .grpo import TrainerConfig, grpo_loss, sample_groups, step_conditions
from .orchestrator import EpisodeConfig
from .rewards import RewardConfig
from .synthesis import GoldenTrajectory
from .toy_policy import ROUTES, ToyAgent, ToyRoutingPolicy, mean_route_accuracy, routing_items, toy_policy_gradient

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class IterationMetrics:
    iteration: int
    mean_reward: float
    expected_reward: float
    loss: float
    route_accuracy: float
    sampled_route_accuracy: float
    grad_norm: float
    learning_rate: float
    groups: list[dict] = field(default_factory=list)

    def to_record(self, with_groups: bool = False) -> dict:
        rec = asdict(self)
        if not with_groups:
            rec.pop("groups")
        return rec


def _sampled_route_hits(groups) -> tuple[int, int]:
    hits = total = 0
    for g in groups:
        if g.kind != "action":
            continue
        gold = g.meta.get("golden_expert")
        for s in g.samples:
            kind = ROUTES[s.trace.decisions[1].chosen]
            if kind is None:
                continue
            total += 1
            hits += int(kind == gold)
    return hits, total


def train(
    policy: ToyRoutingPolicy,
    dataset: Sequence[GoldenTrajectory],
    config: TrainerConfig,
    experts: Mapping[ExpertKind, object],
    reward_config: RewardConfig = RewardConfig(),
    episode_config: EpisodeConfig = EpisodeConfig(),
    metrics_path: str | Path | None = None,
    callback: Callable[[IterationMetrics], None] | None = None,
) -> tuple[ToyRoutingPolicy, list[IterationMetrics]]:
    """Run ``config.iterations`` rounds of snapshot, sample, score, clipped-gradient step.

    Each iteration samples ``group_size`` rollouts at every conditioning point of
    the batch from the frozen snapshot, then takes ``inner_epochs`` gradient
    steps on the summed stepwise loss (averaged over trajectories), each
    clipped to ``max_grad_norm``.

    Alongside the sampled mean reward, every iteration reports the exact
    expected reward of the snapshot, obtained by enumerating the toy policy's
    finite emission space at each conditioning point.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(config.seed)
    agent = ToyAgent(policy, rng, episode_config.doc_char_budget)
    provider = reward_config.provider()
    # conditioning points only depend on the golden data, so build them once
    conditions = []
    for golden in dataset:
        conds = step_conditions(golden, experts, reward_config, config, episode_config, provider)
        conditions.append([replace(c, score=functools.lru_cache(maxsize=None)(c.score)) for c in conds])
    tables: dict[str, tuple] = {}
    history: list[IterationMetrics] = []
    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        for it in range(config.iterations):
            policy.snapshot()
            if config.batch_size and config.batch_size < len(dataset):
                picks = np.sort(rng.choice(len(dataset), size=config.batch_size, replace=False))
            else:
                picks = np.arange(len(dataset))
            batch = [dataset[i] for i in picks]
            route_acc = mean_route_accuracy(policy, routing_items(batch), old=True)
            groups = []
            expected = []
            for i in picks:
                groups.extend(sample_groups(conditions[i], agent, config.group_size))
                for c in conditions[i]:
                    if c.key not in tables:
                        tables[c.key] = agent.emission_table(c.request, c.score)
                    expected.append(agent.expected_score(c.request, table=tables[c.key]))

            entries = []
            loss = 0.0
            for g in groups:
                gl = grpo_loss(g, config.clip_epsilon)
                loss += gl
                entries.append({"key": g.input_key, "kind": g.kind, "step": g.step, "mean_reward": g.mean_reward, "loss": gl})
            loss /= len(batch)
            rewards = [r for g in groups for r in g.rewards]
            mean_reward = math.fsum(rewards) / len(rewards)
            hits, total = _sampled_route_hits(groups)
            lr = config.lr_at(it)

            grad_norm = 0.0
            for _ in range(config.inner_epochs):
                grad = toy_policy_gradient(policy, groups, config.clip_epsilon) / len(batch)
                grad_norm = float(np.linalg.norm(grad))
                if not (math.isfinite(loss) and math.isfinite(grad_norm)):
                    raise TrainingDiverged(
                        f"non-finite loss or gradient at iteration {it}",
                        {"iteration": it, "loss": loss, "grad_norm": grad_norm, "groups": entries},
                    )
                if grad_norm > config.max_grad_norm:
                    grad = grad * (config.max_grad_norm / grad_norm)
                if lr != 0.0:
                    policy.set_flat(policy.flat() - lr * grad)

            m = IterationMetrics(it, mean_reward, math.fsum(expected) / len(expected), loss, route_acc, hits / total if total else float("nan"),
                                 grad_norm, lr, entries)
            history.append(m)
            if sink:
                sink.write(json.dumps(m.to_record()) + "\n")
            if callback:
                callback(m)
            log.debug("iter %d reward %.4f route %.4f", it, mean_reward, route_acc)
    finally:
        if sink:
            sink.close()
    return policy, history


def moving_average(values: Sequence[float], window: int = 5) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.shape[0] < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")
