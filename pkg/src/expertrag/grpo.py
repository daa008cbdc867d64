"""Group relative policy optimization, applied per reasoning step.

For a golden trajectory with ``T`` retrieval steps the stepwise objective sums
``2T + 1`` group losses: per step, one group of action emissions conditioned on
the query and the golden prefix (scored with the action reward) and one group
of observation emissions conditioned on the golden step (scored with the
observation reward); plus one group of final answers conditioned on the whole
golden trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import yaml

from . import kernels
from .experts import ExpertKind
from .llm_client import ConfigurationError, Policy, PolicyRequest, PolicyResponse
from .orchestrator import (
    ANSWER_TEMPLATE,
    EpisodeConfig,
    ReasoningStep,
    parse_action,
    render_observation_prompt,
    render_step_prompt,
    with_documents,
)
from .rewards import RewardConfig, SimilarityProvider, action_reward, observation_reward, recall_tokens
from .synthesis import GoldenTrajectory


@dataclass
class RolloutSample:
    tokens: tuple[int, ...]
    logprob_old: np.ndarray
    logprob_new: np.ndarray
    text: str = ""
    trace: Any = None

    def __post_init__(self):
        self.logprob_old = np.asarray(self.logprob_old, dtype=np.float64)
        self.logprob_new = np.asarray(self.logprob_new, dtype=np.float64)
        if self.logprob_old.shape != self.logprob_new.shape:
            raise ValueError("old and new log-probabilities differ in length")
        if self.tokens and len(self.tokens) != self.logprob_old.shape[0]:
            raise ValueError("log-probabilities must match the token sequence length")

    @property
    def ratio(self) -> float:
        return math.exp(float(self.logprob_new.sum()) - float(self.logprob_old.sum()))


@dataclass
class RolloutGroup:
    input_key: str
    samples: list[RolloutSample]
    rewards: list[float]
    kind: str = "action"
    step: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.samples) != len(self.rewards):
            raise ValueError("samples and rewards differ in length")
        if len(self.samples) < 2:
            raise ValueError("a rollout group needs at least 2 samples")

    @property
    def mean_reward(self) -> float:
        return math.fsum(self.rewards) / len(self.rewards)


@dataclass(frozen=True)
class TrainerConfig:
    group_size: int = 8
    clip_epsilon: float = 0.2
    learning_rate: float = 1e-2
    temperature: float = 1.0
    max_grad_norm: float = 1.0
    iterations: int = 300
    seed: int = 0
    lr_schedule: str = "cosine"
    inner_epochs: int = 1
    batch_size: int | None = None

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.inner_epochs < 1:
            raise ValueError("inner_epochs must be >= 1")

    def lr_at(self, iteration: int) -> float:
        if self.lr_schedule == "constant" or self.iterations <= 1:
            return self.learning_rate
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * iteration / self.iterations))


_TRAINER_KEYS = ("group_size", "clip_epsilon", "learning_rate", "temperature", "max_grad_norm",
                 "iterations", "seed", "lr_schedule", "inner_epochs", "batch_size")


def load_trainer_config(path: str | Path, **overrides) -> TrainerConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    data = data.get("trainer", data)
    values = {k: data[k] for k in _TRAINER_KEYS if k in data}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainerConfig(**values)


# --- objective -------------------------------------------------------------


def normalize_advantages(rewards: Sequence[float]) -> np.ndarray:
    """``(r - mean) / std`` with the population std; all zeros when std < 1e-12."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.shape[0] < 2:
        raise ValueError("advantage normalization needs a group of at least 2 rewards")
    return kernels.group_advantages(r, np.array([0, r.shape[0]]))


def clipped_surrogate(ratio: float, advantage: float, epsilon: float) -> float:
    """``min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)``."""
    if not math.isfinite(ratio) or ratio <= 0:
        raise ValueError(f"ratio must be finite and positive, got {ratio}")
    clipped = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon)
    return min(ratio * advantage, clipped * advantage)


def grpo_loss(group: RolloutGroup, epsilon: float = 0.2) -> float:
    """Negative group mean of clipped surrogates with sequence-level ratios.

    Advantages have zero mean by construction, so the mean of the surrogate
    minus the advantage is the same quantity; computing it that way makes the
    on-policy loss exactly zero instead of a rounding residue.
    """
    adv = normalize_advantages(group.rewards)
    ratios = np.array([s.ratio for s in group.samples])
    if not np.all(np.isfinite(ratios)) or np.any(ratios <= 0):
        raise ValueError("non-finite or non-positive probability ratio")
    surr, _ = kernels.clipped_surrogates(ratios, adv, epsilon)
    return -math.fsum(surr - adv) / len(group.samples)


# --- stepwise groups -------------------------------------------------------


class StepwiseSamplingError(RuntimeError):
    def __init__(self, message: str, groups: list[RolloutGroup]):
        super().__init__(message)
        self.groups = groups


def _to_sample(policy: Policy, resp: PolicyResponse) -> RolloutSample:
    if resp.token_logprobs is None:
        raise ConfigurationError("policy did not return token log-probabilities; it cannot be trained with GRPO")
    old = np.array(resp.token_logprobs)
    rescore = getattr(policy, "rescore", None)
    new = np.asarray(rescore(resp)) if rescore is not None else old.copy()
    tokens = tuple(getattr(resp.trace, "tokens", ()))
    return RolloutSample(tokens, old, new, resp.text, resp.trace)


def _sample_group(policy: Policy, request: PolicyRequest, n: int) -> list[PolicyResponse]:
    fast = getattr(policy, "sample_group", None)
    if fast is not None:
        return fast(request, n)
    return [policy.complete(request) for _ in range(n)]


def _intermediate_target(step: ReasoningStep, golden: GoldenTrajectory, config: RewardConfig) -> str:
    if config.intermediate_target == "golden_observation" and recall_tokens(step.observation.answer):
        return step.observation.answer
    return golden.gold_answer


@dataclass
class StepCondition:
    """One conditioning point of the stepwise objective: a request and how to score its emissions."""

    key: str
    kind: str
    step: int
    request: PolicyRequest
    score: Callable[[str], float]
    meta: dict = field(default_factory=dict)


def step_conditions(
    golden: GoldenTrajectory,
    experts: Mapping[ExpertKind, object],
    reward_config: RewardConfig = RewardConfig(),
    trainer_config: TrainerConfig = TrainerConfig(),
    episode_config: EpisodeConfig = EpisodeConfig(),
    provider: SimilarityProvider | None = None,
) -> list[StepCondition]:
    """The ``2T + 1`` conditioning points of one golden trajectory, in order."""
    steps = golden.golden_steps
    if not steps:
        raise ValueError("golden trajectory has no retrieval steps")
    provider = provider or reward_config.provider()
    traj = golden.trajectory
    out: list[StepCondition] = []

    def request(stage: str, prompt: str, **context) -> PolicyRequest:
        ctx = {"query": traj.query, "query_id": traj.query_id, **context}
        return PolicyRequest(prompt, trainer_config.temperature, episode_config.max_tokens,
                             logprobs_requested=True, stage=stage, context=ctx)

    def action_scorer(gstep: ReasoningStep) -> Callable[[str], float]:
        def score(text: str) -> float:
            reason, action, ok = parse_action(text)
            return action_reward(ReasoningStep(reason, action, format_ok=ok), gstep, reward_config, provider).composed
        return score

    def answer_scorer(target: str, is_final: bool) -> Callable[[str], float]:
        return lambda text: observation_reward(text, target, is_final).composed

    hydrated: list[ReasoningStep] = []
    for t, gstep in enumerate(steps, 1):
        prior = tuple(hydrated)
        prompt = render_step_prompt(traj.query, prior, doc_char_budget=episode_config.doc_char_budget)
        out.append(StepCondition(f"{traj.query_id}/action/{t}", "action", t,
                                 request("action", prompt, step=t, steps=prior), action_scorer(gstep),
                                 {"golden_expert": gstep.expert, "query": traj.query}))

        docs = tuple(experts[gstep.action.select].search(gstep.action.search, episode_config.top_k))
        prompt = render_observation_prompt(gstep.reason, gstep.action, docs, episode_config.observation_conditioning,
                                           traj.query, prior, episode_config.doc_char_budget)
        req = request("observation", prompt, step=t, reason=gstep.reason, action=gstep.action, documents=docs, steps=prior)
        target = _intermediate_target(gstep, golden, reward_config)
        out.append(StepCondition(f"{traj.query_id}/observation/{t}", "observation", t, req, answer_scorer(target, False)))
        hydrated.append(with_documents(gstep, docs))

    prompt = render_step_prompt(traj.query, hydrated, ANSWER_TEMPLATE, episode_config.doc_char_budget)
    out.append(StepCondition(f"{traj.query_id}/final", "final", len(steps) + 1,
                             request("answer", prompt, steps=tuple(hydrated)), answer_scorer(golden.gold_answer, True)))
    return out


def collect_step_groups(
    golden: GoldenTrajectory,
    policy: Policy,
    experts: Mapping[ExpertKind, object],
    reward_config: RewardConfig = RewardConfig(),
    trainer_config: TrainerConfig = TrainerConfig(),
    episode_config: EpisodeConfig = EpisodeConfig(),
    provider: SimilarityProvider | None = None,
) -> list[RolloutGroup]:
    """Sample ``G`` emissions at each of the ``2T + 1`` conditioning points and score them."""
    conditions = step_conditions(golden, experts, reward_config, trainer_config, episode_config, provider)
    return sample_groups(conditions, policy, trainer_config.group_size)


def sample_groups(conditions: Sequence[StepCondition], policy: Policy, group_size: int) -> list[RolloutGroup]:
    groups: list[RolloutGroup] = []
    for cond in conditions:
        try:
            samples = [_to_sample(policy, r) for r in _sample_group(policy, cond.request, group_size)]
        except ConfigurationError:
            raise
        except Exception as exc:
            raise StepwiseSamplingError(f"sampling failed after {len(groups)} groups: {exc}", groups) from exc
        rewards = [cond.score(s.text) for s in samples]
        groups.append(RolloutGroup(cond.key, samples, rewards, cond.kind, cond.step, dict(cond.meta)))
    return groups


def stepwise_loss(
    golden: GoldenTrajectory,
    policy: Policy,
    experts: Mapping[ExpertKind, object],
    reward_config: RewardConfig = RewardConfig(),
    trainer_config: TrainerConfig = TrainerConfig(),
    episode_config: EpisodeConfig = EpisodeConfig(),
    provider: SimilarityProvider | None = None,
) -> tuple[float, dict]:
    """Sum of the ``2T + 1`` group losses, plus per-group diagnostics."""
    groups = collect_step_groups(golden, policy, experts, reward_config, trainer_config, episode_config, provider)
    entries = []
    total = 0.0
    for g in groups:
        loss = grpo_loss(g, trainer_config.clip_epsilon)
        total += loss
        entries.append({"key": g.input_key, "kind": g.kind, "step": g.step, "mean_reward": g.mean_reward, "loss": loss})
    return total, {"groups": entries, "rollout_groups": groups}
