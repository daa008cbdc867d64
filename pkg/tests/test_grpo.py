import math

import numpy as np
import pytest

from expertrag.experts import ExpertKind
from expertrag.grpo import (
    RolloutGroup,
    RolloutSample,
    StepwiseSamplingError,
    TrainerConfig,
    clipped_surrogate,
    collect_step_groups,
    grpo_loss,
    load_trainer_config,
    normalize_advantages,
    stepwise_loss,
)
from expertrag.llm_client import ConfigurationError, FunctionPolicy, PolicyResponse
from expertrag.toy_policy import ToyAgent, ToyRoutingPolicy

from .helpers import scripted_golden

T1 = [(ExpertKind.TEXT, "Setophaga genus", "Setophaga is a genus of New World warblers")]
T2 = T1 + [(ExpertKind.IMAGE, "warbler branch", "a bay-breasted warbler")]
T3 = T2 + [(ExpertKind.TEXT, "Parulidae family", "The family Parulidae contains the warblers")]


def _group(rewards, old=None, new=None):
    old = old if old is not None else [[-0.5, -0.2]] * len(rewards)
    new = new if new is not None else old
    samples = [RolloutSample(tuple(range(len(o))), o, n) for o, n in zip(old, new)]
    return RolloutGroup("k", samples, list(rewards))


# --- advantages -------------------------------------------------------------


def test_advantages_examples():
    assert normalize_advantages([1, 0]).tolist() == [1.0, -1.0]
    assert normalize_advantages([1, 1, 1]).tolist() == [0.0, 0.0, 0.0]
    np.testing.assert_allclose(normalize_advantages([2, 1, 0]), [math.sqrt(1.5), 0.0, -math.sqrt(1.5)], atol=1e-15)


def test_advantages_need_two():
    with pytest.raises(ValueError):
        normalize_advantages([1.0])


def test_advantages_tiny_variance_is_zero():
    assert not normalize_advantages([1.0, 1.0 + 1e-13]).any()


# --- surrogate --------------------------------------------------------------


@pytest.mark.parametrize("ratio, adv, expected", [(1.0, 0.5, 0.5), (1.5, 1.0, 1.2), (0.5, -1.0, -0.8)])
def test_clipped_surrogate_examples(ratio, adv, expected):
    assert clipped_surrogate(ratio, adv, 0.2) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("ratio", [float("nan"), float("inf"), 0.0, -1.0])
def test_clipped_surrogate_bad_ratio(ratio):
    with pytest.raises(ValueError):
        clipped_surrogate(ratio, 1.0, 0.2)


# --- loss -------------------------------------------------------------------


def test_loss_on_policy_is_zero():
    assert grpo_loss(_group([0.3, 0.9, 0.1, 0.7])) == 0.0


def test_loss_two_samples():
    assert grpo_loss(_group([1, 0])) == 0.0


def test_loss_zero_variance():
    assert grpo_loss(_group([0.5, 0.5], new=[[-0.1, -0.1], [-2.0, -0.3]])) == 0.0


def test_loss_hand_value():
    # ratios e^{0.1} (A=+1) and 1 (A=-1): -(min(e^.1, 1.2) - 1) / 2
    g = _group([1, 0], old=[[-1.0], [-1.0]], new=[[-0.9], [-1.0]])
    assert grpo_loss(g) == pytest.approx(-(math.exp(0.1) - 1) / 2, abs=1e-15)


def test_sequence_level_ratio():
    s = RolloutSample((1, 2, 3), [-1, -2, -3], [-1.5, -1.5, -2.5])
    assert s.ratio == pytest.approx(math.exp(0.5))


def test_rollout_validation():
    with pytest.raises(ValueError):
        RolloutSample((1, 2), [-1.0], [-1.0])
    with pytest.raises(ValueError):
        RolloutSample((1,), [-1.0], [-1.0, -2.0])
    with pytest.raises(ValueError):
        _group([1.0])
    with pytest.raises(ValueError):
        RolloutGroup("k", [RolloutSample((), [], [])] * 2, [1.0])


def test_trainer_config_validation(tmp_path):
    with pytest.raises(ValueError):
        TrainerConfig(group_size=1)
    with pytest.raises(ValueError):
        TrainerConfig(clip_epsilon=1.0)
    p = tmp_path / "t.yaml"
    p.write_text("trainer:\n  group_size: 4\n  learning_rate: 0.5\n")
    cfg = load_trainer_config(p, iterations=7)
    assert (cfg.group_size, cfg.learning_rate, cfg.iterations) == (4, 0.5, 7)


def test_cosine_schedule():
    cfg = TrainerConfig(learning_rate=1.0, iterations=10)
    assert cfg.lr_at(0) == 1.0 and cfg.lr_at(5) == pytest.approx(0.5) and cfg.lr_at(10) == pytest.approx(0.0)
    assert TrainerConfig(learning_rate=0.3, lr_schedule="constant").lr_at(99) == 0.3


# --- stepwise ---------------------------------------------------------------


@pytest.fixture(scope="module")
def goldens(request):
    experts = request.getfixturevalue("small_experts")
    return {n: scripted_golden(experts, steps, "Setophaga") for n, steps in ((1, T1), (2, T2), (3, T3))}


@pytest.mark.parametrize("t", [1, 2, 3])
def test_stepwise_term_count(small_experts, goldens, t):
    policy = ToyRoutingPolicy.from_queries([goldens[t].trajectory.query])
    total, diag = stepwise_loss(goldens[t], ToyAgent(policy, 0), small_experts)
    assert len(diag["groups"]) == 2 * t + 1
    kinds = [g["kind"] for g in diag["groups"]]
    assert kinds == ["action", "observation"] * t + ["final"]
    assert total == 0.0  # on-policy


def test_stepwise_conditioning(small_experts, goldens):
    seen = []

    def fn(req):
        seen.append((req.stage, req.context.get("step"), len(req.context.get("steps", ()))))
        return PolicyResponse("<answer>x</answer>", (-0.5,))

    collect_step_groups(goldens[2], FunctionPolicy(fn), small_experts, trainer_config=TrainerConfig(group_size=2))
    assert seen == [("action", 1, 0)] * 2 + [("observation", 1, 0)] * 2 + [("action", 2, 1)] * 2 + \
        [("observation", 2, 1)] * 2 + [("answer", None, 2)] * 2


def test_stepwise_requires_logprobs(small_experts, goldens):
    with pytest.raises(ConfigurationError, match="log-probabilities"):
        collect_step_groups(goldens[1], FunctionPolicy(lambda r: "<answer>x</answer>"), small_experts)


def test_stepwise_failure_carries_groups(small_experts, goldens):
    calls = []

    def fn(req):
        calls.append(req.stage)
        if req.stage == "answer":
            raise RuntimeError("boom")
        return PolicyResponse("<answer>x</answer>", (-0.1,))

    with pytest.raises(StepwiseSamplingError) as info:
        collect_step_groups(goldens[1], FunctionPolicy(fn), small_experts, trainer_config=TrainerConfig(group_size=2))
    assert len(info.value.groups) == 2


def test_golden_requires_retrieval(small_experts, goldens):
    from expertrag.synthesis import GoldenTrajectory
    from expertrag.orchestrator import Trajectory

    with pytest.raises(ValueError):
        collect_step_groups(GoldenTrajectory(Trajectory("q", "?", gold_answer="x")), FunctionPolicy(lambda r: ""),
                            small_experts)
