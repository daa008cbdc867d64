import json
import math

import numpy as np
import pytest

from expertrag.grpo import TrainerConfig
from expertrag.toy_policy import ToyRoutingPolicy, params_equal
from expertrag.training import moving_average, train

from .helpers import synthetic_goldens


@pytest.fixture(scope="module")
def goldens(synthetic_task, synthetic_experts):
    return synthetic_goldens(synthetic_task, synthetic_experts)


def _policy(goldens):
    return ToyRoutingPolicy.from_queries(g.trajectory.query for g in goldens)


def test_zero_learning_rate_leaves_parameters(goldens, synthetic_experts):
    policy = _policy(goldens[:6])
    before = {k: v.copy() for k, v in policy.params.items()}
    _, hist = train(policy, goldens[:6], TrainerConfig(learning_rate=0.0, iterations=3, group_size=4), synthetic_experts)
    assert params_equal(before, policy.params)
    assert all(m.learning_rate == 0.0 for m in hist)


def test_one_iteration_group_count(goldens, synthetic_experts):
    # each teacher golden has one search and one NULL step, so 2*1+1 groups per query
    batch = goldens[:5]
    _, (m,) = train(_policy(batch), batch, TrainerConfig(iterations=1, group_size=4), synthetic_experts)
    assert len(m.groups) == sum(2 * len(g.golden_steps) + 1 for g in batch) == 15
    assert [e["kind"] for e in m.groups[:3]] == ["action", "observation", "final"]


def test_initial_route_accuracy_is_uniform(goldens, synthetic_experts):
    _, (m,) = train(_policy(goldens), goldens, TrainerConfig(iterations=1, group_size=2, learning_rate=0.0),
                    synthetic_experts)
    assert m.route_accuracy == pytest.approx(1 / 3, abs=1e-12)


def test_metrics_file(tmp_path, goldens, synthetic_experts):
    path = tmp_path / "m.jsonl"
    seen = []
    _, hist = train(_policy(goldens[:4]), goldens[:4], TrainerConfig(iterations=4, group_size=4, learning_rate=0.5),
                    synthetic_experts, metrics_path=path, callback=seen.append)
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert [l["iteration"] for l in lines] == [0, 1, 2, 3] and seen == hist
    for rec in lines:
        assert "groups" not in rec
        assert all(math.isfinite(rec[k]) for k in ("mean_reward", "expected_reward", "loss", "grad_norm"))
        assert rec["grad_norm"] >= 0


def test_training_is_seeded(goldens, synthetic_experts):
    cfg = TrainerConfig(iterations=3, group_size=4, learning_rate=0.5, seed=11)
    a, ha = train(_policy(goldens[:6]), goldens[:6], cfg, synthetic_experts)
    b, hb = train(_policy(goldens[:6]), goldens[:6], cfg, synthetic_experts)
    assert np.array_equal(a.flat(), b.flat())
    assert [m.to_record() for m in ha] == [m.to_record() for m in hb]


def test_batches(goldens, synthetic_experts):
    _, (m,) = train(_policy(goldens), goldens, TrainerConfig(iterations=1, group_size=2, batch_size=4),
                    synthetic_experts)
    assert len(m.groups) == 12


def test_empty_dataset(synthetic_experts):
    with pytest.raises(ValueError):
        train(ToyRoutingPolicy(["a"]), [], TrainerConfig(), synthetic_experts)


def test_moving_average():
    assert np.allclose(moving_average([1, 2, 3, 4, 5, 6], 5), [3, 4])
    assert np.array_equal(moving_average([1.0, 2.0], 5), [1.0, 2.0])


def test_cosine_schedule():
    cfg = TrainerConfig(learning_rate=0.5, iterations=100)
    assert cfg.lr_at(0) == 0.5 and cfg.lr_at(50) == pytest.approx(0.25)
    assert TrainerConfig(lr_schedule="constant").lr_at(99) == 1e-2
