import numpy as np
import pytest

from expertrag.experts import ExpertKind
from expertrag.grpo import RolloutGroup, TrainerConfig, collect_step_groups
from expertrag.llm_client import PolicyRequest
from expertrag.orchestrator import Query, parse_action, run_episode
from expertrag.toy_policy import (
    ROUTES,
    StaleSnapshotError,
    ToyAgent,
    ToyRoutingPolicy,
    params_equal,
    render_template,
    toy_policy_gradient,
    toy_total_loss,
)

from .helpers import random_toy_config, scripted_golden
from .oracles import central_difference

STEPS = [(ExpertKind.TEXT, "Setophaga genus", "Setophaga is a genus of New World warblers"),
         (ExpertKind.IMAGE, "warbler branch", "a bay-breasted warbler")]


@pytest.fixture(scope="module")
def golden(request):
    return scripted_golden(request.getfixturevalue("small_experts"), STEPS, "Setophaga")


def _fd_check(policy, groups):
    x0 = policy.flat()

    def loss(x):
        policy.set_flat(x)
        return toy_total_loss(policy, groups)

    fd = central_difference(loss, x0)
    policy.set_flat(x0)
    g = toy_policy_gradient(policy, groups)
    return g, fd


def test_probabilities_are_normalized():
    policy = ToyRoutingPolicy(["a", "b"], init_scale=3.0, seed=1)
    p = policy.route_distribution("a b c", 2)
    assert abs(p.sum() - 1.0) < 1e-9 and np.all(p > 0)


def test_uniform_policy_route_accuracy_is_one_third():
    policy = ToyRoutingPolicy(["a"])
    assert policy.route_accuracy("a", ExpertKind.TABLE) == pytest.approx(1 / 3, abs=1e-15)


def test_templates():
    assert render_template("full", "What is the color of X?") == "what is the color of x"
    assert render_template("content", "What is the color of X?") == "color x"
    assert render_template("head2", "What is the big red color of X?") == "big red"
    assert render_template("tail2", "What is the big red color of X?") == "color x"
    with pytest.raises(ValueError):
        render_template("nope", "q")


def test_agent_emissions_parse(small_experts):
    policy = ToyRoutingPolicy.from_queries(["which warbler genus"], init_scale=1.0, seed=3)
    agent = ToyAgent(policy, 0)
    req = PolicyRequest("p", stage="action", context={"query": "which warbler genus", "step": 1})
    outs = agent.sample_group(req, 64)
    oks = [parse_action(o.text)[2] for o in outs]
    assert any(oks) and not all(oks)
    for o in outs:
        assert len(o.token_logprobs) == len(o.trace.decisions)
        assert all(lp <= 0 for lp in o.token_logprobs)


def test_agent_runs_episodes(small_experts):
    policy = ToyRoutingPolicy.from_queries(["warbler genus"], init_scale=0.5, seed=0)
    traj = run_episode(ToyAgent(policy, 1), small_experts, Query("q", "warbler genus", "setophaga"))
    assert len(traj.steps) <= 3


def test_greedy_is_deterministic():
    policy = ToyRoutingPolicy.from_queries(["a b"], init_scale=1.0, seed=2)
    req = PolicyRequest("p", temperature=0.0, stage="action", context={"query": "a b", "step": 1})
    texts = {ToyAgent(policy, s).complete(req).text for s in range(5)}
    assert len(texts) == 1


def test_expected_score_matches_sampling():
    policy = ToyRoutingPolicy.from_queries(["a b"], init_scale=1.0, seed=4)
    agent = ToyAgent(policy, 0)
    req = PolicyRequest("p", stage="action", context={"query": "a b", "step": 1})
    score = lambda text: float(parse_action(text)[2] and '"image"' in text)  # noqa: E731
    exact = agent.expected_score(req, score)
    p = policy.route_distribution("a b", 1, old=True)
    fmt = policy.probabilities("format", policy.format_features("action"), old=True)
    assert exact == pytest.approx(fmt[0] * p[ROUTES.index(ExpertKind.IMAGE)], abs=1e-12)
    mc = np.mean([score(o.text) for o in agent.sample_group(req, 20000)])
    assert abs(mc - exact) < 0.02


def test_gradient_matches_finite_differences(small_experts, golden):
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 10:
        cfg = random_toy_config(rng, golden, small_experts)
        if cfg is None:
            continue
        g, fd = _fd_check(*cfg)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-8)
        checked += 1


def test_zero_variance_rewards_give_zero_gradient(small_experts, golden):
    policy = ToyRoutingPolicy.from_queries([golden.trajectory.query], init_scale=0.5)
    groups = collect_step_groups(golden, ToyAgent(policy, 0), small_experts)
    flat = [RolloutGroup(g.input_key, g.samples, [0.5] * len(g.samples), g.kind, g.step) for g in groups]
    assert not toy_policy_gradient(policy, flat).any()


def _action_pair(small_experts, golden, same_route):
    policy = ToyRoutingPolicy.from_queries([golden.trajectory.query])
    policy.snapshot()
    groups = collect_step_groups(golden, ToyAgent(policy, 5), small_experts, trainer_config=TrainerConfig(group_size=16))
    samples = [s for s in groups[0].samples if ROUTES[s.trace.decisions[1].chosen] is not None]
    s0 = samples[0]
    route0 = s0.trace.decisions[1].chosen
    s1 = next(s for s in samples[1:] if (s.trace.decisions[1].chosen == route0) == same_route)
    # raise sample 0's route logit: its ratio leaves [1 - eps, 1 + eps] from above
    d = s0.trace.decisions[1]
    policy.params["route"] = policy.params["route"] + 2.0 * d.features[d.chosen]
    return policy, RolloutGroup("k", [s0, s1], [1.0, 0.0], "action", 1)


def test_all_clipped_samples_give_zero_gradient(small_experts, golden):
    policy, g = _action_pair(small_experts, golden, same_route=False)
    r = [np.exp(policy.logprobs(s.trace.decisions).sum() - s.logprob_old.sum()) for s in g.samples]
    assert r[0] > 1.2 and r[1] < 0.8  # A=+1 above the band, A=-1 below it: both clip branches bind
    assert not toy_policy_gradient(policy, [g]).any()


def test_clipped_sample_drops_out_of_gradient(small_experts, golden):
    policy, g = _action_pair(small_experts, golden, same_route=True)
    s1 = g.samples[1]
    r = [np.exp(policy.logprobs(s.trace.decisions).sum() - s.logprob_old.sum()) for s in g.samples]
    assert r[0] > 1.2 and r[1] > 1.2  # sample 1 has A=-1, so its unclipped branch is the minimum
    x0 = policy.flat()

    def logp1(x):
        policy.set_flat(x)
        return float(policy.logprobs(s1.trace.decisions).sum())

    grad_logp1 = central_difference(logp1, x0)
    policy.set_flat(x0)
    # loss = -(min(r0, 1.2) * 1 + r1 * (-1)) / 2 ; only the r1 term depends on the parameters
    expected = 0.5 * r[1] * grad_logp1
    np.testing.assert_allclose(toy_policy_gradient(policy, [g]), expected, rtol=1e-6, atol=1e-9)


def test_stale_snapshot_raises(small_experts, golden):
    policy = ToyRoutingPolicy.from_queries([golden.trajectory.query])
    groups = collect_step_groups(golden, ToyAgent(policy, 0), small_experts)
    policy.snapshot()
    with pytest.raises(StaleSnapshotError):
        toy_policy_gradient(policy, groups)


def test_save_load_round_trip(tmp_path):
    policy = ToyRoutingPolicy.from_queries(["x y z"], init_scale=1.0, seed=5)
    policy.save(tmp_path / "p.json")
    back = ToyRoutingPolicy.load(tmp_path / "p.json")
    assert params_equal(back.params, policy.params) and back.vocab == policy.vocab
