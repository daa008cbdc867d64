from expertrag.llm_client import ScriptedPolicy
from expertrag.orchestrator import Query, run_episode
from expertrag.synthesis import GoldenTrajectory, validate_golden


def scripted_golden(experts, searches, answer, query="which genus do these warblers belong to?", qid="g"):
    """Golden trajectory replaying ``searches`` = [(kind, sub-query, intermediate answer), ...]."""
    script = []
    for kind, sub, inter in searches:
        script += [f'<think>ask {kind.value}</think><search expert="{kind.value}">{sub}</search>',
                   f"<answer>{inter}</answer>"]
    if len(searches) < 3:
        script.append('<think>enough</think><search expert="text">NULL</search>')
    script.append(f"<answer>{answer}</answer>")
    traj = run_episode(ScriptedPolicy(script), experts, Query(qid, query, answer))
    golden = GoldenTrajectory(traj, "scripted")
    validate_golden(golden)
    return golden


def random_toy_config(rng, golden, experts, perturb=0.05, eps=0.2, margin=1e-3, group_size=4):
    """A toy policy, groups sampled from its snapshot, and perturbed current parameters.

    Returns ``None`` when some ratio sits within ``margin`` of a clip boundary,
    where the loss has a kink and finite differences are meaningless.
    """
    import numpy as np

    from expertrag.grpo import TrainerConfig, collect_step_groups
    from expertrag.toy_policy import ToyAgent, ToyRoutingPolicy

    policy = ToyRoutingPolicy.from_queries([golden.trajectory.query], init_scale=float(rng.uniform(0.1, 1.0)),
                                           seed=int(rng.integers(1 << 31)))
    policy.snapshot()
    agent = ToyAgent(policy, np.random.default_rng(int(rng.integers(1 << 31))))
    groups = collect_step_groups(golden, agent, experts, trainer_config=TrainerConfig(group_size=group_size))
    policy.set_flat(policy.flat() + perturb * rng.standard_normal(policy.flat().shape[0]))
    from expertrag.toy_policy import _group_terms

    _, _, ratios, _, _ = _group_terms(policy, groups)
    if np.any(np.abs(ratios - (1 + eps)) < margin) or np.any(np.abs(ratios - (1 - eps)) < margin):
        return None
    return policy, groups


def synthetic_goldens(task, experts, n=2, seed=0):
    """One golden trajectory per synthetic query, produced by the error-free teacher."""
    from expertrag.synthesis import dual_filter, sample_candidates
    from expertrag.synthetic import SyntheticTeacher

    teacher = SyntheticTeacher(task.queries, seed=seed)
    out = []
    for q in task.queries:
        golden = dual_filter(sample_candidates(teacher, q, q.gold_answer, n, experts), provenance="teacher")
        assert golden is not None, q.id
        out.append(golden)
    return out
