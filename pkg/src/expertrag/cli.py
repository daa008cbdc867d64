"""Command-line entry point: ingest, index, synth, train, eval, run, synthetic."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import yaml

from .evaluation import evaluate, format_histogram, write_report
from .experts import ExpertKind, build_index, index_filename, ingest_corpus, load_experts, save_index
from .grpo import TrainerConfig
from .llm_client import EndpointConfig, RemotePolicy, ScriptedPolicy
from .orchestrator import EpisodeConfig, Query, run_episode
from .rewards import RewardConfig
from .synthesis import build_dataset, load_golden
from .synthetic import SyntheticTeacher, make_synthetic_task
from .toy_policy import ToyAgent, ToyRoutingPolicy
from .training import train

log = logging.getLogger("expertrag")


def load_config(path: str | None) -> dict:
    """YAML file with optional ``rewards``, ``trainer`` and ``episode`` sections."""
    if not path:
        return {}
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise SystemExit(f"config {path}: expected a mapping at top level")
    return data


def _section(cfg: dict, name: str, cls, **overrides):
    known = {f.name for f in fields(cls)}
    raw = cfg.get(name, {}) or {}
    unknown = set(raw) - known
    if unknown:
        raise SystemExit(f"config section {name!r}: unknown keys {sorted(unknown)}")
    values = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
    return cls(**values)


def read_queries(path: str | Path) -> list[Query]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Query.from_record(json.loads(line)))
            except (KeyError, ValueError) as exc:
                raise SystemExit(f"{path}:{lineno}: bad query record: {exc}") from None
    return out


def make_policy(args, queries=None):
    name = args.policy
    if name == "scripted":
        if not args.script:
            raise SystemExit("--policy scripted needs --script <path> (one emission per line, JSON strings)")
        with open(args.script, encoding="utf-8") as fh:
            return ScriptedPolicy([json.loads(line) for line in fh if line.strip()])
    if name == "toy":
        if not args.params:
            raise SystemExit("--policy toy needs --params <path> from `train`")
        return ToyAgent(ToyRoutingPolicy.load(args.params), args.seed)
    if name == "remote":
        return RemotePolicy(EndpointConfig.from_env())
    if name == "oracle":
        if not queries or any(q.gold_modality is None or q.gold_subquery is None for q in queries):
            raise SystemExit("--policy oracle needs queries with gold_modality and gold_subquery")
        return SyntheticTeacher(queries, seed=args.seed, p_wrong_route=args.p_wrong_route,
                                p_malformed=args.p_malformed, p_wrong_answer=args.p_wrong_answer)
    raise SystemExit(f"unknown policy {name!r}")


# --- subcommands -----------------------------------------------------------


def cmd_ingest(args, cfg):
    index = build_index(ingest_corpus(args.input, ExpertKind.parse(args.kind)))
    save_index(index, args.out)
    print(f"indexed {index.doc_count} {index.kind.value} documents -> {args.out}")


def cmd_index(args, cfg):
    src, out = Path(args.corpora), Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for kind in ExpertKind:
        index = build_index(ingest_corpus(src / f"{kind.value}.jsonl", kind))
        save_index(index, out / index_filename(kind))
        print(f"{kind.value}: {index.doc_count} documents, {len(index.postings)} terms")


def cmd_synthetic(args, cfg):
    task = make_synthetic_task(args.per_modality, args.distractors, args.seed)
    task.write(args.out)
    out = Path(args.out)
    for kind, index in task.indexes().items():
        save_index(index, out / index_filename(kind))
    print(f"wrote {len(task.queries)} queries, corpora and indexes to {out}")


def cmd_synth(args, cfg):
    queries = read_queries(args.queries)
    experts = load_experts(args.indexes)
    policy = make_policy(args, queries)
    episode = _section(cfg, "episode", EpisodeConfig, seed=args.seed)
    summary = build_dataset(queries, policy, args.n, args.out, experts, episode, provenance=args.policy)
    print(json.dumps(summary.to_record(), indent=2))


def cmd_train(args, cfg):
    trainer = _section(cfg, "trainer", TrainerConfig, seed=args.seed, iterations=args.iterations,
                       learning_rate=args.learning_rate)
    rewards = _section(cfg, "rewards", RewardConfig)
    episode = _section(cfg, "episode", EpisodeConfig)
    experts = load_experts(args.indexes)
    golden = load_golden(args.golden, experts)
    policy = ToyRoutingPolicy.from_queries((g.trajectory.query for g in golden), max_steps=episode.max_steps,
                                           top_k=episode.top_k)

    def report(m):
        if m.iteration % args.log_every == 0 or m.iteration == trainer.iterations - 1:
            print(f"iter {m.iteration:4d}  reward {m.mean_reward:.4f}  loss {m.loss:+.4f}  "
                  f"route_acc {m.route_accuracy:.4f}")

    policy, _ = train(policy, golden, trainer, experts, rewards, episode, args.metrics, report)
    policy.save(args.out)
    print(f"saved policy parameters -> {args.out}")


def cmd_eval(args, cfg):
    queries = read_queries(args.dataset)
    experts = load_experts(args.indexes)
    policy = make_policy(args, queries)
    episode = _section(cfg, "episode", EpisodeConfig, seed=args.seed, temperature=args.temperature)
    report, _ = evaluate(queries, policy, experts, episode, args.concurrency, Path(args.dataset).stem)
    write_report(report, args.out)
    s = report.summary()
    print(f"queries {s['queries']}  f1_recall {s['mean_f1_recall']:.4f}  accuracy {s['mean_accuracy']:.4f}  "
          f"steps {s['mean_steps']:.3f}  errors {s['errors']}")
    print(format_histogram(report.histogram))


def cmd_run(args, cfg):
    experts = load_experts(args.indexes)
    query = Query("cli", args.query, args.gold, ExpertKind.parse(args.gold_modality) if args.gold_modality else None,
                  args.gold_subquery)
    policy = make_policy(args, [query])
    episode = _section(cfg, "episode", EpisodeConfig, seed=args.seed, max_steps=args.max_steps,
                       temperature=args.temperature)
    traj = run_episode(policy, experts, query, episode)
    print(json.dumps(traj.to_record(), indent=2, ensure_ascii=False))


# --- parser ----------------------------------------------------------------


def _policy_flags(p):
    p.add_argument("--policy", choices=("scripted", "toy", "remote", "oracle"), default="remote")
    p.add_argument("--script", help="scripted policy: file of JSON-encoded emissions, one per line")
    p.add_argument("--params", help="toy policy: parameter file written by `train`")
    p.add_argument("--p-wrong-route", type=float, default=0.0)
    p.add_argument("--p-malformed", type=float, default=0.0)
    p.add_argument("--p-wrong-answer", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expertrag", description=__doc__)
    parser.add_argument("--config", help="YAML config with rewards/trainer/episode sections")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="ingest one corpus file and write its index")
    p.add_argument("--kind", required=True, choices=[k.value for k in ExpertKind])
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("index", help="index <dir>/{text,image,table}.jsonl into <out>")
    p.add_argument("--corpora", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_index)

    p = sub.add_parser("synthetic", help="generate the synthetic routing task (corpora, indexes, queries)")
    p.add_argument("--out", required=True)
    p.add_argument("--per-modality", type=int, default=20)
    p.add_argument("--distractors", type=int, default=10)
    p.set_defaults(fn=cmd_synthetic)

    p = sub.add_parser("synth", help="generate and dual-filter golden trajectories")
    p.add_argument("--queries", required=True)
    p.add_argument("--indexes", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--out", required=True)
    _policy_flags(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train the toy routing policy with stepwise GRPO")
    p.add_argument("--golden", required=True)
    p.add_argument("--indexes", required=True)
    p.add_argument("--out", required=True, help="where to write policy parameters")
    p.add_argument("--metrics", help="line-delimited per-iteration metrics")
    p.add_argument("--iterations", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--log-every", type=int, default=10)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a policy on a query dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--indexes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--concurrency", type=int, default=1)
    p.add_argument("--temperature", type=float)
    _policy_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("run", help="run one episode and print its trajectory")
    p.add_argument("--query", required=True)
    p.add_argument("--indexes", required=True)
    p.add_argument("--max-steps", type=int, default=3)
    p.add_argument("--temperature", type=float)
    p.add_argument("--gold")
    p.add_argument("--gold-modality")
    p.add_argument("--gold-subquery")
    _policy_flags(p)
    p.set_defaults(fn=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args, load_config(args.config))
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
