"""Mixture-of-retrieval-experts orchestration with stepwise GRPO training."""

from .experts import Corpus, Document, ExpertIndex, ExpertKind, ScoredDocument, build_index, ingest_corpus, retrieve
from .grpo import RolloutGroup, RolloutSample, TrainerConfig, clipped_surrogate, grpo_loss, normalize_advantages, stepwise_loss
from .orchestrator import EpisodeConfig, FinalAnswer, NoRetrieval, Query, ReasoningStep, Search, Trajectory, run_episode
from .rewards import RewardConfig, action_reward, f1_recall, observation_reward
from .synthesis import GoldenTrajectory, build_dataset, dual_filter, sample_candidates

__version__ = "0.1.0"

__all__ = [
    "Corpus", "Document", "ExpertIndex", "ExpertKind", "ScoredDocument", "build_index", "ingest_corpus", "retrieve",
    "RolloutGroup", "RolloutSample", "TrainerConfig", "clipped_surrogate", "grpo_loss", "normalize_advantages",
    "stepwise_loss", "EpisodeConfig", "FinalAnswer", "NoRetrieval", "Query", "ReasoningStep", "Search", "Trajectory",
    "run_episode", "RewardConfig", "action_reward", "f1_recall", "observation_reward", "GoldenTrajectory",
    "build_dataset", "dual_filter", "sample_candidates",
]
