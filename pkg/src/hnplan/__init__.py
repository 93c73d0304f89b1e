"""Failure-aware imitation learning for trajectory planning on synthetic driving scenes.

A flow-matching generator proposes candidate trajectories, unsafe candidates
near the expert are mined as hard negatives, and a planner is trained to
imitate the expert while keeping away from those negatives.
"""
from .flowgen import FlowModel, SamplingConfig, sample_candidates, train_generator
from .mining import MiningConfig, NegativeRecord, filter_unsafe, mine_dataset, select_negative
from .policy import LossWeights, Policy, plan, rd_loss, train_policy
from .scene import Scene, generate_scene, generate_scene_set, load_scenes, save_scenes
from .scoring import ScoreBreakdown, closed_loop_rollout, score, score_batch

__all__ = [
    "FlowModel", "SamplingConfig", "sample_candidates", "train_generator",
    "MiningConfig", "NegativeRecord", "filter_unsafe", "mine_dataset", "select_negative",
    "LossWeights", "Policy", "plan", "rd_loss", "train_policy",
    "Scene", "generate_scene", "generate_scene_set", "load_scenes", "save_scenes",
    "ScoreBreakdown", "closed_loop_rollout", "score", "score_batch",
]
