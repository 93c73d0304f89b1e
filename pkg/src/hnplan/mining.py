"""Hard-negative mining over generated candidates.

Per scene: sample N candidates, score them, keep those whose score falls
strictly below ``xi`` and pick the one closest to the expert (summed waypoint
position distance, lowest index on ties).
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np

from .errors import FormatError
from .flowgen import FlowModel, SamplingConfig, sample_candidates
from .parallel import pmap
from .scene import Scene
from .scoring import ScoreBreakdown, score_matrix
from .trajectory import l2_distance_many

DEFAULT_XI = 0.3
# column of the score matrix that each score function reads
SCORE_COLUMNS = {"pdms": 5, "dac": 1, "ttc": 3}


@dataclass
class MiningConfig:
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    xi: float = DEFAULT_XI
    score: str = "pdms"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.xi <= 1.0:
            raise ValueError(f"xi must lie in [0, 1], got {self.xi}")
        if self.score not in SCORE_COLUMNS:
            raise ValueError(f"unknown score function {self.score!r}")

    def snapshot(self) -> dict:
        s = self.sampling
        return {"w": s.w, "sigma_scale": s.sigma_scale, "n": s.n, "steps": s.steps, "xi": self.xi,
                "score": self.score, "seed": self.seed}


@dataclass
class NegativeRecord:
    scene_id: int
    candidate_index: int
    negative: np.ndarray  # (8, 3)
    negative_score: ScoreBreakdown
    score_value: float
    expert_distance: float
    config: dict

    def to_json(self) -> dict:
        return {"scene_id": self.scene_id, "candidate_index": self.candidate_index,
                "negative": np.asarray(self.negative, dtype=float).tolist(),
                "negative_score": self.negative_score.as_dict(), "score_value": self.score_value,
                "expert_distance": self.expert_distance, "config": self.config}

    @classmethod
    def from_json(cls, d: dict) -> "NegativeRecord":
        neg = np.asarray(d["negative"], dtype=float)
        if neg.shape != (8, 3):
            raise FormatError(f"negative for scene {d.get('scene_id')} has shape {neg.shape}")
        return cls(int(d["scene_id"]), int(d["candidate_index"]), neg,
                   ScoreBreakdown(**{k: float(v) for k, v in d["negative_score"].items()}),
                   float(d["score_value"]), float(d["expert_distance"]), dict(d["config"]))


@dataclass
class MiningStats:
    prop_sample: float
    pdms_max: float
    pdms_std: float
    dist_nega: float
    pdms_nega: float
    n_scenes: int

    def as_row(self) -> dict:
        return asdict(self)


def _values(scores) -> np.ndarray:
    if len(scores) and isinstance(scores[0], ScoreBreakdown):
        return np.array([s.pdms for s in scores])
    return np.asarray(scores, dtype=float)


def filter_unsafe(scores, xi: float = DEFAULT_XI) -> np.ndarray:
    """Indices whose score is strictly below ``xi``. Accepts floats or breakdowns."""
    if not 0.0 <= xi <= 1.0:
        raise ValueError(f"xi must lie in [0, 1], got {xi}")
    return np.flatnonzero(_values(scores) < xi)


def select_index(candidates, scores, expert, xi: float = DEFAULT_XI) -> int | None:
    """Index of the unsafe candidate nearest the expert, or None when none is unsafe."""
    cands = np.asarray(candidates, dtype=float)
    if len(cands) != len(scores):
        raise ValueError(f"{len(cands)} candidates but {len(scores)} scores")
    low = filter_unsafe(scores, xi)
    if len(low) == 0:
        return None
    dist = l2_distance_many(cands[low], expert)
    return int(low[np.argmin(dist)])  # argmin returns the first minimum, i.e. the lowest index


def select_negative(candidates, breakdowns, expert, xi: float = DEFAULT_XI, scene_id: int = -1,
                    score: str = "pdms", config: dict | None = None) -> NegativeRecord | None:
    """Build the negative record for one scene; ``score`` picks the field compared with ``xi``."""
    bds = list(breakdowns)
    values = np.array([getattr(b, score) for b in bds])
    i = select_index(candidates, values, expert, xi)
    if i is None:
        return None
    neg = np.asarray(candidates, dtype=float)[i]
    return NegativeRecord(scene_id, i, neg.copy(), bds[i], float(values[i]),
                          float(l2_distance_many(neg[None], expert)[0]), dict(config or {}))


def mine_scene(model: FlowModel, scene: Scene, cfg: MiningConfig):
    """Returns ``(record or None, candidate pdms values)`` for one scene."""
    trajs, degenerate = sample_candidates(model, scene, cfg.sampling, cfg.seed)
    m = score_matrix(scene, trajs, valid=~degenerate)
    values = m[:, SCORE_COLUMNS[cfg.score]]
    i = select_index(trajs, values, scene.expert, cfg.xi)
    if i is None:
        return None, m[:, 5]
    rec = NegativeRecord(scene.scene_id, i, trajs[i].copy(), ScoreBreakdown(*map(float, m[i])),
                         float(values[i]), float(l2_distance_many(trajs[i][None], scene.expert)[0]),
                         cfg.snapshot())
    return rec, m[:, 5]


def _mine_one(model, cfg, scene):
    return mine_scene(model, scene, cfg)


def mining_stats(records, pdms_rows) -> MiningStats:
    n = len(pdms_rows)
    present = [r for r in records if r is not None]
    pmax = float(np.mean([p.max() for p in pdms_rows])) if n else 0.0
    pstd = float(np.mean([p.std() for p in pdms_rows])) if n else 0.0
    dist = float(np.mean([r.expert_distance for r in present])) if present else 0.0
    pneg = float(np.mean([r.negative_score.pdms for r in present])) if present else 0.0
    return MiningStats(len(present) / n if n else 0.0, pmax, pstd, dist, pneg, n)


def mine_dataset(model: FlowModel, scenes, cfg: MiningConfig = MiningConfig(), workers=None):
    """One record-or-None per scene, in scene order, plus the aggregate statistics."""
    out = pmap(partial(_mine_one, model, cfg), list(scenes), workers)
    records = [r for r, _ in out]
    return records, mining_stats(records, [p for _, p in out])


# ---------------------------------------------------------------- files


def dumps_negatives(records) -> str:
    return json.dumps([None if r is None else r.to_json() for r in records], indent=1) + "\n"


def save_negatives(records, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_negatives(records))


def load_negatives(path) -> list:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, list):
        raise FormatError(f"{path}: expected a JSON array of records")
    try:
        return [None if d is None else NegativeRecord.from_json(d) for d in data]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed negative record: {exc}") from exc


def negatives_for(scenes, records) -> list:
    """Align loaded records with scenes by position, checking scene ids."""
    scenes = list(scenes)
    if len(records) != len(scenes):
        raise FormatError(f"{len(records)} negative entries for {len(scenes)} scenes")
    out = []
    for s, r in zip(scenes, records):
        if r is not None and r.scene_id != s.scene_id:
            raise FormatError(f"negative for scene {r.scene_id} aligned with scene {s.scene_id}")
        out.append(None if r is None else r.negative)
    return out


STATS_FIELDS = ("prop_sample", "pdms_max", "pdms_std", "dist_nega", "pdms_nega", "n_scenes")


def write_stats_csv(rows, path, extra_fields=()) -> None:
    """``rows`` are dicts holding ``extra_fields`` plus the MiningStats fields."""
    fields = list(extra_fields) + list(STATS_FIELDS)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in fields})


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v
