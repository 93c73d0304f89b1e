"""Experiment driver: open-loop evaluation, closed-loop rollouts, ablations, full pipeline.

Every artifact is written deterministically. Wall-clock timings go to a
separate ``timing.json`` so that reports compare byte for byte across runs.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateHeading, HnplanError
from .learner import TOTAL_EPOCHS
from .flowgen import FlowModel, SamplingConfig, train_generator
from .mining import (
    STATS_FIELDS, MiningConfig, load_negatives, mine_dataset, negatives_for, save_negatives,
    write_stats_csv,
)
from .parallel import pmap
from .policy import LossWeights, Policy, train_policy
from .scene import Scene, generate_scene_set, load_scenes, save_scenes
from .scoring import closed_loop_rollout, score_matrix

METRICS = ("nc", "dac", "ep", "ttc", "comf", "pdms")
TEST_ID_OFFSET = 1_000_000


class StageFailed(HnplanError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------- open loop


@dataclass
class EvalReport:
    scene_ids: list
    rows: np.ndarray  # (n, 6) in METRICS order, [0, 1] scale

    def aggregate(self) -> dict:
        """Mean sub-metrics and PDMS on the x100 scale."""
        if len(self.rows) == 0:
            return {m: 0.0 for m in METRICS}
        return {m: float(v) * 100.0 for m, v in zip(METRICS, self.rows.mean(axis=0))}

    def to_csv(self) -> str:
        lines = ["scene_id," + ",".join(METRICS)]
        for sid, r in zip(self.scene_ids, self.rows):
            lines.append(f"{sid}," + ",".join(f"{v:.9f}" for v in r))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())


def _plan_and_score(policy, scene: Scene) -> np.ndarray:
    try:
        traj = policy(scene)
    except DegenerateHeading:
        return np.zeros(6)
    return score_matrix(scene, np.asarray(traj, dtype=float)[None])[0]


def evaluate(policy, scenes, workers=None) -> EvalReport:
    """Plan and score every scene. ``policy`` is any callable scene -> (8, 3)."""
    scenes = list(scenes)
    rows = pmap(partial(_plan_and_score, policy), scenes, workers)
    return EvalReport([s.scene_id for s in scenes], np.array(rows).reshape(-1, 6))


def evaluate_files(policy_ckpt, scenes_file, workers=None) -> EvalReport:
    return evaluate(Policy.load(policy_ckpt), load_scenes(scenes_file), workers)


def expert_replay(scene: Scene) -> np.ndarray:
    return scene.expert


def stationary(scene: Scene) -> np.ndarray:
    return np.zeros((8, 3))


# ---------------------------------------------------------------- closed loop


def _rollout(policy, T, scene):
    return closed_loop_rollout(scene, policy, T)


def run_closed_loop(policy, scenes, T: int = 8, workers=None):
    """Per-scene closed-loop scores plus mean RC and HD-Score on the x100 scale."""
    out = pmap(partial(_rollout, policy, T), list(scenes), workers)
    agg = {"rc": 100.0 * float(np.mean([r.rc for r in out])) if out else 0.0,
           "hd_score": 100.0 * float(np.mean([r.hd_score for r in out])) if out else 0.0}
    return out, agg


def closed_loop_csv(results) -> str:
    lines = ["scene_id,rc,hd_score,progress"]
    for r in results:
        lines.append(f"{r.scene_id},{r.rc:.9f},{r.hd_score:.9f},{r.progress:.9f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- ablations


DEFAULT_GRID = ((64, 1.0, 1.0), (64, 0.5, 1.0), (64, 0.5, 2.0))


def ablate_mining(model: FlowModel, scenes, grid=DEFAULT_GRID, xi: float = 0.3, score: str = "pdms",
                  seed: int = 0, workers=None) -> list:
    """One MiningStats row per (n, w, sigma_scale) cell, in grid order."""
    rows = []
    for n, w, k in grid:
        cfg = MiningConfig(SamplingConfig(w=w, n=int(n), sigma_scale=k), xi=xi, score=score, seed=seed)
        _, stats = mine_dataset(model, scenes, cfg, workers)
        rows.append({"n": int(n), "w": float(w), "sigma_scale": float(k), **stats.as_row()})
    return rows


def ablate_weights(train, negatives, test, grid, seed: int = 0, workers=None, log=None,
                   epochs: int = TOTAL_EPOCHS) -> list:
    """Train one policy per (imi, sem, rd, clip) setting and report held-out aggregates."""
    rows = []
    for imi, sem, rd, clip in grid:
        weights = LossWeights(imi, sem, rd, clip, allow_unstable=rd >= imi)
        policy = train_policy(train, negatives, weights, seed, epochs=epochs, log=log)
        agg = evaluate(policy, test, workers).aggregate()
        rows.append({"imi": imi, "sem": sem, "rd": rd, "clip": clip, **agg})
    return rows


def ablate_scores(model, train, test, score_names, sampling: SamplingConfig, xi: float, weights,
                  seed: int = 0, workers=None, log=None, epochs: int = TOTAL_EPOCHS) -> list:
    """Mine with each score function, train an RD policy on each negative set, evaluate."""
    rows = []
    for name in score_names:
        recs, stats = mine_dataset(model, train, MiningConfig(sampling, xi, name, seed), workers)
        policy = train_policy(train, negatives_for(train, recs), weights, seed, epochs=epochs, log=log)
        rows.append({"score": name, "prop_sample": stats.prop_sample,
                     **evaluate(policy, test, workers).aggregate()})
    return rows


# ---------------------------------------------------------------- pipeline


@dataclass
class ExperimentConfig:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    n_train: int = 800
    n_test: int = 200
    difficulty: str = "medium"
    grid: list = field(default_factory=lambda: [list(c) for c in DEFAULT_GRID])
    w: float = 0.5
    sigma_scale: float = 2.0
    xi: float = 0.3
    score: str = "pdms"
    imi: float = 10.0
    sem: float = 1.0
    rd: float = 5.0
    clip: float = 5.0
    closed_loop_T: int = 8
    epochs: int = TOTAL_EPOCHS
    # extra trainings, run on ablation_seeds only
    ablation_seeds: list = field(default_factory=lambda: [0])
    weight_grid: list = field(default_factory=lambda: [[1.0, 1.0, 1.0, 5.0]])
    score_ablation: list = field(default_factory=lambda: ["dac", "ttc"])

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.n_train < 1 or self.n_test < 1 or self.epochs < 1:
            raise ConfigError("scene counts and epochs must be positive")
        if self.n_train > TEST_ID_OFFSET:
            raise ConfigError(f"n_train must not exceed {TEST_ID_OFFSET} so scene ids stay disjoint")
        LossWeights(self.imi, self.sem, self.rd, self.clip)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.imi, self.sem, self.rd, self.clip)

    @property
    def sampling(self) -> SamplingConfig:
        return SamplingConfig(w=self.w, sigma_scale=self.sigma_scale)

    def to_json(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
            return cls(**data)
        except (TypeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc


class _Stages:
    """Runs named stages, reusing persisted outputs when ``resume`` is set."""

    def __init__(self, resume: bool, log, timing=None):
        self.resume = resume
        self.log = log or (lambda msg: None)
        self.timing = dict(timing or {})
        self._hit = False

    def run(self, name: str, fn):
        self.log(f"[{name}]")
        self._hit = False
        t0 = time.perf_counter()
        try:
            out = fn()
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage name attached
            raise StageFailed(name, exc) from exc
        if not (self._hit and name in self.timing):  # keep the time of the run that built it
            self.timing[name] = round(time.perf_counter() - t0, 3)
        return out

    def cached(self, path: Path, make, save, load):
        if self.resume and path.exists():
            self._hit = True
            return load(path)
        obj = make()
        save(obj, path)
        return obj


def _save_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load_json(path: Path):
    return json.loads(path.read_text())


def _mean(rows, key):
    return float(np.mean([r[key] for r in rows]))


def run_seed(cfg: ExperimentConfig, seed: int, out: Path, stages: _Stages, workers=None) -> dict:
    log = stages.log
    p = lambda name: out / f"{name}_s{seed}"  # noqa: E731

    train = stages.run(f"gen-scenes/{seed}", lambda: stages.cached(
        p("scenes_train").with_suffix(".json"),
        lambda: generate_scene_set(seed, cfg.n_train, cfg.difficulty, 0, workers),
        save_scenes, load_scenes))
    test = stages.run(f"gen-test-scenes/{seed}", lambda: stages.cached(
        p("scenes_test").with_suffix(".json"),
        lambda: generate_scene_set(seed, cfg.n_test, cfg.difficulty, TEST_ID_OFFSET, workers),
        save_scenes, load_scenes))
    gen = stages.run(f"train-generator/{seed}", lambda: stages.cached(
        p("generator").with_suffix(".ckpt"), lambda: train_generator(train, seed, cfg.epochs),
        lambda m, path: m.save(path), FlowModel.load))

    grid_rows = stages.run(f"ablate-mining/{seed}", lambda: ablate_mining(
        gen, test, [tuple(c) for c in cfg.grid], cfg.xi, cfg.score, seed, workers))
    write_stats_csv(grid_rows, p("mining_grid").with_suffix(".csv"), ("n", "w", "sigma_scale"))

    mcfg = MiningConfig(cfg.sampling, cfg.xi, cfg.score, seed)

    def mine():
        recs, stats = mine_dataset(gen, train, mcfg, workers)
        write_stats_csv([stats.as_row()], p("mining_stats").with_suffix(".csv"))
        return recs

    records = stages.run(f"mine-negatives/{seed}", lambda: stages.cached(
        p("negatives").with_suffix(".json"), mine, save_negatives, load_negatives))
    negs = negatives_for(train, records)

    base_w = LossWeights(cfg.imi, cfg.sem, 0.0, cfg.clip)
    baseline = stages.run(f"train-policy-baseline/{seed}", lambda: stages.cached(
        p("policy_baseline").with_suffix(".ckpt"), lambda: train_policy(train, None, base_w, seed, cfg.epochs),
        lambda m, path: m.save(path), Policy.load))
    rd_policy = stages.run(f"train-policy-rd/{seed}", lambda: stages.cached(
        p("policy_rd").with_suffix(".ckpt"), lambda: train_policy(train, negs, cfg.weights, seed, cfg.epochs),
        lambda m, path: m.save(path), Policy.load))

    result = {"seed": seed, "mining_grid": grid_rows,
              "prop_sample": float(np.mean([r is not None for r in records]))}
    for name, pol in (("baseline", baseline), ("rd", rd_policy)):
        rep = stages.run(f"evaluate-{name}/{seed}", lambda pol=pol: evaluate(pol, test, workers))
        rep.save(p(f"eval_{name}").with_suffix(".csv"))
        cl, cl_agg = stages.run(f"closed-loop-{name}/{seed}",
                                lambda pol=pol: run_closed_loop(pol, test, cfg.closed_loop_T, workers))
        p(f"closed_loop_{name}").with_suffix(".csv").write_text(closed_loop_csv(cl))
        result[name] = {**rep.aggregate(), **cl_agg}
    result["pdms_gain"] = result["rd"]["pdms"] - result["baseline"]["pdms"]

    if seed in cfg.ablation_seeds:
        grid = [tuple(g) for g in cfg.weight_grid]
        if grid:
            rows = stages.run(f"ablate-weights/{seed}", lambda: stages.cached(
                p("weight_ablation").with_suffix(".json"),
                lambda: ablate_weights(train, negs, test, grid, seed, workers, epochs=cfg.epochs),
                _save_json, _load_json))
            result["weight_ablation"] = [{"imi": cfg.imi, "sem": cfg.sem, "rd": cfg.rd, "clip": cfg.clip,
                                          **{m: result["rd"][m] for m in METRICS}}] + rows
        if cfg.score_ablation:
            rows = stages.run(f"ablate-scores/{seed}", lambda: stages.cached(
                p("score_ablation").with_suffix(".json"),
                lambda: ablate_scores(gen, train, test, cfg.score_ablation, cfg.sampling, cfg.xi,
                                      cfg.weights, seed, workers, epochs=cfg.epochs),
                _save_json, _load_json))
            result["score_ablation"] = [{"score": cfg.score, "prop_sample": result["prop_sample"],
                                         **{m: result["rd"][m] for m in METRICS}}] + rows
    log(f"seed {seed}: baseline {result['baseline']['pdms']:.3f} rd {result['rd']['pdms']:.3f}")
    return result


def full_pipeline(cfg: ExperimentConfig, out_dir, workers=None, resume: bool = False, log=None,
                  plot_data: bool = False) -> dict:
    """All stages for every seed; writes artifacts plus ``summary.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timing_file = out / "timing.json"
    previous = _load_json(timing_file) if resume and timing_file.exists() else None
    stages = _Stages(resume, log, previous)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True) + "\n")
    seeds = [run_seed(cfg, s, out, stages, workers) for s in cfg.seeds]
    summary = {
        "config_hash": cfg.config_hash(),
        "seeds": cfg.seeds,
        "per_seed": seeds,
        "mean": {
            "baseline_pdms": _mean([s["baseline"] for s in seeds], "pdms"),
            "rd_pdms": _mean([s["rd"] for s in seeds], "pdms"),
            "pdms_gain": float(np.mean([s["pdms_gain"] for s in seeds])),
            "baseline_hd_score": _mean([s["baseline"] for s in seeds], "hd_score"),
            "rd_hd_score": _mean([s["rd"] for s in seeds], "hd_score"),
        },
    }
    (out / "summary.json").write_text(dumps_report(summary))
    timing_file.write_text(json.dumps(stages.timing, indent=1) + "\n")
    if plot_data:
        write_plot_data(summary, out / "plot_data.dat")
    return summary


def dumps_report(summary: dict) -> str:
    return json.dumps(summary, indent=1, sort_keys=True) + "\n"


def write_plot_data(summary: dict, path) -> None:
    """Whitespace-separated columns, one block per table, for gnuplot's ``index``."""
    lines = ["# seed baseline_pdms rd_pdms baseline_hd rd_hd"]
    for s in summary["per_seed"]:
        lines.append(f"{s['seed']} {s['baseline']['pdms']:.6f} {s['rd']['pdms']:.6f} "
                     f"{s['baseline']['hd_score']:.6f} {s['rd']['hd_score']:.6f}")
    lines += ["", "", "# seed n w sigma_scale " + " ".join(STATS_FIELDS)]
    for s in summary["per_seed"]:
        for r in s["mining_grid"]:
            lines.append(f"{s['seed']} {r['n']} {r['w']} {r['sigma_scale']} "
                         + " ".join(f"{r[k]:.6f}" for k in STATS_FIELDS))
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv_rows(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def report_digest(out_dir) -> str:
    """sha256 over every deterministic artifact (everything except timing.json)."""
    h = hashlib.sha256()
    for f in sorted(Path(out_dir).iterdir()):
        if f.name == "timing.json" or not f.is_file():
            continue
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()
