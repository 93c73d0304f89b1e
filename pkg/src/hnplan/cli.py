"""Command line entry point: ``hnplan <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 training divergence, 4 I/O or format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import harness
from .errors import ConfigError, FormatError, NonFiniteGradient, NonFiniteLoss
from .flowgen import FlowModel, SamplingConfig, sample_candidates, train_generator
from .mining import MiningConfig, load_negatives, mine_dataset, negatives_for, save_negatives, write_stats_csv
from .policy import LossWeights, Policy, train_policy
from .scene import DIFFICULTIES, generate_scene_set, load_scenes, save_scenes

log = logging.getLogger("hnplan")

EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 2, 3, 4


def _grid(text: str, width: int) -> list:
    cells = []
    for part in text.split(","):
        vals = part.split(":")
        if len(vals) != width:
            raise ConfigError(f"grid cell {part!r} needs {width} ':'-separated values")
        cells.append(tuple(float(v) for v in vals))
    return cells


def cmd_gen_scenes(a):
    scenes = generate_scene_set(a.seed, a.count, a.difficulty, a.start_id)
    save_scenes(scenes, a.out)
    log.info("wrote %d scenes to %s", len(scenes), a.out)


def cmd_train_generator(a):
    model = train_generator(load_scenes(a.scenes), a.seed, epochs=a.epochs, log=log.debug)
    model.save(a.out)
    log.info("generator fm loss %.4f -> %.4f", model.history[0]["fm_loss"], model.history[-1]["fm_loss"])


def _sampling(a) -> SamplingConfig:
    return SamplingConfig(w=a.w, steps=a.steps, n=a.n, sigma_scale=a.sigma_scale)


def cmd_sample(a):
    model = FlowModel.load(a.ckpt)
    cfg = _sampling(a)
    out = []
    for s in load_scenes(a.scenes):
        trajs, degenerate = sample_candidates(model, s, cfg, a.seed)
        out.append({"scene_id": s.scene_id, "candidates": np.asarray(trajs).tolist(),
                    "degenerate": degenerate.tolist()})
    Path(a.out).write_text(json.dumps(out) + "\n")


def cmd_mine_negatives(a):
    scenes = load_scenes(a.scenes)
    cfg = MiningConfig(_sampling(a), a.xi, a.score, a.seed)
    records, stats = mine_dataset(FlowModel.load(a.ckpt), scenes, cfg)
    save_negatives(records, a.out)
    if a.stats_out:
        write_stats_csv([stats.as_row()], a.stats_out)
    log.info("prop_sample %.3f over %d scenes", stats.prop_sample, stats.n_scenes)


def cmd_train_policy(a):
    scenes = load_scenes(a.scenes)
    negs = negatives_for(scenes, load_negatives(a.negatives)) if a.negatives else None
    weights = LossWeights(a.lambda_imi, a.lambda_sem, a.lambda_rd if a.negatives else 0.0, a.clip,
                          allow_unstable=a.allow_unstable)
    policy = train_policy(scenes, negs, weights, a.seed, epochs=a.epochs, log=log.debug)
    policy.save(a.out)


def _load_policy(ckpt: str):
    if ckpt == "expert":
        return harness.expert_replay
    if ckpt == "stationary":
        return harness.stationary
    return Policy.load(ckpt)


def cmd_evaluate(a):
    report = harness.evaluate(_load_policy(a.ckpt), load_scenes(a.scenes))
    report.save(a.out)
    print(json.dumps(report.aggregate(), sort_keys=True))


def cmd_closed_loop(a):
    from .scoring import replay_expert_policy

    policy = replay_expert_policy if a.ckpt == "expert" else _load_policy(a.ckpt)
    results, agg = harness.run_closed_loop(policy, load_scenes(a.scenes), a.T)
    Path(a.out).write_text(harness.closed_loop_csv(results))
    print(json.dumps(agg, sort_keys=True))


def cmd_ablate_mining(a):
    grid = _grid(a.grid, 3)
    rows = harness.ablate_mining(FlowModel.load(a.ckpt), load_scenes(a.scenes), grid, a.xi, a.score,
                                 a.seed)
    write_stats_csv(rows, a.out, ("n", "w", "sigma_scale"))


def cmd_ablate_weights(a):
    train = load_scenes(a.scenes)
    negs = negatives_for(train, load_negatives(a.negatives))
    rows = harness.ablate_weights(train, negs, load_scenes(a.test_scenes), _grid(a.grid, 4), a.seed)
    fields = ["imi", "sem", "rd", "clip", *harness.METRICS]
    lines = [",".join(fields)] + [",".join(f"{r[f]:.6f}" for f in fields) for r in rows]
    Path(a.out).write_text("\n".join(lines) + "\n")


def cmd_pipeline(a):
    cfg = harness.ExperimentConfig.from_file(a.config) if a.config else harness.ExperimentConfig()
    if a.seeds:
        cfg = harness.ExperimentConfig(**{**cfg.to_json(), "seeds": a.seeds})
    summary = harness.full_pipeline(cfg, a.out, resume=a.resume, log=log.info, plot_data=a.plot_data)
    print(json.dumps(summary["mean"], sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hnplan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.set_defaults(fn=fn)
        return sp

    def sampling_args(sp):
        sp.add_argument("--w", type=float, default=0.5)
        sp.add_argument("--sigma-scale", type=float, default=2.0)
        sp.add_argument("--steps", type=int, default=5)
        sp.add_argument("--n", type=int, default=64)
        sp.add_argument("--seed", type=int, default=0)

    sp = add("gen-scenes", cmd_gen_scenes, help="generate a scene file")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--difficulty", choices=sorted(DIFFICULTIES), default="medium")
    sp.add_argument("--start-id", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("train-generator", cmd_train_generator, help="train the flow-matching generator")
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--out", required=True)

    sp = add("sample", cmd_sample, help="sample candidate trajectories per scene")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--scenes", required=True)
    sampling_args(sp)
    sp.add_argument("--out", required=True)

    sp = add("mine-negatives", cmd_mine_negatives, help="select one hard negative per scene")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--xi", type=float, default=0.3)
    sp.add_argument("--score", choices=("pdms", "dac", "ttc"), default="pdms")
    sampling_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--stats-out")

    sp = add("train-policy", cmd_train_policy, help="train the planner (omit --negatives for the baseline)")
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--negatives")
    sp.add_argument("--lambda-imi", type=float, default=10.0)
    sp.add_argument("--lambda-sem", type=float, default=1.0)
    sp.add_argument("--lambda-rd", type=float, default=5.0)
    sp.add_argument("--clip", type=float, default=5.0)
    sp.add_argument("--allow-unstable", action="store_true",
                    help="permit lambda-rd >= lambda-imi")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, help="open-loop scores per scene (ckpt may be 'expert' or 'stationary')")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--out", required=True)

    sp = add("closed-loop", cmd_closed_loop, help="closed-loop rollouts and HD-Score")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--T", type=int, default=8)
    sp.add_argument("--out", required=True)

    sp = add("ablate-mining", cmd_ablate_mining, help="mining statistics over a sampling grid")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--grid", default="64:1.0:1.0,64:0.5:1.0,64:0.5:2.0", help="n:w:sigma_scale,...")
    sp.add_argument("--xi", type=float, default=0.3)
    sp.add_argument("--score", choices=("pdms", "dac", "ttc"), default="pdms")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("ablate-weights", cmd_ablate_weights, help="train and evaluate over loss-weight settings")
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--negatives", required=True)
    sp.add_argument("--test-scenes", required=True)
    sp.add_argument("--grid", default="10:1:5:5,1:1:1:5", help="imi:sem:rd:clip,...")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("pipeline", cmd_pipeline, help="run every stage for each seed")
    sp.add_argument("--config", help="JSON file with ExperimentConfig fields")
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", action="store_true", help="reuse stage outputs already on disk")
    sp.add_argument("--plot-data", action="store_true", help="also write gnuplot-ready columns")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else
                        logging.WARNING, format="%(message)s")
    warnings.simplefilter("default")
    try:
        args.fn(args)
    except Exception as exc:  # noqa: BLE001 - mapped to documented exit codes
        code = _exit_code(exc.cause if isinstance(exc, harness.StageFailed) else exc)
        if code is None:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code
    return 0


def _exit_code(exc: BaseException) -> int | None:
    if isinstance(exc, (NonFiniteLoss, NonFiniteGradient)):
        return EXIT_DIVERGED
    if isinstance(exc, (ConfigError, ValueError)):
        return EXIT_CONFIG
    if isinstance(exc, (OSError, FormatError)):
        return EXIT_IO
    return None


if __name__ == "__main__":
    sys.exit(main())
