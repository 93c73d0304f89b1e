import csv
import io
import json
import os

import numpy as np
import pytest

from conftest import straight_road_scenes
from hnplan import cli
from hnplan.errors import ConfigError, NonFiniteGradient
from hnplan.flowgen import train_generator
from hnplan.harness import (
    METRICS, EvalReport, ExperimentConfig, StageFailed, ablate_mining, evaluate, expert_replay,
    full_pipeline, read_csv_rows, report_digest, run_closed_loop, stationary,
)
from hnplan.scene import Corridor, EgoState, Scene, synthesize_expert

SMALL = dict(seeds=[0], n_train=40, n_test=16, epochs=3, grid=[[16, 1.0, 1.0], [16, 0.5, 2.0]],
             closed_loop_T=3, ablation_seeds=[0], weight_grid=[[1.0, 1.0, 1.0, 5.0]],
             score_ablation=["dac"])


def parked_road(i):
    xs = np.arange(-16.0, 160.0, 2.0)
    s = Scene(i, "easy", Corridor(np.stack([xs, np.zeros_like(xs)], axis=1), 3.0), [], EgoState(0.0, 0.0),
              "go_straight")
    s.expert = synthesize_expert(s)
    return s


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    summary = full_pipeline(ExperimentConfig(**SMALL), out, workers=1)
    return out, summary


# ---------------------------------------------------------------- open loop


def test_expert_replay_scores_high(medium_scenes):
    agg = evaluate(expert_replay, medium_scenes, workers=1).aggregate()
    assert agg["pdms"] >= 90.0


def test_stationary_on_parked_roads():
    agg = evaluate(stationary, [parked_road(i) for i in range(4)], workers=1).aggregate()
    assert agg["pdms"] == pytest.approx(100 * 7 / 12, abs=1e-9)
    assert agg["ep"] == 0.0 and agg["nc"] == 100.0


def test_aggregate_is_mean_of_csv_rows(medium_scenes):
    report = evaluate(expert_replay, medium_scenes, workers=1)
    rows = list(csv.DictReader(io.StringIO(report.to_csv())))
    assert [int(r["scene_id"]) for r in rows] == [s.scene_id for s in medium_scenes]
    agg = report.aggregate()
    for m in METRICS:
        assert abs(100 * np.mean([float(r[m]) for r in rows]) - agg[m]) <= 1e-6


def test_evaluation_is_reproducible_across_workers(medium_scenes):
    a = evaluate(expert_replay, medium_scenes, workers=1).to_csv()
    b = evaluate(expert_replay, medium_scenes, workers=3).to_csv()
    assert a == b


def test_empty_report():
    assert EvalReport([], np.zeros((0, 6))).aggregate() == {m: 0.0 for m in METRICS}


def test_closed_loop_aggregate(medium_scenes):
    results, agg = run_closed_loop(expert_replay, medium_scenes[:6], T=3, workers=1)
    assert len(results) == 6
    assert agg["rc"] == pytest.approx(100 * np.mean([r.rc for r in results]), abs=1e-12)
    assert 0.0 <= agg["hd_score"] <= agg["rc"] <= 100.0


# ---------------------------------------------------------------- ablations


def test_ablate_mining_rows():
    scenes = straight_road_scenes(30)
    model = train_generator(scenes, seed=0, epochs=3)
    rows = ablate_mining(model, scenes[:8], [(1, 1.0, 1.0), (8, 0.5, 2.0), (8, 0.5, 2.0)], workers=1)
    assert [(r["n"], r["w"], r["sigma_scale"]) for r in rows] == [(1, 1.0, 1.0), (8, 0.5, 2.0), (8, 0.5, 2.0)]
    assert rows[0]["pdms_std"] == 0.0
    assert rows[1] == rows[2]


# ---------------------------------------------------------------- config


def test_config_hash_tracks_fields():
    base = ExperimentConfig()
    assert base.config_hash() == ExperimentConfig().config_hash()
    for change in (dict(seeds=[0, 1]), dict(n_train=799), dict(w=0.6), dict(clip=4.0), dict(epochs=99),
                   dict(score_ablation=["dac"])):
        assert ExperimentConfig(**{**base.to_json(), **change}).config_hash() != base.config_hash()


def test_config_validation(tmp_path):
    for bad in (dict(seeds=[]), dict(n_train=0), dict(epochs=0), dict(imi=0.0), dict(imi=1.0, rd=1.0)):
        with pytest.raises(ConfigError):
            ExperimentConfig(**bad)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"n_train": 10, "bogus": 1}))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(p)
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(p)
    p.write_text(json.dumps({"n_train": 10}))
    assert ExperimentConfig.from_file(p).n_train == 10


# ---------------------------------------------------------------- pipeline


def test_pipeline_outputs(small_run):
    out, summary = small_run
    names = {f.name for f in out.iterdir()}
    for stem in ("scenes_train", "scenes_test", "negatives", "weight_ablation", "score_ablation"):
        assert f"{stem}_s0.json" in names
    for stem in ("generator", "policy_baseline", "policy_rd"):
        assert f"{stem}_s0.ckpt" in names
    assert {"summary.json", "config.json", "timing.json", "mining_grid_s0.csv", "eval_rd_s0.csv"} <= names
    seed = summary["per_seed"][0]
    assert seed["pdms_gain"] == pytest.approx(seed["rd"]["pdms"] - seed["baseline"]["pdms"])
    assert len(seed["mining_grid"]) == 2
    assert [r["score"] for r in seed["score_ablation"]] == ["pdms", "dac"]
    rows = read_csv_rows(out / "eval_rd_s0.csv")
    assert len(rows) == 16
    assert abs(100 * np.mean([float(r["pdms"]) for r in rows]) - seed["rd"]["pdms"]) <= 1e-6


def test_pipeline_is_deterministic(small_run, tmp_path):
    out, _ = small_run
    full_pipeline(ExperimentConfig(**SMALL), tmp_path, workers=1)
    assert report_digest(tmp_path) == report_digest(out)


def test_pipeline_parallel_matches_sequential(small_run, tmp_path, monkeypatch):
    out, _ = small_run
    monkeypatch.setenv("HNP_THREADS", "8")
    full_pipeline(ExperimentConfig(**SMALL), tmp_path)
    assert report_digest(tmp_path) == report_digest(out)


def test_resume_reuses_and_rebuilds(small_run, tmp_path):
    out, _ = small_run
    for f in out.iterdir():
        (tmp_path / f.name).write_bytes(f.read_bytes())
    (tmp_path / "policy_rd_s0.ckpt").unlink()
    (tmp_path / "eval_rd_s0.csv").unlink()
    full_pipeline(ExperimentConfig(**SMALL), tmp_path, workers=1, resume=True)
    assert report_digest(tmp_path) == report_digest(out)
    before = json.loads((out / "timing.json").read_text())
    after = json.loads((tmp_path / "timing.json").read_text())
    assert after["train-generator/0"] == before["train-generator/0"]  # loaded, so the build time is kept
    assert set(after) == set(before)


def test_stage_failure_names_the_stage(tmp_path, monkeypatch):
    import hnplan.harness as harness

    def diverge(*a, **k):
        raise NonFiniteGradient("gradient is nan", epoch=2)

    monkeypatch.setattr(harness, "train_generator", diverge)
    with pytest.raises(StageFailed) as info:
        full_pipeline(ExperimentConfig(**{**SMALL, "n_train": 4, "n_test": 2}), tmp_path, workers=1)
    assert info.value.stage == "train-generator/0"
    assert isinstance(info.value.cause, NonFiniteGradient)


# ---------------------------------------------------------------- command line


def test_cli_end_to_end(tmp_path, capsys):
    d = str(tmp_path)
    assert cli.main(["gen-scenes", "--seed", "1", "--count", "24", "--out", f"{d}/train.json"]) == 0
    assert cli.main(["gen-scenes", "--seed", "1", "--count", "6", "--start-id", "1000",
                     "--out", f"{d}/test.json"]) == 0
    assert cli.main(["train-generator", "--scenes", f"{d}/train.json", "--epochs", "2",
                     "--out", f"{d}/gen.ckpt"]) == 0
    assert cli.main(["sample", "--ckpt", f"{d}/gen.ckpt", "--scenes", f"{d}/test.json", "--n", "4",
                     "--out", f"{d}/samples.json"]) == 0
    samples = json.loads((tmp_path / "samples.json").read_text())
    assert len(samples) == 6 and np.array(samples[0]["candidates"]).shape == (4, 8, 3)
    assert cli.main(["mine-negatives", "--ckpt", f"{d}/gen.ckpt", "--scenes", f"{d}/train.json", "--n", "16",
                     "--out", f"{d}/neg.json", "--stats-out", f"{d}/stats.csv"]) == 0
    assert cli.main(["train-policy", "--scenes", f"{d}/train.json", "--negatives", f"{d}/neg.json",
                     "--epochs", "2", "--out", f"{d}/pol.ckpt"]) == 0
    capsys.readouterr()
    assert cli.main(["evaluate", "--ckpt", f"{d}/pol.ckpt", "--scenes", f"{d}/test.json",
                     "--out", f"{d}/eval.csv"]) == 0
    agg = json.loads(capsys.readouterr().out)
    assert set(agg) == set(METRICS)
    assert cli.main(["closed-loop", "--ckpt", "expert", "--scenes", f"{d}/test.json", "--T", "2",
                     "--out", f"{d}/cl.csv"]) == 0
    assert cli.main(["ablate-mining", "--ckpt", f"{d}/gen.ckpt", "--scenes", f"{d}/test.json",
                     "--grid", "4:1:1,4:0.5:2", "--out", f"{d}/grid.csv"]) == 0
    assert len(read_csv_rows(tmp_path / "grid.csv")) == 2


def test_cli_exit_codes(tmp_path, monkeypatch):
    assert cli.main(["evaluate", "--ckpt", "expert", "--scenes", str(tmp_path / "missing.json"),
                     "--out", str(tmp_path / "e.csv")]) == cli.EXIT_IO
    (tmp_path / "bad.json").write_text("[{]")
    assert cli.main(["evaluate", "--ckpt", "expert", "--scenes", str(tmp_path / "bad.json"),
                     "--out", str(tmp_path / "e.csv")]) == cli.EXIT_IO
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seeds": []}))
    assert cli.main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "run")]) == cli.EXIT_CONFIG
    assert cli.main(["ablate-mining", "--ckpt", "x", "--scenes", "y", "--grid", "1:2",
                     "--out", "z"]) == cli.EXIT_CONFIG

    import hnplan.harness as harness

    def diverge(*a, **k):
        raise NonFiniteGradient("gradient is nan", epoch=0)

    monkeypatch.setattr(harness, "train_generator", diverge)
    cfg.write_text(json.dumps({**SMALL, "n_train": 4, "n_test": 2}))
    assert cli.main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "run")]) == cli.EXIT_DIVERGED


def test_cli_threads_env_is_respected(monkeypatch):
    from hnplan.parallel import worker_count

    monkeypatch.setenv("HNP_THREADS", "8")
    assert worker_count() == 8
    assert worker_count(2) == 2
    monkeypatch.delenv("HNP_THREADS")
    assert worker_count() >= 1 and os.cpu_count() >= 1
