import csv
import json
import statistics

import numpy as np
import pytest
from scipy import stats

from rtsac.cli import main as cli_main
from rtsac.envsim import MAX_JOINT_SPEED, episode_steps
from rtsac.envsim.raster import read_pnm
from rtsac.harness import (
    ExperimentConfig,
    aggregate,
    curve_rows,
    load_config_file,
    overall_performance,
    profile_components,
    returns_from_csv,
    run_experiment,
    scale_reward,
    stderr,
    write_outputs,
)
from rtsac.nn import load_parameters
from rtsac.runlog import RunLog, StepRecord, UpdateRecord, read_records

TINY = dict(hidden=16, filters="4", batch_size=8)


@pytest.fixture(scope="module")
def warm_run():
    return run_experiment(ExperimentConfig(**TINY, warmup_steps=1000, max_steps=1))


def test_warmup_fills_buffer_exactly(warm_run):
    assert warm_run.warmup_buffer_size == 1000
    assert len(warm_run.warmup_actions) == 1000


def test_warmup_actions_uniform_per_dimension(warm_run):
    acts = np.array(warm_run.warmup_actions)
    assert np.all(np.abs(acts) <= MAX_JOINT_SPEED)
    for d in range(acts.shape[1]):
        p = stats.kstest(acts[:, d], stats.uniform(loc=-MAX_JOINT_SPEED, scale=2 * MAX_JOINT_SPEED).cdf).pvalue
        assert p > 0.01


def test_warmup_excluded_from_curve(warm_run):
    steps = warm_run.runlog.steps
    assert steps[0].step == 1
    assert curve_rows(warm_run.runlog)[0]["first_step"] == 1
    assert warm_run.orchestrator.training_start_us > 0


@pytest.mark.parametrize("raw,cycle,expected", [(1.0, 80, 2.0), (3.5, 40, 3.5), (-2.0, 200, -10.0)])
def test_scale_reward_examples(raw, cycle, expected):
    assert scale_reward(raw, cycle) == pytest.approx(expected, abs=1e-12)


def test_scale_reward_rejects_nonpositive_cycle():
    with pytest.raises(ValueError):
        scale_reward(1.0, 0)


@pytest.mark.parametrize("r", [0.25, 17.0, -3.0])
def test_episode_return_equivalence(r):
    ret40 = sum(scale_reward(r, 40) for _ in range(episode_steps(40)))
    for cycle in (80, 160, 200):
        total = sum(scale_reward(r, cycle) for _ in range(episode_steps(cycle)))
        assert total == pytest.approx(ret40, abs=1e-9)
    assert ret40 == pytest.approx(100 * r)


def test_overall_performance_examples():
    assert overall_performance([7.0] * 5) == 7.0
    assert overall_performance([0.0, 10.0]) == 5.0
    with pytest.raises(ValueError):
        overall_performance([])
    with pytest.raises(ValueError):
        overall_performance(RunLog())


def test_overall_performance_sums_scaled_rewards_per_episode():
    log = RunLog()
    for i, (ep, r) in enumerate([(0, 1.0), (0, 2.0), (1, 4.0)]):
        log.append(StepRecord(i + 1, ep, i * 80_000, 80_000, r / 2, r, 0, 0))
    assert log.episode_returns() == [3.0, 4.0]
    assert overall_performance(log) == 3.5


@pytest.fixture(scope="module")
def seed_dirs(tmp_path_factory):
    base = tmp_path_factory.mktemp("runs")
    dirs = []
    for seed in range(3):
        r = run_experiment(ExperimentConfig(**TINY, warmup_steps=8, budget_s=15, seed=seed))
        d = base / f"seed{seed}"
        write_outputs(r, d)
        dirs.append((d, r))
    return dirs


def test_aggregate_recomputed_from_csv(seed_dirs):
    values = [overall_performance(r.runlog) for _, r in seed_dirs]
    agg = aggregate([d for d, _ in seed_dirs])
    assert agg["n"] == 3
    assert agg["mean"] == pytest.approx(np.mean(values), rel=1e-12)
    assert agg["stderr"] == pytest.approx(np.std(values, ddof=1) / np.sqrt(3), rel=1e-12)
    assert stderr([1.0]) == 0.0


def test_csv_roundtrip_and_curve_integrity(seed_dirs):
    d, r = seed_dirs[0]
    assert read_records(d / "runlog.csv", StepRecord) == r.runlog.steps
    assert read_records(d / "updates.csv", UpdateRecord) == r.runlog.updates
    with open(d / "curve.csv", newline="") as fh:
        curve = [float(row["return"]) for row in csv.DictReader(fh)]
    np.testing.assert_allclose(curve, returns_from_csv(d / "runlog.csv"), rtol=0, atol=1e-9)
    summary = json.loads((d / "summary.json").read_text())
    assert summary["overall_performance"] == pytest.approx(overall_performance(r.runlog))
    assert summary["episodes"] == len(r.runlog.episodes)


def test_runlog_invariants(seed_dirs):
    for _, r in seed_dirs:
        steps = r.runlog.steps
        times = [s.t_us for s in steps]
        assert times == sorted(times)
        eps = sorted({s.episode for s in steps})
        assert eps == list(range(eps[0], eps[0] + len(eps)))
        assert [s.step for s in steps] == list(range(1, len(steps) + 1))


def test_profile_recovers_injected_costs():
    cfg = ExperimentConfig(
        **TINY, warmup_steps=8, arch="async2", interaction_ms=10, sample_ms=15, update_ms=30, updates_cap=0, max_updates=120
    )
    prof = profile_components(run_experiment(cfg).runlog)
    assert prof == {"interaction_ms": 10.0, "sample_ms": 15.0, "update_ms": 30.0}


def test_profile_needs_enough_updates():
    r = run_experiment(ExperimentConfig(**TINY, warmup_steps=8, max_updates=20, updates_cap=0))
    with pytest.raises(ValueError):
        profile_components(r.runlog)


def test_sequential_slack_is_nonnegative():
    cfg = ExperimentConfig(**TINY, warmup_steps=8, arch="seq", interaction_ms=10, sample_ms=15, update_ms=30, max_steps=120)
    r = run_experiment(cfg)
    prof = profile_components(r.runlog, min_updates=100)
    busy = sum(prof.values())
    slack = [s.cycle_us / 1000.0 - busy for s in r.runlog.steps]
    assert min(slack) >= 0
    assert set(slack) == {80.0 - 55.0}


@pytest.mark.wall
def test_wall_profile_split_half_stable():
    cfg = ExperimentConfig(**TINY, warmup_steps=50, arch="async2", clock="wall", updates_cap=0, max_updates=300, reset_ms=200)
    ups = run_experiment(cfg).runlog.updates
    half = len(ups) // 2
    for key in ("sample", "update"):
        med = [
            statistics.median(getattr(u, f"{key}_end_us") - getattr(u, f"{key}_start_us") for u in part)
            for part in (ups[:half], ups[half:])
        ]
        assert abs(med[0] - med[1]) <= 0.2 * max(med)


# ---------------------------------------------------------------------------
# configuration and command line


def test_config_file_parsing(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# desk run\narch = seq\nseed=4  # trailing comment\n\nbudget_s = 12.5\nfilters = 4,8\n")
    values = load_config_file(p)
    assert values == {"arch": "seq", "seed": "4", "budget_s": "12.5", "filters": "4,8"}
    cfg = ExperimentConfig.from_mapping(values)
    assert (cfg.arch, cfg.seed, cfg.budget_s, cfg.sac_config().filters) == ("seq", 4, 12.5, (4, 8))
    (tmp_path / "bad.cfg").write_text("arch seq\n")
    with pytest.raises(ValueError):
        load_config_file(tmp_path / "bad.cfg")
    with pytest.raises(ValueError):
        ExperimentConfig.from_mapping({"no_such_key": "1"})


def test_config_text_roundtrip():
    cfg = ExperimentConfig(arch="async1", seed=9, lr=1e-3, setting="largebatch")
    lines = [ln for ln in cfg.to_text().splitlines() if ln]
    values = dict(ln.split(" = ", 1) for ln in lines)
    assert ExperimentConfig.from_mapping(values) == cfg


def test_settings():
    assert ExperimentConfig(setting="highres").image_dims() == (48, 64)
    assert ExperimentConfig(setting="large_minibatch").effective_batch_size() == 128
    assert ExperimentConfig(setting="baseline").effective_cap() == 1
    assert ExperimentConfig(arch="seq").effective_cap() == 0
    with pytest.raises(ValueError):
        ExperimentConfig(setting="huge")


def test_cli_run_inspect_aggregate(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("hidden = 16\nfilters = 4\nbatch_size = 8\nwarmup_steps = 8\narch = async1\n")
    out = tmp_path / "run"
    ckpt = tmp_path / "p.bin"
    rc = cli_main(
        ["run", "--config", str(cfg), "--arch", "async2", "--seed", "2", "--budget", "10",
         "--out", str(out), "--save-params", str(ckpt), "--dump-frames", "3"]
    )
    assert rc == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["arch"] == "async2" and summary["seed"] == 2
    assert "seed = 2" in (out / "config.txt").read_text()
    frames = sorted((out / "frames").glob("*.ppm"))
    assert len(frames) == 3 and read_pnm(frames[0]).shape == (24, 32, 3)
    assert load_parameters(ckpt).version == summary["updates"]
    capsys.readouterr()
    assert cli_main(["inspect-params", str(ckpt)]) == 0
    assert "checksum" in capsys.readouterr().out
    assert cli_main(["aggregate", str(out)]) == 0
    assert json.loads(capsys.readouterr().out)["n"] == 1
