import csv

import numpy as np
import pytest

from restart_rl import cli
from restart_rl import config as cfgmod
from restart_rl.orchestrator import EvalRow, RunRecord


def write_seed(run_dir, seed, steps, metrics):
    rec = RunRecord(seed=seed, rows=[EvalRow(s, m, 0.0, 0) for s, m in zip(steps, metrics)], wall_clock=0.0, config_digest="")
    cli.write_run_csv(run_dir / f"seed_{seed}.csv", rec)


def test_presets_have_expected_seed_counts():
    assert len(cfgmod.preset("deep-maze-episodic").seeds) == 5
    assert len(cfgmod.preset("dense-corridor-uniform").seeds) == 5
    assert len(cfgmod.preset("multigoal-episodic").seeds) == 10
    assert cfgmod.preset("multigoal-grid-none").restart.ratio == 0.0


def test_every_preset_builds():
    for name in cfgmod.preset_names():
        cfg = cfgmod.preset(name)
        env = cfgmod.build_env(cfg)
        assert env.n_actions >= 3
        mem = cfgmod.build_memory(cfg)
        assert (mem is None) == (cfg.variant == "none")


def test_unknown_variant_exits_with_field_name(capsys):
    code = cli.main(["run", "--preset", "deep-maze-episodic", "--set", 'experiment.variant="bogus"', "--dump-config"])
    assert code == 2
    assert "experiment.variant" in capsys.readouterr().err


def test_bad_override_value_names_field():
    with pytest.raises(cfgmod.ConfigError) as err:
        cfgmod.load(preset="dense-corridor-uniform", overrides=["restart.ratio=1.5"])
    assert err.value.field == "restart.ratio"


def test_config_round_trips_through_toml(tmp_path):
    cfg = cfgmod.preset("dense-corridor-prioritised")
    path = tmp_path / "exp.toml"
    path.write_text(cfg.to_toml())
    again = cfgmod.load(path)
    assert again == cfg
    assert again.digest() == cfg.digest()


def test_digest_tracks_config_changes():
    a = cfgmod.preset("multigoal-episodic")
    b = cfgmod.load(preset="multigoal-episodic", overrides=["restart.ratio=0.2"])
    c = cfgmod.load(preset="multigoal-episodic", overrides=["restart.ratio=0.1"])
    assert a.digest() != b.digest()
    assert a.digest() == c.digest()


def test_aggregate_arithmetic(tmp_path):
    write_seed(tmp_path, 0, [0, 10], [0.4, 1.0])
    write_seed(tmp_path, 1, [0, 10], [0.6, 1.0])
    curve = cli.aggregate(tmp_path)
    np.testing.assert_allclose(curve.mean, [0.5, 1.0], atol=1e-12)
    np.testing.assert_allclose(curve.stderr, [0.1, 0.0], atol=1e-12)
    lines = (tmp_path / "aggregate.csv").read_text().splitlines()
    assert lines[0].startswith(cli.AGGREGATE_MARKER)
    rows = list(csv.DictReader(lines[1:]))
    assert [int(r["env_steps"]) for r in rows] == [0, 10]
    assert (tmp_path / "aggregate_metric.svg").exists()


def test_single_seed_stderr_is_zero(tmp_path):
    write_seed(tmp_path, 3, [0, 5, 10], [1.0, 2.0, 3.0])
    curve = cli.learning_curve(tmp_path)
    np.testing.assert_array_equal(curve.stderr, 0.0)
    np.testing.assert_array_equal(curve.mean, [1.0, 2.0, 3.0])


def test_mismatched_grids_rejected(tmp_path):
    write_seed(tmp_path, 0, [0, 10], [0.0, 1.0])
    write_seed(tmp_path, 1, [0, 20], [0.0, 1.0])
    with pytest.raises(cli.MismatchedGrids):
        cli.learning_curve(tmp_path)
    assert cli.main(["aggregate", str(tmp_path)]) == 2


def test_aggregate_output_is_not_aggregated_again(tmp_path):
    write_seed(tmp_path, 0, [0, 10], [0.0, 1.0])
    cli.aggregate(tmp_path)
    (tmp_path / "seed_0.csv").unlink()
    with pytest.raises(cli.AggregateInput):
        cli.learning_curve(tmp_path)
    (tmp_path / "copy.csv").write_text((tmp_path / "aggregate.csv").read_text())
    with pytest.raises(cli.AggregateInput):
        cli.learning_curve(tmp_path)


def test_run_writes_seed_csvs_and_manifest(tmp_path):
    code = cli.main([
        "run", "--preset", "dense-corridor-uniform", "--seeds", "0,1", "--out", str(tmp_path),
        "--set", "experiment.total_steps=1024", "--set", "ppo.steps_per_iteration=256",
        "--set", "ppo.hidden=[8, 8]", "--set", "eval.period=512", "--set", "env.length=20",
    ])
    assert code == 0
    assert sorted(p.name for p in tmp_path.glob("seed_*.csv")) == ["seed_0.csv", "seed_1.csv"]
    header = (tmp_path / "seed_0.csv").read_text().splitlines()[0]
    assert header == ",".join(cli.CSV_HEADER)
    manifest = cfgmod.tomllib.loads((tmp_path / "manifest.toml").read_text())
    assert manifest["config_digest"]["sha256_16"] == cfgmod.load(
        preset="dense-corridor-uniform",
        overrides=[
            "experiment.total_steps=1024", "ppo.steps_per_iteration=256", "ppo.hidden=[8, 8]",
            "eval.period=512", "env.length=20", "experiment.seeds=[0,1]", f'experiment.out_dir="{tmp_path}"',
        ],
    ).digest()
    curve = cli.aggregate(tmp_path)
    assert list(curve.steps) == [0, 512, 1024]


def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 6 and all(line.startswith("PASS") for line in out)


def test_selftest_detects_injected_fault(capsys):
    assert cli.main(["selftest", "--inject-fault", "sumtree"]) == 1
    out = capsys.readouterr().out
    assert "FAIL  sum-tree consistency" in out
