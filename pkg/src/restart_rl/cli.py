"""Command-line entry point: ``restart-rl run | aggregate | selftest``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .agent import NonFiniteGradient
from .orchestrator import RunRecord, train

log = logging.getLogger("restart_rl")

CSV_HEADER = ["seed", "env_steps", "metric", "aug_fraction", "memory_size"]
AGGREGATE_MARKER = "# restart-rl aggregate"
AGGREGATE_NAME = "aggregate.csv"


class MismatchedGrids(ValueError):
    pass


class AggregateInput(ValueError):
    """The directory holds aggregate output rather than per-seed runs."""


def _run_seed(cfg: cfgmod.ExperimentConfig, seed: int) -> RunRecord:
    return train(cfgmod.build_setup(cfg), seed)


def write_run_csv(path: Path, record: RunRecord) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for row in record.rows:
            writer.writerow([record.seed, row.env_steps, repr(row.metric), repr(row.aug_fraction), row.memory_size])


def _workers(n_seeds: int) -> int:
    cap = os.environ.get("RESTART_RL_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(n_seeds, limit))


def run(cfg: cfgmod.ExperimentConfig, out_dir: Path | None = None) -> list[RunRecord]:
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = _workers(len(cfg.seeds))
    if workers == 1:
        records = [_run_seed(cfg, s) for s in cfg.seeds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    manifest = cfg.to_dict()
    manifest["runs"] = {}
    for rec in records:
        manifest["runs"][str(rec.seed)] = {
            "wall_clock": rec.wall_clock,
            "discarded": rec.discarded,
            "param_digest": rec.param_digest,
        }
        if rec.discarded:
            log.info("seed %d discarded by the positive-reward gate", rec.seed)
            continue
        write_run_csv(out / f"seed_{rec.seed}.csv", rec)
    manifest["config_digest"] = {"sha256_16": cfg.digest()}
    import tomli_w

    (out / "manifest.toml").write_text(tomli_w.dumps(manifest))
    return records


@dataclass
class LearningCurve:
    steps: np.ndarray
    per_seed: dict[int, np.ndarray]
    mean: np.ndarray
    stderr: np.ndarray


def _read_run_csv(path: Path) -> tuple[int, np.ndarray, np.ndarray]:
    with path.open() as fh:
        first = fh.readline()
        if first.startswith(AGGREGATE_MARKER):
            raise AggregateInput(f"{path} is an aggregate file; aggregate per-seed run directories only")
        fh.seek(0)
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} has no rows")
    seed = int(rows[0]["seed"])
    return seed, np.array([int(r["env_steps"]) for r in rows]), np.array([float(r["metric"]) for r in rows])


def learning_curve(run_dir: str | Path) -> LearningCurve:
    run_dir = Path(run_dir)
    files = sorted(p for p in run_dir.glob("*.csv") if p.name != AGGREGATE_NAME)
    if not files:
        if (run_dir / AGGREGATE_NAME).exists():
            raise AggregateInput(f"{run_dir} only holds an aggregate; nothing to aggregate")
        raise FileNotFoundError(f"no run CSVs in {run_dir}")
    per_seed = {}
    grid = None
    for path in files:
        seed, steps, metric = _read_run_csv(path)
        if grid is None:
            grid = steps
        elif not np.array_equal(grid, steps):
            raise MismatchedGrids(f"{path.name} evaluates at different env steps than the other seeds")
        per_seed[seed] = metric
    stack = np.stack(list(per_seed.values()))
    n = stack.shape[0]
    stderr = stack.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(stack.shape[1])
    return LearningCurve(grid, per_seed, stack.mean(axis=0), stderr)


def aggregate(run_dir: str | Path) -> LearningCurve:
    run_dir = Path(run_dir)
    curve = learning_curve(run_dir)
    with (run_dir / AGGREGATE_NAME).open("w", newline="") as fh:
        fh.write(f"{AGGREGATE_MARKER} over seeds {','.join(map(str, sorted(curve.per_seed)))}\n")
        writer = csv.writer(fh)
        writer.writerow(["env_steps", "mean", "stderr"])
        for s, m, e in zip(curve.steps, curve.mean, curve.stderr):
            writer.writerow([int(s), repr(float(m)), repr(float(e))])
    plot_curve(curve, run_dir / "aggregate_metric.svg", title=run_dir.name)
    return curve


def plot_curve(curve: LearningCurve, path: Path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(curve.steps, curve.mean, lw=1.5)
    ax.fill_between(curve.steps, curve.mean - curve.stderr, curve.mean + curve.stderr, alpha=0.3)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("metric")
    ax.set_title(f"{title} (n={len(curve.per_seed)})")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="restart-rl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train every seed of an experiment")
    src = p_run.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", type=Path, help="TOML experiment file")
    src.add_argument("--preset", choices=cfgmod.preset_names())
    p_run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p_run.add_argument("--seeds", help="comma-separated seed list")
    p_run.add_argument("--out", type=Path)
    p_run.add_argument("--dump-config", action="store_true", help="print the effective config and exit")

    p_agg = sub.add_parser("aggregate", help="mean/stderr learning curve over seeds")
    p_agg.add_argument("run_dir", type=Path)

    p_self = sub.add_parser("selftest", help="fast invariant checks")
    p_self.add_argument("--inject-fault", choices=["sumtree"], help=argparse.SUPPRESS)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "run":
        overrides = list(args.overrides)
        if args.seeds:
            overrides.append(f"experiment.seeds=[{args.seeds}]")
        if args.out:
            overrides.append(f'experiment.out_dir="{args.out}"')
        try:
            cfg = cfgmod.load(args.config, args.preset, overrides)
        except (cfgmod.ConfigError, OSError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        if args.dump_config:
            print(cfg.to_toml())
            return 0
        try:
            records = run(cfg)
        except (NonFiniteGradient, FloatingPointError) as exc:
            print(f"run aborted: {exc}", file=sys.stderr)
            return 1
        for rec in records:
            final = rec.rows[-1].metric if rec.rows else float("nan")
            status = "discarded" if rec.discarded else f"final metric {final:.4g}"
            print(f"seed {rec.seed}: {status} ({rec.wall_clock:.1f}s)")
        return 0

    if args.command == "aggregate":
        try:
            curve = aggregate(args.run_dir)
        except (MismatchedGrids, AggregateInput, FileNotFoundError, ValueError) as exc:
            print(f"aggregate failed: {exc}", file=sys.stderr)
            return 2
        print(f"aggregated {len(curve.per_seed)} seed(s) over {len(curve.steps)} evaluation points")
        return 0

    from .selftest import selftest

    return 0 if selftest(inject_fault=args.inject_fault) else 1


if __name__ == "__main__":
    sys.exit(main())
