# Copyright 2026 sparse-fuse contributors

"""The `sparse-fuse` command line.

Subcommands: verify, bench, simulate, train and compare. Every run writes `run.json`
with the resolved configuration into `--out`. Exit codes: 0 success, 1 property
failure, 2 configuration error, 3 training divergence.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pydantic

from sparse_fuse import checks, harness
from sparse_fuse.aggregation import set_worker_threads
from sparse_fuse.config import (
    SCHEMA_VERSION,
    RunConfig,
    Settings,
    load_settings,
    threads_from_env,
)
from sparse_fuse.errors import ConfigError, DivergenceError, PropertyFailure
from sparse_fuse.model import ModelParameters

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PROPERTY = 1
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3

INIT_WEIGHTS = "init.weights"
FINAL_WEIGHTS = "weights.bin"


def _write_json(path: Path, data: dict):
    with open(path, "w") as handle:
        json.dump(data, handle, indent=2, sort_keys=True, default=str)
        handle.write("\n")


def _load_weights(path: Path | None, settings: Settings) -> ModelParameters:
    if path is None:
        return harness.build_decoder(settings).params
    try:
        return ModelParameters.load(path)
    except OSError as e:
        logger.error("Cannot read weights %s: %s", path, e)
        raise ConfigError(f"cannot read weights {path}: {e}") from e


# --------------------------------------------------------------------------- #
# Subcommands
# --------------------------------------------------------------------------- #


def cmd_verify(run: RunConfig, settings: Settings, args) -> int:
    """Run the property suite and print a pass/fail table."""
    results = checks.run_all(settings, run.out, perturb=args.perturb)
    report = checks.report(results)
    _write_json(run.out / "verify.json", report)
    for r in results:
        print(f"{r.name:<28} {'PASS' if r.passed else 'FAIL'}  {r.value:11.3e}  "
              f"<= {r.threshold:8.1e}  {r.elapsed_s:7.2f}s")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise PropertyFailure("verify", f"{len(failed)} check(s) failed: {', '.join(failed)}")
    return EXIT_OK


def _judge(what: str, verdicts: list[harness.Verdict]):
    for v in verdicts:
        print(f"{v.name}: {v.value} (limit {v.limit}) {'ok' if v.passed else 'FAILED'}")
    failed = [v.name for v in verdicts if not v.passed]
    if failed:
        raise PropertyFailure(what, f"acceptance failed: {', '.join(failed)}")


def bench_summary(reports: list[harness.BenchReport], warmup: int) -> dict:
    """Slope of calls against T, recurrent constancy, wall-time ratios and verdicts."""
    summary: dict = {"schema": SCHEMA_VERSION}
    multi = sorted((r for r in reports if r.mode == "multiframe"), key=lambda r: r.T)
    if multi:
        slope, intercept = harness.fit_calls_vs_t(multi)
        base = multi[0]
        summary["multiframe"] = {
            "calls_slope": slope,
            "calls_intercept": intercept,
            "calls_ratio": [
                float(r.calls_per_frame()[0] / base.calls_per_frame()[0]) for r in multi
            ],
            "wall_ratio": [
                r.wall_stats(warmup)["median_ns"] / base.wall_stats(warmup)["median_ns"]
                for r in multi
            ],
        }
    for r in reports:
        if r.mode != "recurrent":
            continue
        calls = r.calls_per_frame()
        walls = r.wall_ns()[warmup:] if len(calls) > warmup else r.wall_ns()
        summary["recurrent"] = {
            "calls_constant": bool(np.all(calls == calls[0])),
            "calls_per_frame": int(calls[0]),
            "wall_cv": harness.coefficient_of_variation(walls),
            "last_over_first": float(walls[-1] / walls[0]),
        }
    summary["verdicts"] = [v.as_dict() for v in harness.bench_verdicts(reports, warmup)]
    return summary


def cmd_bench(run: RunConfig, settings: Settings, args) -> int:
    """Recurrent vs multi-frame sampling; writes bench.csv."""
    reports = harness.run_bench(settings)
    harness.write_bench_csv(reports, run.out / "bench.csv")
    summary = bench_summary(reports, settings.bench.warmup)
    _write_json(run.out / "bench-summary.json", summary)
    if "multiframe" in summary:
        multi = summary["multiframe"]
        print(f"multiframe: calls/frame = {multi['calls_slope']:.2f} * T "
              f"+ {multi['calls_intercept']:.2f}")
        print("multiframe: wall ratio vs smallest T: "
              + " ".join(f"{x:.2f}" for x in multi["wall_ratio"]))
    if "recurrent" in summary:
        rec = summary["recurrent"]
        print(f"recurrent: {rec['calls_per_frame']} calls/frame, "
              f"constant={rec['calls_constant']}, wall CV={rec['wall_cv']:.3f}, "
              f"last/first wall={rec['last_over_first']:.2f}")
    _judge("bench", [harness.Verdict(**v) for v in summary["verdicts"]])
    return EXIT_OK


def cmd_simulate(run: RunConfig, settings: Settings, args) -> int:
    """Recurrent inference over independent scenes; writes metrics.json."""
    params = _load_weights(args.weights, settings)
    params.save(run.out / FINAL_WEIGHTS)
    records = harness.simulate(settings, params, args.scenes, jobs=threads_from_env())
    recalls = [r["recall"] for r in records]
    _write_json(
        run.out / "metrics.json",
        {"schema": SCHEMA_VERSION, "scenes": records, "mean_recall": float(np.mean(recalls))},
    )
    for r in records:
        print(f"scene {r['scene']}: recall {r['recall']:.3f} "
              f"center MAE {r['center_mae']} velocity MAE {r['velocity_mae']}")
    return EXIT_OK


def cmd_train(run: RunConfig, settings: Settings, args) -> int:
    """Toy training; writes train.jsonl, init and final weights, metrics.json."""
    cfg = settings.train
    model = harness.build_decoder(settings, _load_weights(args.weights, settings)
                                  if args.weights else None)
    model.params.save(run.out / INIT_WEIGHTS)
    scenes = harness.train_scenes(settings, settings.seed)
    epochs = cfg.epochs
    if cfg.max_steps is not None and cfg.epochs:
        epochs = max(epochs, harness.epochs_for_steps(cfg, len(scenes), settings.scene.frames,
                                                      cfg.max_steps))
    result = harness.train_toy(scenes, model, cfg, epochs=epochs,
                               log_path=run.out / "train.jsonl")
    result.params.save(run.out / FINAL_WEIGHTS)
    metrics: dict = {"schema": SCHEMA_VERSION, "steps": result.steps, "epochs": epochs}
    if result.steps:
        last = [r for r in result.records if r["kind"] == "step"][-1]
        metrics["final"] = {k: last[k] for k in ("box", "cls", "depth", "total")}
        early, late = harness.depth_trend(result, cfg.moving_average)
        metrics["depth_moving_average"] = {"early": early, "late": late}
        held_out = harness.generate_scene(settings.scene, settings.seed * 1000 + 999)
        _, detections = harness.run_recurrent(held_out, model, cfg.frames_per_scene)
        metrics["held_out"] = harness.evaluate(detections, held_out, settings.eval).as_dict()
    _write_json(run.out / "metrics.json", metrics)
    print(f"trained {result.steps} steps over {epochs} epoch(s)")
    return EXIT_OK


def cmd_compare(run: RunConfig, settings: Settings, args) -> int:
    """Paired ablation runs: temporal vs single-frame, or with vs without depth."""
    seeds = range(settings.seed, settings.seed + args.seeds)
    if args.what == "temporal":
        pairs = harness.compare_temporal(settings, seeds, args.steps, jobs=threads_from_env())
        wins = sum(p["recurrent_better"] for p in pairs)
        verdicts = [harness.temporal_verdict(pairs)]
        _write_json(
            run.out / "compare.json",
            {"schema": SCHEMA_VERSION, "what": "temporal", "pairs": pairs, "wins": wins,
             "verdicts": [v.as_dict() for v in verdicts]},
        )
        print(f"recurrent beats single-frame velocity MAE in {wins}/{len(pairs)} runs")
    else:
        pairs = [harness.compare_depth(settings, seed, args.steps) for seed in seeds]
        verdicts = [harness.depth_verdict(p) for p in pairs]
        _write_json(
            run.out / "compare.json",
            {"schema": SCHEMA_VERSION, "what": "depth", "pairs": pairs,
             "verdicts": [v.as_dict() for v in verdicts]},
        )
        for p in pairs:
            print(f"seed {p['seed']}: box L1 {p['with_depth_box_l1']:.4f} with depth, "
                  f"{p['without_depth_box_l1']:.4f} without")
    _judge("compare", verdicts)
    return EXIT_OK


COMMANDS = {
    "verify": cmd_verify,
    "bench": cmd_bench,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "compare": cmd_compare,
}


# --------------------------------------------------------------------------- #
# Argument parsing
# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    """The top-level parser with one subparser per command."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML settings file")
    common.add_argument("--seed", type=int, help="Override the settings seed")
    common.add_argument("--out", type=Path, default=Path("out"), help="Output directory")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Dotted settings override, may be repeated",
    )
    common.add_argument("-q", "--quiet", action="store_true", help="Be less chatty")

    parser = argparse.ArgumentParser(
        prog="sparse-fuse", description="Recurrent sparse multi-view perception toolkit."
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    verify = sub.add_parser("verify", parents=[common], help="Run the property suite")
    verify.add_argument(
        "--perturb",
        action="store_true",
        help="Scale one fused-side weight by 1+1e-3; the suite must then fail",
    )

    bench = sub.add_parser("bench", parents=[common], help="Sampling cost against T")
    bench.add_argument("--mode", action="append", choices=("recurrent", "multiframe"))
    bench.add_argument("--t", dest="t_values", type=int, nargs="+", metavar="T")
    bench.add_argument("--repeats", type=int)
    bench.add_argument("--frames", type=int)

    simulate = sub.add_parser("simulate", parents=[common], help="Inference on toy scenes")
    simulate.add_argument("--scenes", type=int, default=1)
    simulate.add_argument("--frames", type=int)
    simulate.add_argument("--weights", type=Path, help="Weights file; default is a fresh init")

    train = sub.add_parser("train", parents=[common], help="Toy training")
    train.add_argument("--epochs", type=int)
    train.add_argument("--steps", type=int)
    train.add_argument("--weights", type=Path, help="Start from this weights file")

    compare = sub.add_parser("compare", parents=[common], help="Paired ablation runs")
    compare.add_argument("what", choices=("temporal", "depth"))
    compare.add_argument("--seeds", type=int, default=5, help="Number of paired seeds")
    compare.add_argument("--steps", type=int, default=200)
    return parser


def _flag_overrides(args) -> list[str]:
    """Subcommand flags expressed as settings overrides, so run.json records them."""
    pairs = {
        "bench.modes": getattr(args, "mode", None),
        "bench.t_values": getattr(args, "t_values", None),
        "bench.repeats": getattr(args, "repeats", None),
        "train.epochs": getattr(args, "epochs", None),
        "train.max_steps": getattr(args, "steps", None) if args.subcommand == "train" else None,
    }
    if args.subcommand == "bench":
        pairs["bench.frames"] = args.frames
    if args.subcommand == "simulate" and args.frames is not None:
        pairs["scene.frames"] = args.frames
    return [f"{key}={json.dumps(value)}" for key, value in pairs.items() if value is not None]


def main(argv: list[str] | None = None) -> int:
    """Parse arguments, run the subcommand and map failures to exit codes."""
    logging.basicConfig()
    logging.getLogger().setLevel(logging.DEBUG)
    logging.getLogger("numba").setLevel(logging.WARNING)

    args = build_parser().parse_args(argv)
    if args.quiet:
        logging.getLogger().setLevel(logging.WARNING)

    try:
        try:
            run = RunConfig(
                subcommand=args.subcommand,
                config=args.config,
                seed=args.seed,
                out=args.out,
                overrides=[*args.overrides, *_flag_overrides(args)],
            )
        except pydantic.ValidationError as e:
            raise ConfigError(str(e)) from e
        settings = load_settings(run.config, run.overrides, run.seed)
        set_worker_threads(threads_from_env())
        run.out.mkdir(parents=True, exist_ok=True)
        _write_json(
            run.out / "run.json",
            {
                "schema": SCHEMA_VERSION,
                "run": run.model_dump(mode="json"),
                "settings": settings.model_dump(mode="json"),
            },
        )
        return COMMANDS[run.subcommand](run, settings, args)
    except PropertyFailure as e:
        logger.error("Property failure: %s", e)
        return EXIT_PROPERTY
    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except DivergenceError as e:
        logger.error("Training diverged: %s", e)
        return EXIT_DIVERGENCE


def entry_point():
    """Console-script entry point."""
    sys.exit(main())
