"""Command-line entry point.

Subcommands: gen, train, eval, ground, ablate. A config file plus a seed
fully determines each run; identical inputs produce hash-identical output
artifacts. Exit codes: 0 success, 2 configuration/usage error, 3 runtime
error.

Environment: STREAMGROUND_DATA_DIR prefixes relative data paths,
STREAMGROUND_LOG sets the log level, STREAMGROUND_BACKEND picks the kernel
implementation (numba or numpy).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import ablation, engine, metrics, synthworld, training
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .model import build_model

log = logging.getLogger("streamground")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _setup_logging() -> None:
    level = os.environ.get("STREAMGROUND_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _data_path(path: str) -> Path:
    p = Path(path)
    base = os.environ.get("STREAMGROUND_DATA_DIR")
    if base and not p.is_absolute():
        return Path(base) / p
    return p


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "set", None):
        cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    return cfg


def _episode_seeds(cfg: RunConfig, n: int, stream: int = 0):
    return [np.random.SeedSequence([cfg.seed, stream, i]) for i in range(n)]


def cmd_gen(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out or cfg.out or "dataset.artge")
    episodes = [synthworld.generate_episode(cfg.world, s)
                for s in _episode_seeds(cfg, cfg.n_episodes)]
    synthworld.write_dataset(out, episodes)
    print(f"wrote {len(episodes)} episodes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    data = args.data or cfg.data
    if not data:
        raise ConfigError("train needs --data or [run] data")
    episodes = synthworld.read_dataset(_data_path(data))
    out_dir = Path(args.out or cfg.out or "run")
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg)
    history = training.train(
        model, episodes, cfg.train, seed=cfg.seed,
        log_path=out_dir / "metrics.csv",
        checkpoint_path=out_dir / "checkpoint.artc", run_cfg=cfg)
    final = history[-1]["loss"] if history else float("nan")
    print(f"trained {cfg.train.steps} steps, final loss {final:.6g}; "
          f"artifacts in {out_dir}")
    return EXIT_OK


def _model_from_checkpoint(path):
    ckpt = training.load_checkpoint(_data_path(path))
    return training.restore_model(ckpt), ckpt


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    if not args.data:
        raise ConfigError("eval needs --data")
    model, _ = _model_from_checkpoint(args.checkpoint)
    episodes = synthworld.read_dataset(_data_path(args.data))
    report = metrics.evaluate(model, episodes)
    text = metrics.report_json(report)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(metrics.report_table(report), end="")
    return EXIT_OK


def cmd_ground(args) -> int:
    if not args.checkpoint:
        raise ConfigError("ground needs --checkpoint")
    if not args.data:
        raise ConfigError("ground needs --data")
    model, _ = _model_from_checkpoint(args.checkpoint)
    episodes = synthworld.read_dataset(_data_path(args.data))
    if not 0 <= args.index < len(episodes):
        raise ConfigError(f"--index {args.index} outside dataset of "
                          f"{len(episodes)} episodes")
    tube = engine.ground(model, episodes[args.index])
    out = Path(args.out or "tube.jsonl")
    engine.write_tube_jsonl(out, tube)
    print(f"segment {tube.segment[0]}..{tube.segment[1]} -> {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds \
        else [cfg.seed, cfg.seed + 1, cfg.seed + 2]
    studies = args.studies.split(",") if args.studies else None
    out_dir = Path(args.out or cfg.out or "ablation")
    out_dir.mkdir(parents=True, exist_ok=True)

    def progress(row):
        log.info("ablate %s seed=%d %s", row.label(), row.seed, row.metrics)

    results = ablation.run_studies(cfg, seeds, n_train=args.train_episodes,
                                   n_eval=args.eval_episodes,
                                   studies=studies, progress=progress)
    (out_dir / "ablation.json").write_text(ablation.results_json(results) + "\n")
    table = "".join(f"== {name} ==\n{ablation.result_table(res)}\n"
                    for name, res in results.items())
    (out_dir / "ablation.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamground",
        description="streaming video grounding: data, training, evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run config file (key = value sections)")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out", help="output path")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a single config key")

    p = sub.add_parser("gen", help="generate an episode dataset")
    common(p)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset")
    common(p)
    p.add_argument("--data", help="episode dataset (.artge)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint file (.artc)")
    p.add_argument("--data", help="episode dataset (.artge)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ground", help="ground one episode and dump its tube")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint file (.artc)")
    p.add_argument("--data", help="episode dataset (.artge)")
    p.add_argument("--index", type=int, default=0, help="episode index")
    p.set_defaults(fn=cmd_ground)

    p = sub.add_parser("ablate", help="train and compare config variants")
    common(p)
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--studies", help="comma-separated subset of: "
                   + ",".join(ablation.STUDIES))
    p.add_argument("--train-episodes", type=int, default=24)
    p.add_argument("--eval-episodes", type=int, default=24)
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (synthworld.WorldConfigError,) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except training.TrainingDiverged as e:
        print(f"runtime error: {e}\ndiagnostics: {e.diagnostics}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, KeyError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
