"""Command-line front door: train, eval, ablate, diag.

Training is single-threaded for determinism; --parallel-eval fans
evaluation episodes over worker threads whose results merge by episode
index, so it changes wall time and nothing else. The LAGMA_LOG environment
variable picks verbosity: quiet, info (default), or debug.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys

from .checkpoint import CheckpointError
from .config import (ConfigError, VARIANTS, config_to_mapping, load_config,
                     mapping_to_config)
from .runner import dump_diagnostics, evaluate_checkpoint, run_training

_LOG_LEVELS = {
    "quiet": logging.WARNING, "0": logging.WARNING,
    "info": logging.INFO, "1": logging.INFO,
    "debug": logging.DEBUG, "2": logging.DEBUG,
}


def _configure_logging() -> None:
    word = os.environ.get("LAGMA_LOG", "info").strip().lower()
    level = _LOG_LEVELS.get(word, logging.INFO)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("lagma").setLevel(level)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lagma", description="latent goal-guided multi-agent training")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run one seeded training run")
    train.add_argument("--config", required=True)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--out", required=True)
    train.add_argument("--resume", action="store_true")
    train.add_argument("--parallel-eval", type=int, default=1)

    ev = sub.add_parser("eval", help="evaluate a checkpointed policy")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--episodes", type=int, default=32)
    ev.add_argument("--parallel-eval", type=int, default=1)

    ablate = sub.add_parser("ablate", help="run a variant-by-seed grid")
    ablate.add_argument("--config", required=True)
    ablate.add_argument("--variants", required=True,
                        help=f"comma list from {','.join(VARIANTS)}")
    ablate.add_argument("--seeds", required=True, help="comma list of ints")
    ablate.add_argument("--out", default=None)
    ablate.add_argument("--parallel-eval", type=int, default=1)

    diag = sub.add_parser("diag", help="dump latent-space diagnostics")
    diag.add_argument("--ckpt", required=True)
    diag.add_argument("--out", required=True)
    return parser


def _with_overrides(config, variant=None, seed=None):
    mapping = config_to_mapping(config)
    if variant is not None:
        mapping["run"]["variant"] = variant
    if seed is not None:
        mapping["run"]["seed"] = seed
    return mapping_to_config(mapping)


def _cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = _with_overrides(config, seed=args.seed)
    run = run_training(config, out_dir=args.out, resume=args.resume,
                       parallel_eval=args.parallel_eval)
    final = run.records[-1]
    print(json.dumps({
        "env_steps": final.env_step,
        "win_rate": final.win_rate,
        "mean_return": final.mean_return,
        "metrics": run.metrics_path,
        "checkpoint": run.checkpoint_path,
    }))
    return 0


def _cmd_eval(args) -> int:
    result = evaluate_checkpoint(args.ckpt, args.episodes,
                                 args.parallel_eval)
    print(json.dumps({
        "episodes": len(result.wins),
        "win_rate": result.win_rate,
        "mean_return": result.mean_return,
    }))
    return 0


def _cmd_ablate(args) -> int:
    config = load_config(args.config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not variants or not seeds:
        raise ConfigError("ablate needs at least one variant and one seed")
    finals: dict[str, list[float]] = {v: [] for v in variants}
    for variant in variants:
        for seed in seeds:
            cell = _with_overrides(config, variant=variant, seed=seed)
            out = None
            if args.out is not None:
                out = os.path.join(args.out, f"{variant}_s{seed}")
            run = run_training(cell, out_dir=out,
                               parallel_eval=args.parallel_eval)
            final = run.records[-1]
            finals[variant].append(final.win_rate)
            print(json.dumps({
                "variant": variant, "seed": seed,
                "env_steps": final.env_step,
                "win_rate": final.win_rate,
                "mean_return": final.mean_return,
            }))
    print(json.dumps({
        "median_win_rate": {v: statistics.median(r)
                            for v, r in finals.items()},
    }))
    return 0


def _cmd_diag(args) -> int:
    print(json.dumps(dump_diagnostics(args.ckpt, args.out)))
    return 0


_COMMANDS = {"train": _cmd_train, "eval": _cmd_eval,
             "ablate": _cmd_ablate, "diag": _cmd_diag}


def main(argv=None) -> int:
    _configure_logging()
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
