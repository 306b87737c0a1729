"""
╔══════════════════════════════════════════════════════════════════════════════╗
║                              DESKPLAN CLI                                    ║
║                                                                              ║
║  collect -> gen-vocab -> train -> eval-open -> run-closed -> report/render  ║
║  Exit codes: 0 success, 1 planner error, 2 usage error.                     ║
╚══════════════════════════════════════════════════════════════════════════════╝
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from core.errors import PlannerError
from .config import RunConfig, dump_config, load_config, write_config
from .heads import load_vocabulary, save_vocabulary
from .kinematics import VehicleParams
from .refine import LEARNED_MODES
from .render import render_svg, render_video
from .scenarios import bundled_suite, demo_suite
from .simloop import EpisodeLog, collect_demos, run_suite, suite_report
from .training import eval_open, load_demos, load_model, run_closed_job, train, vocabulary_from_demos

logger = logging.getLogger("deskplan")

MODES = (*LEARNED_MODES, "expert")
CONFIG_OPTIONAL = ("render",)          # reads an existing log only
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper()), format=LOG_FORMAT, stream=sys.stderr, force=True)


def _resolve_config(args: argparse.Namespace) -> Optional[RunConfig]:
    if args.config is None:
        return None
    config = load_config(args.config)
    config = config.with_overrides(seed=args.seed, mode=args.mode, sampler=args.sampler, workers=args.workers)
    logger.info("config hash %s, seed %d", config.config_hash(), config.seed)
    return config


# ══════════════════════════════════════════════════════════════════════════════
#  COMMANDS
# ══════════════════════════════════════════════════════════════════════════════

def cmd_collect(config: RunConfig, args: argparse.Namespace) -> int:
    scenarios = demo_suite(config.collect.per_family, config.collect.families)
    collect_demos(scenarios, config.paths.demos, config.expert, config.sim_params(), config.model.tokenizer,
                  config.config_hash(), config.seed)
    return 0


def cmd_gen_vocab(config: RunConfig, args: argparse.Namespace) -> int:
    vocab = vocabulary_from_demos(load_demos(config.paths.demos), config)
    save_vocabulary(vocab, config.paths.vocab)
    logger.info("wrote %d anchors to %s", len(vocab), config.paths.vocab)
    return 0


def cmd_train(config: RunConfig, args: argparse.Namespace) -> int:
    dataset = load_demos(config.paths.demos)
    vocab = load_vocabulary(config.paths.vocab)
    _, curve = train(config, dataset, vocab, config.paths.reports)
    if curve:
        logger.info("training loss %.4f -> %.4f", curve[0]["total"], curve[-1]["total"])
    return 0


def cmd_eval_open(config: RunConfig, args: argparse.Namespace) -> int:
    dataset = load_demos(config.paths.demos)
    expert = config.planner.mode == "expert"
    model = None if expert else load_model(config, args.checkpoint)
    eval_open(config, dataset, model, config.paths.reports, expert=expert)
    return 0


def cmd_run_closed(config: RunConfig, args: argparse.Namespace) -> int:
    if config.planner.mode != "expert":
        load_model(config, args.checkpoint)       # fail fast on a bad checkpoint
    if args.checkpoint:
        config = RunConfig.model_validate({**config.model_dump(),
                                           "paths": {**config.paths.model_dump(), "checkpoint": args.checkpoint}})
    payload = config.model_dump_json()
    jobs = [(scenario, payload) for scenario in bundled_suite()]
    results = run_suite(jobs, run_closed_job, config.workers)

    failures = 0
    logs = []
    for log, error in results:
        log.write(config.paths.episodes / f"{log.scenario_id}.jsonl")
        logs.append(log)
        if error is not None:
            failures += 1
            logger.error("episode %s failed: %s (partial log written)", log.scenario_id, error)
    rows = suite_report(logs, config.paths.reports, config.config_hash(), config.seed)
    overall = rows[-1]
    logger.info("mode %s: SR %.1f%%, DS-like %.2f over %d episodes", config.planner.mode,
                overall["success_rate"], overall["ds_like"], overall["episodes"])
    return 1 if failures else 0


def cmd_render(config: Optional[RunConfig], args: argparse.Namespace) -> int:
    vehicle = config.vehicle if config is not None else VehicleParams()
    log = EpisodeLog.read(args.log)
    out = Path(args.out) if args.out else Path(args.log).with_suffix(".svg")
    render_svg(log, out, args.step, vehicle)
    if args.video:
        render_video(log, args.video, vehicle)
    return 0


def cmd_report(config: RunConfig, args: argparse.Namespace) -> int:
    paths = sorted(Path(config.paths.episodes).glob("*.jsonl"))
    if not paths:
        raise PlannerError(f"no episode logs under {config.paths.episodes}")
    logs = [EpisodeLog.read(p) for p in paths]
    partial = [log.scenario_id for log in logs if log.partial]
    if partial:
        logger.warning("%d partial episode logs: %s", len(partial), ", ".join(partial))
    suite_report(logs, config.paths.reports, config.config_hash(), config.seed)
    return 0


COMMANDS = {
    "collect": cmd_collect,
    "gen-vocab": cmd_gen_vocab,
    "train": cmd_train,
    "eval-open": cmd_eval_open,
    "run-closed": cmd_run_closed,
    "render": cmd_render,
    "report": cmd_report,
}


# ══════════════════════════════════════════════════════════════════════════════
#  ENTRY POINT
# ══════════════════════════════════════════════════════════════════════════════

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deskplan", description="Desk-scale multi-branch driving planner")
    parser.add_argument("--default-config", nargs="?", const="-", metavar="PATH",
                        help="Write the default config as TOML (stdout when no path) and exit")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--sampler", choices=["ddpm", "ddim"])
    common.add_argument("--workers", type=int)

    sub = parser.add_subparsers(dest="command")
    for name in ("collect", "gen-vocab", "train", "report"):
        sub.add_parser(name, parents=[common])
    for name in ("eval-open", "run-closed"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--checkpoint", type=Path, help="Override paths.checkpoint")
    p = sub.add_parser("render", parents=[common])
    p.add_argument("log", type=Path, help="Episode log (JSONL)")
    p.add_argument("--out", type=Path, help="SVG path (default: next to the log)")
    p.add_argument("--step", type=int, help="Planning step to draw (default: middle planned step)")
    p.add_argument("--video", type=Path, help="Also write an mp4 animation")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _configure_logging(args.log_level)

    if args.default_config is not None:
        if args.default_config == "-":
            sys.stdout.write(dump_config(RunConfig.default()))
        else:
            write_config(RunConfig.default(), Path(args.default_config))
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    if args.config is None and args.command not in CONFIG_OPTIONAL:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"deskplan {args.command}: --config is required (see --default-config)\n")
        return 2

    try:
        config = _resolve_config(args)
        return COMMANDS[args.command](config, args)
    except PlannerError as e:
        logger.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
