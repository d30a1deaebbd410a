"""Defines the CLI tool and its logic"""

import logging
import sys
from argparse import ArgumentParser, Namespace, RawTextHelpFormatter, _SubParsersAction
from pathlib import Path
from typing import Any, Dict, List, Optional
import numpy as np
import pandas as pd
from colorama import Fore, Style, init as colorama_init
from tqdm.auto import tqdm

# ----
from relstack._checkpoint import table_save
from relstack._env import BlockWorld
from relstack._evaluate import EvalReport, classify_failure, evaluate, rollout, sweep
from relstack._goals import parse_task
from relstack._gradcheck import GradCheckResult, TOLERANCE, run_gradcheck
from relstack._logger import RelstackLogger
from relstack._parameters import RunConfig
from relstack._renn import attention_record, attention_save
from relstack._trace import EpisodeTrace, trace_records, trace_save, trace_table
from relstack._trainer import Trainer, load_policy, run_ablation
from relstack.consts import TIMESTAMP
from relstack.error import (
    ArchitectureMismatchError,
    CheckpointFormatError,
    ConfigMismatchError,
    GoalSamplingError,
    NoAttentionError,
    NonFiniteGradientError,
    NonFiniteValueError,
    SpawnRegionError,
    UnknownTaskError,
)
from relstack import __version__

_PBAR: Optional[tqdm] = None

# Errors reported as one line with exit status 1
EXPECTED_ERRORS = (
    ArchitectureMismatchError,
    CheckpointFormatError,
    ConfigMismatchError,
    GoalSamplingError,
    NoAttentionError,
    NonFiniteGradientError,
    NonFiniteValueError,
    SpawnRegionError,
    UnknownTaskError,
    FileNotFoundError,
    KeyError,
    ValueError,
)


def main(argv: Optional[List[str]] = None) -> int:
    """The main program (CLI)"""
    log = RelstackLogger()
    args = get_args(argv)
    colorama_init()

    # Initialize logging
    if args.verbose:
        log.log_to_console(logging.DEBUG, to_stdout=True)
        args.disable_progressbars = True
    else:
        log.log_to_console(logging.WARNING)

    try:
        return args.handler(args)
    except EXPECTED_ERRORS as ex:
        print(f"{Fore.RED}error:{Style.RESET_ALL} {type(ex).__name__}: {ex}", file=sys.stderr)
        return 1
    finally:
        _close_pbar()


# ---- train / ablation


def build_config(args: Namespace) -> RunConfig:
    """Preset, then config file, then explicit flags, then --set overrides"""
    config = RunConfig.preset(args.preset)
    if args.config is not None:
        config = RunConfig.load(args.config, config)
    flags = {
        "output_dir": args.output_dir,
        "workers": args.workers,
        "total_steps": args.total_steps,
        "architecture": args.architecture,
        "rounds": args.rounds,
        "curriculum": args.curriculum,
        "start_stage": args.start_stage,
        "seed": args.seed,
        "eval_interval": args.eval_interval,
        "eval_episodes": args.eval_episodes,
        "checkpoint_interval": args.checkpoint_interval,
    }
    config = config.replace(**{k: v for k, v in flags.items() if v is not None})
    if args.serial:
        config = config.replace(serial=True)
    if args.set:
        config = RunConfig.from_text("\n".join(args.set), config)
    config.validate()
    return config


def cmd_train(args: Namespace) -> int:
    global _PBAR
    config = build_config(args)
    if args.print_config:
        print(config.to_text(), end="")
        return 0
    trainer = Trainer(config, callback=None if args.disable_progressbars else train_pbar_callback)
    if args.resume:
        trainer.resume()
    if not args.disable_progressbars:
        _PBAR = tqdm(total=config.total_steps, initial=trainer.env_steps, desc="Training", unit="step")
    checkpoint = trainer.train()
    _close_pbar()
    print(f"Final checkpoint: {checkpoint.as_posix()}")
    print(f"Metrics: {trainer.metrics.path.as_posix()}")
    return 0


def cmd_ablation(args: Namespace) -> int:
    global _PBAR
    config = build_config(args)
    if not args.disable_progressbars:
        _PBAR = tqdm(desc="Ablation", unit="step")
    table = run_ablation(
        config,
        rounds=args.rounds_list,
        callback=None if args.disable_progressbars else train_pbar_callback,
    )
    _close_pbar()
    table_save(table, Path(config.output_dir) / "ablation.csv")
    print(table.to_string(index=False))
    return 0


def train_pbar_callback(env_steps: int, total_steps: int, row: Optional[Dict[str, Any]]) -> None:
    """Updates the training progress bar (if enabled)"""
    if _PBAR is None:
        return
    if env_steps < _PBAR.n:
        _PBAR.reset(total=total_steps)
    _PBAR.total = total_steps
    _PBAR.update(env_steps - _PBAR.n)
    if row is not None:
        _PBAR.set_postfix(task=row["task"], success=f"{row['eval_success_rate']:.2f}")


# ---- evaluation


def cmd_evaluate(args: Namespace) -> int:
    global _PBAR
    policy = load_policy(args.checkpoint, args.architecture, args.rounds)
    spec = parse_task(args.task)
    if not args.disable_progressbars:
        _PBAR = tqdm(total=args.episodes, desc=f"Evaluating {spec.label}", unit="episode")
    report = evaluate(
        policy,
        spec,
        episodes=args.episodes,
        mode=args.mode,
        seed=args.seed,
        callback=None if args.disable_progressbars else eval_pbar_callback,
        trace_dir=args.trace_dir,
    )
    _close_pbar()
    path = Path(args.output or f"./eval_{spec.label}_{TIMESTAMP}.json").resolve()
    path.parent.mkdir(parents=True, exist_ok=True)
    table = report.save(path, args.table)
    print_report(report)
    print(f"Report: {path.as_posix()}  Episodes: {table.as_posix()}")
    return 0


def cmd_sweep(args: Namespace) -> int:
    global _PBAR
    policy = load_policy(args.checkpoint, args.architecture, args.rounds)
    if not args.disable_progressbars:
        _PBAR = tqdm(desc="Zero-shot sweep", unit="task")
    table = sweep(
        policy,
        episodes=args.episodes,
        mode=args.mode,
        seed=args.seed,
        callback=None if args.disable_progressbars else sweep_pbar_callback,
    )
    _close_pbar()
    path = Path(args.output or f"./sweep_{TIMESTAMP}.csv").resolve()
    path.parent.mkdir(parents=True, exist_ok=True)
    table_save(table, path)
    print(table.to_string(index=False))
    return 0


def eval_pbar_callback(done: int, total: int, success: bool) -> None:
    if _PBAR is None:
        return
    _PBAR.total = total
    _PBAR.update(1)


def sweep_pbar_callback(label: str, report: EvalReport) -> None:
    if _PBAR is None:
        return
    _PBAR.update(1)
    _PBAR.set_postfix(task=label, success=f"{report.success_rate:.2f}")


def print_report(report: EvalReport) -> None:
    rate = report.success_rate
    color = Fore.GREEN if rate >= 0.5 else Fore.YELLOW if rate > 0 else Fore.RED
    print(
        f"{report.task} ({report.mode}): {color}{report.successes}/{report.n_episodes} "
        f"({rate:.1%}){Style.RESET_ALL}  mean blocks at goal {report.mean_blocks_at_goal:.2f}"
    )
    for tag, count in report.failure_counts().items():
        if count:
            print(f"  {tag}: {count}")


# ---- inspection


def cmd_export_attention(args: Namespace) -> int:
    """Rolls out one episode and writes the attention of every round at every step"""
    policy = load_policy(args.checkpoint)
    if getattr(policy.actor, "architecture", "") != "renn":
        raise NoAttentionError(f"Checkpoint holds a '{policy.actor.architecture}' network without attention")
    spec = parse_task(args.task)
    rng = np.random.default_rng(args.seed)
    env = BlockWorld()
    records: List[Dict[str, Any]] = []

    def capture(step: int, observation) -> None:
        rounds = policy.attention(observation)
        if not rounds:
            raise NoAttentionError("Checkpoint network has no attention to export")
        records.append(attention_record(args.seed, step, rounds))

    result = rollout(policy, spec.sample(rng, env.params), rng, args.mode, env, record_trace=True, on_step=capture)
    path = Path(args.output or f"./attention_{spec.label}_{args.seed}.jsonl").resolve()
    path.parent.mkdir(parents=True, exist_ok=True)
    attention_save(records, path)
    if args.trace is not None:
        trace_save(result.records, args.trace)
    print(f"{len(records)} steps of {records[0]['n']}x{records[0]['n']} attention -> {path.as_posix()}")
    return 0


def cmd_replay_trace(args: Namespace) -> int:
    records = trace_records(args.trace)
    if not records:
        raise ValueError(f"{args.trace} holds no steps")
    table = trace_table(records)
    trace = EpisodeTrace.from_records(records)
    if args.output is not None:
        table_save(table, args.output)
    with pd.option_context("display.max_rows", args.max_rows, "display.width", 120):
        print(table.to_string(index=False, max_rows=args.max_rows))
    if trace.success:
        print(f"{Fore.GREEN}success{Style.RESET_ALL} after {trace.length} steps")
    else:
        print(f"{Fore.RED}failure{Style.RESET_ALL}: {classify_failure(trace, args.window, args.displacement)}")
    return 0


def cmd_gradcheck(args: Namespace) -> int:
    def report(result: GradCheckResult) -> None:
        mark = f"{Fore.GREEN}ok  " if result.passed else f"{Fore.RED}FAIL"
        print(f"{mark}{Style.RESET_ALL} {result.name:<24} max rel {result.max_rel_error:.3e} ({result.checked})")

    table = run_gradcheck(args.seed, include_networks=not args.primitives_only, per_tensor=args.per_tensor, callback=report)
    if args.output is not None:
        table_save(table, args.output)
    failed = int((~table["passed"]).sum())
    worst = table.loc[table["max_rel_error"].idxmax()]
    print(f"worst: {worst['name']} {worst['max_rel_error']:.3e} (tolerance {TOLERANCE:g})")
    if failed:
        print(f"{Fore.RED}{failed} check(s) failed{Style.RESET_ALL}")
        return 1
    return 0


def _close_pbar() -> None:
    global _PBAR
    if _PBAR is not None:
        _PBAR.close()
        _PBAR = None


# ---- arguments


def _add_config_args(parser: ArgumentParser) -> None:
    g_config = parser.add_argument_group("Configuration")
    g_run = parser.add_argument_group("Run control")
    g_config.add_argument(
        "--preset",
        choices=["paper", "desk"],
        default="desk",
        help="Base settings: 'paper' full-scale values (35 workers), 'desk' a desktop budget. Default: desk",
    )
    g_config.add_argument("-c", "--config", type=str, default=None, help="key = value file applied over the preset")
    g_config.add_argument(
        "--set",
        type=str,
        nargs="+",
        default=None,
        metavar="KEY=VALUE",
        help="Override any config field, e.g. --set learning_rate=1e-3 batch_size=128",
    )
    g_config.add_argument("--architecture", choices=["renn", "mlp"], default=None)
    g_config.add_argument("--rounds", type=int, default=None, help="Message-passing rounds")
    g_config.add_argument("--curriculum", choices=["direct", "uniform", "sequential"], default=None)
    g_config.add_argument("--start-stage", type=int, default=None, help="Initial sequential curriculum stage")
    g_run.add_argument("-o", "--output-dir", type=str, default=None, help="Run directory")
    g_run.add_argument("-w", "--workers", type=int, default=None)
    g_run.add_argument("--total-steps", type=int, default=None)
    g_run.add_argument("--eval-interval", type=int, default=None, help="Training episodes between evaluations")
    g_run.add_argument("--eval-episodes", type=int, default=None)
    g_run.add_argument("--checkpoint-interval", type=int, default=None, help="Environment steps between checkpoints")
    g_run.add_argument("--seed", type=int, default=None, help="Root seed of every random stream")
    g_run.add_argument("--serial", action="store_true", help="One thread, bit-exact reruns")


def _add_policy_args(parser: ArgumentParser) -> None:
    parser.add_argument("checkpoint", type=str, help="Checkpoint, checkpoint root or run directory")
    parser.add_argument("--architecture", choices=["renn", "mlp"], default=None, help="Refuse other architectures")
    parser.add_argument("--rounds", type=int, default=None, help="Refuse other round counts")
    parser.add_argument("--episodes", type=int, default=100)
    parser.add_argument("--mode", choices=["stochastic", "deterministic"], default="stochastic")
    parser.add_argument("--seed", type=int, default=0)


def _add_debug_args(parser: ArgumentParser) -> None:
    g_debug = parser.add_argument_group("Debugging")
    g_debug.add_argument("-v", "--verbose", action="store_true", help="Log debug messages to stdout")
    g_debug.add_argument("-P", "--disable-progressbars", action="store_true", help="No progress bars")


def get_args(argv: Optional[List[str]] = None) -> Namespace:
    """Uses argparse module to retrieve argv arguments"""
    parser = ArgumentParser(
        prog="relstack",
        description="Relational block-stacking agent.\n"
        "Trains a soft actor-critic policy with a graph-attention network,\n"
        "hindsight replay and a stacking curriculum; evaluates and inspects checkpoints.",
        formatter_class=RawTextHelpFormatter,
    )
    parser.add_argument("-V", "--version", action="version", version=f"%(prog)s {__version__}\n")
    sub: _SubParsersAction = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train an agent", formatter_class=RawTextHelpFormatter)
    _add_config_args(p)
    p.add_argument("--resume", action="store_true", help="Continue from the run directory's latest checkpoint")
    p.add_argument("--print-config", action="store_true", help="Print the resolved config and exit")
    _add_debug_args(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("ablation", help="Train once per message-round count", formatter_class=RawTextHelpFormatter)
    _add_config_args(p)
    p.add_argument("--rounds-list", type=int, nargs="+", default=[1, 3], help="Round counts. Default: 1 3")
    _add_debug_args(p)
    p.set_defaults(handler=cmd_ablation)

    p = sub.add_parser("evaluate", help="Success rate of a checkpoint on one task")
    _add_policy_args(p)
    p.add_argument("-t", "--task", type=str, default="single-tower-6", help="e.g. single-tower-6, multi-towers-6-2, pyramid-6")
    p.add_argument("--output", type=str, default=None, help="JSON summary path")
    p.add_argument("--table", type=str, default=None, help="Per-episode table (.csv|.parquet|.feather|.pkl|.xlsx)")
    p.add_argument("--trace-dir", type=str, default=None, help="Write one step trace per episode")
    _add_debug_args(p)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("sweep", help="Zero-shot evaluation across the task grid")
    _add_policy_args(p)
    p.add_argument("--output", type=str, default=None, help="Table path")
    _add_debug_args(p)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("export-attention", help="Attention matrices of one episode")
    p.add_argument("checkpoint", type=str)
    p.add_argument("-t", "--task", type=str, default="single-tower-6")
    p.add_argument("--seed", type=int, default=0, help="Episode seed")
    p.add_argument("--mode", choices=["stochastic", "deterministic"], default="deterministic")
    p.add_argument("--output", type=str, default=None, help="JSON lines output")
    p.add_argument("--trace", type=str, default=None, help="Also write the episode's step trace")
    _add_debug_args(p)
    p.set_defaults(handler=cmd_export_attention)

    p = sub.add_parser("replay-trace", help="Inspect a step trace")
    p.add_argument("trace", type=str)
    p.add_argument("--output", type=str, default=None, help="Save the per-step table")
    p.add_argument("--max-rows", type=int, default=60)
    p.add_argument("--window", type=int, default=50, help="Oscillation window in steps")
    p.add_argument("--displacement", type=float, default=0.05, help="Oscillation displacement bound")
    _add_debug_args(p)
    p.set_defaults(handler=cmd_replay_trace)

    p = sub.add_parser("gradcheck", help="Finite-difference check of every primitive and network")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--primitives-only", action="store_true")
    p.add_argument(
        "--per-tensor", type=int, default=None, help="Check a random sample of this many elements per tensor. Default: all"
    )
    p.add_argument("--output", type=str, default=None, help="Save the report table")
    _add_debug_args(p)
    p.set_defaults(handler=cmd_gradcheck)

    return parser.parse_args(argv)
