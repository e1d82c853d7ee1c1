"""Command-line surface: train, eval, run, oracle-check, search-bench.

Exit codes are stable: 0 on success, 1 for runtime failures (missing or
incompatible files, a failing oracle check), 2 for usage or config errors.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import env as E
from . import programs as P
from .config import ConfigError, RunConfig, load_config
from .env import TaskId, TASKS, env_to_record, make_env, sample_task_env
from .expert import ExpertPolicy, expert_available
from .network import (
    CheckpointError,
    checkpoint_load,
    checkpoint_save,
    dims_for_library,
    init_params,
)
from .programs import build_library, format_args
from .search import (
    MODE_APPROX,
    MODE_EXACT,
    NetworkEvaluator,
    NetworkGreedyPolicy,
    SearchConfig,
    SearchStats,
    execute_greedy,
    search_episode,
)
from .trainer import Trainer, accuracy_csv, csv_line, evaluate_generalization

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _load(args) -> RunConfig:
    return load_config(getattr(args, "config", None))


def _entry_env(task: TaskId, values: list[int]) -> E.EnvState:
    """Canonical start state for running a named program on a list."""
    n = len(values)
    if task is TaskId.QUICKSORT:
        return make_env(values, 0, n - 1, 0)
    if task is TaskId.QUICKSORT_UPDATE:
        return make_env(values, 0, n - 1, 0, stack=[(0, n - 1)])
    # partition / partition_update start with the full range and a saved lo.
    return make_env(values, 0, n - 1, 0, registry=0)


def cmd_train(args) -> int:
    cfg = _load(args)
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = args.output_dir or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    trainer = Trainer(cfg.to_train_config())
    for i in range(cfg.iterations):
        row = trainer.run_iteration()
        print(csv_line(row[c] for c in
                       ("iteration", "task", "successes", "ema", "loss",
                        "nodes_expanded_cum")))
    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        fh.write(trainer.metrics_csv())
    with open(os.path.join(out_dir, "search_stats.csv"), "w") as fh:
        fh.write(trainer.search_csv())
    with open(os.path.join(out_dir, "failed_envs.txt"), "w") as fh:
        fh.write(trainer.dump_failed_envs())
    ckpt = os.path.join(out_dir, cfg.checkpoint)
    checkpoint_save(trainer.params, trainer.opt, trainer.lib.manifest(), ckpt)
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def _load_checkpoint(path: str, lib) -> "tuple":
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    return checkpoint_load(path, expected_manifest=lib.manifest())


def cmd_eval(args) -> int:
    cfg = _load(args)
    lib = build_library(cfg.library)
    params, _, _ = _load_checkpoint(args.checkpoint, lib)
    policy = NetworkGreedyPolicy(params, lib)
    rows = evaluate_generalization(
        policy, lib, seed=cfg.seed, lengths=cfg.eval_lengths,
        trials=cfg.eval_trials)
    text = accuracy_csv(rows)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"accuracy table written to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load(args)
    lib = build_library(cfg.library)
    try:
        values = [int(part) for part in args.list.split(",")]
    except ValueError:
        raise ConfigError(f"invalid list literal {args.list!r}")
    try:
        task = TaskId(args.program)
    except ValueError:
        raise ConfigError(
            f"unknown program {args.program!r} "
            f"(choose from {', '.join(t.program_name for t in TASKS)})")
    params, _, _ = _load_checkpoint(args.checkpoint, lib)
    env = _entry_env(task, values)
    policy = NetworkGreedyPolicy(params, lib)
    trace: list = []
    print(f"{task.program_name}()  on  {env_to_record(env)}")
    r, final = execute_greedy(env, task, policy, lib, trace=trace)
    for entry in trace:
        print("  " * (entry.depth + 1) + entry.name + format_args(entry.args))
    print(f"final: {env_to_record(final)}")
    print(f"reward: {r}")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    cfg = _load(args)
    lib = build_library(cfg.library)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    lengths = list(range(2, 8)) + [20]
    all_ok = True
    for task in TASKS:
        if not expert_available(task, lib.mode):
            print(f"{task.program_name}: SKIP (no reference script in "
                  f"{lib.mode} mode)")
            continue
        failures = 0
        for i in range(args.trials):
            n = lengths[i % len(lengths)]
            env = sample_task_env(task, n, rng)
            policy = ExpertPolicy(lib)
            r, _ = execute_greedy(env, task, policy, lib)
            failures += 1 - r
        status = "PASS" if failures == 0 else f"FAIL ({failures}/{args.trials})"
        print(f"{task.program_name}: {status}")
        all_ok = all_ok and failures == 0
    return EXIT_OK if all_ok else EXIT_FAILURE


def cmd_search_bench(args) -> int:
    cfg = _load(args)
    lib = build_library(cfg.library)
    try:
        task = TaskId(args.task)
    except ValueError:
        raise ConfigError(f"unknown task {args.task!r}")
    params = init_params(cfg.seed, dims_for_library(lib))
    evaluator = NetworkEvaluator(params)
    lines = ["seed,task,simulations,n_expand,nodes_exact,nodes_approx"]
    for seed in range(args.seeds):
        counts = {}
        for mode in (MODE_EXACT, MODE_APPROX):
            rng = np.random.Generator(np.random.PCG64(seed))
            env = sample_task_env(task, args.length, rng)
            scfg = SearchConfig(
                mode=mode, n_expand=args.n, simulations=args.sims,
                nested_simulations=cfg.nested_simulations, training=False,
                temperature=0.0)
            stats = SearchStats()
            search_episode(task, env, evaluator, lib, scfg, stats, rng)
            counts[mode] = stats.nodes_expanded
        lines.append(f"{seed},{task.program_name},{args.sims},{args.n},"
                     f"{counts[MODE_EXACT]},{counts[MODE_APPROX]}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"benchmark written to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="argsynth",
        description="Learn argument-accepting list programs from reward "
                    "alone with recursive (approximate) MCTS.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run training iterations; writes "
                             "metrics CSVs and a checkpoint")
    p_train.add_argument("--config", help="path to a `key = value` config file")
    p_train.add_argument("--iterations", type=int, help="override iteration count")
    p_train.add_argument("--seed", type=int, help="override the run seed")
    p_train.add_argument("--output-dir", help="directory for emitted files")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="accuracy grid over tasks and lengths")
    p_eval.add_argument("--config")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--out", help="write the accuracy CSV here instead of stdout")
    p_eval.set_defaults(func=cmd_eval)

    p_run = sub.add_parser("run", help="execute a learned program on a list "
                           "and print its call trace")
    p_run.add_argument("--config")
    p_run.add_argument("--program", required=True)
    p_run.add_argument("--list", required=True, help="comma-separated integers")
    p_run.add_argument("--checkpoint", required=True)
    p_run.set_defaults(func=cmd_run)

    p_oracle = sub.add_parser("oracle-check", help="verify the built-in "
                              "reference scripts solve every task")
    p_oracle.add_argument("--config")
    p_oracle.add_argument("--trials", type=int, default=200)
    p_oracle.set_defaults(func=cmd_oracle_check)

    p_bench = sub.add_parser("search-bench", help="matched-seed exact vs "
                             "approximate node-count comparison")
    p_bench.add_argument("--config")
    p_bench.add_argument("--task", default=TaskId.PARTITION_UPDATE.program_name)
    p_bench.add_argument("--sims", type=int, default=100)
    p_bench.add_argument("--n", type=int, default=5)
    p_bench.add_argument("--length", type=int, default=5)
    p_bench.add_argument("--seeds", type=int, default=20)
    p_bench.add_argument("--out")
    p_bench.set_defaults(func=cmd_search_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, P.LibraryError, E.EnvError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
