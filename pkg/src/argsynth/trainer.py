"""Outer training loop: curriculum, episode generation, buffers, updates.

Each iteration picks one task from the unlocked curriculum, runs a batch of
search-driven episodes against a frozen parameter snapshot, then commits
buffer updates and a couple of gradient steps in one serialized phase. With
a fixed seed the whole run, including its metrics files, is reproducible
byte for byte (wall-clock timing is therefore off by default).
"""
from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import dataclass, field, replace as dc_replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import env as E
from . import programs as P
from .env import EnvState, TaskId, TASKS, env_to_record, sample_task_env
from .network import (
    AdamState,
    ParameterSet,
    dims_for_library,
    init_optimizer,
    init_params,
    train_step,
)
from .programs import ProgramLibrary, build_library, format_args
from .search import (
    Evaluator,
    EpisodeStep,
    NetworkEvaluator,
    NetworkGreedyPolicy,
    SearchConfig,
    SearchStats,
    execute_greedy,
    search_episode,
)

METRICS_COLUMNS = ("iteration", "task", "mode", "episodes", "successes",
                   "ema", "loss", "nodes_expanded_cum", "wall_ms")
SEARCH_COLUMNS = ("iteration", "task", "mode", "simulations",
                  "nodes_expanded", "max_depth")
ACCURACY_COLUMNS = ("program", "length", "accuracy")

# Learned programs a task may call, i.e. the ones whose mastery gates it.
_UNLOCK_DEPS = {
    TaskId.PARTITION_UPDATE: (),
    TaskId.PARTITION: (TaskId.PARTITION_UPDATE,),
    TaskId.QUICKSORT_UPDATE: (TaskId.PARTITION_UPDATE, TaskId.PARTITION),
    TaskId.QUICKSORT: (TaskId.PARTITION_UPDATE, TaskId.PARTITION,
                       TaskId.QUICKSORT_UPDATE),
}


@dataclass
class TrainConfig:
    seed: int = 0
    library_mode: str = P.MODE_ARGS
    search: SearchConfig = field(default_factory=SearchConfig)
    n_episodes: int = 20
    batch_size: int = 64
    grad_steps: int = 2
    learning_rate: float = 1e-4
    grad_clip: float = 1.0
    epsilon_failed: float = 0.2
    unlock_threshold: float = 0.9
    ema_decay: float = 0.95
    replay_capacity: int = 2000
    failed_capacity: int = 200
    train_length_min: int = 2
    train_length_max: int = 7
    eval_lengths: tuple[int, ...] = (5, 10, 20, 40, 60)
    eval_trials: int = 50
    wall_clock: bool = False
    # Off by default: only successful traces reach the value head. Turning
    # this on mixes failed episodes in as value-only targets, countering
    # the optimism an all-success replay diet breeds into V.
    value_from_failures: bool = False

    def validate(self) -> None:
        self.search.validate()
        if self.n_episodes < 1 or self.batch_size < 1 or self.grad_steps < 0:
            raise ValueError("episode/batch/grad-step counts must be positive")
        if not (2 <= self.train_length_min <= self.train_length_max):
            raise ValueError("training lengths must satisfy 2 <= min <= max")
        if not (0.0 <= self.epsilon_failed <= 1.0):
            raise ValueError("epsilon_failed must lie in [0, 1]")


@dataclass
class TraceRecord:
    """Execution trace of one episode; only reward-1 traces are replayed.

    `value_only` marks failed episodes admitted purely as value targets;
    their policy vectors are ignored by the loss.
    """

    task_index: int
    task_name: str
    e_initial: EnvState
    steps: list[EpisodeStep]
    e_final: EnvState
    reward: int
    value_only: bool = False


def replay_trace(record: TraceRecord, lib: ProgramLibrary) -> int:
    """Re-derive the reward by applying the stored actions to e_initial.

    Learned calls replay through the reference transform, which is exact
    because a successful sub-episode must have reached that very state.
    """
    task = TaskId(record.task_name)
    e = record.e_initial
    for step in record.steps:
        if step.action_name == "stop":
            return E.reward(task, record.e_initial, e)
        spec = lib.spec(step.action_name)
        if spec.is_atomic:
            e = P.apply_atomic(e, spec, step.action_args)
        else:
            e = E.oracle_transform(TaskId(spec.name), e)
    return 0


class ReplayBuffer:
    """FIFO of successful traces only."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: deque[TraceRecord] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def add(self, record: TraceRecord) -> None:
        if record.reward != 1:
            raise ValueError("replay buffer only stores reward-1 traces")
        self._items.append(record)

    def sample(self, k: int, rng: np.random.Generator) -> list[TraceRecord]:
        items = list(self._items)
        k = min(k, len(items))
        idx = rng.choice(len(items), size=k, replace=False)
        return [items[int(i)] for i in idx]

    def __iter__(self):
        return iter(self._items)


class FailedEnvBuffer:
    """Per-task FIFO of failing start states with failure counts.

    A state that fails again has its count bumped, which raises its
    resampling probability; a buffered state that finally succeeds is
    dropped.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._buf: dict[TaskId, deque] = {t: deque() for t in TASKS}

    def size(self, task: TaskId) -> int:
        return len(self._buf[task])

    def entries(self, task: TaskId) -> list[tuple[EnvState, int]]:
        return [(env, count) for env, count in self._buf[task]]

    def add_failure(self, task: TaskId, env: EnvState) -> None:
        buf = self._buf[task]
        for entry in buf:
            if entry[0] == env:
                entry[1] += 1
                return
        buf.append([env, 1])
        while len(buf) > self.capacity:
            buf.popleft()

    def remove(self, task: TaskId, env: EnvState) -> None:
        buf = self._buf[task]
        for entry in list(buf):
            if entry[0] == env:
                buf.remove(entry)
                return

    def sample(self, task: TaskId, rng: np.random.Generator) -> Optional[EnvState]:
        buf = self._buf[task]
        if not buf:
            return None
        counts = np.array([entry[1] for entry in buf], dtype=np.float64)
        probs = counts / counts.sum()
        idx = int(rng.choice(len(buf), p=probs))
        return buf[idx][0]

    def dump_lines(self) -> list[str]:
        lines = []
        for task in TASKS:
            for env, count in self._buf[task]:
                lines.append(f"{task.program_name}\t{count}\t{env_to_record(env)}")
        return lines


@dataclass
class TaskStat:
    ema: float = 0.0
    attempts: int = 0
    unlocked: bool = False


class TaskStats:
    """Per-task success tracking driving the curriculum."""

    def __init__(self, ema_decay: float, unlock_threshold: float):
        self.ema_decay = ema_decay
        self.unlock_threshold = unlock_threshold
        self.stats = {t: TaskStat(unlocked=(t is TaskId.PARTITION_UPDATE)) for t in TASKS}

    def record(self, task: TaskId, reward: int) -> None:
        st = self.stats[task]
        st.attempts += 1
        st.ema = self.ema_decay * st.ema + (1.0 - self.ema_decay) * reward

    def refresh_unlocks(self) -> None:
        # Unlocking is monotone: flags are only ever set.
        for task, deps in _UNLOCK_DEPS.items():
            if not self.stats[task].unlocked:
                if all(self.stats[d].ema >= self.unlock_threshold for d in deps):
                    self.stats[task].unlocked = True

    def unlocked_tasks(self) -> list[TaskId]:
        return [t for t in TASKS if self.stats[t].unlocked]

    def selection_weights(self) -> tuple[list[TaskId], np.ndarray]:
        tasks = self.unlocked_tasks()
        w = np.array([1.0 - self.stats[t].ema + 0.1 for t in tasks])
        return tasks, w / w.sum()


def curriculum_select(stats: TaskStats, rng: np.random.Generator) -> TaskId:
    """Pick among unlocked tasks, favouring the ones still failing."""
    tasks, probs = stats.selection_weights()
    if not tasks:
        raise RuntimeError("no unlocked task")
    return tasks[int(rng.choice(len(tasks), p=probs))]


def sample_initial_env(
    task: TaskId, failed: FailedEnvBuffer, cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[EnvState, bool]:
    """Fresh task-conditioned state, or an old failing one with
    probability epsilon; returns (state, came_from_buffer)."""
    if cfg.epsilon_failed > 0.0 and failed.size(task) > 0:
        if rng.random() < cfg.epsilon_failed:
            env = failed.sample(task, rng)
            if env is not None:
                return env, True
    n = int(rng.integers(cfg.train_length_min, cfg.train_length_max + 1))
    return sample_task_env(task, n, rng), False


def run_episode(
    task: TaskId, e_initial: EnvState, evaluator: Evaluator,
    lib: ProgramLibrary, search_cfg: SearchConfig, rng: np.random.Generator,
    cache: Optional[dict] = None,
) -> tuple[TraceRecord, SearchStats]:
    """One search-driven episode from a given start state."""
    stats = SearchStats()
    steps, r, e_final = search_episode(
        task, e_initial, evaluator, lib, search_cfg, stats, rng, cache=cache)
    record = TraceRecord(
        task_index=lib.task_index(task),
        task_name=task.program_name,
        e_initial=e_initial,
        steps=steps,
        e_final=e_final,
        reward=r,
    )
    return record, stats


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def csv_line(values: Iterable) -> str:
    return ",".join(_fmt(v) for v in values)


class Trainer:
    """Owns all mutable training state and emits one metrics row per
    iteration."""

    def __init__(self, cfg: TrainConfig, params: Optional[ParameterSet] = None):
        cfg.validate()
        self.cfg = cfg
        self.lib = build_library(cfg.library_mode)
        self.rng = np.random.Generator(np.random.PCG64(cfg.seed))
        if params is None:
            params = init_params(cfg.seed, dims_for_library(self.lib))
        self.params = params
        self.opt: AdamState = init_optimizer(params, lr=cfg.learning_rate,
                                             clip=cfg.grad_clip)
        self.replay = ReplayBuffer(cfg.replay_capacity)
        self.failed = FailedEnvBuffer(cfg.failed_capacity)
        self.value_traces: deque[TraceRecord] = deque(maxlen=max(1, cfg.replay_capacity // 4))
        self.task_stats = TaskStats(cfg.ema_decay, cfg.unlock_threshold)
        self.iteration = 0
        self.nodes_expanded_cum = 0
        self.metrics_rows: list[dict] = []
        self.search_rows: list[dict] = []

    @property
    def mode_label(self) -> str:
        return f"{self.cfg.library_mode}-{self.cfg.search.mode}"

    def run_iteration(self) -> dict:
        t0 = time.perf_counter() if self.cfg.wall_clock else 0.0
        self.task_stats.refresh_unlocks()
        task = curriculum_select(self.task_stats, self.rng)
        evaluator = NetworkEvaluator(self.params)
        iter_stats = SearchStats()
        episodes: list[tuple[TraceRecord, bool]] = []
        cache: dict = {}  # nested-search memo, valid while params are frozen
        for _ in range(self.cfg.n_episodes):
            e_init, from_buffer = sample_initial_env(
                task, self.failed, self.cfg, self.rng)
            record, stats = run_episode(
                task, e_init, evaluator, self.lib, self.cfg.search, self.rng,
                cache=cache)
            iter_stats.merge(stats)
            episodes.append((record, from_buffer))
        # Serialized commit phase: buffers, statistics, gradient updates.
        successes = 0
        for record, from_buffer in episodes:
            self.task_stats.record(task, record.reward)
            if record.reward == 1:
                successes += 1
                self.replay.add(record)
                if from_buffer:
                    self.failed.remove(task, record.e_initial)
            else:
                self.failed.add_failure(task, record.e_initial)
                if self.cfg.value_from_failures and record.steps:
                    self.value_traces.append(dc_replace(record, value_only=True))
        if len(self.replay) > 0:
            probe = self.replay.sample(1, self.rng)[0]
            if replay_trace(probe, self.lib) != probe.reward:
                raise RuntimeError(
                    f"stored trace for {probe.task_name} no longer replays "
                    f"to reward {probe.reward}")
        losses = []
        if len(self.replay) > 0:
            for _ in range(self.cfg.grad_steps):
                batch = self.replay.sample(self.cfg.batch_size, self.rng)
                if self.cfg.value_from_failures and self.value_traces:
                    pool = list(self.value_traces)
                    k = min(max(1, self.cfg.batch_size // 4), len(pool))
                    idx = self.rng.choice(len(pool), size=k, replace=False)
                    batch = batch + [pool[int(i)] for i in idx]
                losses.append(train_step(self.params, self.opt, batch))
        self.iteration += 1
        self.nodes_expanded_cum += iter_stats.nodes_expanded
        wall_ms = int(round((time.perf_counter() - t0) * 1000.0)) if self.cfg.wall_clock else 0
        row = {
            "iteration": self.iteration,
            "task": task.program_name,
            "mode": self.mode_label,
            "episodes": self.cfg.n_episodes,
            "successes": successes,
            "ema": self.task_stats.stats[task].ema,
            "loss": (sum(losses) / len(losses)) if losses else float("nan"),
            "nodes_expanded_cum": self.nodes_expanded_cum,
            "wall_ms": wall_ms,
        }
        self.metrics_rows.append(row)
        self.search_rows.append({
            "iteration": self.iteration,
            "task": task.program_name,
            "mode": self.cfg.search.mode,
            "simulations": iter_stats.simulations,
            "nodes_expanded": iter_stats.nodes_expanded,
            "max_depth": iter_stats.max_depth,
        })
        return row

    def run(self, iterations: int) -> list[dict]:
        return [self.run_iteration() for _ in range(iterations)]

    # -- file emission ------------------------------------------------------

    def metrics_csv(self) -> str:
        lines = [",".join(METRICS_COLUMNS)]
        lines += [csv_line(row[c] for c in METRICS_COLUMNS) for row in self.metrics_rows]
        return "\n".join(lines) + "\n"

    def search_csv(self) -> str:
        lines = [",".join(SEARCH_COLUMNS)]
        lines += [csv_line(row[c] for c in SEARCH_COLUMNS) for row in self.search_rows]
        return "\n".join(lines) + "\n"

    def dump_failed_envs(self) -> str:
        return "\n".join(self.failed.dump_lines()) + "\n"


# ---------------------------------------------------------------------------
# Evaluation harness


def evaluate_generalization(
    policy, lib: ProgramLibrary, seed: int,
    lengths: Sequence[int] = (5, 10, 20, 40, 60), trials: int = 50,
    tasks: Sequence[TaskId] = TASKS,
) -> list[dict]:
    """Greedy accuracy grid over tasks and list lengths, 50 fresh states
    per cell by default."""
    rng = np.random.Generator(np.random.PCG64(seed))
    rows = []
    for task in tasks:
        for length in lengths:
            wins = 0
            for _ in range(trials):
                env = sample_task_env(task, length, rng)
                r, _ = execute_greedy(env, task, policy, lib)
                wins += r
            rows.append({
                "program": task.program_name,
                "length": length,
                "accuracy": wins / trials,
            })
    return rows


def accuracy_csv(rows: Sequence[dict]) -> str:
    lines = [",".join(ACCURACY_COLUMNS)]
    lines += [csv_line(row[c] for c in ACCURACY_COLUMNS) for row in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Trace export


def trace_to_json(record: TraceRecord) -> str:
    """One JSON document per trace: task, states, actions, policies,
    reward."""
    doc = {
        "task": record.task_name,
        "e_initial": env_to_record(record.e_initial),
        "e_final": env_to_record(record.e_final),
        "reward": record.reward,
        "steps": [
            {
                "action": s.action_name,
                "args": format_args(s.action_args),
                "pi_p_mcts": [float(x) for x in s.pi_p_mcts],
                "pi_a_mcts": [float(x) for x in s.pi_a_mcts],
            }
            for s in record.steps
        ],
    }
    return json.dumps(doc, sort_keys=True)
