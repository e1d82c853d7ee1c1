"""Hand-written reference behaviours for every learned program.

A script is the exact call sequence (including nested learned calls and the
final stop) that drives a task from a given entry state to its reference
outcome using only feasible library calls. Scripts double as the oracle
policy test double for the evaluation harness and as the decisive check
that the push/pop/registry semantics actually sort.
"""
from __future__ import annotations

from . import env as E
from . import programs as P
from .env import NONE, P1, P2, P3, EnvState, TaskId
from .programs import EMPTY_ARGS, ArgTuple, ProgramLibrary


class ExpertUnavailable(RuntimeError):
    """No script exists for this task in this library mode."""


def _swap13(mode: str) -> tuple[str, ArgTuple]:
    if mode == P.MODE_ARGS:
        return ("swap", (P1, P3, NONE))
    return ("swap_pivot", EMPTY_ARGS)


def _swap12(mode: str) -> tuple[str, ArgTuple]:
    if mode == P.MODE_ARGS:
        return ("swap", (P1, P2, NONE))
    return ("swap", EMPTY_ARGS)


def _script_partition_update(env: EnvState, mode: str) -> list[tuple[str, ArgTuple]]:
    acts: list[tuple[str, ArgTuple]] = []
    if env.values[env.p3] < env.values[env.p2]:
        if env.p1 != env.p3:
            acts.append(_swap13(mode))
        if mode == P.MODE_ARGS:
            acts.append(("ptr_right", (P1, P3, NONE)))
        else:
            acts.append(("ptr_1_right", EMPTY_ARGS))
            acts.append(("ptr_3_right", EMPTY_ARGS))
    else:
        if mode == P.MODE_ARGS:
            acts.append(("ptr_right", (P3, NONE, NONE)))
        else:
            acts.append(("ptr_3_right", EMPTY_ARGS))
    acts.append(("stop", EMPTY_ARGS))
    return acts


def _script_partition(env: EnvState, mode: str) -> list[tuple[str, ArgTuple]]:
    acts: list[tuple[str, ArgTuple]] = []
    e = env
    while e.p3 < e.p2:
        acts.append(("partition_update", EMPTY_ARGS))
        e = E.oracle_transform(TaskId.PARTITION_UPDATE, e)
    if e.p1 != e.p2:
        acts.append(_swap12(mode))
    acts.append(("stop", EMPTY_ARGS))
    return acts


def _script_quicksort_update(env: EnvState, mode: str) -> list[tuple[str, ArgTuple]]:
    if mode != P.MODE_ARGS:
        raise ExpertUnavailable(
            "quicksort_update needs to load the registry into pointer 3; "
            "the no-argument atomic set can only load into pointer 1"
        )
    acts: list[tuple[str, ArgTuple]] = [
        ("pop", EMPTY_ARGS),
        ("save_ptr", (P1, NONE, NONE)),
        ("partition", EMPTY_ARGS),
        ("load_ptr", (P3, NONE, NONE)),
    ]
    e = E.apply_atomic(env, "pop", ())
    e = E.apply_atomic(e, "save_ptr", (P1,))
    e = E.oracle_transform(TaskId.PARTITION, e)
    e = E.apply_atomic(e, "load_ptr", (P3,))
    if E.atomic_feasible(e, "push", ()):
        acts.append(("push", EMPTY_ARGS))
    acts.append(("stop", EMPTY_ARGS))
    return acts


def _script_quicksort(env: EnvState, mode: str) -> list[tuple[str, ArgTuple]]:
    if mode != P.MODE_ARGS:
        raise ExpertUnavailable("quicksort relies on quicksort_update; see its script")
    acts: list[tuple[str, ArgTuple]] = [
        ("save_ptr", (P1, NONE, NONE)),
        ("partition", EMPTY_ARGS),
        ("load_ptr", (P3, NONE, NONE)),
    ]
    e = E.apply_atomic(env, "save_ptr", (P1,))
    e = E.oracle_transform(TaskId.PARTITION, e)
    e = E.apply_atomic(e, "load_ptr", (P3,))
    if E.atomic_feasible(e, "push", ()):
        acts.append(("push", EMPTY_ARGS))
        e = E.apply_atomic(e, "push", ())
    while e.stack:
        acts.append(("quicksort_update", EMPTY_ARGS))
        e = E.oracle_transform(TaskId.QUICKSORT_UPDATE, e)
    acts.append(("stop", EMPTY_ARGS))
    return acts


_SCRIPTS = {
    TaskId.PARTITION_UPDATE: _script_partition_update,
    TaskId.PARTITION: _script_partition,
    TaskId.QUICKSORT_UPDATE: _script_quicksort_update,
    TaskId.QUICKSORT: _script_quicksort,
}


def expert_script(task: TaskId, env: EnvState, mode: str = P.MODE_ARGS) -> list[tuple[str, ArgTuple]]:
    """Full call sequence for `task` from `env`, ending in stop.

    Nested learned calls appear as single entries; their own scripts are
    generated when the executor recurses into them.
    """
    if not E.task_precondition(task, env):
        raise E.EnvError(f"state violates entry condition of {task.program_name}")
    return _SCRIPTS[task](env, mode)


def expert_available(task: TaskId, mode: str) -> bool:
    if mode == P.MODE_ARGS:
        return True
    return task in (TaskId.PARTITION_UPDATE, TaskId.PARTITION)


class ExpertPolicy:
    """Scripted policy usable wherever a greedy policy is expected.

    Keeps a stack of in-flight scripts so recursive execution of nested
    learned calls resumes the caller's script afterwards.
    """

    def __init__(self, lib: ProgramLibrary):
        self.lib = lib
        self._frames: list[list[tuple[str, ArgTuple]]] = []

    def begin(self, task: TaskId, env: EnvState) -> None:
        self._frames.append(expert_script(task, env, self.lib.mode))

    def step(self, env: EnvState) -> tuple[P.ProgramSpec, ArgTuple]:
        name, args = self._frames[-1].pop(0)
        return self.lib.spec(name), args

    def end(self) -> None:
        frame = self._frames.pop()
        if frame:
            raise RuntimeError(f"expert script ended with {len(frame)} actions left")
