"""Program library: specifications, levels, argument codec, feasibility.

Two library modes exist. In ARGS mode the atomic actions take argument
tuples naming pointers; in NO_ARGS mode every pointer choice is baked into
a separate atomic action (the cartesian-product baseline) and all programs
take the empty tuple. Learned programs take the empty tuple in both modes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional

from . import env as E
from .env import NONE, P1, P2, P3, EnvState, TaskId

ArgTuple = tuple[int, int, int]

EMPTY_ARGS: ArgTuple = (NONE, NONE, NONE)

ARG_SPACE = 64  # 4 ** 3 argument-tuple indices

MODE_ARGS = "args"
MODE_NO_ARGS = "noargs"

MANIFEST_VERSION = 1


class LibraryError(ValueError):
    """Raised for unknown programs, bad modes, or manifest mismatches."""


def args_encode(args: ArgTuple) -> int:
    """Bijection onto [0, 64): base-4 digits with NONE=0, P1=1, P2=2, P3=3."""
    s1, s2, s3 = args
    for s in args:
        if not (0 <= s <= 3):
            raise LibraryError(f"bad argument slot {s}")
    return 16 * s1 + 4 * s2 + s3


def args_decode(index: int) -> ArgTuple:
    """Inverse of args_encode."""
    if not (0 <= index < ARG_SPACE):
        raise LibraryError(f"argument index {index} outside [0, {ARG_SPACE})")
    return (index // 16, (index // 4) % 4, index % 4)


def format_args(args: ArgTuple) -> str:
    """Human form, e.g. `(P1,P3)`; the empty tuple renders as `()`."""
    live = [E.SLOT_NAMES[s] for s in args if s != NONE]
    return "(" + ",".join(live) + ")"


def _slots_to_args(slots: tuple[int, ...]) -> ArgTuple:
    padded = tuple(slots) + (NONE,) * (3 - len(slots))
    return padded  # type: ignore[return-value]


def _args_to_slots(args: ArgTuple) -> tuple[int, ...]:
    return tuple(s for s in args if s != NONE)


@dataclass(frozen=True)
class ProgramSpec:
    """One callable unit: an atomic action or a learned program.

    `op` is the canonical environment operation behind an atomic;
    `fixed_slots` carries the baked-in pointer choice of the NO_ARGS
    variants (None means the slots come from the argument tuple).
    """

    name: str
    level: int
    arity: int
    kind: str  # "atomic" | "learned"
    op: Optional[str] = None
    fixed_slots: Optional[tuple[int, ...]] = None

    @property
    def is_atomic(self) -> bool:
        return self.kind == "atomic"


_LEARNED = (
    ProgramSpec("partition_update", 1, 0, "learned"),
    ProgramSpec("partition", 2, 0, "learned"),
    ProgramSpec("quicksort_update", 4, 0, "learned"),
    ProgramSpec("quicksort", 5, 0, "learned"),
)

_ATOMICS_ARGS = (
    ProgramSpec("stop", 0, 0, "atomic", op="stop"),
    ProgramSpec("save_ptr", 0, 1, "atomic", op="save_ptr"),
    ProgramSpec("load_ptr", 0, 1, "atomic", op="load_ptr"),
    ProgramSpec("push", 0, 0, "atomic", op="push"),
    ProgramSpec("pop", 0, 0, "atomic", op="pop"),
    ProgramSpec("swap", 0, 2, "atomic", op="swap"),
    ProgramSpec("ptr_left", 0, 3, "atomic", op="ptr_left"),
    ProgramSpec("ptr_right", 0, 3, "atomic", op="ptr_right"),
)

_ATOMICS_NO_ARGS = (
    ProgramSpec("stop", 0, 0, "atomic", op="stop", fixed_slots=()),
    ProgramSpec("save_ptr_1", 0, 0, "atomic", op="save_ptr", fixed_slots=(P1,)),
    ProgramSpec("load_ptr_1", 0, 0, "atomic", op="load_ptr", fixed_slots=(P1,)),
    ProgramSpec("push", 0, 0, "atomic", op="push", fixed_slots=()),
    ProgramSpec("pop", 0, 0, "atomic", op="pop", fixed_slots=()),
    ProgramSpec("swap", 0, 0, "atomic", op="swap", fixed_slots=(P1, P2)),
    ProgramSpec("swap_pivot", 0, 0, "atomic", op="swap", fixed_slots=(P1, P3)),
    ProgramSpec("ptr_1_left", 0, 0, "atomic", op="ptr_left", fixed_slots=(P1,)),
    ProgramSpec("ptr_2_left", 0, 0, "atomic", op="ptr_left", fixed_slots=(P2,)),
    ProgramSpec("ptr_3_left", 0, 0, "atomic", op="ptr_left", fixed_slots=(P3,)),
    ProgramSpec("ptr_1_right", 0, 0, "atomic", op="ptr_right", fixed_slots=(P1,)),
    ProgramSpec("ptr_2_right", 0, 0, "atomic", op="ptr_right", fixed_slots=(P2,)),
    ProgramSpec("ptr_3_right", 0, 0, "atomic", op="ptr_right", fixed_slots=(P3,)),
)


class ProgramLibrary:
    """Ordered, immutable program collection for one mode.

    The ordering is part of the contract: policy-head dimensions and
    checkpoint manifests depend on it.
    """

    def __init__(self, mode: str):
        if mode == MODE_ARGS:
            atomics = _ATOMICS_ARGS
        elif mode == MODE_NO_ARGS:
            atomics = _ATOMICS_NO_ARGS
        else:
            raise LibraryError(f"unknown library mode {mode!r}")
        self.mode = mode
        self.programs: tuple[ProgramSpec, ...] = atomics + _LEARNED
        self._index = {p.name: i for i, p in enumerate(self.programs)}
        self.learned: tuple[ProgramSpec, ...] = _LEARNED
        self._task_index = {p.name: i for i, p in enumerate(_LEARNED)}

    def __len__(self) -> int:
        return len(self.programs)

    def __iter__(self):
        return iter(self.programs)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise LibraryError(f"unknown program {name!r}") from None

    def spec(self, name: str) -> ProgramSpec:
        return self.programs[self.index(name)]

    def task_index(self, task: TaskId | str) -> int:
        """Row of the program-embedding matrix for a learned program."""
        name = task.program_name if isinstance(task, TaskId) else task
        try:
            return self._task_index[name]
        except KeyError:
            raise LibraryError(f"not a learned program: {name!r}") from None

    def task_of(self, spec: ProgramSpec) -> TaskId:
        return TaskId(spec.name)

    def manifest(self) -> dict:
        """Versioned JSON-ready description embedded in checkpoints."""
        return {
            "version": MANIFEST_VERSION,
            "mode": self.mode,
            "programs": [
                {"name": p.name, "level": p.level, "arity": p.arity, "kind": p.kind, "index": i}
                for i, p in enumerate(self.programs)
            ],
        }

    def manifest_json(self) -> str:
        return json.dumps(self.manifest(), sort_keys=True)


def build_library(mode: str) -> ProgramLibrary:
    return ProgramLibrary(mode)


def valid_arg_tuples(spec: ProgramSpec) -> tuple[ArgTuple, ...]:
    """Static argument domain of a program, sorted by encoded index."""
    if spec.fixed_slots is not None or not spec.is_atomic:
        return (EMPTY_ARGS,)
    tuples = [_slots_to_args(s) for s in E.ATOMIC_SLOT_SETS[spec.op]]
    return tuple(sorted(tuples, key=args_encode))


def _resolve_slots(spec: ProgramSpec, args: ArgTuple) -> tuple[int, ...]:
    if spec.fixed_slots is not None:
        return spec.fixed_slots
    return _args_to_slots(args)


def atomic_feasible(environment: EnvState, spec: ProgramSpec, args: ArgTuple) -> bool:
    """True iff the argument tuple is statically valid for the action and
    the environment precondition holds."""
    if not spec.is_atomic:
        raise LibraryError(f"{spec.name} is not atomic")
    if args not in valid_arg_tuples(spec):
        return False
    return E.atomic_feasible(environment, spec.op, _resolve_slots(spec, args))


def apply_atomic(environment: EnvState, spec: ProgramSpec, args: ArgTuple) -> EnvState:
    """Apply a feasible atomic program call; stop is the identity."""
    if not spec.is_atomic:
        raise LibraryError(f"{spec.name} is not atomic")
    if args not in valid_arg_tuples(spec):
        raise E.EnvError(f"invalid argument tuple {args} for {spec.name}")
    return E.apply_atomic(environment, spec.op, _resolve_slots(spec, args))


def program_precondition(spec: ProgramSpec, environment: EnvState) -> bool:
    """Entry condition of a learned program."""
    if spec.is_atomic:
        raise LibraryError(f"{spec.name} is atomic; use atomic_feasible")
    return E.task_precondition(TaskId(spec.name), environment)


def pair_feasible(environment: EnvState, spec: ProgramSpec, args: ArgTuple) -> bool:
    if spec.is_atomic:
        return atomic_feasible(environment, spec, args)
    return args == EMPTY_ARGS and program_precondition(spec, environment)


def feasible_pairs(
    environment: EnvState, caller_level: int, lib: ProgramLibrary
) -> list[tuple[ProgramSpec, ArgTuple]]:
    """All callable (program, arguments) pairs below the caller's level.

    Order is deterministic: library order, then encoded argument order.
    The length of the result is the branching factor M of the search.
    """
    out: list[tuple[ProgramSpec, ArgTuple]] = []
    for spec in lib.programs:
        if spec.level >= caller_level:
            continue
        if spec.is_atomic:
            for args in valid_arg_tuples(spec):
                if E.atomic_feasible(environment, spec.op, _resolve_slots(spec, args)):
                    out.append((spec, args))
        elif program_precondition(spec, environment):
            out.append((spec, EMPTY_ARGS))
    return out


def check_manifest(manifest: dict, lib: ProgramLibrary) -> None:
    """Reject a stored manifest that does not match the active library."""
    expected = lib.manifest()
    if manifest != expected:
        got_mode = manifest.get("mode", "<missing>")
        raise LibraryError(
            f"library manifest mismatch: checkpoint built for mode={got_mode!r}, "
            f"run configured for mode={lib.mode!r}"
            if got_mode != lib.mode
            else "library manifest mismatch: program table differs from this build"
        )
