"""Recurrent policy/value network with hand-derived gradients.

Six blocks: a two-layer ReLU encoder over the observation, a learned
program-embedding matrix indexed by the task being executed, an LSTM core,
and three heads (program softmax, argument softmax, logistic value). The
graph is fixed, so the backward pass is written out by hand and validated
against central differences; no autodiff framework is involved.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .env import OBS_DIM
from .programs import ARG_SPACE, ArgTuple, ProgramLibrary, ProgramSpec, args_encode

LOG_CLAMP = 1e-12

CHECKPOINT_MAGIC = b"ARGSYNC1"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Corrupt, truncated, or incompatible checkpoint file."""


@dataclass(frozen=True)
class NetworkDims:
    """Layer sizes; `programs` must match the library manifest."""

    programs: int
    obs: int = OBS_DIM
    enc: int = 64
    embed: int = 32
    hidden: int = 128
    args: int = ARG_SPACE
    tasks: int = 4

    def to_dict(self) -> dict:
        return {
            "programs": self.programs, "obs": self.obs, "enc": self.enc,
            "embed": self.embed, "hidden": self.hidden, "args": self.args,
            "tasks": self.tasks,
        }


class HiddenState(NamedTuple):
    h: np.ndarray
    c: np.ndarray


class PolicyOutput(NamedTuple):
    pi_p: np.ndarray
    pi_a: np.ndarray
    value: float
    hidden: HiddenState


# Parameter array names in a fixed order; checkpoints and the optimizer
# iterate in exactly this order.
PARAM_LAYOUT = (
    "enc_w1", "enc_b1", "enc_w2", "enc_b2", "prog_embed",
    "lstm_wx", "lstm_wh", "lstm_b",
    "prog_w", "prog_b", "arg_w", "arg_b", "value_w", "value_b",
)


@dataclass
class ParameterSet:
    dims: NetworkDims
    arrays: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.dims, {k: v.copy() for k, v in self.arrays.items()})


def _shapes(d: NetworkDims) -> dict[str, tuple[int, ...]]:
    x_in = d.enc + d.embed
    return {
        "enc_w1": (d.obs, d.enc), "enc_b1": (d.enc,),
        "enc_w2": (d.enc, d.enc), "enc_b2": (d.enc,),
        "prog_embed": (d.tasks, d.embed),
        "lstm_wx": (x_in, 4 * d.hidden), "lstm_wh": (d.hidden, 4 * d.hidden),
        "lstm_b": (4 * d.hidden,),
        "prog_w": (d.hidden, d.programs), "prog_b": (d.programs,),
        "arg_w": (d.hidden, d.args), "arg_b": (d.args,),
        "value_w": (d.hidden,), "value_b": (1,),
    }


def init_params(seed: int, dims: NetworkDims) -> ParameterSet:
    """Seed-deterministic init: weights uniform within 1/sqrt(fan-in),
    biases zero."""
    rng = np.random.Generator(np.random.PCG64(seed))
    arrays: dict[str, np.ndarray] = {}
    for name, shape in _shapes(dims).items():
        if name.endswith(("_b", "_b1", "_b2")) or name in ("lstm_b",):
            arrays[name] = np.zeros(shape, dtype=np.float64)
            continue
        fan_in = shape[0] if len(shape) > 1 else shape[0]
        if name == "prog_embed":
            fan_in = dims.embed
        bound = 1.0 / np.sqrt(fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape).astype(np.float64)
    return ParameterSet(dims, arrays)


def dims_for_library(lib: ProgramLibrary, **overrides) -> NetworkDims:
    return NetworkDims(programs=len(lib), tasks=len(lib.learned), **overrides)


def zero_hidden(dims: NetworkDims) -> HiddenState:
    return HiddenState(np.zeros(dims.hidden), np.zeros(dims.hidden))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _sigmoid(x: float) -> float:
    # Clipping at +-500 is exact in float64: the tails are already 0/1.
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))


def _forward_step(params: ParameterSet, obs: np.ndarray, task_index: int,
                  hidden: HiddenState) -> tuple[PolicyOutput, dict]:
    a = params.arrays
    d = params.dims
    if obs.shape != (d.obs,):
        raise ValueError(f"observation shape {obs.shape} != ({d.obs},)")
    if not (0 <= task_index < d.tasks):
        raise ValueError(f"task index {task_index} outside [0, {d.tasks})")
    h_prev, c_prev = hidden
    a1 = np.maximum(obs @ a["enc_w1"] + a["enc_b1"], 0.0)
    s = np.maximum(a1 @ a["enc_w2"] + a["enc_b2"], 0.0)
    p_emb = a["prog_embed"][task_index]
    x = np.concatenate([s, p_emb])
    gates = np.clip(x @ a["lstm_wx"] + h_prev @ a["lstm_wh"] + a["lstm_b"], -500.0, 500.0)
    H = d.hidden
    gi = 1.0 / (1.0 + np.exp(-gates[:H]))
    gf = 1.0 / (1.0 + np.exp(-gates[H:2 * H]))
    gg = np.tanh(gates[2 * H:3 * H])
    go = 1.0 / (1.0 + np.exp(-gates[3 * H:]))
    c = gf * c_prev + gi * gg
    tanh_c = np.tanh(c)
    h = go * tanh_c
    pi_p = _softmax(h @ a["prog_w"] + a["prog_b"])
    pi_a = _softmax(h @ a["arg_w"] + a["arg_b"])
    value = float(_sigmoid(float(h @ a["value_w"] + a["value_b"][0])))
    out = PolicyOutput(pi_p, pi_a, value, HiddenState(h, c))
    cache = {
        "obs": obs, "a1": a1, "s": s, "x": x, "task_index": task_index,
        "h_prev": h_prev, "c_prev": c_prev, "gi": gi, "gf": gf, "gg": gg,
        "go": go, "c": c, "tanh_c": tanh_c, "h": h,
        "pi_p": pi_p, "pi_a": pi_a, "value": value,
    }
    return out, cache


def forward(params: ParameterSet, obs: np.ndarray, task_index: int,
            hidden: Optional[HiddenState] = None) -> PolicyOutput:
    """One deterministic step of the network; returns policies, value and
    the next hidden state."""
    if hidden is None:
        hidden = zero_hidden(params.dims)
    out, _ = _forward_step(params, obs, task_index, hidden)
    return out


def step_loss_terms(pi_p: np.ndarray, pi_a: np.ndarray, value: float,
                    pi_p_target: np.ndarray, pi_a_target: np.ndarray,
                    reward: float) -> float:
    """Per-step objective: two cross-entropies plus squared value error."""
    ce_p = -float(pi_p_target @ np.log(np.maximum(pi_p, LOG_CLAMP)))
    ce_a = -float(pi_a_target @ np.log(np.maximum(pi_a, LOG_CLAMP)))
    return ce_p + ce_a + (value - reward) ** 2


def _ce_dlogits(pi: np.ndarray, target: np.ndarray) -> np.ndarray:
    # Entries clamped by LOG_CLAMP are constants of the logits, so their
    # target terms drop out of the gradient.
    live = pi >= LOG_CLAMP
    t_live = np.where(live, target, 0.0)
    return pi * t_live.sum() - t_live


def loss(params: ParameterSet, batch: Sequence) -> float:
    """Summed loss over a batch of traces.

    Hidden states are recomputed from zero along each trace's stored
    observations; the snapshots saved in traces are never fed back in,
    because they go stale as parameters move.
    """
    total = 0.0
    for trace in batch:
        value_only = getattr(trace, "value_only", False)
        hidden = zero_hidden(params.dims)
        for step in trace.steps:
            out, _ = _forward_step(params, step.obs, trace.task_index, hidden)
            if value_only:
                total += (out.value - trace.reward) ** 2
            else:
                total += step_loss_terms(out.pi_p, out.pi_a, out.value,
                                         step.pi_p_mcts, step.pi_a_mcts, trace.reward)
            hidden = out.hidden
    return total


def loss_and_grads(params: ParameterSet, batch: Sequence) -> tuple[float, dict[str, np.ndarray]]:
    """Loss plus exact gradients via backpropagation through each trace."""
    a = params.arrays
    d = params.dims
    grads = params.zeros_like()
    total = 0.0
    for trace in batch:
        value_only = getattr(trace, "value_only", False)
        hidden = zero_hidden(d)
        caches = []
        for step in trace.steps:
            out, cache = _forward_step(params, step.obs, trace.task_index, hidden)
            if value_only:
                total += (out.value - trace.reward) ** 2
            else:
                total += step_loss_terms(out.pi_p, out.pi_a, out.value,
                                         step.pi_p_mcts, step.pi_a_mcts, trace.reward)
            caches.append((step, cache))
            hidden = out.hidden
        dh_next = np.zeros(d.hidden)
        dc_next = np.zeros(d.hidden)
        zero_p = np.zeros(d.programs)
        zero_a = np.zeros(d.args)
        for step, cc in reversed(caches):
            if value_only:
                dlog_p, dlog_a = zero_p, zero_a
            else:
                dlog_p = _ce_dlogits(cc["pi_p"], step.pi_p_mcts)
                dlog_a = _ce_dlogits(cc["pi_a"], step.pi_a_mcts)
            v = cc["value"]
            dv = 2.0 * (v - trace.reward) * v * (1.0 - v)
            h = cc["h"]
            grads["prog_w"] += np.outer(h, dlog_p)
            grads["prog_b"] += dlog_p
            grads["arg_w"] += np.outer(h, dlog_a)
            grads["arg_b"] += dlog_a
            grads["value_w"] += dv * h
            grads["value_b"][0] += dv
            dh = (a["prog_w"] @ dlog_p + a["arg_w"] @ dlog_a
                  + dv * a["value_w"] + dh_next)
            do = dh * cc["tanh_c"]
            dc = dh * cc["go"] * (1.0 - cc["tanh_c"] ** 2) + dc_next
            dgi = dc * cc["gg"]
            dgf = dc * cc["c_prev"]
            dgg = dc * cc["gi"]
            dc_next = dc * cc["gf"]
            dgates = np.concatenate([
                dgi * cc["gi"] * (1.0 - cc["gi"]),
                dgf * cc["gf"] * (1.0 - cc["gf"]),
                dgg * (1.0 - cc["gg"] ** 2),
                do * cc["go"] * (1.0 - cc["go"]),
            ])
            grads["lstm_wx"] += np.outer(cc["x"], dgates)
            grads["lstm_wh"] += np.outer(cc["h_prev"], dgates)
            grads["lstm_b"] += dgates
            dx = a["lstm_wx"] @ dgates
            dh_next = a["lstm_wh"] @ dgates
            ds = dx[:d.enc]
            grads["prog_embed"][cc["task_index"]] += dx[d.enc:]
            dz2 = ds * (cc["s"] > 0)
            grads["enc_w2"] += np.outer(cc["a1"], dz2)
            grads["enc_b2"] += dz2
            da1 = a["enc_w2"] @ dz2
            dz1 = da1 * (cc["a1"] > 0)
            grads["enc_w1"] += np.outer(cc["obs"], dz1)
            grads["enc_b1"] += dz1
    return total, grads


def finite_diff_check(params: ParameterSet, batch: Sequence, h: float = 1e-5) -> float:
    """Max relative disagreement between analytic and central-difference
    gradients over every parameter entry.

    The denominator floor absorbs the difference scheme's own float64
    noise (about eps*|loss|/h, i.e. ~1e-9 here) on near-zero gradients;
    real gradients sit orders of magnitude above it.
    """
    _, grads = loss_and_grads(params, batch)
    worst = 0.0
    for name in PARAM_LAYOUT:
        arr = params.arrays[name]
        g = grads[name]
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss(params, batch)
            flat[i] = orig - h
            down = loss(params, batch)
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            denom = max(abs(fd) + abs(gflat[i]), 1e-4)
            worst = max(worst, abs(fd - gflat[i]) / denom)
    return worst


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 1.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_optimizer(params: ParameterSet, lr: float = 1e-4, clip: float = 1.0) -> AdamState:
    state = AdamState(lr=lr, clip=clip)
    state.m = params.zeros_like()
    state.v = params.zeros_like()
    return state


def train_step(params: ParameterSet, opt: AdamState, batch: Sequence) -> float:
    """One clipped Adam update on the batch loss; returns the loss value."""
    value, grads = loss_and_grads(params, batch)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value}")
    sq = 0.0
    for g in grads.values():
        sq += float((g * g).sum())
        if not np.isfinite(sq):
            raise FloatingPointError("non-finite gradient")
    norm = np.sqrt(sq)
    scale = opt.clip / norm if norm > opt.clip else 1.0
    opt.t += 1
    bc1 = 1.0 - opt.beta1 ** opt.t
    bc2 = 1.0 - opt.beta2 ** opt.t
    for name, g in grads.items():
        g = g * scale
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        params.arrays[name] -= opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
    return value


# ---------------------------------------------------------------------------
# Masking and greedy selection


def masked_distributions(
    pi_p: np.ndarray, pi_a: np.ndarray,
    feasible: Sequence[tuple[ProgramSpec, ArgTuple]], lib: ProgramLibrary,
) -> tuple[np.ndarray, np.ndarray]:
    """Restrict both policies to the feasible supports and renormalize.

    A zero masked mass (every feasible entry starved) falls back to
    uniform over the support so the search always has a usable prior.
    """
    if not feasible:
        raise ValueError("no feasible pairs: dead-end state")
    p_idx = sorted({lib.index(spec.name) for spec, _ in feasible})
    a_idx = sorted({args_encode(args) for _, args in feasible})
    out_p = np.zeros_like(pi_p)
    out_p[p_idx] = pi_p[p_idx]
    total = out_p.sum()
    if total > 0:
        out_p /= total
    else:
        out_p[p_idx] = 1.0 / len(p_idx)
    out_a = np.zeros_like(pi_a)
    out_a[a_idx] = pi_a[a_idx]
    total = out_a.sum()
    if total > 0:
        out_a /= total
    else:
        out_a[a_idx] = 1.0 / len(a_idx)
    return out_p, out_a


def greedy_select(
    pi_p: np.ndarray, pi_a: np.ndarray,
    feasible: Sequence[tuple[ProgramSpec, ArgTuple]], lib: ProgramLibrary,
) -> tuple[ProgramSpec, ArgTuple]:
    """Most probable feasible program, then its most probable argument
    tuple; ties break toward the lowest index."""
    if not feasible:
        raise ValueError("no feasible pairs: dead-end state")
    by_prog: dict[int, list[tuple[ProgramSpec, ArgTuple]]] = {}
    for spec, args in feasible:
        by_prog.setdefault(lib.index(spec.name), []).append((spec, args))
    best_p = max(sorted(by_prog), key=lambda i: pi_p[i])
    candidates = by_prog[best_p]
    best = max(
        range(len(candidates)),
        key=lambda k: (pi_a[args_encode(candidates[k][1])], -k),
    )
    return candidates[best]


# ---------------------------------------------------------------------------
# Checkpoints


def _array_manifest(arrays: dict[str, np.ndarray]) -> list[dict]:
    return [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]


def checkpoint_save(params: ParameterSet, opt: Optional[AdamState],
                    manifest: dict, path) -> None:
    """Versioned binary container: JSON header + little-endian float64
    payload with a content checksum."""
    ordered: list[tuple[str, np.ndarray]] = [(n, params.arrays[n]) for n in PARAM_LAYOUT]
    opt_header = None
    if opt is not None:
        opt_header = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                      "eps": opt.eps, "clip": opt.clip, "t": opt.t}
        ordered += [("m." + n, opt.m[n]) for n in PARAM_LAYOUT]
        ordered += [("v." + n, opt.v[n]) for n in PARAM_LAYOUT]
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in ordered)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "manifest": manifest,
        "dims": params.dims.to_dict(),
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in ordered],
        "optimizer": opt_header,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def checkpoint_load(path, expected_manifest: Optional[dict] = None
                    ) -> tuple[ParameterSet, Optional[AdamState], dict]:
    """Load and verify a checkpoint; rejects corruption and manifest
    mismatches."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fixed = len(CHECKPOINT_MAGIC) + 4 + 8
    if len(raw) < fixed or raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (header_len,) = struct.unpack_from("<Q", raw, len(CHECKPOINT_MAGIC) + 4)
    if len(raw) < fixed + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[fixed:fixed + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    payload = raw[fixed + header_len:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch (corrupt or truncated)")
    if expected_manifest is not None and header["manifest"] != expected_manifest:
        got = header["manifest"].get("mode", "<missing>")
        want = expected_manifest.get("mode", "<missing>")
        raise CheckpointError(
            f"{path}: checkpoint library (mode={got!r}) does not match the "
            f"configured library (mode={want!r})"
        )
    dims = NetworkDims(**header["dims"])
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated payload")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).copy()
        arrays[entry["name"]] = arr.reshape(shape)
        offset += nbytes
    params = ParameterSet(dims, {n: arrays[n] for n in PARAM_LAYOUT})
    opt = None
    if header.get("optimizer"):
        oh = header["optimizer"]
        opt = AdamState(lr=oh["lr"], beta1=oh["beta1"], beta2=oh["beta2"],
                        eps=oh["eps"], clip=oh["clip"], t=oh["t"])
        opt.m = {n: arrays["m." + n] for n in PARAM_LAYOUT}
        opt.v = {n: arrays["v." + n] for n in PARAM_LAYOUT}
    return params, opt, header["manifest"]
