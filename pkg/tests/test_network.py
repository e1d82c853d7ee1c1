import numpy as np
import pytest
from types import SimpleNamespace

from argsynth.env import OBS_DIM, TaskId, make_env, observe, sample_task_env
from argsynth.network import (
    CheckpointError,
    NetworkDims,
    checkpoint_load,
    checkpoint_save,
    dims_for_library,
    finite_diff_check,
    forward,
    greedy_select,
    init_optimizer,
    init_params,
    loss,
    masked_distributions,
    step_loss_terms,
    train_step,
    zero_hidden,
)
from argsynth.programs import EMPTY_ARGS, build_library, feasible_pairs


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def small_dims(programs=12):
    return NetworkDims(programs=programs, obs=OBS_DIM, enc=6, embed=5,
                       hidden=8, args=64, tasks=4)


def random_trace(r, dims, nsteps=3, task_index=0, reward=1.0, one_hot=False):
    steps = []
    for _ in range(nsteps):
        obs = r.random(dims.obs)
        tp = np.zeros(dims.programs)
        ta = np.zeros(dims.args)
        if one_hot:
            tp[int(r.integers(0, dims.programs))] = 1.0
            ta[int(r.integers(0, dims.args))] = 1.0
        else:
            tp = r.random(dims.programs)
            tp /= tp.sum()
            ta = r.random(dims.args)
            ta /= ta.sum()
        steps.append(SimpleNamespace(obs=obs, pi_p_mcts=tp, pi_a_mcts=ta))
    return SimpleNamespace(task_index=task_index, steps=steps, reward=reward)


class TestInit:
    def test_same_seed_bit_identical(self):
        lib = build_library("args")
        a = init_params(42, dims_for_library(lib))
        b = init_params(42, dims_for_library(lib))
        for name in a.arrays:
            assert np.array_equal(a.arrays[name], b.arrays[name])

    def test_head_dimension_tracks_library(self):
        assert init_params(0, dims_for_library(build_library("args")))["prog_w"].shape[1] == 12
        assert init_params(0, dims_for_library(build_library("noargs")))["prog_w"].shape[1] == 17


class TestForward:
    def test_distributions_normalized(self):
        lib = build_library("args")
        params = init_params(7, dims_for_library(lib))
        r = rng(7)
        for i in range(10_000):
            obs = r.random(OBS_DIM)
            out = forward(params, obs, int(r.integers(0, 4)))
            assert abs(out.pi_p.sum() - 1.0) < 1e-6
            assert abs(out.pi_a.sum() - 1.0) < 1e-6

    def test_value_in_unit_interval(self):
        lib = build_library("args")
        params = init_params(3, dims_for_library(lib))
        r = rng(3)
        for _ in range(200):
            out = forward(params, r.random(OBS_DIM), 0)
            assert 0.0 <= out.value <= 1.0

    def test_deterministic(self):
        lib = build_library("args")
        params = init_params(5, dims_for_library(lib))
        obs = rng(5).random(OBS_DIM)
        h = zero_hidden(params.dims)
        a = forward(params, obs, 2, h)
        b = forward(params, obs, 2, h)
        assert np.array_equal(a.pi_p, b.pi_p) and a.value == b.value

    def test_hidden_state_threads(self):
        lib = build_library("args")
        params = init_params(5, dims_for_library(lib))
        obs = rng(5).random(OBS_DIM)
        out1 = forward(params, obs, 0)
        out2 = forward(params, obs, 0, out1.hidden)
        assert not np.array_equal(out1.pi_p, out2.pi_p)

    def test_bad_task_index(self):
        lib = build_library("args")
        params = init_params(0, dims_for_library(lib))
        with pytest.raises(ValueError):
            forward(params, np.zeros(OBS_DIM), 4)


class TestLoss:
    def test_worked_unit_example(self):
        value = step_loss_terms(
            np.array([0.5, 0.5]), np.array([0.5, 0.5]), 0.5,
            np.array([1.0, 0.0]), np.array([0.0, 1.0]), 1.0)
        assert value == pytest.approx(1.6363, abs=1e-4)

    def test_matched_outputs_leave_target_entropy(self):
        tp = np.array([1.0, 0.0, 0.0])
        ta = np.zeros(4)
        ta[2] = 1.0
        assert step_loss_terms(tp, ta, 1.0, tp, ta, 1.0) == pytest.approx(0.0, abs=1e-9)
        soft = np.array([0.5, 0.5])
        expected = -2 * 0.5 * np.log(0.5) * 2  # both heads at entropy
        assert step_loss_terms(soft, soft, 1.0, soft, soft, 1.0) == pytest.approx(expected)

    def test_duplicating_batch_doubles_loss(self):
        dims = small_dims()
        params = init_params(1, dims)
        trace = random_trace(rng(1), dims)
        single = loss(params, [trace])
        double = loss(params, [trace, trace])
        assert double == pytest.approx(2 * single)

    def test_value_only_traces_skip_policy_terms(self):
        dims = small_dims()
        params = init_params(2, dims)
        trace = random_trace(rng(2), dims, reward=0.0)
        trace.value_only = True
        full = loss(params, [trace])
        # Manually recompute the pure value loss along the trace.
        expected = 0.0
        hidden = zero_hidden(dims)
        for step in trace.steps:
            out = forward(params, step.obs, trace.task_index, hidden)
            expected += out.value ** 2
            hidden = out.hidden
        assert full == pytest.approx(expected)


class TestGradients:
    def test_finite_difference_agreement_five_seeds(self):
        worst = 0.0
        for seed in range(5):
            dims = small_dims()
            params = init_params(seed, dims)
            r = rng(seed + 100)
            batch = [random_trace(r, dims, 3, 0, 1.0),
                     random_trace(r, dims, 2, 2, 0.0)]
            worst = max(worst, finite_diff_check(params, batch))
        assert worst < 1e-4

    def test_value_only_gradients_check_out(self):
        dims = small_dims()
        params = init_params(9, dims)
        trace = random_trace(rng(9), dims, 2, 1, 0.0)
        trace.value_only = True
        assert finite_diff_check(params, [trace]) < 1e-4


class TestTrainStep:
    def test_zero_learning_rate_keeps_params(self):
        dims = small_dims()
        params = init_params(4, dims)
        before = {k: v.copy() for k, v in params.arrays.items()}
        opt = init_optimizer(params, lr=0.0)
        train_step(params, opt, [random_trace(rng(4), dims)])
        for name in before:
            assert np.array_equal(before[name], params.arrays[name])

    def test_loss_drops_over_100_steps(self):
        dims = small_dims()
        params = init_params(6, dims)
        opt = init_optimizer(params, lr=1e-2)
        batch = [random_trace(rng(6), dims, 2, 0, 1.0, one_hot=True)]
        first = train_step(params, opt, batch)
        losses = [train_step(params, opt, batch) for _ in range(99)]
        assert losses[-1] < first
        assert min(losses) == losses[-1] or losses[-1] < 0.9 * first

    def test_same_seed_identical_trajectory(self):
        def trajectory():
            dims = small_dims()
            params = init_params(8, dims)
            opt = init_optimizer(params)
            batch = [random_trace(rng(8), dims)]
            return [train_step(params, opt, batch) for _ in range(20)]
        assert trajectory() == trajectory()

    def test_single_trace_overfits_below_hundredth(self):
        # Uses a hotter learning rate than the training default: the
        # capability under test is gradient correctness, not the schedule.
        dims = small_dims()
        params = init_params(11, dims)
        opt = init_optimizer(params, lr=5e-3)
        batch = [random_trace(rng(11), dims, 3, 0, 1.0, one_hot=True)]
        final = None
        for i in range(2000):
            final = train_step(params, opt, batch)
            if final < 0.01:
                break
        assert final < 0.01


class TestMaskingAndGreedy:
    def setup_method(self):
        self.lib = build_library("args")
        self.env = make_env([3, 1, 2], 0, 2, 1, registry=0)
        self.feasible = feasible_pairs(self.env, 99, self.lib)

    def test_single_program_renormalizes_to_one(self):
        pi_p = np.full(12, 1 / 12)
        pi_a = np.full(64, 1 / 64)
        only_stop = [(s, a) for s, a in self.feasible if s.name == "stop"]
        mp, ma = masked_distributions(pi_p, pi_a, only_stop, self.lib)
        assert mp[self.lib.index("stop")] == pytest.approx(1.0)
        assert ma[0] == pytest.approx(1.0)

    def test_uniform_over_four_tuples(self):
        pi_p = np.full(12, 1 / 12)
        pi_a = np.full(64, 1 / 64)
        four = self.feasible[:1] + [p for p in self.feasible if p[0].name == "save_ptr"]
        mp, ma = masked_distributions(pi_p, pi_a, four, self.lib)
        live = ma[ma > 0]
        assert len(live) == 4 and np.allclose(live, 0.25)

    def test_full_support_identity(self):
        r = rng(10)
        pi_p = r.random(12)
        pi_p /= pi_p.sum()
        pi_a = r.random(64)
        pi_a /= pi_a.sum()
        all_progs = {s.name for s, _ in self.feasible}
        mp, _ = masked_distributions(pi_p, pi_a, self.feasible, self.lib)
        kept = sum(pi_p[self.lib.index(n)] for n in all_progs)
        for name in all_progs:
            i = self.lib.index(name)
            assert mp[i] == pytest.approx(pi_p[i] / kept, abs=1e-9)

    def test_greedy_argmax_and_tiebreak(self):
        pi_p = np.zeros(12)
        pi_p[self.lib.index("save_ptr")] = 0.7
        pi_p[self.lib.index("stop")] = 0.2
        pi_a = np.full(64, 1 / 64)
        spec, args = greedy_select(pi_p, pi_a, self.feasible, self.lib)
        assert spec.name == "save_ptr"
        assert args == (1, 0, 0)  # equal argument mass: lowest index wins

    def test_greedy_skips_infeasible_favourite(self):
        pi_p = np.zeros(12)
        pi_p[self.lib.index("pop")] = 0.9  # infeasible: stack empty
        pi_p[self.lib.index("push")] = 0.1
        pi_a = np.full(64, 1 / 64)
        spec, _ = greedy_select(pi_p, pi_a, self.feasible, self.lib)
        assert spec.name == "push"

    def test_logit_shift_invariance(self):
        r = rng(12)
        lib = build_library("args")
        params = init_params(13, dims_for_library(lib))
        obs = r.random(OBS_DIM)
        out = forward(params, obs, 0)
        base = greedy_select(out.pi_p, out.pi_a, self.feasible, self.lib)
        # Adding a constant to all logits rescales every probability by the
        # same factor, so softmax output and the argmax are unchanged.
        shifted_p = out.pi_p * np.exp(3.0)
        shifted_a = out.pi_a * np.exp(3.0)
        assert greedy_select(shifted_p, shifted_a, self.feasible, self.lib) == base

    def test_empty_feasible_rejected(self):
        with pytest.raises(ValueError):
            masked_distributions(np.ones(12), np.ones(64), [], self.lib)
        with pytest.raises(ValueError):
            greedy_select(np.ones(12), np.ones(64), [], self.lib)


class TestCheckpoints:
    def test_roundtrip_bit_exact(self, tmp_path):
        lib = build_library("args")
        params = init_params(21, dims_for_library(lib))
        opt = init_optimizer(params)
        dims = params.dims
        batch = [random_trace(rng(21), dims, 2, 0, 1.0)]
        train_step(params, opt, batch)
        path = tmp_path / "model.ckpt"
        checkpoint_save(params, opt, lib.manifest(), path)
        loaded, opt2, manifest = checkpoint_load(path, expected_manifest=lib.manifest())
        obs = rng(1).random(OBS_DIM)
        a = forward(params, obs, 1)
        b = forward(loaded, obs, 1)
        assert np.array_equal(a.pi_p, b.pi_p)
        assert np.array_equal(a.pi_a, b.pi_a)
        assert a.value == b.value
        assert opt2.t == opt.t
        assert np.array_equal(opt2.m["lstm_wx"], opt.m["lstm_wx"])

    def test_manifest_guard(self, tmp_path):
        lib = build_library("noargs")
        params = init_params(0, dims_for_library(lib))
        path = tmp_path / "noargs.ckpt"
        checkpoint_save(params, None, lib.manifest(), path)
        with pytest.raises(CheckpointError):
            checkpoint_load(path, expected_manifest=build_library("args").manifest())

    def test_truncated_file_rejected(self, tmp_path):
        lib = build_library("args")
        params = init_params(0, dims_for_library(lib))
        path = tmp_path / "model.ckpt"
        checkpoint_save(params, None, lib.manifest(), path)
        data = path.read_bytes()
        clipped = tmp_path / "clipped.ckpt"
        clipped.write_bytes(data[:len(data) - 4096])
        with pytest.raises(CheckpointError):
            checkpoint_load(clipped)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"hello world")
        with pytest.raises(CheckpointError):
            checkpoint_load(path)
