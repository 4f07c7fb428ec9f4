import math

import numpy as np
import pytest

from svo_marl.grid import Cell, Observation
from svo_marl.harvestpatch import HarvestPatch
from svo_marl.nn import ActorCritic, ArchSpec
from svo_marl.policy import (
    CheckpointError,
    LearnerConfig,
    NeuralPolicy,
    NonFiniteLossError,
    Trajectory,
    a2c_loss_and_grad,
    discounted_returns,
    stack_batch,
)

MICRO = ArchSpec(n_actions=8, window=5, conv_channels=1, hidden=4, recurrent=3)
BANDIT = ArchSpec(n_actions=2, window=5, conv_channels=1, hidden=4, recurrent=3)


def still_window(size=5):
    w = np.full((size, size), Cell.OPEN, dtype=np.int8)
    w[size // 2, size // 2] = Cell.AGENT
    return w


def one_step(window, action, utility, bootstrap=0.0):
    return Trajectory(
        windows=window[None],
        headings=np.zeros(1, dtype=np.int8),
        actions=np.array([action]),
        log_probs=np.zeros(1),
        values=np.zeros(1),
        rewards=np.array([utility], dtype=float),
        utilities=np.array([utility], dtype=float),
        bootstrap_value=bootstrap,
    )


def random_trajectory(rng, spec, T):
    return Trajectory(
        windows=rng.integers(0, 16, size=(T, spec.window, spec.window)).astype(np.int8),
        headings=rng.integers(0, 4, size=T),
        actions=rng.integers(0, spec.n_actions, size=T),
        log_probs=np.zeros(T),
        values=np.zeros(T),
        rewards=np.zeros(T),
        utilities=rng.normal(size=T),
    )


class TestArchitecture:
    def test_micro_net_fits_gradient_budget(self):
        assert MICRO.n_params <= 200

    def test_param_count_pure_function(self):
        spec = ArchSpec(n_actions=9)
        assert spec.n_params == ArchSpec(n_actions=9).n_params
        assert spec.n_params == sum(int(np.prod(s)) for _, s in spec.shapes())
        net = ActorCritic(spec, rng=np.random.default_rng(0))
        assert net.params.shape == (spec.n_params,)

    @pytest.mark.parametrize("n", [8, 9])
    def test_logit_head_matches_action_count(self, n):
        net = ActorCritic(ArchSpec(n_actions=n), rng=np.random.default_rng(0))
        logits, value, h = net.step(np.zeros(15 * 15 * 3), 0, net.initial_state())
        assert logits.shape == (n,) and isinstance(value, float) and h.shape == (64,)

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            ArchSpec(n_actions=0)
        with pytest.raises(ValueError):
            ArchSpec(n_actions=8, window=2)

    def test_wrong_param_vector(self):
        with pytest.raises(ValueError):
            ActorCritic(MICRO, params=np.zeros(3))

    def test_sequence_matches_single_steps(self):
        rng = np.random.default_rng(4)
        net = ActorCritic(MICRO, rng=rng)
        from svo_marl.grid import PALETTE_UNIT

        tr = random_trajectory(rng, MICRO, 6)
        x = PALETTE_UNIT[tr.windows].reshape(6, 1, -1)
        logits, values, _ = net.forward_sequence(x, tr.headings.reshape(6, 1))
        h = net.initial_state()
        for t in range(6):
            lg, v, h = net.step(x[t, 0], int(tr.headings[t]), h)
            np.testing.assert_allclose(lg, logits[t, 0], atol=1e-12)
            assert v == pytest.approx(values[t, 0], abs=1e-12)


class TestGradient:
    @pytest.mark.parametrize("seed", range(5))
    def test_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        net = ActorCritic(MICRO, rng=rng)
        net.set_params(net.params + rng.normal(0, 0.3, MICRO.n_params))
        cfg = LearnerConfig(gamma=0.9, entropy_coef=0.05, value_coef=0.5)
        x, headings, actions, returns = stack_batch([random_trajectory(rng, MICRO, 4) for _ in range(3)], cfg.gamma)
        adv = rng.normal(size=returns.shape)
        _, grad, _ = a2c_loss_and_grad(net, x, headings, actions, returns, cfg, advantages=adv)
        base = net.params.copy()
        eps = 1e-4
        numeric = np.empty_like(grad)
        for k in range(len(base)):
            side = []
            for delta in (eps, -eps):
                p = base.copy()
                p[k] += delta
                net.set_params(p)
                side.append(a2c_loss_and_grad(net, x, headings, actions, returns, cfg, advantages=adv)[0])
            numeric[k] = (side[0] - side[1]) / (2 * eps)
        net.set_params(base)
        scale = np.maximum(np.abs(grad) + np.abs(numeric), 1e-8)
        rel = np.abs(grad - numeric) / scale
        assert rel.max() < 1e-4

    def test_zero_advantage_leaves_policy_head_still(self):
        rng = np.random.default_rng(0)
        net = ActorCritic(MICRO, rng=rng)
        cfg = LearnerConfig(entropy_coef=0.0, value_coef=0.5)
        x, headings, actions, returns = stack_batch([random_trajectory(rng, MICRO, 5)], cfg.gamma)
        _, grad, diag = a2c_loss_and_grad(net, x, headings, actions, returns, cfg, advantages=np.zeros_like(returns))
        g = net.views(grad)
        assert diag["policy_loss"] == 0.0
        assert not g["pi_w"].any() and not g["pi_b"].any()
        assert g["v_w"].any()


class TestActing:
    def test_fresh_policy_near_uniform(self, hp_layout):
        w = HarvestPatch(hp_layout, 1, seed=0)
        obs = w.observe(0)
        pol = NeuralPolicy(ArchSpec(n_actions=8), rng=np.random.default_rng(1))
        rng = np.random.default_rng(2)
        counts = np.zeros(8)
        for _ in range(10_000):
            a, logp, _, _ = pol.act(obs, pol.initial_state(), rng)
            counts[a] += 1
        assert np.abs(counts / 10_000 - 1 / 8).max() < 0.05

    def test_identical_inputs_identical_outputs(self, hp_layout):
        obs = HarvestPatch(hp_layout, 1, seed=0).observe(0)
        pol = NeuralPolicy(ArchSpec(n_actions=8), rng=np.random.default_rng(1))
        outs = []
        for _ in range(2):
            rng = np.random.default_rng(5)
            state = pol.initial_state()
            seq = []
            for _ in range(20):
                a, lp, v, state = pol.act(obs, state, rng)
                seq.append((a, lp, v))
            outs.append((seq, state.tobytes()))
        assert outs[0] == outs[1]

    def test_greedy_is_argmax(self):
        pol = NeuralPolicy(BANDIT, rng=np.random.default_rng(0))
        pol.net.views()["pi_b"][...] = [0.0, 3.0]
        obs = Observation(still_window(), 0)
        probs = pol.action_probs(obs, pol.initial_state())
        a, logp, _, _ = pol.act(obs, pol.initial_state(), np.random.default_rng(0), greedy=True)
        assert a == int(np.argmax(probs)) == 1
        assert logp == pytest.approx(math.log(probs[1]))

    def test_shape_mismatch(self):
        pol = NeuralPolicy(MICRO)
        with pytest.raises(ValueError, match="window"):
            pol.act(Observation(still_window(15), 0), pol.initial_state(), np.random.default_rng(0))


class TestUpdate:
    def test_bandit_convergence(self):
        pol = NeuralPolicy(BANDIT, rng=np.random.default_rng(0), learner=LearnerConfig(gamma=0.0, learning_rate=0.01))
        obs = Observation(still_window(), 0)
        rng = np.random.default_rng(1)
        for _ in range(2000):
            batch = []
            for _ in range(8):
                a, _, _, _ = pol.act(obs, pol.initial_state(), rng)
                batch.append(one_step(obs.window, a, 1.0 if a == 0 else 0.0))
            pol.update(batch)
        assert pol.action_probs(obs, pol.initial_state())[0] > 0.95

    def test_value_converges_to_discounted_sum(self):
        gamma, r = 0.9, 1.0
        pol = NeuralPolicy(BANDIT, rng=np.random.default_rng(0), learner=LearnerConfig(gamma=gamma, learning_rate=0.01, entropy_coef=0.0))
        obs = Observation(still_window(), 0)
        rng = np.random.default_rng(0)
        for _ in range(3000):
            _, _, v, _ = pol.act(obs, pol.initial_state(), rng)
            pol.update([one_step(obs.window, 0, r, bootstrap=v) for _ in range(4)])
        _, _, v, _ = pol.act(obs, pol.initial_state(), rng)
        assert abs(v - r / (1 - gamma)) < 0.05 * r / (1 - gamma)

    def test_diagnostics_and_entropy_bounds(self):
        rng = np.random.default_rng(3)
        pol = NeuralPolicy(MICRO, rng=rng)
        for _ in range(5):
            diag = pol.update([random_trajectory(rng, MICRO, 8) for _ in range(2)])
            assert set(diag) >= {"policy_loss", "value_loss", "entropy", "mean_return", "grad_norm"}
            assert 0.0 <= diag["entropy"] <= math.log(8) + 1e-12

    def test_non_finite_update_rejected(self):
        rng = np.random.default_rng(3)
        pol = NeuralPolicy(MICRO, rng=rng)
        before = pol.params.copy()
        tr = random_trajectory(rng, MICRO, 4)
        tr.utilities[2] = np.nan
        with pytest.raises(NonFiniteLossError) as err:
            pol.update([tr])
        assert "loss" in err.value.diagnostics
        np.testing.assert_array_equal(pol.params, before)
        assert pol.optimizer.t == 0

    def test_empty_and_ragged_batches(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            stack_batch([], 0.9)
        with pytest.raises(ValueError):
            stack_batch([random_trajectory(rng, MICRO, 3), random_trajectory(rng, MICRO, 4)], 0.9)

    def test_ragged_trajectory_fields(self):
        with pytest.raises(ValueError):
            Trajectory(np.zeros((2, 5, 5)), np.zeros(2), np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3))

    def test_learner_config_bounds(self):
        with pytest.raises(ValueError):
            LearnerConfig(gamma=1.0)
        with pytest.raises(ValueError):
            LearnerConfig(learning_rate=-1e-3)
        d = LearnerConfig()
        assert (d.gamma, d.learning_rate, d.entropy_coef, d.value_coef) == (0.99, 4e-4, 0.003, 0.5)


def test_discounted_returns_oracle():
    u = np.array([1.0, 0.0, 2.0])
    g = discounted_returns(u, 0.5, bootstrap=4.0)
    np.testing.assert_allclose(g, [1 + 0.5 * (0 + 0.5 * (2 + 0.5 * 4)), 0 + 0.5 * (2 + 0.5 * 4), 2 + 0.5 * 4])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        pol = NeuralPolicy(MICRO, rng=rng, learner=LearnerConfig(learning_rate=0.01))
        pol.update([random_trajectory(rng, MICRO, 4)])
        digest = pol.save(tmp_path / "a.ckpt", meta={"agent_id": 3})
        loaded, meta = NeuralPolicy.load(tmp_path / "a.ckpt")
        assert meta == {"agent_id": 3} and len(digest) == 64
        np.testing.assert_array_equal(loaded.params, pol.params)
        np.testing.assert_array_equal(loaded.optimizer.m, pol.optimizer.m)
        assert loaded.optimizer.t == pol.optimizer.t == 1
        assert loaded.spec == MICRO and loaded.learner == pol.learner
        # both continue identically
        tr = random_trajectory(np.random.default_rng(9), MICRO, 4)
        pol.update([tr])
        loaded.update([tr])
        np.testing.assert_array_equal(loaded.params, pol.params)

    def test_save_is_byte_stable(self, tmp_path):
        pol = NeuralPolicy(MICRO, rng=np.random.default_rng(0))
        pol.save(tmp_path / "a.ckpt")
        pol.save(tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_corruption_detected(self, tmp_path):
        path = tmp_path / "a.ckpt"
        NeuralPolicy(MICRO, rng=np.random.default_rng(0)).save(path)
        data = bytearray(path.read_bytes())
        data[-5] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="hash"):
            NeuralPolicy.load(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"hello world")
        with pytest.raises(CheckpointError):
            NeuralPolicy.load(path)
