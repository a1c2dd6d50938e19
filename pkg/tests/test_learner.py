"""Learner: replay, target bank, TD targets, loss arithmetic, run loop."""

import numpy as np
import pytest

from emixlab import agent as agent_mod
from emixlab import checks, learner, mixer, nn
from emixlab.env import EnvConfig, N_ACTIONS, SpuriousCaptureEnv


TINY_ENV = dict(grid_size=4, n_agents=2, n_prey=1, sight_radius=2,
                episode_limit=4, p_storm=0.3, storm_duration=2, seed=0)


def tiny_learner(algo="qmix", **kw):
    env_cfg = EnvConfig(**TINY_ENV)
    cfg = learner.LearnerConfig(algo=algo, agent_hidden=6, surprise_hidden=6,
                                embed_dim=4, hypernet_hidden=5, **kw)
    return learner.Learner(env_cfg, cfg, np.random.default_rng(0)), env_cfg


def synthetic_batch(env_cfg, rng, B=3, terminated=False, mask=None):
    """Random batch on the env's shapes; dynamics need not be consistent."""
    T = env_cfg.episode_limit
    if mask is None:
        mask = np.ones((B, T))
    term = np.zeros((B, T))
    if terminated:
        for b in range(B):
            last = int(mask[b].sum()) - 1
            term[b, last] = 1.0
    return learner.EpisodeBatch(
        states=rng.normal(size=(B, T + 1, env_cfg.state_dim)),
        observations=rng.normal(size=(B, T + 1, env_cfg.n_agents,
                                      env_cfg.obs_dim)),
        actions=rng.integers(0, N_ACTIONS, (B, T, env_cfg.n_agents)),
        rewards=rng.normal(size=(B, T)),
        mask=mask,
        terminated=term)


def online_q_tot(lrn, flat):
    """Oracle for the online joint value, via the non-trainable path."""
    q = agent_mod.agent_q_values(lrn.agent_cfg, flat["obs"], flat["a_prev"],
                                 lrn.params)
    chosen = np.take_along_axis(q, flat["a"][..., None], axis=2)[..., 0]
    return nn._data(mixer.mix(chosen, flat["s"], lrn.mixer_cfg, lrn.params))


# ---------------------------------------------------------------------------
# replay buffer
# ---------------------------------------------------------------------------

class TestReplayBuffer:
    def test_evicts_oldest_first(self):
        buf = learner.ReplayBuffer(capacity=3, batch_size=1)
        for tag in range(5):
            buf.insert({"tag": np.array([tag])})
        tags = sorted(int(e["tag"][0]) for e in buf._episodes)
        assert tags == [2, 3, 4]
        assert len(buf) == 3

    def test_can_sample_threshold(self):
        buf = learner.ReplayBuffer(capacity=10, batch_size=2)
        for tag in range(2):
            buf.insert({"tag": np.array([tag])})
        assert not buf.can_sample
        buf.insert({"tag": np.array([2])})
        assert buf.can_sample

    def test_oversample_rejected(self):
        buf = learner.ReplayBuffer(capacity=10, batch_size=2)
        buf.insert({"tag": np.array([0])})
        with pytest.raises(learner.ReplayUsageError):
            buf.sample(np.random.default_rng(0))

    def test_sample_without_replacement(self):
        env_cfg = EnvConfig(**TINY_ENV)
        buf = learner.ReplayBuffer(capacity=10, batch_size=4)
        rng = np.random.default_rng(1)
        for tag in range(6):
            ep = synthetic_batch(env_cfg, rng, B=1)
            buf.insert({k: getattr(ep, k)[0].copy() if k != "states"
                        else np.full_like(ep.states[0], tag)
                        for k in ("states", "observations", "actions",
                                  "rewards", "mask", "terminated")})
        batch = buf.sample(np.random.default_rng(2))
        tags = {float(s) for s in batch.states[:, 0, 0]}
        assert len(tags) == 4  # four distinct episodes, none repeated

    def test_sampling_uniformity_chi_squared(self):
        # 10k single-episode draws from 100; chi-squared stat ~ chi2(99)
        buf = learner.ReplayBuffer(capacity=200, batch_size=1)
        for tag in range(100):
            buf.insert({"tag": np.array([tag])})
        rng = np.random.default_rng(2)
        counts = np.zeros(100)
        for _ in range(10_000):
            idx = rng.choice(len(buf._episodes), size=1, replace=False)[0]
            counts[int(buf._episodes[idx]["tag"][0])] += 1
        expected = 100.0
        stat = float(((counts - expected) ** 2 / expected).sum())
        # mean 99, std ~ sqrt(2 * 99) ~ 14; allow five sigma
        assert stat < 99 + 5 * np.sqrt(2 * 99)

    def test_capacity_must_exceed_batch(self):
        with pytest.raises(learner.LearnerError):
            learner.ReplayBuffer(capacity=2, batch_size=2)


# ---------------------------------------------------------------------------
# recorder / flatten
# ---------------------------------------------------------------------------

class TestRecorderAndFlatten:
    def test_recorder_masks_padding(self):
        env_cfg = EnvConfig(**TINY_ENV)
        env = SpuriousCaptureEnv(env_cfg)
        state, obs = env.reset()
        rec = learner.EpisodeRecorder(env_cfg, state, obs)
        res = env.step([0, 0])
        rec.record([0, 0], res)
        ep = rec.episode()
        assert ep["mask"].tolist() == [1.0, 0.0, 0.0, 0.0]
        assert np.array_equal(ep["states"][0], state)
        assert np.array_equal(ep["states"][1], res.state)

    def test_flatten_first_step_has_no_last_action(self):
        lrn, env_cfg = tiny_learner()
        batch = synthetic_batch(env_cfg, np.random.default_rng(0))
        flat = learner.Learner._flatten(batch)
        first = flat["a_prev"][np.nonzero(flat["b_idx"][:, None] ==
                                          np.arange(3))[0][:3]]
        # the first valid transition of each episode reports -1 sentinels
        b_idx = flat["b_idx"]
        for b in range(3):
            row = np.flatnonzero(b_idx == b)[0]
            assert (flat["a_prev"][row] == -1).all()

    def test_flatten_skips_padded(self):
        lrn, env_cfg = tiny_learner()
        mask = np.ones((2, 4))
        mask[1, 2:] = 0.0
        batch = synthetic_batch(env_cfg, np.random.default_rng(1), B=2,
                                mask=mask)
        flat = learner.Learner._flatten(batch)
        assert len(flat["r"]) == 6
        assert batch.n_valid == 6


# ---------------------------------------------------------------------------
# target bank and syncing
# ---------------------------------------------------------------------------

class TestTargetSync:
    def sync_steps(self, lrn, horizon):
        hits = {i: [] for i in range(lrn.m)}
        for t in range(horizon + 1):
            for i in lrn.sync_targets(t):
                hits[i].append(t)
        return hits

    def test_staggered_offsets_m2(self):
        lrn, _ = tiny_learner(algo="twinqmix", m=2, update_interval=200)
        hits = self.sync_steps(lrn, 600)
        assert hits[0] == [0, 200, 400, 600]
        assert hits[1] == [100, 300, 500]

    def test_simultaneous_mode(self):
        lrn, _ = tiny_learner(algo="twinqmix", m=2, update_interval=200,
                              target_sync="simultaneous")
        hits = self.sync_steps(lrn, 400)
        assert hits[0] == hits[1] == [0, 200, 400]

    def test_single_target_periodic(self):
        lrn, _ = tiny_learner(m=1, update_interval=150)
        hits = self.sync_steps(lrn, 450)
        assert hits[0] == [0, 150, 300, 450]

    def test_sync_copies_values(self):
        lrn, env_cfg = tiny_learner(algo="twinqmix", m=2, update_interval=100)
        lrn.params.values("agent.l0.W")[...] += 1.0
        lrn.sync_targets(0)  # only target 0 due at t=0
        assert np.array_equal(lrn.targets[0].values("agent.l0.W"),
                              lrn.params.values("agent.l0.W"))
        assert not np.array_equal(lrn.targets[1].values("agent.l0.W"),
                                  lrn.params.values("agent.l0.W"))

    def test_min_dominance_and_gradient_free_targets(self):
        ok, detail = checks.check_target_properties()
        assert ok, detail


# ---------------------------------------------------------------------------
# TD target arithmetic
# ---------------------------------------------------------------------------

class TestTdTarget:
    def test_hand_computed_two_targets(self):
        lrn, env_cfg = tiny_learner(algo="twinqmix", m=2)
        batch = synthetic_batch(env_cfg, np.random.default_rng(3))
        batch.rewards[...] = 1.0
        S = batch.n_valid
        lrn._target_totals = lambda flat: np.stack(
            [np.full(S, 3.0), np.full(S, 2.5)])
        y = lrn.td_target(batch)
        assert np.allclose(y, 1.0 + 0.99 * 2.5)  # 3.475

    def test_terminal_drops_bootstrap(self):
        lrn, env_cfg = tiny_learner()
        batch = synthetic_batch(env_cfg, np.random.default_rng(4),
                                terminated=True)
        batch.rewards[...] = 2.0
        S = batch.n_valid
        lrn._target_totals = lambda flat: np.full((1, S), 7.0)
        y = lrn.td_target(batch)
        assert np.allclose(y[:, -1], 2.0)
        assert np.allclose(y[:, :-1], 2.0 + 0.99 * 7.0)

    def test_m1_reduction_is_identity(self):
        lrn, env_cfg = tiny_learner(m=1)
        batch = synthetic_batch(env_cfg, np.random.default_rng(5))
        flat = learner.Learner._flatten(batch)
        stack = lrn._target_totals(flat)
        assert stack.shape[0] == 1
        assert np.array_equal(stack.min(axis=0), stack[0])

    def test_identical_targets_min_is_noop(self):
        lrn, env_cfg = tiny_learner(algo="twinqmix", m=2)
        lrn.targets[1].sync_from(lrn.targets[0])
        batch = synthetic_batch(env_cfg, np.random.default_rng(6))
        stack = lrn._target_totals(learner.Learner._flatten(batch))
        assert np.array_equal(stack[0], stack[1])

    def test_padded_entries_stay_zero(self):
        lrn, env_cfg = tiny_learner()
        mask = np.ones((2, 4))
        mask[0, 1:] = 0.0
        batch = synthetic_batch(env_cfg, np.random.default_rng(7), B=2,
                                mask=mask)
        y = lrn.td_target(batch)
        assert np.array_equal(y[0, 1:], np.zeros(3))

    def test_iql_joint_grid_rejected(self):
        lrn, env_cfg = tiny_learner(algo="iql")
        batch = synthetic_batch(env_cfg, np.random.default_rng(8))
        with pytest.raises(learner.LearnerError):
            lrn.td_target(batch)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

class TestLoss:
    def test_zero_when_targets_match_online(self):
        lrn, env_cfg = tiny_learner()
        batch = synthetic_batch(env_cfg, np.random.default_rng(9))
        flat = learner.Learner._flatten(batch)
        qt = online_q_tot(lrn, flat)
        lrn._target_totals = lambda f: ((qt - f["r"]) / 0.99)[None]
        loss, stats = lrn.compute_loss(batch)
        assert stats.loss == pytest.approx(0.0, abs=1e-20)
        assert stats.abs_td_error == pytest.approx(0.0, abs=1e-12)

    def test_constant_offset_two(self):
        # diff = 2 everywhere: loss = 0.5 * sum(4) / S = 2.0
        lrn, env_cfg = tiny_learner()
        batch = synthetic_batch(env_cfg, np.random.default_rng(10))
        flat = learner.Learner._flatten(batch)
        qt = online_q_tot(lrn, flat)
        lrn._target_totals = lambda f: ((qt + 2.0 - f["r"]) / 0.99)[None]
        loss, stats = lrn.compute_loss(batch)
        assert stats.loss == pytest.approx(2.0)
        assert stats.abs_td_error == pytest.approx(2.0)

    def test_loss_matches_td_target_view(self):
        # the graph loss and the NumPy target view agree on y (beta > 0)
        lrn, buf = checks.micro_setup(algo="emix", beta=0.05, m=2)
        batch = buf.sample(np.random.default_rng(1))
        flat = learner.Learner._flatten(batch)
        _, stats = lrn.compute_loss(batch)
        y = lrn.td_target(batch)
        b_idx, t_idx = np.nonzero(batch.mask > 0.5)
        qt = online_q_tot(lrn, flat)
        expected = float(0.5 * ((y[b_idx, t_idx] - qt) ** 2).sum() / len(qt))
        assert stats.loss == pytest.approx(expected, rel=1e-12)

    def test_gradient_fidelity(self):
        ok, detail = checks.check_gradient_fidelity()
        assert ok, detail

    def test_padded_region_is_inert(self):
        # scrambling data reachable only through masked steps changes nothing
        lrn, env_cfg = tiny_learner(algo="emix", beta=0.05, m=2)
        mask = np.ones((3, 4))
        mask[1, 2:] = 0.0  # valid t = 0,1 -> state/obs indices 0..2 used
        rng = np.random.default_rng(11)
        batch = synthetic_batch(env_cfg, rng, mask=mask)
        _, before = lrn.compute_loss(batch)
        batch.states[1, 3:] = rng.normal(size=(2, env_cfg.state_dim)) * 50
        batch.observations[1, 3:] = rng.normal(
            size=(2, env_cfg.n_agents, env_cfg.obs_dim)) * 50
        batch.rewards[1, 2:] = 99.0
        batch.actions[1, 2:] = 0
        _, after = lrn.compute_loss(batch)
        assert after.loss == before.loss
        assert after.e_mean == before.e_mean

    def test_iql_per_agent_terms(self):
        lrn, env_cfg = tiny_learner(algo="iql")
        batch = synthetic_batch(env_cfg, np.random.default_rng(12))
        _, stats = lrn.compute_loss(batch)
        assert np.isfinite(stats.loss)
        assert stats.e_mean == 0.0

    def test_empty_batch_rejected(self):
        lrn, env_cfg = tiny_learner()
        batch = synthetic_batch(env_cfg, np.random.default_rng(13),
                                mask=np.zeros((3, 4)))
        with pytest.raises(learner.LearnerError):
            lrn.compute_loss(batch)

    def test_frozen_surprise_head_gets_no_gradient(self):
        lrn, buf = checks.micro_setup(algo="emix", beta=0.05, m=2)
        lrn.cfg.surprise_grads = False
        batch = buf.sample(np.random.default_rng(2))
        lrn.params.zero_grads()
        loss, _ = lrn.compute_loss(batch)
        loss.backward()
        surp = sum(float(np.abs(lrn.params.grad(n)).sum())
                   for n in lrn.params.names() if n.startswith("surp."))
        assert surp == 0.0


# ---------------------------------------------------------------------------
# reductions and config
# ---------------------------------------------------------------------------

class TestReductions:
    def test_lattice_bit_identity(self):
        ok, detail = checks.check_reduction_lattice(n_updates=30)
        assert ok, detail

    def test_effective_defaults(self):
        assert learner.LearnerConfig(algo="emix").effective_m == 2
        assert learner.LearnerConfig(algo="twinqmix").effective_m == 2
        assert learner.LearnerConfig(algo="qmix").effective_m == 1
        assert learner.LearnerConfig(algo="qmix", m=3).effective_m == 3
        assert learner.LearnerConfig(algo="qmix", beta=0.5).effective_beta == 0.0
        assert learner.LearnerConfig(algo="emix", beta=0.5).effective_beta == 0.5
        assert learner.LearnerConfig(algo="vdn").effective_mixer_kind == "vdn"
        assert not learner.LearnerConfig(algo="twinqmix").uses_energy

    def test_config_validation(self):
        with pytest.raises(learner.LearnerError):
            learner.LearnerConfig(algo="qlearning")
        with pytest.raises(learner.LearnerError):
            learner.LearnerConfig(beta=-0.1)
        with pytest.raises(learner.LearnerError):
            learner.LearnerConfig(gamma=1.0)
        with pytest.raises(learner.LearnerError):
            learner.LearnerConfig(m=0)

    def test_surprise_params_exist_for_baselines(self):
        # required for the bit-identical reductions: every algo draws the
        # same initialization sequence
        lrn_q, _ = tiny_learner(algo="qmix")
        lrn_e, _ = tiny_learner(algo="emix")
        assert lrn_q.params.names() == lrn_e.params.names()
        assert any(n.startswith("surp.") for n in lrn_q.params.names())


# ---------------------------------------------------------------------------
# run loop
# ---------------------------------------------------------------------------

def tiny_run_cfg(algo="emix", total_steps=400):
    return learner.RunConfig(
        env=EnvConfig(**TINY_ENV),
        learner=learner.LearnerConfig(
            algo=algo, agent_hidden=6, surprise_hidden=6, embed_dim=4,
            hypernet_hidden=5, batch_size=2, buffer_capacity=32,
            train_every=8, update_interval=100, epsilon_anneal_steps=200),
        total_steps=total_steps, eval_interval=200, eval_episodes=4)


class TestRunLoop:
    def test_train_run_deterministic(self, tmp_path):
        m1 = learner.train_run(tiny_run_cfg(), seed=5)
        m2 = learner.train_run(tiny_run_cfg(), seed=5,
                               metrics_path=tmp_path / "m.jsonl")
        assert m1 == m2
        assert (tmp_path / "m.jsonl").read_text().count("\n") == len(m2)

    def test_seed_changes_trajectory(self):
        m1 = learner.train_run(tiny_run_cfg(), seed=5)
        m2 = learner.train_run(tiny_run_cfg(), seed=6)
        assert m1 != m2

    def test_metrics_schema(self):
        recs = learner.train_run(tiny_run_cfg(), seed=1)
        keys = {"step", "success_rate", "mean_return", "abs_td_error",
                "energy_ratio_mean", "epsilon", "loss"}
        assert all(set(r) == keys for r in recs)
        assert recs[0]["step"] == 0
        assert recs[-1]["step"] == 400
        steps = [r["step"] for r in recs]
        assert steps == sorted(steps)

    def test_checkpoint_written_and_loadable(self, tmp_path):
        path = tmp_path / "final.ckpt"
        learner.train_run(tiny_run_cfg(total_steps=200), seed=2,
                          checkpoint_path=path)
        loaded = nn.load_checkpoint(path)
        assert any(n.startswith("agent.") for n in loaded.names())

    def test_random_policy_floor(self):
        rate = learner.random_policy_success(EnvConfig(**TINY_ENV),
                                             n_episodes=50)
        assert 0.0 <= rate <= 1.0
        again = learner.random_policy_success(EnvConfig(**TINY_ENV),
                                              n_episodes=50)
        assert rate == again
