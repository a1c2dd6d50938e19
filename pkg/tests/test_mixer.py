"""Mixing heads: additive, monotonic, hypernetworks."""

import numpy as np
import pytest

from emixlab import checks, mixer, nn


def qmix_setup(state_dim=6, n_agents=3, seed=0, **kw):
    cfg = mixer.MixerConfig(**kw)
    ps = nn.ParamSet()
    mixer.init_mixer_params(cfg, state_dim, n_agents, ps, np.random.default_rng(seed))
    return cfg, ps


class TestMix:
    def test_vdn_is_additive(self):
        cfg = mixer.MixerConfig(kind="vdn")
        out = mixer.mix(np.array([[1.0, 2.0, 3.0]]), np.zeros((1, 4)), cfg,
                        nn.ParamSet())
        assert np.array_equal(out, [6.0])

    def test_iql_passthrough(self):
        cfg = mixer.MixerConfig(kind="iql")
        q = np.array([[1.0, 2.0]])
        assert mixer.mix(q, np.zeros((1, 3)), cfg, nn.ParamSet()) is q

    def test_qmix_zero_weights_reduces_to_state_bias(self):
        cfg, ps = qmix_setup()
        for name in ps.names():
            ps.values(name)[...] = 0.0
        rng = np.random.default_rng(1)
        ps.values("mixer.hyper_b2_0.W")[...] = rng.normal(size=(6, cfg.hypernet_hidden))
        ps.values("mixer.hyper_b2_1.W")[...] = rng.normal(size=(cfg.hypernet_hidden, 1))
        state = rng.normal(size=(5, 6))
        q1 = nn._data(mixer.mix(rng.normal(size=(5, 3)), state, cfg, ps))
        q2 = nn._data(mixer.mix(rng.normal(size=(5, 3)), state, cfg, ps))
        assert np.allclose(q1, q2)  # independent of agent values
        h = mixer.hypernet_forward(state, cfg, 6, 3, ps)
        assert np.allclose(q1, h["b2"][:, 0])

    def test_monotone_gradients_analytic_and_fd(self):
        ok, detail = checks.check_monotonic_mixing(n_instances=200)
        assert ok, detail

    def test_wrong_kind_rejected(self):
        with pytest.raises(mixer.MixerConfigError):
            mixer.MixerConfig(kind="qtran")


class TestHypernet:
    def test_zero_params_zero_weights(self):
        cfg, ps = qmix_setup()
        for name in ps.names():
            ps.values(name)[...] = 0.0
        h = mixer.hypernet_forward(np.random.default_rng(0).normal(size=(3, 6)),
                                   cfg, 6, 3, ps)
        assert not np.any(h["W1"])
        assert not np.any(h["W2"])

    def test_abs_invariance_under_negation(self):
        cfg, ps = qmix_setup(seed=2)
        state = np.random.default_rng(3).normal(size=(4, 6))
        h1 = mixer.hypernet_forward(state, cfg, 6, 3, ps)
        ps.values("mixer.hyper_w1.W")[...] *= -1.0
        ps.values("mixer.hyper_w1.b")[...] *= -1.0
        h2 = mixer.hypernet_forward(state, cfg, 6, 3, ps)
        assert np.allclose(h1["W1"], h2["W1"])

    def test_gradient_vs_finite_differences(self):
        cfg, ps = qmix_setup(seed=4, embed_dim=4, hypernet_hidden=5)
        rng = np.random.default_rng(5)
        q = rng.normal(size=(3, 3))
        state = rng.normal(size=(3, 6))
        rep = nn.finite_diff_check(
            lambda p: nn.asum(mixer.mix(q, state, cfg, p, trainable=True)),
            ps, tol=1e-4, rng=rng)
        assert rep.passed, rep

    def test_dim_mismatch(self):
        cfg, ps = qmix_setup()
        with pytest.raises(nn.DimensionError):
            mixer.hypernet_forward(np.zeros((2, 9)), cfg, 6, 3, ps)


class TestProperties:
    def test_vdn_equals_qmix_with_forced_ones(self):
        ok, detail = checks.check_vdn_qmix_equivalence()
        assert ok, detail

    def test_greedy_attains_joint_maximum(self):
        ok, detail = checks.check_argmax_consistency(n_instances=200)
        assert ok, detail
