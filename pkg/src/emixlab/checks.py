"""Property and oracle suite behind the ``check`` CLI subcommand.

Each check returns (passed, detail). The same functions back the acceptance
test module, so the CLI gate and pytest agree by construction. Training
experiments (the slow, directional criteria) are not here; see the
acceptance tests.
"""

from __future__ import annotations

import numpy as np

from . import agent as agent_mod
from . import learner as learner_mod
from . import mixer as mixer_mod
from . import nn
from . import surprise as surprise_mod
from .env import EnvConfig, SpuriousCaptureEnv


# ---------------------------------------------------------------------------
# 1. Energy operator properties
# ---------------------------------------------------------------------------

def check_energy_operator(n_vectors: int = 10_000, seed: int = 0,
                          slack: float = 1e-9):
    """Non-expansiveness, monotonicity, shift-equivariance and the
    max <= LSE <= max + ln N bounds on random vectors up to 1e6 magnitude."""
    rng = np.random.default_rng(seed)
    violations = {"nonexpansive": 0, "monotone": 0, "shift": 0, "bounds": 0}
    worst = 0.0
    for _ in range(n_vectors):
        n = int(rng.integers(1, 9))
        x = rng.uniform(-1e6, 1e6, (1, n))
        y = rng.uniform(-1e6, 1e6, (1, n))
        lx = surprise_mod.energy_lse(x)[0]
        ly = surprise_mod.energy_lse(y)[0]
        gap = abs(lx - ly) - np.max(np.abs(x - y))
        worst = max(worst, gap)
        if gap > slack:
            violations["nonexpansive"] += 1
        up = x + np.abs(rng.uniform(0, 1e5, (1, n)))
        if surprise_mod.energy_lse(up)[0] < lx - slack:
            violations["monotone"] += 1
        c = rng.uniform(-1e5, 1e5)
        if abs(surprise_mod.energy_lse(x + c)[0] - (lx + c)) > slack * max(1.0, abs(c)):
            violations["shift"] += 1
        if not (x.max() - slack <= lx <= x.max() + np.log(n) + slack):
            violations["bounds"] += 1
    total = sum(violations.values())
    return total == 0, f"violations={violations}, worst nonexpansive gap={worst:.2e}"


# ---------------------------------------------------------------------------
# 2. Gradient fidelity
# ---------------------------------------------------------------------------

def micro_setup(algo: str = "emix", beta: float = 0.05, m: int = 2,
                seed: int = 11, n_episodes: int = 3, batch_size: int = 2,
                mixer_kind=None, perturb_targets: bool = True):
    """2-agent micro instance (dims <= 8, T=3) with a filled replay buffer."""
    env_cfg = EnvConfig(grid_size=4, n_agents=2, n_prey=1, sight_radius=2,
                        episode_limit=3, p_storm=0.3, storm_duration=2,
                        seed=seed)
    lrn_cfg = learner_mod.LearnerConfig(
        algo=algo, beta=beta, m=m, batch_size=batch_size, buffer_capacity=16,
        agent_hidden=6, surprise_hidden=6, embed_dim=4, hypernet_hidden=5,
        mixer_kind=mixer_kind)
    rng = np.random.default_rng(seed)
    lrn = learner_mod.Learner(env_cfg, lrn_cfg, rng)
    env = SpuriousCaptureEnv(env_cfg)
    buf = learner_mod.ReplayBuffer(16, batch_size)
    for _ in range(n_episodes):
        state, obs = env.reset()
        rec = learner_mod.EpisodeRecorder(env_cfg, state, obs)
        while True:
            a = rng.integers(0, 6, env_cfg.n_agents)
            res = env.step(a)
            rec.record(a, res)
            if res.terminated or res.truncated:
                break
        buf.insert(rec.episode())
    if perturb_targets:
        prng = np.random.default_rng(seed + 1)
        for tp in lrn.targets:
            for p in tp.items():
                p.values += prng.normal(0, 0.1, p.values.shape)
    return lrn, buf


def check_gradient_fidelity(seed: int = 11, tol: float = 1e-4):
    """Finite-difference agreement for the full EMIX loss, the mixer alone
    and the surprise head alone (central differences, h=1e-5)."""
    rng = np.random.default_rng(seed)
    details = []
    ok = True

    lrn, buf = micro_setup(seed=seed)
    batch = buf.sample(np.random.default_rng(seed + 2))
    rep = nn.finite_diff_check(lambda p: lrn.compute_loss(batch)[0],
                               lrn.params, tol=tol,
                               rng=np.random.default_rng(seed + 3),
                               max_coords=150)
    ok &= rep.passed
    details.append(f"full-loss {rep.max_rel_error:.2e} ({rep.worst_param})")

    mcfg = mixer_mod.MixerConfig(embed_dim=4, hypernet_hidden=5)
    mparams = nn.ParamSet()
    mixer_mod.init_mixer_params(mcfg, 6, 3, mparams, rng)
    state = rng.normal(size=(4, 6))
    q = rng.normal(size=(4, 3))
    rep = nn.finite_diff_check(
        lambda p: nn.asum(mixer_mod.mix(q, state, mcfg, p, trainable=True)),
        mparams, tol=tol, rng=np.random.default_rng(seed + 4), max_coords=150)
    ok &= rep.passed
    details.append(f"mixer {rep.max_rel_error:.2e}")

    scfg = surprise_mod.SurpriseNetConfig(state_dim=6, n_agents=2,
                                          n_actions=4, obs_dim=5, hidden=6)
    sparams = nn.ParamSet()
    surprise_mod.init_surprise_params(scfg, sparams, rng)
    x = surprise_mod.build_surprise_inputs(
        scfg, rng.normal(size=(4, 6)), rng.integers(0, 4, (4, 2)),
        np.abs(rng.normal(size=(2, 5))))
    rep = nn.finite_diff_check(
        lambda p: nn.asum(surprise_mod.energy_lse(
            surprise_mod.surprise_forward(scfg, x, p, trainable=True))),
        sparams, tol=tol, rng=np.random.default_rng(seed + 5), max_coords=150)
    ok &= rep.passed
    details.append(f"surprise {rep.max_rel_error:.2e}")
    return ok, "; ".join(details)


# ---------------------------------------------------------------------------
# 3. Monotonic mixing and greedy/joint-argmax consistency
# ---------------------------------------------------------------------------

def check_monotonic_mixing(n_instances: int = 1000, seed: int = 3,
                           fd_subsample: int = 50):
    rng = np.random.default_rng(seed)
    cfg = mixer_mod.MixerConfig()
    params = nn.ParamSet()
    state_dim, n_agents = 8, 3
    mixer_mod.init_mixer_params(cfg, state_dim, n_agents, params, rng)
    states = rng.normal(size=(n_instances, state_dim))
    qs = rng.normal(size=(n_instances, n_agents)) * 3.0
    grads = mixer_mod.mix_grad_wrt_q(qs, states, cfg, params)
    analytic_ok = bool((grads >= 0.0).all())
    # forward-difference confirmation on a subsample
    h = 1e-4
    fd_ok = True
    base = nn._data(mixer_mod.mix(qs[:fd_subsample], states[:fd_subsample],
                                  cfg, params))
    for a in range(n_agents):
        qp = qs[:fd_subsample].copy()
        qp[:, a] += h
        up = nn._data(mixer_mod.mix(qp, states[:fd_subsample], cfg, params))
        fd = (up - base) / h
        if np.any(fd < -1e-6) or np.max(np.abs(fd - grads[:fd_subsample, a])) > 1e-2:
            fd_ok = False
    return (analytic_ok and fd_ok,
            f"min analytic grad {grads.min():.3e}, fd agreement {fd_ok}")


def check_argmax_consistency(n_instances: int = 1000, seed: int = 4,
                             n_agents: int = 3, n_actions: int = 4):
    """Per-agent greedy actions attain the brute-force joint maximum of
    q_tot under monotonic mixing (exhaustive enumeration oracle)."""
    rng = np.random.default_rng(seed)
    cfg = mixer_mod.MixerConfig(embed_dim=8, hypernet_hidden=8)
    params = nn.ParamSet()
    state_dim = 5
    mixer_mod.init_mixer_params(cfg, state_dim, n_agents, params, rng)
    joint = np.stack(np.meshgrid(*[np.arange(n_actions)] * n_agents,
                                 indexing="ij"), axis=-1).reshape(-1, n_agents)
    hits = 0
    for _ in range(n_instances):
        q_table = rng.normal(size=(n_agents, n_actions)) * 2.0
        state = rng.normal(size=(1, state_dim))
        chosen_all = q_table[np.arange(n_agents), joint]  # [4^N x N]
        totals = nn._data(mixer_mod.mix(
            chosen_all, np.repeat(state, len(joint), axis=0), cfg, params))
        greedy = q_table.argmax(axis=1)
        greedy_total = totals[np.flatnonzero((joint == greedy).all(axis=1))[0]]
        if greedy_total >= totals.max() - 1e-9:
            hits += 1
    return hits == n_instances, f"{hits}/{n_instances} exhaustive matches"


def check_vdn_qmix_equivalence(seed: int = 5, n: int = 64):
    """With W1, W2 forced to all-ones and biases zero the qmix head reduces
    to the additive vdn head."""
    rng = np.random.default_rng(seed)
    cfg = mixer_mod.MixerConfig(embed_dim=1)
    params = nn.ParamSet()
    state_dim, n_agents = 4, 3
    mixer_mod.init_mixer_params(cfg, state_dim, n_agents, params, rng)
    for name in params.names():
        params.values(name)[...] = 0.0
    # with embed_dim=1: W1 = |0 . s + 1| = ones, W2 likewise, biases zero;
    # elu is identity on the non-negative pre-activations handled below
    params.values("mixer.hyper_w1.b")[...] = 1.0
    params.values("mixer.hyper_w2.b")[...] = 1.0
    q = np.abs(rng.normal(size=(n, n_agents)))  # keep elu input >= 0
    state = rng.normal(size=(n, state_dim))
    qmix_out = nn._data(mixer_mod.mix(q, state, cfg, params))
    vdn_out = nn._data(mixer_mod.mix(q, state,
                                     mixer_mod.MixerConfig(kind="vdn"), params))
    gap = np.max(np.abs(qmix_out - vdn_out))
    return gap < 1e-12, f"max |qmix - vdn| = {gap:.2e}"


# ---------------------------------------------------------------------------
# 4. Reduction lattice
# ---------------------------------------------------------------------------

def _loss_sequence(algo: str, m, beta: float, mixer_kind, n_updates: int,
                   seed: int):
    lrn, buf = micro_setup(algo=algo, beta=beta, m=m, mixer_kind=mixer_kind,
                           seed=seed, n_episodes=6, batch_size=3,
                           perturb_targets=False)
    replay_rng = np.random.default_rng(seed + 7)
    losses = []
    for k in range(n_updates):
        lrn.sync_targets(k * 10)  # staggered syncs on a shared clock
        losses.append(lrn.train_step(buf.sample(replay_rng)).loss)
    return losses


def check_reduction_lattice(n_updates: int = 50, seed: int = 21):
    """EMIX(beta=0, m=1) == QMIX, EMIX(beta=0, m=2) == TwinQMIX and the VDN
    reduction, as bit-identical loss sequences on a fixed seeded buffer."""
    pairs = [
        ("emix(b=0,m=1) vs qmix",
         ("emix", 1, 0.0, None), ("qmix", 1, 0.0, None)),
        ("emix(b=0,m=2) vs twinqmix",
         ("emix", 2, 0.0, None), ("twinqmix", 2, 0.0, None)),
        ("emix(b=0,m=1,vdn) vs vdn",
         ("emix", 1, 0.0, "vdn"), ("vdn", 1, 0.0, None)),
    ]
    ok = True
    details = []
    for label, (a1, m1, b1, k1), (a2, m2, b2, k2) in pairs:
        s1 = _loss_sequence(a1, m1, b1, k1, n_updates, seed)
        s2 = _loss_sequence(a2, m2, b2, k2, n_updates, seed)
        same = s1 == s2
        ok &= same
        details.append(f"{label}: {'bit-identical' if same else 'DIVERGED'}")
    return ok, "; ".join(details)


# ---------------------------------------------------------------------------
# 5. Target-min dominance and gradient-free targets
# ---------------------------------------------------------------------------

def check_target_properties(seed: int = 31):
    lrn, buf = micro_setup(seed=seed, m=3, beta=0.05)
    batch = buf.sample(np.random.default_rng(seed + 1))
    flat = lrn._flatten(batch)
    stack = lrn._target_totals(flat)
    dominance = bool((stack.min(axis=0)[None] <= stack + 1e-12).all())

    # analytic target grads are structurally absent: finite differences on a
    # target parameter move the loss, yet the optimizer sees zero gradient
    lrn.params.zero_grads()
    loss, _ = lrn.compute_loss(batch)
    loss.backward()
    base = float(nn._data(loss))
    # shift every target's output bias so the element-wise min must move
    delta = 0.1
    for tp in lrn.targets:
        tp.values("agent.l2.b")[...] += delta
    moved = float(nn._data(lrn.compute_loss(batch)[0]))
    for tp in lrn.targets:
        tp.values("agent.l2.b")[...] -= delta
    y_changes = abs(moved - base) > 1e-9
    target_grads_zero = all(
        not np.any(q.grad) for tp in lrn.targets for q in tp.items())

    # the only online-surprise gradient path is beta * E
    surp_grad = sum(float(np.abs(lrn.params.grad(n)).sum())
                    for n in lrn.params.names() if n.startswith("surp."))
    beta_path = surp_grad > 0.0
    lrn0, buf0 = micro_setup(seed=seed, m=3, beta=0.0)
    batch0 = buf0.sample(np.random.default_rng(seed + 1))
    lrn0.params.zero_grads()
    loss0, _ = lrn0.compute_loss(batch0)
    loss0.backward()
    surp_grad0 = sum(float(np.abs(lrn0.params.grad(n)).sum())
                     for n in lrn0.params.names() if n.startswith("surp."))
    ok = dominance and y_changes and target_grads_zero and beta_path and surp_grad0 == 0.0
    return ok, (f"dominance={dominance}, y moves under target perturbation="
                f"{y_changes}, target grads zero={target_grads_zero}, "
                f"surprise grad (beta>0)={surp_grad:.2e}, (beta=0)={surp_grad0:.2e}")


# ---------------------------------------------------------------------------

ALL_CHECKS = [
    ("energy operator properties", check_energy_operator),
    ("gradient fidelity", check_gradient_fidelity),
    ("monotonic mixing", check_monotonic_mixing),
    ("greedy/joint argmax consistency", check_argmax_consistency),
    ("vdn/qmix forced equivalence", check_vdn_qmix_equivalence),
    ("reduction lattice", check_reduction_lattice),
    ("target properties", check_target_properties),
]


def run_all(verbose: bool = True) -> bool:
    all_ok = True
    for name, fn in ALL_CHECKS:
        ok, detail = fn()
        all_ok &= ok
        if verbose:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return all_ok
