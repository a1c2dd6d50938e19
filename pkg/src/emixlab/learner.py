"""Training objective and loop: EMIX plus the QMIX/TwinQMIX/VDN/IQL family.

The TD target is y = r + gamma * (1 - terminated) * min_i max_u' Q_tot,i
+ beta * E, where the min runs over m periodically-synced target copies and
E is the energy ratio from the surprise head. The target is gradient-free
except through the online half of beta * E.

Target syncing defaults to staggered offsets (target i syncs at steps
i * update_interval / m, i * update_interval / m + update_interval, ...):
syncing all copies simultaneously would make the min-reduction degenerate
between syncs, so the simultaneous variant is kept only as a config switch.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import agent as agent_mod
from . import mixer as mixer_mod
from . import nn
from . import surprise as surprise_mod
from .env import EnvConfig, SpuriousCaptureEnv, N_ACTIONS

ALGOS = ("emix", "qmix", "twinqmix", "vdn", "iql")
SYNC_MODES = ("staggered", "simultaneous")
TARGET_REDUCTIONS = ("min_of_maxes", "max_of_mins")
SIGMA_POOLINGS = ("batch", "episode")


class LearnerError(Exception):
    pass


class ReplayUsageError(LearnerError):
    pass


# ---------------------------------------------------------------------------
# Episode storage
# ---------------------------------------------------------------------------

@dataclass
class EpisodeBatch:
    """Padded, masked storage of sampled episodes.

    states       [B x T+1 x state_dim]
    observations [B x T+1 x n_agents x obs_dim]
    actions      [B x T x n_agents]
    rewards      [B x T]
    mask         [B x T]   (1 = valid transition)
    terminated   [B x T]
    """
    states: np.ndarray
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    mask: np.ndarray
    terminated: np.ndarray

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


class EpisodeRecorder:
    """Accumulates one episode and pads it to the episode limit."""

    def __init__(self, cfg: EnvConfig, first_state, first_obs):
        T = cfg.episode_limit
        self.states = np.zeros((T + 1, cfg.state_dim))
        self.observations = np.zeros((T + 1, cfg.n_agents, cfg.obs_dim))
        self.actions = np.zeros((T, cfg.n_agents), dtype=np.int64)
        self.rewards = np.zeros(T)
        self.mask = np.zeros(T)
        self.terminated = np.zeros(T)
        self.states[0] = first_state
        self.observations[0] = first_obs
        self.t = 0

    def record(self, actions, result) -> None:
        t = self.t
        self.actions[t] = actions
        self.rewards[t] = result.reward
        self.mask[t] = 1.0
        self.terminated[t] = 1.0 if result.terminated else 0.0
        self.states[t + 1] = result.state
        self.observations[t + 1] = result.observations
        self.t += 1

    def episode(self) -> dict:
        return {"states": self.states, "observations": self.observations,
                "actions": self.actions, "rewards": self.rewards,
                "mask": self.mask, "terminated": self.terminated}


class ReplayBuffer:
    """Circular episode buffer with uniform without-replacement sampling."""

    def __init__(self, capacity: int, batch_size: int):
        if capacity <= batch_size:
            raise LearnerError("buffer capacity must exceed batch_size")
        self.capacity = capacity
        self.batch_size = batch_size
        self._episodes: list[dict] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._episodes)

    def insert(self, episode: dict) -> None:
        if len(self._episodes) < self.capacity:
            self._episodes.append(episode)
        else:
            self._episodes[self._next] = episode  # oldest-first eviction
            self._next = (self._next + 1) % self.capacity

    @property
    def can_sample(self) -> bool:
        return len(self._episodes) > self.batch_size

    def sample(self, rng: np.random.Generator,
               batch_size: Optional[int] = None) -> EpisodeBatch:
        n = batch_size if batch_size is not None else self.batch_size
        if len(self._episodes) <= n:
            raise ReplayUsageError(
                f"cannot sample {n} episodes from a buffer of {len(self._episodes)}")
        idx = rng.choice(len(self._episodes), size=n, replace=False)
        eps = [self._episodes[i] for i in idx]
        return EpisodeBatch(**{k: np.stack([e[k] for e in eps])
                               for k in eps[0]})


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class LearnerConfig:
    algo: str = "emix"
    m: Optional[int] = None          # target estimators; default 2 for emix/twinqmix
    beta: float = 0.01
    gamma: float = 0.99
    batch_size: int = 32
    buffer_capacity: int = 5000
    update_interval: int = 10_000    # env steps between target syncs
    train_every: int = 50            # env steps per gradient step
    mixer_kind: Optional[str] = None  # override the algo-derived mixer
    embed_dim: int = 32
    hypernet_hidden: int = 64
    agent_hidden: int = 64
    surprise_hidden: int = 64
    target_sync: str = "staggered"
    target_reduction: str = "min_of_maxes"
    energy_order: str = "target_over_online"
    sigma_pooling: str = "batch"
    surprise_grads: bool = True      # freeze the surprise head when False
    learning_rate: float = 5e-4
    optimizer_decay: float = 0.99
    optimizer_epsilon: float = 1e-5
    grad_clip_norm: Optional[float] = 10.0
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_anneal_steps: int = 50_000

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise LearnerError(f"unknown algo '{self.algo}'")
        if self.target_sync not in SYNC_MODES:
            raise LearnerError(f"unknown target_sync '{self.target_sync}'")
        if self.target_reduction not in TARGET_REDUCTIONS:
            raise LearnerError(f"unknown target_reduction '{self.target_reduction}'")
        if self.sigma_pooling not in SIGMA_POOLINGS:
            raise LearnerError(f"unknown sigma_pooling '{self.sigma_pooling}'")
        if self.beta < 0.0:
            raise LearnerError("beta must be >= 0")
        if not (0.0 <= self.gamma < 1.0):
            raise LearnerError("gamma must be in [0, 1)")
        if self.m is not None and self.m < 1:
            raise LearnerError("m must be >= 1")

    @property
    def effective_m(self) -> int:
        if self.m is not None:
            return self.m
        return 2 if self.algo in ("emix", "twinqmix") else 1

    @property
    def effective_beta(self) -> float:
        # surprise minimization is the emix contribution; baselines run beta=0
        return self.beta if self.algo == "emix" else 0.0

    @property
    def effective_mixer_kind(self) -> str:
        if self.mixer_kind is not None:
            return self.mixer_kind
        if self.algo in ("vdn", "iql"):
            return self.algo
        return "qmix"

    @property
    def uses_energy(self) -> bool:
        # emix always evaluates E (even at beta=0, where it contributes an
        # exact zero); the baselines never build the surprise path
        return self.algo == "emix"


# ---------------------------------------------------------------------------
# Learner
# ---------------------------------------------------------------------------

@dataclass
class TrainStats:
    loss: float
    abs_td_error: float
    e_mean: float


class Learner:
    """Online parameters, target bank, and the loss/target computation."""

    def __init__(self, env_cfg: EnvConfig, cfg: LearnerConfig,
                 init_rng: np.random.Generator):
        self.env_cfg = env_cfg
        self.cfg = cfg
        self.agent_cfg = agent_mod.AgentNetConfig(
            obs_dim=env_cfg.obs_dim, n_agents=env_cfg.n_agents,
            n_actions=N_ACTIONS, hidden=cfg.agent_hidden)
        self.mixer_cfg = mixer_mod.MixerConfig(
            kind=cfg.effective_mixer_kind, embed_dim=cfg.embed_dim,
            hypernet_hidden=cfg.hypernet_hidden)
        self.surp_cfg = surprise_mod.SurpriseNetConfig(
            state_dim=env_cfg.state_dim, n_agents=env_cfg.n_agents,
            n_actions=N_ACTIONS, obs_dim=env_cfg.obs_dim,
            hidden=cfg.surprise_hidden)

        # one ParamSet holds agent net, mixer/hypernets and surprise head;
        # surprise params exist for every algo so init draws line up across
        # the reduction lattice
        self.params = nn.ParamSet()
        agent_mod.init_agent_params(self.agent_cfg, self.params, init_rng)
        mixer_mod.init_mixer_params(self.mixer_cfg, env_cfg.state_dim,
                                    env_cfg.n_agents, self.params, init_rng)
        surprise_mod.init_surprise_params(self.surp_cfg, self.params, init_rng)

        self.m = cfg.effective_m
        self.targets = [self.params.copy() for _ in range(self.m)]
        self._next_sync = [self._offset(i) for i in range(self.m)]
        self.optimizer = nn.RmsProp(self.params, nn.OptimizerConfig(
            learning_rate=cfg.learning_rate, decay=cfg.optimizer_decay,
            epsilon_stability=cfg.optimizer_epsilon,
            grad_clip_norm=cfg.grad_clip_norm))
        self.epsilon = agent_mod.EpsilonSchedule(
            cfg.epsilon_start, cfg.epsilon_end, cfg.epsilon_anneal_steps)

    def _offset(self, i: int) -> int:
        if self.cfg.target_sync == "simultaneous":
            return 0
        return (i * self.cfg.update_interval) // self.m

    # -- acting ------------------------------------------------------------

    def act(self, obs: np.ndarray, last_actions: Optional[np.ndarray],
            eps: float, rng: np.random.Generator) -> np.ndarray:
        la = None if last_actions is None else last_actions[None]
        q = agent_mod.agent_q_values(self.agent_cfg, obs[None], la, self.params)[0]
        return agent_mod.select_actions(q, eps, None, rng)

    # -- target syncing ----------------------------------------------------

    def sync_targets(self, t: int) -> list[int]:
        """Hard-copy every target whose (staggered) sync step has arrived."""
        synced = []
        for i in range(self.m):
            while t >= self._next_sync[i]:
                self.targets[i].sync_from(self.params)
                self._next_sync[i] += self.cfg.update_interval
                synced.append(i)
        return synced

    # -- batch plumbing ----------------------------------------------------

    @staticmethod
    def _flatten(batch: EpisodeBatch):
        """Valid-transition views: padded steps never enter any aggregate."""
        b_idx, t_idx = np.nonzero(batch.mask > 0.5)
        prev = t_idx - 1
        last_actions = np.where(
            (prev >= 0)[:, None],
            batch.actions[b_idx, np.maximum(prev, 0)], -1)
        return {
            "b_idx": b_idx,
            "s": batch.states[b_idx, t_idx],
            "s_next": batch.states[b_idx, t_idx + 1],
            "obs": batch.observations[b_idx, t_idx],
            "obs_next": batch.observations[b_idx, t_idx + 1],
            "a": batch.actions[b_idx, t_idx],
            "a_prev": last_actions,
            "r": batch.rewards[b_idx, t_idx],
            "term": batch.terminated[b_idx, t_idx],
        }

    def _greedy_and_chosen(self, params: nn.ParamSet, obs, last_actions):
        """(greedy actions [S x N], per-(sample,agent,action) q) via NumPy."""
        q = agent_mod.agent_q_values(self.agent_cfg, obs, last_actions, params)
        return q.argmax(axis=2), q

    def _target_totals(self, flat) -> np.ndarray:
        """Per-target greedy joint values at s', stacked [m x S] (or
        [m x S x N] for iql)."""
        totals = []
        greedy0 = None
        for i, tp in enumerate(self.targets):
            greedy, q = self._greedy_and_chosen(tp, flat["obs_next"], flat["a"])
            if self.cfg.target_reduction == "max_of_mins":
                # shared greedy actions (from target 0), min applied after
                if greedy0 is None:
                    greedy0 = greedy
                greedy = greedy0
            chosen = np.take_along_axis(q, greedy[..., None], axis=2)[..., 0]
            if self.mixer_cfg.kind == "iql":
                totals.append(chosen)
            else:
                totals.append(nn._data(mixer_mod.mix(
                    chosen, flat["s_next"], self.mixer_cfg, tp)))
        return np.stack(totals)

    def _energy_terms(self, batch: EpisodeBatch, flat):
        """(lse of target surprise values [S], online surprise inputs)."""
        per_ep = self.cfg.sigma_pooling == "episode"
        sig = surprise_mod.compute_sigma(batch.observations, batch.mask,
                                         "current", per_episode=per_ep)
        sig_next = surprise_mod.compute_sigma(batch.observations, batch.mask,
                                              "next", per_episode=per_ep)
        s_cur, s_nxt = sig.sigma, sig_next.sigma
        if per_ep:
            s_cur, s_nxt = s_cur[flat["b_idx"]], s_nxt[flat["b_idx"]]
        # u' for the target term: online-greedy next actions (semi-gradient;
        # the argmax is piecewise constant)
        greedy_online, _ = self._greedy_and_chosen(self.params,
                                                   flat["obs_next"], flat["a"])
        x_next = surprise_mod.build_surprise_inputs(
            self.surp_cfg, flat["s_next"], greedy_online, s_nxt)
        v_target = surprise_mod.surprise_forward(self.surp_cfg, x_next,
                                                 self.targets[0])
        x_cur = surprise_mod.build_surprise_inputs(
            self.surp_cfg, flat["s"], flat["a"], s_cur)
        return surprise_mod.energy_lse(v_target), x_cur

    def td_target(self, batch: EpisodeBatch) -> np.ndarray:
        """TD targets on the [B x T] grid (zeros at padded steps).

        Joint-head algorithms only; this is the NumPy view used by tests and
        diagnostics -- the training loss rebuilds the same quantity with the
        online-surprise term attached to the graph.
        """
        if self.mixer_cfg.kind == "iql":
            raise LearnerError("td_target on the joint grid is undefined for iql")
        flat = self._flatten(batch)
        tgt = self._target_totals(flat).min(axis=0)
        y = flat["r"] + self.cfg.gamma * (1.0 - flat["term"]) * tgt
        if self.cfg.uses_energy:
            lse_tgt, x_cur = self._energy_terms(batch, flat)
            v_online = surprise_mod.surprise_forward(self.surp_cfg, x_cur,
                                                     self.params)
            e = lse_tgt - surprise_mod.energy_lse(v_online)
            if self.cfg.energy_order == "online_over_target":
                e = -e
            y = y + self.cfg.effective_beta * e
        out = np.zeros_like(batch.rewards)
        b_idx, t_idx = np.nonzero(batch.mask > 0.5)
        out[b_idx, t_idx] = y
        return out

    # -- loss --------------------------------------------------------------

    def compute_loss(self, batch: EpisodeBatch):
        """Build the masked TD loss graph. Returns (loss Tensor, TrainStats)."""
        flat = self._flatten(batch)
        S = len(flat["r"])
        if S == 0:
            raise LearnerError("batch has no valid transitions")
        cfg = self.cfg

        # online chosen Q values (graph)
        inputs = agent_mod.build_agent_inputs(self.agent_cfg, flat["obs"],
                                              flat["a_prev"])
        q_flat = agent_mod.agent_forward(self.agent_cfg, inputs, self.params,
                                         trainable=True)
        q3 = nn.reshape(q_flat, (S, self.agent_cfg.n_agents,
                                 self.agent_cfg.n_actions))
        onehot = np.zeros((S, self.agent_cfg.n_agents, self.agent_cfg.n_actions))
        s_ix, a_ix = np.meshgrid(np.arange(S), np.arange(self.agent_cfg.n_agents),
                                 indexing="ij")
        onehot[s_ix, a_ix, flat["a"]] = 1.0
        chosen = nn.asum(nn.mul(q3, onehot), axis=2)  # [S x N]

        target_stack = self._target_totals(flat)
        tgt_min = target_stack.min(axis=0)

        e_mean = 0.0
        if self.mixer_cfg.kind == "iql":
            y = (flat["r"][:, None]
                 + cfg.gamma * (1.0 - flat["term"])[:, None] * tgt_min)
            diff = nn.add(y, nn.mul(chosen, -1.0))  # [S x N]
            n_terms = S
        else:
            q_tot = mixer_mod.mix(chosen, flat["s"], self.mixer_cfg,
                                  self.params, trainable=True)  # [S]
            y_const = flat["r"] + cfg.gamma * (1.0 - flat["term"]) * tgt_min
            if cfg.uses_energy:
                lse_tgt, x_cur = self._energy_terms(batch, flat)
                v_online = surprise_mod.surprise_forward(
                    self.surp_cfg, x_cur, self.params,
                    trainable=cfg.surprise_grads)
                lse_online = surprise_mod.energy_lse(v_online)
                sign = 1.0 if cfg.energy_order == "target_over_online" else -1.0
                beta = cfg.effective_beta
                # y = y_const + beta * (lse_tgt - lse_online), online half on
                # the graph so surprise minimization receives gradient
                y = nn.add(y_const + sign * beta * lse_tgt,
                           nn.mul(lse_online, -sign * beta))
                e_data = sign * (lse_tgt - nn._data(lse_online))
                e_mean = float(e_data.mean())
                diff = nn.add(y, nn.mul(q_tot, -1.0))
            else:
                diff = nn.add(y_const, nn.mul(q_tot, -1.0))
            n_terms = S
        loss = nn.mul(nn.asum(nn.mul(diff, diff)), 0.5 / n_terms)
        loss_val = float(nn._data(loss))
        if not math.isfinite(loss_val):
            raise LearnerError(
                "non-finite loss; batch stats: "
                f"r in [{flat['r'].min():.3g}, {flat['r'].max():.3g}], "
                f"target in [{target_stack.min():.3g}, {target_stack.max():.3g}], "
                f"|state|max {np.abs(flat['s']).max():.3g}")
        abs_td = float(np.abs(nn._data(diff)).mean())
        return loss, TrainStats(loss=loss_val, abs_td_error=abs_td, e_mean=e_mean)

    def train_step(self, batch: EpisodeBatch) -> TrainStats:
        self.params.zero_grads()
        loss, stats = self.compute_loss(batch)
        loss.backward()
        self.optimizer.step()
        return stats


# ---------------------------------------------------------------------------
# Run loop
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    total_steps: int = 200_000
    eval_interval: int = 5000
    eval_episodes: int = 32
    checkpoint_interval: Optional[int] = None

    def __post_init__(self):
        if self.total_steps <= 0 or self.eval_interval <= 0:
            raise LearnerError("total_steps and eval_interval must be positive")


def evaluate_policy(learner: Learner, env: SpuriousCaptureEnv,
                    n_episodes: int) -> tuple[float, float]:
    """Greedy rollouts; returns (success rate, mean return)."""
    rng = np.random.default_rng(0)  # unused at epsilon=0
    successes = 0
    returns = []
    for _ in range(n_episodes):
        _, obs = env.reset()
        last = None
        total = 0.0
        while True:
            actions = learner.act(obs, last, 0.0, rng)
            res = env.step(actions)
            total += res.reward
            obs, last = res.observations, actions
            if res.terminated or res.truncated:
                successes += int(res.terminated)
                break
        returns.append(total)
    return successes / n_episodes, float(np.mean(returns))


def random_policy_success(env_cfg: EnvConfig, n_episodes: int = 1000,
                          seed: int = 0) -> float:
    """Success-rate floor of the uniform-random policy (the learning oracle)."""
    env = SpuriousCaptureEnv(replace(env_cfg, seed=seed))
    rng = np.random.default_rng(seed + 1)
    successes = 0
    for _ in range(n_episodes):
        env.reset()
        while True:
            res = env.step(rng.integers(0, N_ACTIONS, env_cfg.n_agents))
            if res.terminated or res.truncated:
                successes += int(res.terminated)
                break
    return successes / n_episodes


def train_run(run_cfg: RunConfig, seed: int,
              metrics_path: Optional[Path] = None,
              checkpoint_path: Optional[Path] = None,
              progress: bool = False) -> list[dict]:
    """Execute one seeded training run; returns the metrics records.

    Deterministic: independent RNG streams (parameter init, training env,
    action exploration, replay sampling, evaluation env) are all spawned
    from the seed, so runs that skip a component never perturb the others.
    """
    ss = np.random.SeedSequence(seed)
    init_rng, env_rng_seed, act_rng, replay_rng, eval_seed = [
        np.random.default_rng(s) for s in ss.spawn(5)]

    env = SpuriousCaptureEnv(replace(run_cfg.env,
                                     seed=int(env_rng_seed.integers(2**31))))
    eval_env = SpuriousCaptureEnv(replace(run_cfg.env,
                                          seed=int(eval_seed.integers(2**31))))
    learner = Learner(run_cfg.env, run_cfg.learner, init_rng)
    buffer = ReplayBuffer(run_cfg.learner.buffer_capacity,
                          run_cfg.learner.batch_size)

    metrics: list[dict] = []
    fh = open(metrics_path, "w") if metrics_path else None

    def emit(step, eps, window: list[TrainStats]):
        succ, ret = evaluate_policy(learner, eval_env, run_cfg.eval_episodes)
        rec = {"step": int(step),
               "success_rate": succ,
               "mean_return": ret,
               "abs_td_error": float(np.mean([w.abs_td_error for w in window]))
               if window else 0.0,
               "energy_ratio_mean": float(np.mean([w.e_mean for w in window]))
               if window else 0.0,
               "epsilon": float(eps),
               "loss": float(np.mean([w.loss for w in window]))
               if window else 0.0}
        metrics.append(rec)
        if fh:
            fh.write(json.dumps(rec) + "\n")
            fh.flush()
        if progress:
            print(f"step {step:>8}  success {succ:.2f}  return {ret:7.2f}  "
                  f"loss {rec['loss']:.4f}  E {rec['energy_ratio_mean']:+.4f}")
        window.clear()

    t = 0
    next_eval = 0
    window: list[TrainStats] = []
    try:
        while t < run_cfg.total_steps:
            state, obs = env.reset()
            recorder = EpisodeRecorder(run_cfg.env, state, obs)
            last = None
            while True:
                if t >= next_eval:
                    emit(t, learner.epsilon(t), window)
                    next_eval += run_cfg.eval_interval
                learner.sync_targets(t)
                eps = learner.epsilon(t)
                actions = learner.act(obs, last, eps, act_rng)
                res = env.step(actions)
                recorder.record(actions, res)
                obs, last = res.observations, actions
                t += 1
                if (buffer.can_sample
                        and t % run_cfg.learner.train_every == 0):
                    window.append(learner.train_step(
                        buffer.sample(replay_rng)))
                if (run_cfg.checkpoint_interval
                        and checkpoint_path
                        and t % run_cfg.checkpoint_interval == 0):
                    nn.save_checkpoint(learner.params, checkpoint_path)
                if res.terminated or res.truncated or t >= run_cfg.total_steps:
                    break
            buffer.insert(recorder.episode())
        emit(t, learner.epsilon(t), window)
        if checkpoint_path:
            nn.save_checkpoint(learner.params, checkpoint_path)
    finally:
        if fh:
            fh.close()
    return metrics
