"""Shared-parameter per-agent utility network and action selection.

One feedforward MLP maps [observation | last-action one-hot | agent-id
one-hot] to a Q-value per action; all agents share the same weights, so the
parameter count is independent of the number of agents. Exploration is
epsilon-greedy with a linear anneal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .env import N_ACTIONS


@dataclass
class AgentNetConfig:
    obs_dim: int
    n_agents: int
    n_actions: int = N_ACTIONS
    hidden: int = 64

    @property
    def input_dim(self) -> int:
        return self.obs_dim + self.n_actions + self.n_agents

    def layers(self) -> list[nn.DenseSpec]:
        return [nn.DenseSpec(self.input_dim, self.hidden, "relu"),
                nn.DenseSpec(self.hidden, self.hidden, "relu"),
                nn.DenseSpec(self.hidden, self.n_actions, "identity")]


PREFIX = "agent"


def init_agent_params(cfg: AgentNetConfig, params: nn.ParamSet,
                      rng: np.random.Generator) -> None:
    nn.init_mlp(params, PREFIX, cfg.layers(), rng)


def build_agent_inputs(cfg: AgentNetConfig, obs: np.ndarray,
                       last_actions: np.ndarray | None) -> np.ndarray:
    """Assemble the flat [S*n_agents x input_dim] network input.

    ``obs`` is [S x n_agents x obs_dim]; ``last_actions`` is [S x n_agents]
    action ids or None (start of episode: all-zero one-hots).
    """
    S, N, D = obs.shape
    if D != cfg.obs_dim or N != cfg.n_agents:
        raise nn.DimensionError(
            f"agent inputs: observation block is [{N} x {D}], expected "
            f"[{cfg.n_agents} x {cfg.obs_dim}]")
    act_oh = np.zeros((S, N, cfg.n_actions))
    if last_actions is not None:
        la = np.asarray(last_actions)
        valid = la >= 0
        s_idx, a_idx = np.nonzero(valid)
        act_oh[s_idx, a_idx, la[valid]] = 1.0
    ids = np.broadcast_to(np.eye(N), (S, N, N))
    return np.concatenate([obs, act_oh, ids], axis=2).reshape(S * N, cfg.input_dim)


def agent_forward(cfg: AgentNetConfig, inputs, params: nn.ParamSet,
                  trainable: bool = False):
    """Q-values [rows x n_actions] for pre-assembled agent inputs."""
    return nn.mlp_forward(inputs, cfg.layers(), params, PREFIX, trainable=trainable)


def agent_q_values(cfg: AgentNetConfig, obs: np.ndarray,
                   last_actions: np.ndarray | None,
                   params: nn.ParamSet) -> np.ndarray:
    """Convenience NumPy path: [S x n_agents x n_actions]."""
    flat = agent_forward(cfg, build_agent_inputs(cfg, obs, last_actions), params)
    return flat.reshape(obs.shape[0], cfg.n_agents, cfg.n_actions)


def select_actions(q: np.ndarray, epsilon: float, avail: np.ndarray | None,
                   rng: np.random.Generator) -> np.ndarray:
    """Per-agent epsilon-greedy over available actions.

    Greedy ties break toward the lowest action index (argmax convention).
    """
    q = np.asarray(q, dtype=np.float64)
    n_agents, n_actions = q.shape
    if avail is None:
        avail = np.ones_like(q, dtype=bool)
    avail = np.asarray(avail, dtype=bool)
    if not avail.any(axis=1).all():
        raise ValueError("every agent needs at least one available action")
    masked = np.where(avail, q, -np.inf)
    greedy = masked.argmax(axis=1)
    actions = greedy.copy()
    explore = rng.random(n_agents) < epsilon
    for a in np.nonzero(explore)[0]:
        choices = np.nonzero(avail[a])[0]
        actions[a] = choices[rng.integers(len(choices))]
    return actions


@dataclass
class EpsilonSchedule:
    start: float = 1.0
    end: float = 0.05
    anneal_steps: int = 50_000

    def __call__(self, t: int) -> float:
        if t >= self.anneal_steps:
            return self.end
        return self.start + (self.end - self.start) * (t / self.anneal_steps)


def epsilon_schedule(t: int, schedule: EpsilonSchedule | None = None) -> float:
    return (schedule or EpsilonSchedule())(t)
