"""Surprise machinery: deviation features, the surprise head, energy ratio.

Deviation features sigma are per-agent, per-feature population standard
deviations of observations pooled over the sampled batch. The surprise head
maps [state | joint-action one-hot | flattened sigma] to one surprise value
per agent; log-sum-exp over the agent axis aggregates those into a free
energy, and the energy ratio is the difference of next-state and
current-state free energies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import DenseSpec, ParamSet

PREFIX = "surp"
ENERGY_ORDERS = ("target_over_online", "online_over_target")


@dataclass
class DeviationFeatures:
    """sigma: [n_agents x obs_dim] (batch pooling) or [B x n_agents x obs_dim]
    (per-episode pooling)."""
    sigma: np.ndarray
    per_episode: bool = False


@dataclass
class SurpriseEstimate:
    v_surp: np.ndarray         # [S x n_agents], online head
    v_surp_target: np.ndarray  # [S x n_agents], target head


@dataclass
class EnergyRatio:
    e: np.ndarray  # [S]
    beta: float


def compute_sigma(observations: np.ndarray, mask: np.ndarray, which: str,
                  per_episode: bool = False) -> DeviationFeatures:
    """Feature-wise std of observations over mask-valid timesteps.

    ``observations`` is [B x T+1 x n_agents x obs_dim], ``mask`` [B x T] with
    1 marking valid transitions. ``which`` selects the current-state slice
    (t) or the next-state slice (t+1) of each valid transition. Uses the
    population std; a single valid sample per position yields exact zeros.
    """
    if which not in ("current", "next"):
        raise ValueError(f"which must be 'current' or 'next', got '{which}'")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("compute_sigma: batch has no valid samples")
    T = mask.shape[1]
    sl = observations[:, 0:T] if which == "current" else observations[:, 1:T + 1]
    if per_episode:
        sigmas = []
        for b in range(mask.shape[0]):
            rows = sl[b][mask[b]]
            sigmas.append(rows.std(axis=0) if len(rows) else
                          np.zeros(sl.shape[2:]))
        return DeviationFeatures(np.stack(sigmas), per_episode=True)
    rows = sl[mask]  # [n_valid x n_agents x obs_dim]
    return DeviationFeatures(rows.std(axis=0), per_episode=False)


@dataclass
class SurpriseNetConfig:
    state_dim: int
    n_agents: int
    n_actions: int
    obs_dim: int
    hidden: int = 64

    @property
    def input_dim(self) -> int:
        return (self.state_dim + self.n_agents * self.n_actions
                + self.n_agents * self.obs_dim)

    def layers(self) -> list[DenseSpec]:
        return [DenseSpec(self.input_dim, self.hidden, "relu"),
                DenseSpec(self.hidden, self.hidden, "relu"),
                DenseSpec(self.hidden, self.n_agents, "identity")]


def init_surprise_params(cfg: SurpriseNetConfig, params: ParamSet,
                         rng: np.random.Generator) -> None:
    nn.init_mlp(params, PREFIX, cfg.layers(), rng)


def build_surprise_inputs(cfg: SurpriseNetConfig, state: np.ndarray,
                          actions: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """[S x input_dim] from states [S x sd], action ids [S x N] and a sigma
    block that is either batch-constant [N x obs_dim] or per-sample
    [S x N x obs_dim]."""
    S = state.shape[0]
    oh = np.zeros((S, cfg.n_agents, cfg.n_actions))
    idx = np.asarray(actions, dtype=np.int64)
    s_idx, a_idx = np.meshgrid(np.arange(S), np.arange(cfg.n_agents),
                               indexing="ij")
    oh[s_idx, a_idx, idx] = 1.0
    sig = np.asarray(sigma, dtype=np.float64)
    if sig.ndim == 2:
        sig = np.broadcast_to(sig, (S,) + sig.shape)
    return np.concatenate([state, oh.reshape(S, -1), sig.reshape(S, -1)], axis=1)


def surprise_forward(cfg: SurpriseNetConfig, inputs, params: ParamSet,
                     trainable: bool = False):
    """Per-agent surprise values [S x n_agents]."""
    return nn.mlp_forward(inputs, cfg.layers(), params, PREFIX,
                          trainable=trainable)


def energy_lse(v):
    """Overflow-safe log-sum-exp over the agent axis: [S x N] -> [S]."""
    vd = nn._data(v)
    if vd.ndim != 2 or vd.shape[1] < 1:
        raise ValueError(f"energy_lse expects [rows x n_agents], got {vd.shape}")
    if not np.all(np.isfinite(vd)):
        raise ValueError("energy_lse: non-finite input")
    return nn.logsumexp(v, axis=1)


def energy_ratio(est: SurpriseEstimate, beta: float,
                 order: str = "target_over_online") -> EnergyRatio:
    """Per-sample energy ratio e = lse(target values) - lse(online values).

    ``order='online_over_target'`` flips the sign (both partition-function
    orderings are admissible; the flipped one is offered for comparison).
    """
    if order not in ENERGY_ORDERS:
        raise ValueError(f"unknown energy order '{order}'")
    v, vt = np.asarray(est.v_surp), np.asarray(est.v_surp_target)
    if v.shape != vt.shape:
        raise ValueError(f"shape mismatch: online {v.shape} vs target {vt.shape}")
    e = energy_lse(vt) - energy_lse(v)
    if order == "online_over_target":
        e = -e
    return EnergyRatio(e=e, beta=beta)
