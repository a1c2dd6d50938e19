"""Value-factorization heads: monotonic mixing (qmix), additive (vdn), iql.

The qmix head combines per-agent chosen Q-values through a two-layer mixing
network whose weights come from state-conditioned hypernetworks. Weight
hypernetwork outputs pass through an element-wise absolute value, which makes
every partial derivative of q_tot with respect to a per-agent Q non-negative
and keeps per-agent greedy actions jointly greedy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from .nn import DenseSpec, ParamSet

MIXER_KINDS = ("qmix", "vdn", "iql")
PREFIX = "mixer"


class MixerConfigError(nn.NNError):
    pass


@dataclass
class MixerConfig:
    kind: str = "qmix"
    embed_dim: int = 32
    hypernet_hidden: int = 64

    def __post_init__(self):
        if self.kind not in MIXER_KINDS:
            raise MixerConfigError(f"unknown mixer kind '{self.kind}'")
        if self.embed_dim <= 0 or self.hypernet_hidden <= 0:
            raise MixerConfigError("embed_dim and hypernet_hidden must be > 0")


@dataclass
class MixerOutput:
    q_tot: Optional[np.ndarray]      # [S]; None for iql (no joint head)
    chosen_q: np.ndarray             # [S x n_agents]


def _specs(cfg: MixerConfig, state_dim: int, n_agents: int) -> dict:
    e = cfg.embed_dim
    return {
        "hyper_w1": DenseSpec(state_dim, n_agents * e, "abs_weights"),
        "hyper_b1": DenseSpec(state_dim, e, "identity"),
        "hyper_w2": DenseSpec(state_dim, e, "abs_weights"),
        "hyper_b2_0": DenseSpec(state_dim, cfg.hypernet_hidden, "relu"),
        "hyper_b2_1": DenseSpec(cfg.hypernet_hidden, 1, "identity"),
    }


def init_mixer_params(cfg: MixerConfig, state_dim: int, n_agents: int,
                      params: ParamSet, rng: np.random.Generator) -> None:
    if cfg.kind != "qmix":
        return  # vdn and iql are parameter-free
    for name, spec in _specs(cfg, state_dim, n_agents).items():
        nn.init_dense(params, f"{PREFIX}.{name}", spec, rng)


def hypernet_forward(state, cfg: MixerConfig, state_dim: int, n_agents: int,
                     params: ParamSet, trainable: bool = False):
    """Per-sample mixing weights {W1 [S,N,E], b1 [S,E], W2 [S,E], b2 [S,1]}."""
    if cfg.kind != "qmix":
        raise MixerConfigError(f"hypernetworks only exist for qmix, not '{cfg.kind}'")
    specs = _specs(cfg, state_dim, n_agents)
    S = nn._data(state).shape[0]

    def run(name):
        return nn.dense_forward(state, specs[name], params, f"{PREFIX}.{name}",
                                trainable=trainable)

    w1 = nn.reshape(run("hyper_w1"), (S, n_agents, cfg.embed_dim))
    b1 = run("hyper_b1")
    w2 = run("hyper_w2")
    hid = run("hyper_b2_0")
    b2 = nn.dense_forward(hid, specs["hyper_b2_1"], params,
                          f"{PREFIX}.hyper_b2_1", trainable=trainable)
    return {"W1": w1, "b1": b1, "W2": w2, "b2": b2}


def mix(chosen_q, state, cfg: MixerConfig, params: ParamSet,
        trainable: bool = False):
    """Joint value q_tot [S] from per-agent chosen Q-values [S x N].

    qmix: elu(q . W1(s) + b1(s)) . W2(s) + b2(s) with |.|-constrained weights.
    vdn:  sum over agents.
    iql:  no joint head; returns the per-agent values unchanged.
    """
    qd = nn._data(chosen_q)
    S, n_agents = qd.shape
    if cfg.kind == "vdn":
        return nn.asum(chosen_q, axis=1)
    if cfg.kind == "iql":
        return chosen_q
    state_dim = nn._data(state).shape[1]
    h = hypernet_forward(state, cfg, state_dim, n_agents, params,
                         trainable=trainable)
    q3 = nn.reshape(chosen_q, (S, n_agents, 1))
    hidden = nn.elu(nn.add(nn.asum(nn.mul(q3, h["W1"]), axis=1), h["b1"]))
    q_tot = nn.add(nn.asum(nn.mul(hidden, h["W2"]), axis=1),
                   nn.reshape(h["b2"], (S,)))
    return q_tot


def mix_grad_wrt_q(chosen_q: np.ndarray, state: np.ndarray, cfg: MixerConfig,
                   params: ParamSet) -> np.ndarray:
    """Analytic d q_tot / d q_a, shape [S x N] (qmix only).

    Each entry is sum_e W1[s,a,e] * elu'(pre[s,e]) * W2[s,e], which is a
    product of non-negative factors: the monotonicity certificate.
    """
    if cfg.kind == "vdn":
        return np.ones_like(np.asarray(chosen_q, dtype=np.float64))
    if cfg.kind != "qmix":
        raise MixerConfigError("mix_grad_wrt_q needs a joint head")
    q = np.asarray(chosen_q, dtype=np.float64)
    state = np.asarray(state, dtype=np.float64)
    h = hypernet_forward(state, cfg, state.shape[1], q.shape[1], params)
    pre = np.einsum("sn,sne->se", q, h["W1"]) + h["b1"]
    delu = np.where(pre > 0.0, 1.0, np.exp(pre))
    return np.einsum("sne,se,se->sn", h["W1"], delu, h["W2"])
