"""SpuriousCapture: a cooperative, partially observable capture gridworld.

N hunters chase n_prey prey on a square grid. A prey is captured on a step
where at least two hunters stand in 4-neighborhood cells adjacent to it and
both picked the ``capture`` action, which forces coordination. Episodes end
when every prey is captured (success) or at the step limit.

"Storms" inject spurious state: while a storm is active, prey teleport to
random cells each step and Gaussian noise corrupts the observation distractor
block and relative offsets. This is the deviation signal the surprise
machinery is built to detect.

Observation noise is a deterministic function of (config seed, global state),
so observations can be reconstructed exactly from a stored state with
:func:`state_to_agent_views`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

N_ACTIONS = 6
STAY, UP, DOWN, LEFT, RIGHT, CAPTURE = range(N_ACTIONS)
ACTION_NAMES = ("stay", "up", "down", "left", "right", "capture")
_MOVES = {STAY: (0, 0), UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1),
          RIGHT: (0, 1), CAPTURE: (0, 0)}

STEP_PENALTY = -0.1
CAPTURE_REWARD = 10.0
DISTRACTOR_DIM = 4


class EnvError(Exception):
    pass


class ConfigError(EnvError):
    pass


class EnvUsageError(EnvError):
    """Stepping a finished episode, action out of range, and the like."""


@dataclass
class EnvConfig:
    grid_size: int = 7
    n_agents: int = 3
    n_prey: int = 2
    sight_radius: int = 2
    episode_limit: int = 50
    p_storm: float = 0.05
    storm_duration: int = 5
    storm_noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.grid_size, self.n_agents, self.n_prey,
               self.sight_radius, self.episode_limit, self.storm_duration) <= 0:
            raise ConfigError(f"all size fields must be positive: {self}")
        if self.sight_radius >= self.grid_size:
            raise ConfigError("sight_radius must be < grid_size")
        if self.n_agents + self.n_prey > self.grid_size ** 2:
            raise ConfigError("too many entities for the grid")
        if not (0.0 <= self.p_storm <= 1.0):
            raise ConfigError("p_storm must be a probability")
        if self.storm_noise_scale < 0.0:
            raise ConfigError("storm_noise_scale must be >= 0")

    @property
    def obs_dim(self) -> int:
        # own pos + (flag, dx, dy) per prey + per other agent + distractor
        return 2 + 3 * self.n_prey + 3 * (self.n_agents - 1) + DISTRACTOR_DIM

    @property
    def state_dim(self) -> int:
        # entity positions + prey-alive flags + storm (flag, remaining) + t/T
        return 2 * (self.n_agents + self.n_prey) + self.n_prey + 2 + 1


@dataclass
class StepResult:
    reward: float
    terminated: bool
    truncated: bool
    observations: np.ndarray  # [n_agents x obs_dim]
    state: np.ndarray
    info: dict


def _state_noise_rng(state: np.ndarray, cfg_seed: int) -> np.random.Generator:
    """Observation-noise generator derived purely from (seed, state)."""
    digest = hashlib.blake2b(state.tobytes(), digest_size=8,
                             key=cfg_seed.to_bytes(8, "little", signed=True)).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def pack_state(cfg: EnvConfig, agent_pos: np.ndarray, prey_pos: np.ndarray,
               prey_alive: np.ndarray, storm_left: int, t: int) -> np.ndarray:
    g = cfg.grid_size - 1
    parts = [agent_pos.astype(np.float64).ravel() / g,
             prey_pos.astype(np.float64).ravel() / g,
             prey_alive.astype(np.float64),
             np.array([1.0 if storm_left > 0 else 0.0,
                       storm_left / cfg.storm_duration,
                       t / cfg.episode_limit])]
    return np.concatenate(parts)


def unpack_state(cfg: EnvConfig, state: np.ndarray):
    if state.shape != (cfg.state_dim,):
        raise EnvError(f"state has shape {state.shape}, expected ({cfg.state_dim},)")
    g = cfg.grid_size - 1
    n, p = cfg.n_agents, cfg.n_prey
    agent_pos = np.rint(state[:2 * n].reshape(n, 2) * g).astype(np.int64)
    prey_pos = np.rint(state[2 * n:2 * (n + p)].reshape(p, 2) * g).astype(np.int64)
    alive = state[2 * (n + p):2 * (n + p) + p] > 0.5
    storm_active = state[-3] > 0.5
    return agent_pos, prey_pos, alive, storm_active


def state_to_agent_views(state: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    """Reconstruct all per-agent observation vectors from a global state.

    This is the same function the environment uses at step time, so
    stored-state reconstructions round-trip exactly, storm noise included.
    """
    agent_pos, prey_pos, alive, storm_active = unpack_state(cfg, state)
    g = float(cfg.grid_size)
    obs = np.zeros((cfg.n_agents, cfg.obs_dim))
    noise_rng = _state_noise_rng(state, cfg.seed) if storm_active else None
    for a in range(cfg.n_agents):
        row = obs[a]
        row[0:2] = agent_pos[a] / (cfg.grid_size - 1)
        k = 2
        for j in range(cfg.n_prey):
            d = prey_pos[j] - agent_pos[a]
            if alive[j] and np.max(np.abs(d)) <= cfg.sight_radius:
                row[k] = 1.0
                row[k + 1:k + 3] = d / g
            k += 3
        for b in range(cfg.n_agents):
            if b == a:
                continue
            d = agent_pos[b] - agent_pos[a]
            if np.max(np.abs(d)) <= cfg.sight_radius:
                row[k] = 1.0
                row[k + 1:k + 3] = d / g
            k += 3
        if storm_active:
            scale = cfg.storm_noise_scale
            # corrupt visible offsets and fill the distractor block
            for slot in range(2, k, 3):
                if row[slot] > 0.5:
                    row[slot + 1:slot + 3] += noise_rng.normal(0.0, scale, 2)
            row[k:k + DISTRACTOR_DIM] = noise_rng.normal(0.0, scale, DISTRACTOR_DIM)
    return obs


class SpuriousCaptureEnv:
    """One single-threaded environment instance."""

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self._rng = np.random.default_rng(cfg.seed)
        self._done = True
        self.t = 0

    # -- lifecycle ---------------------------------------------------------

    def reset(self, seed: Optional[int] = None):
        """Place agents and prey at distinct random cells; storms off.

        Without an explicit seed the episode stream continues from the
        instance RNG, so consecutive resets give fresh layouts while the
        whole stream stays a function of the config seed.

        Returns (global state, observations [n_agents x obs_dim]).
        """
        cfg = self.cfg
        if seed is not None:
            self.cfg = cfg = EnvConfig(**{**cfg.__dict__, "seed": seed})
            self._rng = np.random.default_rng(cfg.seed)
        cells = self._rng.choice(cfg.grid_size ** 2,
                                 size=cfg.n_agents + cfg.n_prey, replace=False)
        coords = np.stack(np.divmod(cells, cfg.grid_size), axis=1)
        self.agent_pos = coords[:cfg.n_agents].astype(np.int64)
        self.prey_pos = coords[cfg.n_agents:].astype(np.int64)
        self.prey_alive = np.ones(cfg.n_prey, dtype=bool)
        self.storm_left = 0
        self.t = 0
        self._done = False
        state = self._state()
        return state, state_to_agent_views(state, cfg)

    def _state(self) -> np.ndarray:
        return pack_state(self.cfg, self.agent_pos, self.prey_pos,
                          self.prey_alive, self.storm_left, self.t)

    # -- dynamics ----------------------------------------------------------

    def step(self, joint_action) -> StepResult:
        cfg = self.cfg
        if self._done:
            raise EnvUsageError("step() called on a finished episode; call reset()")
        actions = np.asarray(joint_action, dtype=np.int64)
        if actions.shape != (cfg.n_agents,):
            raise EnvUsageError(f"joint action must have {cfg.n_agents} entries")
        for a, act in enumerate(actions):
            if not (0 <= act < N_ACTIONS):
                raise EnvUsageError(f"agent {a}: action {act} out of range 0..{N_ACTIONS - 1}")

        # storm bookkeeping first so this step's dynamics see the new status
        if self.storm_left > 0:
            self.storm_left -= 1
        elif cfg.p_storm > 0.0 and self._rng.random() < cfg.p_storm:
            self.storm_left = cfg.storm_duration
        storm = self.storm_left > 0

        # agent movement, blocked at walls; capture/stay keep position
        for a, act in enumerate(actions):
            dr, dc = _MOVES[int(act)]
            nr = min(max(self.agent_pos[a, 0] + dr, 0), cfg.grid_size - 1)
            nc = min(max(self.agent_pos[a, 1] + dc, 0), cfg.grid_size - 1)
            self.agent_pos[a] = (nr, nc)

        # capture resolution: >= 2 adjacent agents that all chose capture
        captures = 0
        capturers = actions == CAPTURE
        for j in range(cfg.n_prey):
            if not self.prey_alive[j]:
                continue
            adj = np.abs(self.agent_pos - self.prey_pos[j]).sum(axis=1) == 1
            if int(np.sum(adj & capturers)) >= 2:
                self.prey_alive[j] = False
                captures += 1
        reward = STEP_PENALTY + CAPTURE_REWARD * captures

        # prey movement: random legal move, or teleport during storms
        for j in range(cfg.n_prey):
            if not self.prey_alive[j]:
                continue
            if storm:
                cell = self._rng.integers(cfg.grid_size ** 2)
                self.prey_pos[j] = divmod(int(cell), cfg.grid_size)
            else:
                legal = []
                for act in (STAY, UP, DOWN, LEFT, RIGHT):
                    dr, dc = _MOVES[act]
                    r, c = self.prey_pos[j, 0] + dr, self.prey_pos[j, 1] + dc
                    if 0 <= r < cfg.grid_size and 0 <= c < cfg.grid_size:
                        legal.append((r, c))
                self.prey_pos[j] = legal[self._rng.integers(len(legal))]

        self.t += 1
        terminated = not self.prey_alive.any()
        truncated = (not terminated) and self.t >= cfg.episode_limit
        self._done = terminated or truncated
        state = self._state()
        return StepResult(reward=reward, terminated=terminated, truncated=truncated,
                          observations=state_to_agent_views(state, cfg),
                          state=state,
                          info={"captures": captures, "storm": storm})
