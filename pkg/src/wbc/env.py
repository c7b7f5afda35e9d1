"""Cooperative 2D navigation: N agents, per-agent targets, collision penalties.

Agents move simultaneously by discrete unit steps (scaled by step_size),
positions are clamped to the arena, and each agent's reward is the negative
distance to its own target minus a fixed penalty per colliding neighbour.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .ot import ACTION_NAMES, ACTION_VECTORS

STAY, RIGHT, LEFT, UP, DOWN = range(5)


@dataclass
class WorldConfig:
    n_agents: int = 3
    arena: tuple = ((0.0, 0.0), (1.0, 1.0))
    step_size: float = 0.05
    collision_radius: float = 0.1
    collision_penalty: float = 1.0
    episode_length: int = 50
    target_mode: str = "fixed_per_seed"

    def __post_init__(self):
        if self.n_agents < 2:
            raise ValueError("n_agents must be >= 2")
        if self.step_size <= 0 or self.collision_radius <= 0:
            raise ValueError("step_size and collision_radius must be positive")
        if self.collision_penalty < 0:
            raise ValueError("collision_penalty must be nonnegative")
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")
        if self.target_mode not in ("fixed_per_seed", "resampled_per_episode"):
            raise ValueError(f"unknown target_mode {self.target_mode!r}")

    @property
    def lo(self):
        return np.asarray(self.arena[0], dtype=float)

    @property
    def hi(self):
        return np.asarray(self.arena[1], dtype=float)


@dataclass
class JointState:
    positions: np.ndarray  # (n_agents, 2)
    targets: np.ndarray  # (n_agents, 2)
    step_index: int = 0


def _sample_separated(rng, cfg, max_attempts=1000):
    """Uniform positions with pairwise separation >= collision_radius."""
    for _ in range(max_attempts):
        pos = rng.uniform(cfg.lo, cfg.hi, size=(cfg.n_agents, 2))
        diffs = pos[:, None, :] - pos[None, :, :]
        dist = np.linalg.norm(diffs, axis=2)
        dist[np.diag_indices(cfg.n_agents)] = np.inf
        if dist.min() >= cfg.collision_radius:
            return pos
    raise RuntimeError(
        f"could not place {cfg.n_agents} agents with separation "
        f"{cfg.collision_radius} in {max_attempts} attempts (arena too crowded)"
    )


def reset(cfg, seed, targets=None):
    """Fresh episode state, deterministic in seed.

    When `targets` is given it overrides sampling (used by the trainer to
    hold targets fixed across episodes in fixed_per_seed mode).
    """
    rng = np.random.default_rng(seed)
    positions = _sample_separated(rng, cfg)
    if targets is None:
        targets = rng.uniform(cfg.lo, cfg.hi, size=(cfg.n_agents, 2))
    else:
        targets = np.asarray(targets, dtype=float).copy()
    return JointState(positions=positions, targets=targets, step_index=0)


def step(state, actions, cfg):
    """Advance one synchronous step; returns (next_state, rewards, done)."""
    if state.step_index >= cfg.episode_length:
        raise RuntimeError("cannot step a finished episode")
    actions = np.asarray(actions, dtype=int)
    if actions.shape != (cfg.n_agents,):
        raise ValueError(f"expected {cfg.n_agents} actions")
    moves = ACTION_VECTORS[actions] * cfg.step_size
    new_pos = np.clip(state.positions + moves, cfg.lo, cfg.hi)
    dist_to_target = np.linalg.norm(new_pos - state.targets, axis=1)
    diffs = new_pos[:, None, :] - new_pos[None, :, :]
    pair_dist = np.linalg.norm(diffs, axis=2)
    pair_dist[np.diag_indices(cfg.n_agents)] = np.inf
    collisions = (pair_dist < cfg.collision_radius).sum(axis=1)
    rewards = -dist_to_target - cfg.collision_penalty * collisions
    next_state = JointState(
        positions=new_pos, targets=state.targets.copy(),
        step_index=state.step_index + 1,
    )
    done = next_state.step_index == cfg.episode_length
    return next_state, rewards, done


def observe(state, agent, cfg):
    """[own position, own target, other positions in fixed index order]."""
    if not (0 <= agent < cfg.n_agents):
        raise IndexError(f"agent index {agent} out of range")
    others = [state.positions[j] for j in range(cfg.n_agents) if j != agent]
    return np.concatenate([state.positions[agent], state.targets[agent]] + others)


def trajectory_to_csv(rows):
    """rows: iterable of (episode, step, agent, px, py, tx, ty, action, reward)."""
    buf = io.StringIO()
    buf.write("episode,step,agent,px,py,tx,ty,action,reward\n")
    for ep, st, ag, px, py, tx, ty, act, rew in rows:
        buf.write(
            f"{ep},{st},{ag},{px!r},{py!r},{tx!r},{ty!r},"
            f"{ACTION_NAMES[act]},{rew!r}\n"
        )
    return buf.getvalue()
