"""Tabular softmax policies over discretized observations.

Observations are compressed to two 2D offsets (own target relative to own
position, nearest other agent relative to own position), each binned on a
regular grid; the policy is a table of logits per cell with exact
log-probability gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_ACTIONS = 5


@dataclass
class ObsDiscretizer:
    """Maps an observation vector to a cell id in [0, grid_resolution**4)."""

    grid_resolution: int = 8
    offset_range: float = 1.0  # offsets clipped to [-offset_range, offset_range]

    @property
    def n_cells(self):
        return self.grid_resolution ** 4

    def _bin(self, value):
        r = self.grid_resolution
        span = 2.0 * self.offset_range
        idx = int(np.floor((value + self.offset_range) / span * r))
        return min(max(idx, 0), r - 1)

    def cell_of(self, obs):
        obs = np.asarray(obs, dtype=float)
        if obs.shape[0] < 6 or obs.shape[0] % 2 != 0:
            raise ValueError(f"bad observation dimension {obs.shape[0]}")
        own = obs[0:2]
        target = obs[2:4]
        others = obs[4:].reshape(-1, 2)
        to_target = target - own
        dists = np.linalg.norm(others - own[None, :], axis=1)
        nearest = others[int(np.argmin(dists))]
        to_other = nearest - own
        r = self.grid_resolution
        cell = 0
        for v in (to_target[0], to_target[1], to_other[0], to_other[1]):
            cell = cell * r + self._bin(v)
        return cell


def discretize_obs(obs, disc):
    return disc.cell_of(obs)


@dataclass
class SoftmaxPolicy:
    logits: np.ndarray  # (n_cells, N_ACTIONS)
    agent_id: int = 0

    @staticmethod
    def zeros(n_cells, agent_id=0):
        return SoftmaxPolicy(np.zeros((n_cells, N_ACTIONS)), agent_id=agent_id)

    @property
    def n_cells(self):
        return self.logits.shape[0]

    def copy(self):
        return SoftmaxPolicy(self.logits.copy(), agent_id=self.agent_id)


def action_probs(policy, cell):
    row = policy.logits[cell]
    z = row - row.max()
    e = np.exp(z)
    return e / e.sum()


def action_probs_all(policy):
    """Softmax over every row at once (used by KL penalty and exporters)."""
    z = policy.logits - policy.logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_prob_grad_row(policy, cell, action):
    """d log pi(action|cell) / d logits[cell]: one-hot minus probabilities."""
    g = -action_probs(policy, cell)
    g[action] += 1.0
    return g


def log_prob_grad(policy, cell, action):
    """Dense gradient table; only the visited cell's row is nonzero."""
    grad = np.zeros_like(policy.logits)
    grad[cell] = log_prob_grad_row(policy, cell, action)
    return grad


def sample_action(policy, cell, rng):
    p = action_probs(policy, cell)
    return int(rng.choice(N_ACTIONS, p=p))


def kl_to_reference(policy, reference, cells):
    """Mean KL(pi(.|cell) || reference[cell]) over cells, with exact gradient.

    reference: (n_cells, N_ACTIONS) array of strictly positive distributions
    (only the rows indexed by `cells` are read).
    """
    cells = np.asarray(cells, dtype=int)
    if len(cells) == 0:
        raise ValueError("cells must be nonempty")
    grad = np.zeros_like(policy.logits)
    total = 0.0
    uniq, counts = np.unique(cells, return_counts=True)
    n = len(cells)
    for cell, cnt in zip(uniq, counts):
        ref = np.asarray(reference[cell], dtype=float)
        if np.any(ref <= 0):
            raise ValueError("reference rows must be strictly positive")
        p = action_probs(policy, cell)
        logratio = np.log(p) - np.log(ref)
        kl = float(p @ logratio)
        total += cnt * kl
        # d/d logits of sum_a p_a log(p_a/ref_a) = p * (logratio - KL)
        grad[cell] += (cnt / n) * p * (logratio - kl)
    return total / n, grad
