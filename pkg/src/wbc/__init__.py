"""Wasserstein-barycenter consensus training for cooperative multi-agent RL."""

from . import baselines, env, ot, policy, trainer

__all__ = ["baselines", "env", "ot", "policy", "trainer"]
__version__ = "0.1.0"
