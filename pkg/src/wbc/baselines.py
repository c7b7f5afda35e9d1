"""Comparison methods sharing the consensus trainer's rollout machinery.

All methods use the same vanilla policy-gradient estimator; only the
coupling mechanism between agents differs, so comparative runs isolate the
consensus term.
"""

from __future__ import annotations

import numpy as np

from . import ot
from . import policy as pol
from . import trainer

METHODS = ("wbc", "independent", "kl_reg", "param_share")


def independent_step(policies, env_cfg, train_cfg, iteration, rng, disc,
                     targets=None):
    """Per-agent policy gradient with no cross-agent coupling (lambda = 0)."""
    return trainer.consensus_step(
        policies, env_cfg, train_cfg, iteration, rng, disc,
        targets=targets, penalty="ot", lambda_override=0.0,
    )


def kl_consensus_step(policies, env_cfg, train_cfg, iteration, rng, disc,
                      targets=None):
    """Penalty lambda * mean KL(pi_i || mixture of current policies)."""
    return trainer.consensus_step(
        policies, env_cfg, train_cfg, iteration, rng, disc,
        targets=targets, penalty="kl",
    )


def shared_params_step(policies, env_cfg, train_cfg, iteration, rng, disc,
                       targets=None):
    """One shared logits table; per-agent reward gradients are averaged.

    `policies` holds the single shared policy (length 1); visitation
    diagnostics still use per-agent rollout measures.
    """
    import time

    t0 = time.perf_counter()
    shared = policies[0]
    lam, eps = trainer.schedule_step(train_cfg, iteration)
    per_agent = [shared] * env_cfg.n_agents
    batch = trainer.collect_rollouts(per_agent, env_cfg, train_cfg, rng, disc,
                                     targets)
    measures = [trainer.smoothed_measure(ab, shared)[0]
                for ab in batch.agents]
    support = trainer.pooled_support(measures)
    bary_res = ot.sinkhorn_barycenter(
        measures, support, train_cfg.sinkhorn_config(eps), train_cfg.beta
    )
    ref = shared if train_cfg.use_clipped_surrogate else None
    grads = [trainer.reward_gradient(ab, shared, ref_policy=ref,
                                     clip_ratio=train_cfg.clip_ratio)
             for ab in batch.agents]
    grad = trainer._clip_rows(np.mean(grads, axis=0), train_cfg.grad_clip)
    updated = shared.copy()
    updated.logits += train_cfg.alpha * grad
    diag = trainer._diagnostics(iteration, batch, measures, bary_res.measure,
                                bary_res.marginal_residual, lam, eps,
                                train_cfg, t0, bary_plans=bary_res.plans)
    return [updated], diag
