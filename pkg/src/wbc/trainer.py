"""Consensus-regularized policy-gradient training loop.

Each iteration: roll out every agent's policy, build per-agent visitation
measures over (target-relative position, action) embeddings, compute the
entropic barycenter on the pooled support, and update each agent's logits
with alpha * (reward gradient - lambda * transport-consensus gradient).
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import env as nav
from . import ot
from . import policy as pol


@dataclass
class TrainConfig:
    alpha: float = 0.1
    lambda0: float = 0.5
    epsilon0: float = 0.1
    beta: float = 0.8
    p: int = 2
    batch_episodes: int = 8
    atoms_per_agent: int = 64
    iterations: int = 300
    schedule: str = "fixed"  # fixed | anneal
    # multiplier bringing the exact (per-atom-averaged) transport gradient
    # onto the scale of the episode-summed reward estimator; the atom count
    # is applied separately, mirroring the KL penalty
    consensus_scale: float = 2.0
    lambda_min: float = 0.05
    epsilon_min: float = 0.02
    anneal_fraction: float = 0.5
    seed: int = 0
    use_sliced_for_diagnostics: bool = False
    grad_clip: float = 10.0
    use_clipped_surrogate: bool = False
    clip_ratio: float = 0.2
    sinkhorn_max_iters: int = 30000
    sinkhorn_tol: float = 1e-6
    grid_resolution: int = 8

    def __post_init__(self):
        for name in ("alpha", "epsilon0", "beta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda0 < 0:
            raise ValueError("lambda0 must be nonnegative")
        if self.consensus_scale < 0:
            raise ValueError("consensus_scale must be nonnegative")
        if self.schedule not in ("fixed", "anneal"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.p not in (1, 2):
            raise ValueError("p must be 1 or 2")
        if not 0.0 < self.clip_ratio < 1.0:
            raise ValueError("clip_ratio must be in (0, 1)")

    def sinkhorn_config(self, epsilon):
        return ot.SinkhornConfig(
            epsilon=epsilon, max_iters=self.sinkhorn_max_iters,
            tol=self.sinkhorn_tol, p=self.p,
        )


@dataclass
class AgentBatch:
    measure: ot.DiscreteMeasure
    cells: np.ndarray  # (n_atoms,) back-reference cell ids
    actions: np.ndarray  # (n_atoms,) action ids
    returns: np.ndarray  # (n_atoms,) undiscounted reward-to-go
    # full trajectory record (every step of every episode), for the
    # reward gradient; the subsampled atoms above feed the OT machinery
    visit_cells: np.ndarray = None
    visit_actions: np.ndarray = None
    visit_returns: np.ndarray = None
    n_episodes: int = 1


@dataclass
class VisitationBatch:
    agents: list  # list[AgentBatch]
    mean_team_reward: float


@dataclass
class ConsensusDiagnostics:
    iteration: int
    d_t: float
    div_to_bary: list
    mean_team_reward: float
    lambda_t: float
    epsilon_t: float
    bary_residual: float
    wall_ms: float = 0.0
    # |sum(barycenter weights) - 1|, kept out of the CSV schema; the
    # acceptance checks read it off every training iteration
    bary_weight_err: float = 0.0


def schedule_step(cfg, iteration):
    """Consensus weight and entropic regularization at a given iteration."""
    if cfg.schedule == "fixed":
        return cfg.lambda0, cfg.epsilon0
    window = max(1, int(round(cfg.anneal_fraction * cfg.iterations)))
    if iteration >= window:
        return cfg.lambda_min, cfg.epsilon_min
    frac = iteration / window
    lam = cfg.lambda0 + (cfg.lambda_min - cfg.lambda0) * frac
    eps = cfg.epsilon0 * (cfg.epsilon_min / cfg.epsilon0) ** frac
    return lam, eps


def embed_visit(position, target, action):
    """Visitation atom: target-relative position plus action embedding.

    Relative coordinates make all agents' ideal visitation measures live in
    the same region (offsets shrinking to zero), so transport toward the
    barycenter carries behavioral information across agents.
    """
    return ot.embed_state_action(np.asarray(position) - np.asarray(target), action)


def collect_rollouts(policies, env_cfg, train_cfg, rng, disc, targets=None):
    """Run batch_episodes full episodes and subsample visitation atoms."""
    n = env_cfg.n_agents
    visits = [[] for _ in range(n)]  # (offset, action, cell, return) per agent
    reward_sum = 0.0
    reward_count = 0
    for _ in range(train_cfg.batch_episodes):
        ep_seed = int(rng.integers(2 ** 63))
        state = nav.reset(env_cfg, ep_seed, targets=targets)
        records = [[] for _ in range(n)]  # (offset, action, cell, reward)
        done = False
        while not done:
            actions = np.empty(n, dtype=int)
            cells = np.empty(n, dtype=int)
            offsets = state.positions - state.targets
            for i in range(n):
                cells[i] = disc.cell_of(nav.observe(state, i, env_cfg))
                actions[i] = pol.sample_action(policies[i], cells[i], rng)
            state, rewards, done = nav.step(state, actions, env_cfg)
            for i in range(n):
                records[i].append((offsets[i], actions[i], cells[i], rewards[i]))
            reward_sum += rewards.sum()
            reward_count += n
        for i in range(n):
            rtg = 0.0
            for k in range(len(records[i]) - 1, -1, -1):
                off, act, cell, rew = records[i][k]
                rtg += rew
                visits[i].append((off, act, cell, rtg))

    agents = []
    m = train_cfg.atoms_per_agent
    for i in range(n):
        pool = visits[i]
        idx = rng.choice(len(pool), size=m, replace=len(pool) < m, shuffle=False)
        atoms = np.array([ot.embed_state_action(pool[k][0], pool[k][1]) for k in idx])
        cells = np.array([pool[k][2] for k in idx], dtype=int)
        actions = np.array([pool[k][1] for k in idx], dtype=int)
        returns = np.array([pool[k][3] for k in idx])
        measure = ot.DiscreteMeasure(atoms, np.full(m, 1.0 / m))
        agents.append(AgentBatch(
            measure, cells, actions, returns,
            visit_cells=np.array([v[2] for v in pool], dtype=int),
            visit_actions=np.array([v[1] for v in pool], dtype=int),
            visit_returns=np.array([v[3] for v in pool]),
            n_episodes=train_cfg.batch_episodes,
        ))
    return VisitationBatch(agents, mean_team_reward=reward_sum / reward_count)


def reward_gradient(batch, policy, ref_policy=None, clip_ratio=0.2):
    """REINFORCE with a per-agent mean-return baseline.

    Sums advantage-weighted scores over every step within an episode and
    averages over episodes (the classical estimator of the gradient of the
    expected episode return).

    When ref_policy is given, uses the clipped importance-ratio surrogate
    instead: per-step contributions become ratio * advantage * score and are
    zeroed whenever the ratio leaves [1 - clip_ratio, 1 + clip_ratio] in the
    advantage's direction. With a single update per batch the behavior policy
    equals the current policy, every ratio is exactly 1, and the surrogate
    gradient coincides with the vanilla estimator.
    """
    cells = batch.cells if batch.visit_cells is None else batch.visit_cells
    actions = batch.actions if batch.visit_actions is None else batch.visit_actions
    returns = batch.returns if batch.visit_returns is None else batch.visit_returns
    grad = np.zeros_like(policy.logits)
    # reward-to-go varies far more across time steps than across episodes,
    # so baseline per time index (mean over episodes) when the batch has
    # aligned episodes; otherwise fall back to the scalar mean
    n_ep = batch.n_episodes
    if n_ep > 1 and len(returns) % n_ep == 0:
        per_step = returns.reshape(n_ep, -1).mean(axis=0)
        baselines = np.tile(per_step, n_ep)
    else:
        baselines = np.full(len(returns), returns.mean())
    for cell, action, ret, baseline in zip(cells, actions, returns, baselines):
        adv = ret - baseline
        row = pol.log_prob_grad_row(policy, cell, action)
        if ref_policy is not None:
            ratio = (pol.action_probs(policy, cell)[action]
                     / pol.action_probs(ref_policy, cell)[action])
            if (adv > 0 and ratio > 1.0 + clip_ratio) or \
                    (adv < 0 and ratio < 1.0 - clip_ratio):
                continue
            adv = adv * ratio
        grad[cell] += adv * row
    return grad / batch.n_episodes


def smoothed_measure(batch, policy):
    """Policy-smoothed visitation measure on the batch's sampled states.

    Keeps the sampled state atoms but carries each state's action mass
    analytically: weight(state k, action a) = (1/m) * pi(a | cell_k). This
    is the Rao-Blackwellized estimate of the policy's visitation measure
    (the action conditional of the true measure IS the policy), so it has
    no action-sampling noise. Returns (measure, per-state action probs).
    """
    m = len(batch.cells)
    states = batch.measure.points[:, :2]
    points = np.concatenate(
        [np.repeat(states, pol.N_ACTIONS, axis=0),
         np.tile(ot.EMBED_ACTION_VECTORS, (m, 1))], axis=1)
    probs = np.array([pol.action_probs(policy, c) for c in batch.cells])
    return ot.DiscreteMeasure(points, probs.ravel() / m), probs


def consensus_gradient(batch, barycenter, policy, cfg, epsilon=None, plan=None):
    """Exact gradient of the entropic transport cost to the barycenter.

    The smoothed visitation measure depends on the policy only through its
    weights. By the envelope theorem the gradient of the entropic OT value
    with respect to the source weights is the source dual potential, so the
    chain rule through the softmax gives, per sampled state,
    (1/m) * pi * (f_k - <pi, f_k>): this matches central finite differences
    of the entropic cost row for row. When the caller already holds the
    coupling (the barycenter solver returns every input measure's plan,
    potentials included), no extra solve happens.
    """
    eps = cfg.epsilon0 if epsilon is None else epsilon
    m = len(batch.cells)
    extended, probs = smoothed_measure(batch, policy)
    if plan is None:
        if batch.measure.dim != barycenter.dim:
            raise ValueError("batch/barycenter dimension mismatch")
        scfg = cfg.sinkhorn_config(eps)
        _, plan = ot.sinkhorn_ot(extended, barycenter, scfg, cfg.beta)
    f = plan.f.reshape(m, pol.N_ACTIONS)
    grad = np.zeros_like(policy.logits)
    for k, cell in enumerate(batch.cells):
        p = probs[k]
        grad[cell] += p * (f[k] - p @ f[k])
    return grad / m


def _clip_rows(grad, max_norm):
    norms = np.linalg.norm(grad, axis=1, keepdims=True)
    scale = np.ones_like(norms)
    over = norms > max_norm
    scale[over] = max_norm / norms[over]
    return grad * scale


def _diagnostics(iteration, batch, measures, bary, residual, lam, eps, cfg, t0,
                 bary_plans=None):
    scfg = cfg.sinkhorn_config(eps)
    n = len(measures)
    if cfg.use_sliced_for_diagnostics:
        d_t = max(
            ot.sliced_wasserstein(measures[i], measures[j], 32, cfg.p,
                                  seed=cfg.seed * 1000 + iteration)
            for i in range(n) for j in range(i + 1, n)
        )
    else:
        d_t = float(ot.pairwise_divergence_matrix(measures, scfg, cfg.beta).max())
    # debiased divergence to the barycenter, sharing the self-cost terms
    self_costs = [ot.sinkhorn_self_cost(m, scfg, cfg.beta) for m in measures]
    bary_self = ot.sinkhorn_self_cost(bary, scfg, cfg.beta)
    if bary_plans is not None:
        cross = [
            float((plan.gamma
                   * ot.cost_matrix(m, bary, cfg.beta, cfg.p).entries).sum())
            for m, plan in zip(measures, bary_plans)
        ]
    else:
        cross = [float(ot.sinkhorn_ot(m, bary, scfg, cfg.beta)[0])
                 for m in measures]
    div_to_bary = [c - 0.5 * (sc + bary_self)
                   for c, sc in zip(cross, self_costs)]
    return ConsensusDiagnostics(
        iteration=iteration,
        d_t=d_t,
        div_to_bary=div_to_bary,
        mean_team_reward=batch.mean_team_reward,
        lambda_t=lam,
        epsilon_t=eps,
        bary_residual=float(residual),
        wall_ms=(time.perf_counter() - t0) * 1000.0,
        bary_weight_err=abs(float(bary.weights.sum()) - 1.0),
    )


def pooled_support(measures):
    return ot.dedupe_support(np.vstack([m.points for m in measures]))


def consensus_step(policies, env_cfg, train_cfg, iteration, rng, disc,
                   targets=None, penalty="ot", lambda_override=None):
    """One training iteration shared by WBC and the baseline variants.

    penalty: "ot" (transport to barycenter), "kl" (KL to the uniform policy
    mixture), or anything else with lambda 0 for independent learners.
    Returns (updated policies, diagnostics).
    """
    t0 = time.perf_counter()
    lam, eps = schedule_step(train_cfg, iteration)
    if lambda_override is not None:
        lam = lambda_override
    batch = collect_rollouts(policies, env_cfg, train_cfg, rng, disc, targets)
    measures = [smoothed_measure(ab, p)[0]
                for ab, p in zip(batch.agents, policies)]
    support = pooled_support(measures)
    bary_res = ot.sinkhorn_barycenter(
        measures, support, train_cfg.sinkhorn_config(eps), train_cfg.beta
    )
    bary = bary_res.measure

    if penalty == "kl":
        reference = np.mean([pol.action_probs_all(q) for q in policies], axis=0)

    updated = []
    for i, (p, ab) in enumerate(zip(policies, batch.agents)):
        grad = reward_gradient(
            ab, p, ref_policy=p if train_cfg.use_clipped_surrogate else None,
            clip_ratio=train_cfg.clip_ratio)
        if lam > 0 and penalty == "ot":
            grad = grad - (lam * train_cfg.consensus_scale * len(ab.cells)
                           * consensus_gradient(ab, bary, p, train_cfg,
                                                epsilon=eps,
                                                plan=bary_res.plans[i]))
        elif lam > 0 and penalty == "kl":
            _, kgrad = pol.kl_to_reference(p, reference, ab.cells)
            grad = grad - lam * len(ab.cells) * kgrad
        grad = _clip_rows(grad, train_cfg.grad_clip)
        q = p.copy()
        q.logits += train_cfg.alpha * grad
        updated.append(q)

    diag = _diagnostics(iteration, batch, measures, bary,
                        bary_res.marginal_residual, lam, eps, train_cfg, t0,
                        bary_plans=bary_res.plans)
    return updated, diag


def wbc_step(policies, env_cfg, train_cfg, iteration, rng, disc, targets=None):
    """Full consensus iteration: collect, barycenter, penalized update."""
    return consensus_step(policies, env_cfg, train_cfg, iteration, rng, disc,
                          targets=targets, penalty="ot")


def make_policies(env_cfg, disc):
    return [
        pol.SoftmaxPolicy.zeros(disc.n_cells, agent_id=i)
        for i in range(env_cfg.n_agents)
    ]


def run_training(env_cfg, train_cfg, method="wbc", step_fn=None, csv_path=None,
                 include_timing=False):
    """Run the full loop; returns (diagnostics list, final policies).

    method selects the update rule ("wbc", "independent", "kl_reg",
    "param_share"); step_fn overrides it for custom experiments.
    On failure the diagnostics collected so far are flushed to csv_path.
    """
    from . import baselines  # late import; baselines builds on this module

    disc = pol.ObsDiscretizer(grid_resolution=train_cfg.grid_resolution)
    rng = np.random.default_rng(train_cfg.seed)
    if env_cfg.target_mode == "fixed_per_seed":
        targets = nav.reset(env_cfg, train_cfg.seed).targets
    else:
        targets = None

    if step_fn is None:
        step_fn = {
            "wbc": wbc_step,
            "independent": baselines.independent_step,
            "kl_reg": baselines.kl_consensus_step,
            "param_share": baselines.shared_params_step,
        }[method]

    if method == "param_share" and step_fn is baselines.shared_params_step:
        shared = pol.SoftmaxPolicy.zeros(disc.n_cells)
        policies = [shared]
    else:
        policies = make_policies(env_cfg, disc)

    diags = []
    try:
        for t in range(train_cfg.iterations):
            policies, diag = step_fn(policies, env_cfg, train_cfg, t, rng, disc,
                                     targets=targets)
            diags.append(diag)
    finally:
        if csv_path is not None:
            with open(csv_path, "w") as fh:
                fh.write(diagnostics_csv(diags, train_cfg.seed, method,
                                         env_cfg.n_agents, include_timing))
    if method == "param_share":
        policies = [policies[0]] * env_cfg.n_agents
    return diags, policies


def diagnostics_csv(diags, seed, method, n_agents, include_timing=False):
    """Render diagnostics rows; timing is off by default so reruns with the
    same seed produce byte-identical output."""
    buf = io.StringIO()
    cols = ["iteration", "seed", "method", "D_t"]
    cols += [f"div_to_bary_agent_{i}" for i in range(n_agents)]
    cols += ["mean_team_reward", "lambda_t", "epsilon_t", "bary_residual"]
    if include_timing:
        cols.append("wall_ms")
    buf.write(",".join(cols) + "\n")
    for d in diags:
        row = [str(d.iteration), str(seed), method, repr(d.d_t)]
        row += [repr(v) for v in d.div_to_bary]
        row += [repr(d.mean_team_reward), repr(d.lambda_t), repr(d.epsilon_t),
                repr(d.bary_residual)]
        if include_timing:
            row.append(repr(d.wall_ms))
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def policy_snapshot_csv(policy):
    """Flat (cell, action, logit) dump of one policy table."""
    buf = io.StringIO()
    buf.write("cell,action,logit\n")
    for cell in range(policy.n_cells):
        for a in range(pol.N_ACTIONS):
            buf.write(f"{cell},{a},{policy.logits[cell, a]!r}\n")
    return buf.getvalue()
