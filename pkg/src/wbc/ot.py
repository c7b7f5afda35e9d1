"""Discrete entropic optimal transport on embedded state-action points.

Ground costs split each point into a state block and an action block:
d(x, y) = ||x_s - y_s|| + beta * ||x_a - y_a||, raised to the power p.
All solvers work on weighted point clouds (DiscreteMeasure) and switch to
log-domain iterations automatically when epsilon is small relative to the
cost scale.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog


def logsumexp(x, axis=None):
    """Minimal logsumexp; avoids scipy's array-API dispatch overhead."""
    m = np.max(x, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(x - m), axis=axis))
    if axis is None:
        return float(out + m.reshape(()))
    return out + np.squeeze(m, axis=axis)

# Action embedding: stay, right, left, up, down as unit displacements.
ACTION_NAMES = ("stay", "right", "left", "up", "down")
ACTION_VECTORS = np.array(
    [[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
)

# Embedded coordinates are shrunk so the ground-cost range stays within a
# small multiple of the default entropic regularization; Sinkhorn and IBP
# rates degrade sharply once max(D) / epsilon grows past a few tens.
EMBED_SCALE = 0.5
EMBED_ACTION_VECTORS = EMBED_SCALE * ACTION_VECTORS

# Kernel-space Sinkhorn underflows once exp(-max(D)/eps) is tiny; below this
# ratio every solver runs in log space.
LOG_DOMAIN_THRESHOLD = 0.05


class TransportError(RuntimeError):
    """Sinkhorn/IBP failed to reach the marginal tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


def embed_state_action(state, action):
    """Concatenate a 2D state with the unit-displacement action embedding."""
    if not (0 <= int(action) < len(ACTION_VECTORS)):
        raise ValueError(f"unknown action id {action!r}")
    state = np.asarray(state, dtype=float)
    if state.shape != (2,):
        raise ValueError(f"state must be a 2-vector, got shape {state.shape}")
    return np.concatenate([EMBED_SCALE * state, EMBED_ACTION_VECTORS[int(action)]])


@dataclass
class DiscreteMeasure:
    """Weighted point cloud: points is (n, d), weights a probability vector."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.points.shape[0] != self.weights.shape[0]:
            raise ValueError("support and weights must have equal length")
        if self.points.shape[0] < 1:
            raise ValueError("measure must have at least one atom")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("support coordinates must be finite")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {self.weights.sum()}")

    @property
    def dim(self):
        return self.points.shape[1]

    def __len__(self):
        return self.points.shape[0]

    def pruned(self):
        """Drop zero-weight atoms (avoids singular scalings in the solvers)."""
        keep = self.weights > 0
        if keep.all():
            return self
        return DiscreteMeasure(self.points[keep], self.weights[keep])

    @staticmethod
    def uniform(points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = points.shape[0]
        return DiscreteMeasure(points, np.full(n, 1.0 / n))

    def to_csv(self):
        buf = io.StringIO()
        d = self.dim
        buf.write(",".join(f"coord_{k}" for k in range(d)) + ",weight\n")
        for x, w in zip(self.points, self.weights):
            buf.write(",".join(repr(float(v)) for v in x) + f",{float(w)!r}\n")
        return buf.getvalue()

    @staticmethod
    def from_csv(text):
        lines = [ln for ln in text.strip().splitlines() if ln]
        rows = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
        arr = np.asarray(rows)
        return DiscreteMeasure(arr[:, :-1], arr[:, -1])


@dataclass
class CostMatrix:
    entries: np.ndarray
    p: int
    beta: float


@dataclass
class CouplingPlan:
    gamma: np.ndarray
    source_marginal: np.ndarray
    target_marginal: np.ndarray
    # dual potentials in the gamma = exp((f + g - D) / eps) convention;
    # by the envelope theorem f is the gradient of the entropic value
    # f.a + g.b - eps with respect to the source weights
    f: np.ndarray = None
    g: np.ndarray = None

    def marginal_residual(self):
        row = np.abs(self.gamma.sum(axis=1) - self.source_marginal).max()
        col = np.abs(self.gamma.sum(axis=0) - self.target_marginal).max()
        return max(row, col)


@dataclass
class SinkhornConfig:
    epsilon: float = 0.1
    max_iters: int = 2000
    tol: float = 1e-6
    p: int = 2
    debias: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.p not in (1, 2):
            raise ValueError("p must be 1 or 2")


@dataclass
class BarycenterResult:
    measure: DiscreteMeasure
    iterations_used: int
    marginal_residual: float
    # optimal couplings measure_i -> barycenter, read off the IBP fixed
    # point (the per-measure scaling pairs are the Sinkhorn duals of those
    # transport problems, so no extra solves are needed)
    plans: list = None


def ground_cost(x, y, beta, p, state_dim=2):
    """(||x_s - y_s|| + beta ||x_a - y_a||)**p for a single pair of points."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if beta <= 0:
        raise ValueError("beta must be positive")
    ds = np.linalg.norm(x[:state_dim] - y[:state_dim])
    da = np.linalg.norm(x[state_dim:] - y[state_dim:])
    return float((ds + beta * da) ** p)


def cost_matrix(src, dst, beta, p, state_dim=2):
    """Pairwise ground costs between the supports of two measures."""
    if src.dim != dst.dim:
        raise ValueError(f"dimension mismatch: {src.dim} vs {dst.dim}")
    if beta <= 0:
        raise ValueError("beta must be positive")
    xs, ys = src.points[:, :state_dim], dst.points[:, :state_dim]
    xa, ya = src.points[:, state_dim:], dst.points[:, state_dim:]
    ds = np.linalg.norm(xs[:, None, :] - ys[None, :, :], axis=2)
    da = np.linalg.norm(xa[:, None, :] - ya[None, :, :], axis=2)
    return CostMatrix((ds + beta * da) ** p, p=p, beta=beta)


def _sinkhorn_kernel(D, a, b, eps, max_iters, tol):
    K = np.exp(-D / eps)
    if np.any(K.sum(axis=1) == 0) or np.any(K.sum(axis=0) == 0):
        raise TransportError(
            "kernel underflow (all-zero row/column of exp(-D/eps)); "
            "use the log-domain path"
        )
    v = np.ones_like(b)
    residual = np.inf
    for it in range(max_iters):
        u = a / (K @ v)
        v = b / (K.T @ u)
        gamma = u[:, None] * K * v[None, :]
        residual = max(
            np.abs(gamma.sum(axis=1) - a).max(),
            np.abs(gamma.sum(axis=0) - b).max(),
        )
        if residual <= tol:
            return gamma, u, v
    raise TransportError(
        f"Sinkhorn did not converge in {max_iters} iters "
        f"(marginal residual {residual:.3e})",
        residual=residual,
    )


def _eps_schedule(eps_target, cost_scale, factor=0.5, warm_iters=25):
    """Geometric epsilon-scaling ladder used to warm start small-eps solves."""
    ladder = []
    e = max(cost_scale, eps_target)
    while e > eps_target * (1 + 1e-12):
        ladder.append(e)
        e *= factor
    return ladder, warm_iters


COLD_START_ITERS = 1000


def _sinkhorn_log(D, a, b, eps, max_iters, tol, theta=1.5):
    """Log-domain Sinkhorn with over-relaxation and an eps-scaling fallback.

    A cold start usually converges at moderate regularization; deep in the
    small-eps regime it stalls, so on failure the solve restarts with a
    geometric eps-scaling warm-start ladder. theta in (1, 2) accelerates
    the linear rate, which degrades badly when one marginal carries very
    small weights (barycenter targets do).
    """
    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros_like(a)
    g = np.zeros_like(b)

    def sweep(e, th=1.0):
        nonlocal f, g
        fn = e * (log_a - logsumexp((g[None, :] - D) / e, axis=1))
        f = (1.0 - th) * f + th * fn
        gn = e * (log_b - logsumexp((f[:, None] - D) / e, axis=0))
        g = (1.0 - th) * g + th * gn

    residual = np.inf
    for use_ladder in (False, True):
        f[:] = 0.0
        g[:] = 0.0
        if use_ladder:
            ladder, warm_iters = _eps_schedule(eps, float(D.max()))
            for e in ladder:
                for _ in range(warm_iters):
                    sweep(e)
            budget = max_iters
        else:
            budget = min(max_iters, COLD_START_ITERS)
        for it in range(budget):
            sweep(eps, theta)
            if (it + 1) % 4 == 0 or it == budget - 1:
                gamma = np.exp((f[:, None] + g[None, :] - D) / eps)
                residual = max(
                    np.abs(gamma.sum(axis=1) - a).max(),
                    np.abs(gamma.sum(axis=0) - b).max(),
                )
                if residual <= tol:
                    return gamma, f, g
    raise TransportError(
        f"log-domain Sinkhorn did not converge in {max_iters} iters "
        f"(marginal residual {residual:.3e})",
        residual=residual,
    )


def sinkhorn_ot(src, dst, cfg, beta, state_dim=2):
    """Entropic OT between two measures.

    Returns (cost, plan) where cost = <gamma, D> at the entropic optimum
    (entropy term excluded from the reported value).
    """
    src = src.pruned()
    dst = dst.pruned()
    D = cost_matrix(src, dst, beta, cfg.p, state_dim=state_dim).entries
    a, b = src.weights, dst.weights
    if len(src) == len(dst) and np.array_equal(src.points, dst.points) \
            and np.array_equal(a, b):
        # alternating scaling contracts very slowly on symmetric instances;
        # the averaged fixed point with equal potentials does not
        f = _symmetric_potential(D, a, cfg.epsilon, cfg.max_iters, cfg.tol)
        gamma = np.exp((f[:, None] + f[None, :] - D) / cfg.epsilon)
        return float((gamma * D).sum()), CouplingPlan(gamma, a.copy(), b.copy(),
                                                      f=f.copy(), g=f.copy())
    if cfg.epsilon < LOG_DOMAIN_THRESHOLD * max(D.max(), 1e-300):
        gamma, f, g = _sinkhorn_log(D, a, b, cfg.epsilon, cfg.max_iters,
                                    cfg.tol)
    else:
        gamma, u, v = _sinkhorn_kernel(D, a, b, cfg.epsilon, cfg.max_iters,
                                       cfg.tol)
        f, g = cfg.epsilon * np.log(u), cfg.epsilon * np.log(v)
    cost = float((gamma * D).sum())
    return cost, CouplingPlan(gamma, a.copy(), b.copy(), f=f, g=g)


def sinkhorn_self_cost(m, cfg, beta, state_dim=2):
    """<gamma, D> for the self-transport OT_eps(m, m).

    Exploits the symmetry of the problem (equal potentials on both sides)
    with an averaged fixed-point iteration, which converges much faster than
    alternating Sinkhorn on the same instance.
    """
    m = m.pruned()
    D = cost_matrix(m, m, beta, cfg.p, state_dim=state_dim).entries
    f = _symmetric_potential(D, m.weights, cfg.epsilon, cfg.max_iters, cfg.tol)
    gamma = np.exp((f[:, None] + f[None, :] - D) / cfg.epsilon)
    return float((gamma * D).sum())


def _symmetric_potential(D, a, eps, max_iters, tol):
    """Equal-potential fixed point for OT_eps(m, m) via averaged updates."""
    log_a = np.log(a)
    f = np.zeros(len(a))
    residual = np.inf
    for use_ladder in (False, True):
        f[:] = 0.0
        if use_ladder:
            ladder, warm_iters = _eps_schedule(eps, float(D.max()))
            for e in ladder:
                for _ in range(warm_iters):
                    f = 0.5 * (f + e * (log_a - logsumexp(
                        (f[None, :] - D) / e, axis=1)))
            budget = max_iters
        else:
            budget = min(max_iters, COLD_START_ITERS)
        for it in range(budget):
            f = 0.5 * (f + eps * (log_a - logsumexp(
                (f[None, :] - D) / eps, axis=1)))
            if (it + 1) % 4 == 0 or it == budget - 1:
                gamma = np.exp((f[:, None] + f[None, :] - D) / eps)
                residual = np.abs(gamma.sum(axis=1) - a).max()
                if residual <= tol:
                    return f
    raise TransportError(
        f"symmetric Sinkhorn did not converge in {max_iters} iters "
        f"(marginal residual {residual:.3e})",
        residual=residual,
    )


def sinkhorn_divergence(src, dst, cfg, beta, state_dim=2):
    """Debiased divergence: OT(a,b) - (OT(a,a) + OT(b,b)) / 2."""
    ab, _ = sinkhorn_ot(src, dst, cfg, beta, state_dim=state_dim)
    aa = sinkhorn_self_cost(src, cfg, beta, state_dim=state_dim)
    bb = sinkhorn_self_cost(dst, cfg, beta, state_dim=state_dim)
    return ab - 0.5 * (aa + bb)


def sinkhorn_barycenter(
    measures, support, cfg, beta, reference_weights=None, state_dim=2
):
    """Fixed-support entropic barycenter via iterative Bregman projections.

    Maintains one scaling pair per input measure; the barycenter is the
    reference-weighted geometric mean of the scaled column marginals.
    Uniform barycentric weights 1/N.
    """
    if len(measures) == 0:
        raise ValueError("empty measure list")
    support = np.atleast_2d(np.asarray(support, dtype=float))
    if support.shape[0] < 1:
        raise ValueError("support must be nonempty")
    measures = [m.pruned() for m in measures]
    for m in measures:
        if m.dim != support.shape[1]:
            raise ValueError("measure/support dimension mismatch")
    n_sup = support.shape[0]
    if reference_weights is None:
        reference_weights = np.full(n_sup, 1.0 / n_sup)
    reference_weights = np.asarray(reference_weights, dtype=float)
    if np.any(reference_weights <= 0) or abs(reference_weights.sum() - 1.0) > 1e-9:
        raise ValueError("reference_weights must be strictly positive, sum to 1")

    sup_measure = DiscreteMeasure.uniform(support)
    Ds = [
        cost_matrix(m, sup_measure, beta, cfg.p, state_dim=state_dim).entries
        for m in measures
    ]
    max_cost = max(D.max() for D in Ds)
    log_domain = cfg.epsilon < LOG_DOMAIN_THRESHOLD * max(max_cost, 1e-300)
    N = len(measures)
    eps = cfg.epsilon
    log_ref = np.log(reference_weights)

    if log_domain:
        # dual potentials g_i = e * log v_i carry across eps-scaling stages
        g = np.zeros((N, n_sup))
        log_ws = [np.log(m.weights) for m in measures]

        def ibp_pass(e):
            nonlocal g
            log_ktu = np.empty((N, n_sup))
            for i in range(N):
                f_i = e * (log_ws[i]
                           - logsumexp((g[i][None, :] - Ds[i]) / e, axis=1))
                log_ktu[i] = logsumexp((f_i[None, :] - Ds[i].T) / e, axis=1)
            # scaled column marginals of each plan before the rescale
            cols = np.exp(log_ktu + g / e)
            log_b = log_ref + np.mean(log_ktu, axis=0)
            log_b -= logsumexp(log_b)
            b = np.exp(log_b)
            b /= b.sum()
            residual = np.abs(cols - b[None, :]).max()
            g = e * (log_b[None, :] - log_ktu)
            return residual, b

        residual = np.inf
        for use_ladder in (False, True):
            g = np.zeros((N, n_sup))
            if use_ladder:
                ladder, warm_iters = _eps_schedule(eps, max_cost)
                for e in ladder:
                    for _ in range(warm_iters):
                        ibp_pass(e)
                budget = cfg.max_iters
            else:
                budget = min(cfg.max_iters, COLD_START_ITERS)
            for it in range(budget):
                residual, b = ibp_pass(eps)
                if residual <= cfg.tol:
                    plans = []
                    for i in range(N):
                        f_i = eps * (log_ws[i] - logsumexp(
                            (g[i][None, :] - Ds[i]) / eps, axis=1))
                        gamma = np.exp(
                            (f_i[:, None] + g[i][None, :] - Ds[i]) / eps)
                        plans.append(CouplingPlan(
                            gamma, measures[i].weights.copy(), b.copy(),
                            f=f_i, g=g[i].copy()))
                    return BarycenterResult(DiscreteMeasure(support, b),
                                            it + 1, float(residual), plans)
        raise TransportError(
            f"IBP did not converge in {cfg.max_iters} iters (residual {residual:.3e})",
            residual=float(residual),
        )

    Ks = [np.exp(-D / eps) for D in Ds]
    for K in Ks:
        if np.any(K.sum(axis=1) == 0) or np.any(K.sum(axis=0) == 0):
            raise TransportError("kernel underflow in IBP; use the log-domain path")
    vs = [np.ones(n_sup) for _ in measures]
    residual = np.inf
    for it in range(cfg.max_iters):
        ktus = np.empty((N, n_sup))
        for i, m in enumerate(measures):
            u = m.weights / (Ks[i] @ vs[i])
            ktus[i] = Ks[i].T @ u
        cols = ktus * np.asarray(vs)
        log_b = log_ref + np.mean(np.log(ktus), axis=0)
        log_b -= logsumexp(log_b)
        b = np.exp(log_b)
        b /= b.sum()
        residual = np.abs(cols - b[None, :]).max()
        for i in range(N):
            vs[i] = b / ktus[i]
        if residual <= cfg.tol:
            plans = []
            for i, m in enumerate(measures):
                u = m.weights / (Ks[i] @ vs[i])
                gamma = u[:, None] * Ks[i] * vs[i][None, :]
                plans.append(CouplingPlan(
                    gamma, m.weights.copy(), b.copy(),
                    f=eps * np.log(u), g=eps * np.log(vs[i])))
            return BarycenterResult(DiscreteMeasure(support, b), it + 1,
                                    float(residual), plans)
    raise TransportError(
        f"IBP did not converge in {cfg.max_iters} iters (residual {residual:.3e})",
        residual=float(residual),
    )


def sliced_wasserstein(src, dst, n_projections, p, seed):
    """Monte-Carlo sliced transport cost.

    Averages, over random unit directions, the 1D p-Wasserstein transport
    cost (p-th power, quantile matching) between the projected measures.
    """
    if n_projections < 1:
        raise ValueError("n_projections must be >= 1")
    if src.dim != dst.dim:
        raise ValueError("dimension mismatch")
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_projections, src.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    total = 0.0
    for theta in dirs:
        xs = src.points @ theta
        ys = dst.points @ theta
        total += _wasserstein_1d(xs, src.weights, ys, dst.weights, p)
    return total / n_projections


def _wasserstein_1d(xs, wx, ys, wy, p):
    """Exact 1D transport cost sum |F^-1 - G^-1|^p via merged quantiles."""
    ix = np.argsort(xs, kind="stable")
    iy = np.argsort(ys, kind="stable")
    xs, wx = xs[ix], wx[ix]
    ys, wy = ys[iy], wy[iy]
    cx = np.cumsum(wx)
    cy = np.cumsum(wy)
    qs = np.union1d(cx, cy)
    qs = qs[qs <= 1.0 + 1e-15]
    prev = 0.0
    cost = 0.0
    i = j = 0
    for q in qs:
        dq = q - prev
        if dq > 0:
            cost += dq * abs(xs[i] - ys[j]) ** p
        prev = q
        while i < len(cx) - 1 and cx[i] <= q + 1e-15:
            i += 1
        while j < len(cy) - 1 and cy[j] <= q + 1e-15:
            j += 1
    return cost


def exact_ot_lp(src, dst, cost):
    """Exact (unregularized) OT by dense linear programming; oracle use only."""
    D = np.asarray(cost.entries, dtype=float)
    if D.shape != (len(src), len(dst)):
        raise ValueError(
            f"cost matrix shape {D.shape} does not match supports "
            f"({len(src)}, {len(dst)})"
        )
    keep_r = src.weights > 0
    keep_c = dst.weights > 0
    src, dst = src.pruned(), dst.pruned()
    D = D[np.ix_(keep_r, keep_c)]
    n, m = D.shape
    if n > 16 or m > 16:
        raise ValueError(f"support too large for dense LP: {n}x{m} (max 16)")
    # equality constraints: row sums = a, col sums = b (drop one redundant row)
    A_eq = np.zeros((n + m - 1, n * m))
    b_eq = np.zeros(n + m - 1)
    for i in range(n):
        A_eq[i, i * m : (i + 1) * m] = 1.0
        b_eq[i] = src.weights[i]
    for j in range(m - 1):
        A_eq[n + j, j::m] = 1.0
        b_eq[n + j] = dst.weights[j]
    res = linprog(D.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise TransportError(f"LP solver failed: {res.message}")
    gamma = res.x.reshape(n, m)
    return float((gamma * D).sum()), CouplingPlan(
        gamma, src.weights.copy(), dst.weights.copy()
    )


def pairwise_divergence_matrix(measures, cfg, beta, state_dim=2):
    """Symmetric matrix of debiased divergences; max entry is the consensus gap."""
    N = len(measures)
    if N < 2:
        raise ValueError("need at least 2 measures")
    self_costs = [
        sinkhorn_self_cost(m, cfg, beta, state_dim=state_dim) for m in measures
    ]
    out = np.zeros((N, N))
    for i in range(N):
        for j in range(i + 1, N):
            ab, _ = sinkhorn_ot(measures[i], measures[j], cfg, beta, state_dim)
            d = ab - 0.5 * (self_costs[i] + self_costs[j])
            out[i, j] = out[j, i] = d
    return out


def dedupe_support(points, tol=1e-9):
    """Merge points closer than tol (used to pool barycenter supports)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    kept = []
    for x in points:
        if not any(np.linalg.norm(x - y) <= tol for y in kept):
            kept.append(x)
    return np.asarray(kept)
