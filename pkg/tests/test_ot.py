import numpy as np
import pytest

from wbc import ot


def rand_measure(rng, n, d=4):
    pts = rng.random((n, d))
    w = rng.random(n) + 0.05
    return ot.DiscreteMeasure(pts, w / w.sum())


def test_embed_state_action():
    c = ot.EMBED_SCALE
    np.testing.assert_allclose(
        ot.embed_state_action((0.5, 0.5), 0), [0.5 * c, 0.5 * c, 0.0, 0.0])
    np.testing.assert_allclose(
        ot.embed_state_action((0.0, 0.0), 1), [0.0, 0.0, c, 0.0])
    np.testing.assert_allclose(
        ot.embed_state_action((0.2, 0.9), 3), [0.2 * c, 0.9 * c, 0.0, c])


def test_embed_rejects_bad_action():
    with pytest.raises(ValueError):
        ot.embed_state_action((0.0, 0.0), 7)


def test_measure_validation():
    with pytest.raises(ValueError):
        ot.DiscreteMeasure(np.zeros((2, 4)), np.array([0.7, 0.7]))
    with pytest.raises(ValueError):
        ot.DiscreteMeasure(np.zeros((2, 4)), np.array([1.5, -0.5]))


def test_measure_csv_roundtrip():
    rng = np.random.default_rng(0)
    m = rand_measure(rng, 5)
    back = ot.DiscreteMeasure.from_csv(m.to_csv())
    np.testing.assert_allclose(back.points, m.points)
    np.testing.assert_allclose(back.weights, m.weights)


def test_ground_cost_values():
    a = np.array([0.0, 0.0, 0.0, 0.0])
    b = np.array([3.0, 4.0, 0.0, 0.0])
    assert ot.ground_cost(a, b, beta=0.8, p=1) == pytest.approx(5.0)
    # opposite unit action vectors, same state
    r = np.array([0.0, 0.0, 1.0, 0.0])
    l = np.array([0.0, 0.0, -1.0, 0.0])
    assert ot.ground_cost(r, l, beta=0.8, p=1) == pytest.approx(1.6)
    u = np.array([0.0, 0.0, 0.0, 1.0])
    s = np.array([0.3, 0.4, 0.0, 0.0])
    assert ot.ground_cost(u, s, beta=0.8, p=2) == pytest.approx(1.69)


def test_ground_cost_dimension_mismatch():
    with pytest.raises(ValueError):
        ot.ground_cost(np.zeros(4), np.zeros(3), beta=0.8, p=2)


def test_cost_matrix_matches_elementwise():
    rng = np.random.default_rng(1)
    src = rand_measure(rng, 2)
    dst = rand_measure(rng, 3)
    C = ot.cost_matrix(src, dst, beta=0.8, p=2).entries
    assert C.shape == (2, 3)
    for i in range(2):
        for j in range(3):
            want = ot.ground_cost(src.points[i], dst.points[j], 0.8, 2)
            assert C[i, j] == pytest.approx(want, rel=1e-12)


def test_cost_matrix_zero_diag_and_symmetry():
    rng = np.random.default_rng(2)
    m = rand_measure(rng, 4)
    C = ot.cost_matrix(m, m, beta=0.8, p=2).entries
    np.testing.assert_allclose(np.diag(C), 0.0, atol=1e-15)
    np.testing.assert_allclose(C, C.T)
    assert (C[~np.eye(4, dtype=bool)] > 0).all()


def test_sinkhorn_dirac_pair_exact():
    x = ot.DiscreteMeasure(np.array([[0.0, 0.0, 0.0, 0.0]]), np.array([1.0]))
    y = ot.DiscreteMeasure(np.array([[1.0, 2.0, 0.0, 0.0]]), np.array([1.0]))
    want = ot.ground_cost(x.points[0], y.points[0], 0.8, 2)
    for eps in (1.0, 0.1, 0.001):
        cost, plan = ot.sinkhorn_ot(x, y, ot.SinkhornConfig(epsilon=eps), 0.8)
        # accuracy is set by the marginal tolerance, not machine precision
        assert cost == pytest.approx(want, rel=1e-6)
        assert plan.gamma.shape == (1, 1)


def test_sinkhorn_self_transport_near_zero():
    rng = np.random.default_rng(3)
    m = rand_measure(rng, 6)
    D = ot.cost_matrix(m, m, 0.8, 2).entries
    cfg = ot.SinkhornConfig(epsilon=0.01 * D.max(), max_iters=20000)
    cost, _ = ot.sinkhorn_ot(m, m, cfg, 0.8)
    assert abs(cost) <= 0.01


def test_sinkhorn_1d_uniform_pair():
    src = ot.DiscreteMeasure(np.array([[0.0], [1.0]]), np.array([0.5, 0.5]))
    dst = ot.DiscreteMeasure(np.array([[0.5], [1.5]]), np.array([0.5, 0.5]))
    cfg = ot.SinkhornConfig(epsilon=0.01, p=1, max_iters=20000)
    cost, _ = ot.sinkhorn_ot(src, dst, cfg, beta=0.8, state_dim=1)
    assert abs(cost - 0.5) <= 0.05


def test_sinkhorn_marginals_within_tol():
    rng = np.random.default_rng(4)
    src, dst = rand_measure(rng, 5), rand_measure(rng, 7)
    cfg = ot.SinkhornConfig(epsilon=0.05, tol=1e-8, max_iters=20000)
    _, plan = ot.sinkhorn_ot(src, dst, cfg, 0.8)
    assert plan.marginal_residual() <= 1e-8
    assert (plan.gamma >= 0).all()


def test_sinkhorn_nonconvergence_raises_with_residual():
    rng = np.random.default_rng(5)
    src, dst = rand_measure(rng, 6), rand_measure(rng, 6)
    cfg = ot.SinkhornConfig(epsilon=0.001, max_iters=2, tol=1e-12)
    with pytest.raises(ot.TransportError) as err:
        ot.sinkhorn_ot(src, dst, cfg, 0.8)
    assert err.value.residual is not None and err.value.residual > 0


def test_divergence_identity_and_symmetry():
    rng = np.random.default_rng(6)
    a, b = rand_measure(rng, 5), rand_measure(rng, 5)
    cfg = ot.SinkhornConfig(epsilon=0.1, tol=1e-9, max_iters=20000)
    assert abs(ot.sinkhorn_divergence(a, a, cfg, 0.8)) <= 1e-9
    d_ab = ot.sinkhorn_divergence(a, b, cfg, 0.8)
    d_ba = ot.sinkhorn_divergence(b, a, cfg, 0.8)
    assert d_ab == pytest.approx(d_ba, abs=1e-9)
    assert d_ab >= -1e-9


def test_divergence_dirac_pair():
    x = ot.DiscreteMeasure(np.array([[0.2, 0.1, 0.0, 0.0]]), np.array([1.0]))
    y = ot.DiscreteMeasure(np.array([[0.9, 0.4, 1.0, 0.0]]), np.array([1.0]))
    cfg = ot.SinkhornConfig(epsilon=0.05, tol=1e-9)
    want = ot.ground_cost(x.points[0], y.points[0], 0.8, 2)
    assert ot.sinkhorn_divergence(x, y, cfg, 0.8) == pytest.approx(want, abs=1e-9)


def test_oracle_dominance_monotone_in_eps():
    rng = np.random.default_rng(7)
    src, dst = rand_measure(rng, 6), rand_measure(rng, 6)
    D = ot.cost_matrix(src, dst, 0.8, 2)
    lp_cost, _ = ot.exact_ot_lp(src, dst, D)
    prev = np.inf
    for eps in (0.5, 0.1, 0.02, 0.01):
        cfg = ot.SinkhornConfig(epsilon=eps, max_iters=50000, tol=1e-9)
        cost, _ = ot.sinkhorn_ot(src, dst, cfg, 0.8)
        assert cost >= lp_cost - 1e-9
        assert cost <= prev + 1e-9
        prev = cost
    assert prev - lp_cost <= 0.02


def test_permutation_invariance():
    rng = np.random.default_rng(8)
    src, dst = rand_measure(rng, 6), rand_measure(rng, 5)
    perm = rng.permutation(6)
    src_p = ot.DiscreteMeasure(src.points[perm], src.weights[perm])
    cfg = ot.SinkhornConfig(epsilon=0.1, tol=1e-12, max_iters=50000)
    d1 = ot.sinkhorn_divergence(src, dst, cfg, 0.8)
    d2 = ot.sinkhorn_divergence(src_p, dst, cfg, 0.8)
    assert d1 == pytest.approx(d2, abs=1e-12)
    D1 = ot.cost_matrix(src, dst, 0.8, 2)
    D2 = ot.cost_matrix(src_p, dst, 0.8, 2)
    lp1, _ = ot.exact_ot_lp(src, dst, D1)
    lp2, _ = ot.exact_ot_lp(src_p, dst, D2)
    assert lp1 == pytest.approx(lp2, abs=1e-12)


def test_barycenter_two_diracs_mode_at_midpoint():
    grid = np.array([[0.0], [0.25], [0.5], [0.75], [1.0]])
    d0 = ot.DiscreteMeasure(np.array([[0.0]]), np.array([1.0]))
    d1 = ot.DiscreteMeasure(np.array([[1.0]]), np.array([1.0]))
    cfg = ot.SinkhornConfig(epsilon=0.05, p=2, max_iters=20000)
    res = ot.sinkhorn_barycenter([d0, d1], grid, cfg, beta=0.8, state_dim=1)
    w = res.measure.weights
    assert w.sum() == pytest.approx(1.0, abs=1e-9)
    assert int(np.argmax(w)) == 2  # atom at 0.5
    assert res.marginal_residual <= cfg.tol


def test_barycenter_two_diracs_against_simplex_search():
    # brute-force the objective 0.5*W2(mu, d0) + 0.5*W2(mu, d1) over a grid
    # of weight vectors supported on the 5-point lattice
    grid = np.array([[0.0], [0.25], [0.5], [0.75], [1.0]])
    d0 = ot.DiscreteMeasure(np.array([[0.0]]), np.array([1.0]))
    d1 = ot.DiscreteMeasure(np.array([[1.0]]), np.array([1.0]))

    def objective(w):
        mu = ot.DiscreteMeasure(grid, w).pruned()
        total = 0.0
        for d in (d0, d1):
            C = ot.cost_matrix(mu, d, 0.8, 2, state_dim=1)
            total += 0.5 * ot.exact_ot_lp(mu, d, C)[0]
        return total

    best, best_val = None, np.inf
    ticks = np.linspace(0, 1, 11)
    for w2 in ticks:
        rest = 1.0 - w2
        for w0 in np.linspace(0, rest, 6):
            w = np.array([w0, 0.0, w2, 0.0, rest - w0])
            if w.sum() == 0:
                continue
            val = objective(w / w.sum())
            if val < best_val:
                best, best_val = w / w.sum(), val
    # exact W2 barycenter of two diracs puts all mass at the midpoint
    assert int(np.argmax(best)) == 2


def test_barycenter_single_measure_recovers_input():
    rng = np.random.default_rng(9)
    m = rand_measure(rng, 6)
    D = ot.cost_matrix(m, m, 0.8, 2).entries
    cfg = ot.SinkhornConfig(epsilon=0.01 * D.max(), max_iters=50000)
    res = ot.sinkhorn_barycenter([m], m.points, cfg, beta=0.8)
    tv = 0.5 * np.abs(res.measure.weights - m.weights).sum()
    assert tv <= 0.05


def test_barycenter_identical_inputs():
    rng = np.random.default_rng(10)
    m = rand_measure(rng, 5)
    D = ot.cost_matrix(m, m, 0.8, 2).entries
    cfg = ot.SinkhornConfig(epsilon=0.01 * D.max(), max_iters=50000)
    res = ot.sinkhorn_barycenter([m, m, m], m.points, cfg, beta=0.8)
    tv = 0.5 * np.abs(res.measure.weights - m.weights).sum()
    assert tv <= 0.05


def test_barycenter_weights_normalized_across_configs():
    rng = np.random.default_rng(11)
    ms = [rand_measure(rng, 5) for _ in range(3)]
    support = np.vstack([m.points for m in ms])
    # different epsilons stop IBP at different iteration counts; the
    # returned weights must be exactly normalized regardless
    for eps in (0.5, 0.1, 0.02):
        cfg = ot.SinkhornConfig(epsilon=eps, max_iters=50000)
        res = ot.sinkhorn_barycenter(ms, support, cfg, beta=0.8)
        assert res.measure.weights.sum() == pytest.approx(1.0, abs=1e-9)
        assert (res.measure.weights >= 0).all()


def test_barycenter_empty_list_rejected():
    with pytest.raises(ValueError):
        ot.sinkhorn_barycenter([], np.zeros((1, 4)), ot.SinkhornConfig(), 0.8)


def test_sliced_identity_and_dirac_bound():
    rng = np.random.default_rng(12)
    m = rand_measure(rng, 6)
    assert ot.sliced_wasserstein(m, m, 16, 2, seed=0) == 0.0
    x = ot.DiscreteMeasure(np.array([[0.0, 0.0, 0.0, 0.0]]), np.array([1.0]))
    y = ot.DiscreteMeasure(np.array([[0.6, 0.8, 0.0, 0.0]]), np.array([1.0]))
    val = ot.sliced_wasserstein(x, y, 64, 1, seed=0)
    assert 0.0 < val <= 1.0 + 1e-12  # ||x - y|| = 1


def test_sliced_matches_lp_in_1d():
    rng = np.random.default_rng(13)
    for p in (1, 2):
        src = ot.DiscreteMeasure(rng.random((5, 1)), ot.DiscreteMeasure.uniform(rng.random((5, 1))).weights)
        dst = rand_measure(rng, 6, d=1)
        C = ot.cost_matrix(src, dst, beta=1.0, p=p, state_dim=1)
        lp, _ = ot.exact_ot_lp(src, dst, C)
        sw = ot.sliced_wasserstein(src, dst, 4, p, seed=1)
        assert sw == pytest.approx(lp, abs=1e-9)


def test_sliced_deterministic_per_seed():
    rng = np.random.default_rng(14)
    a, b = rand_measure(rng, 5), rand_measure(rng, 5)
    v1 = ot.sliced_wasserstein(a, b, 32, 2, seed=42)
    v2 = ot.sliced_wasserstein(a, b, 32, 2, seed=42)
    assert v1 == v2


def test_exact_lp_examples():
    x = ot.DiscreteMeasure(np.array([[0.1, 0.2, 0.0, 0.0]]), np.array([1.0]))
    y = ot.DiscreteMeasure(np.array([[0.7, 0.5, 1.0, 0.0]]), np.array([1.0]))
    C = ot.cost_matrix(x, y, 0.8, 2)
    cost, _ = ot.exact_ot_lp(x, y, C)
    assert cost == pytest.approx(ot.ground_cost(x.points[0], y.points[0], 0.8, 2))

    two = ot.DiscreteMeasure(np.array([[0.0], [1.0]]), np.array([0.5, 0.5]))
    C2 = ot.cost_matrix(two, two, 0.8, 2, state_dim=1)
    cost2, plan2 = ot.exact_ot_lp(two, two, C2)
    assert cost2 == pytest.approx(0.0, abs=1e-12)
    assert plan2.marginal_residual() <= 1e-9

    src = ot.DiscreteMeasure(np.array([[0.0], [2.0]]), np.array([0.5, 0.5]))
    dst = ot.DiscreteMeasure(np.array([[1.0]]), np.array([1.0]))
    C3 = ot.cost_matrix(src, dst, 0.8, 1, state_dim=1)
    cost3, _ = ot.exact_ot_lp(src, dst, C3)
    assert cost3 == pytest.approx(1.0)


def test_exact_lp_refuses_large_support():
    rng = np.random.default_rng(15)
    big = rand_measure(rng, 17)
    small = rand_measure(rng, 3)
    C = ot.cost_matrix(big, small, 0.8, 2)
    with pytest.raises(ValueError):
        ot.exact_ot_lp(big, small, C)


def test_exact_lp_prunes_zero_weight_atoms():
    pts = np.array([[0.0], [0.5], [1.0]])
    src = ot.DiscreteMeasure(pts, np.array([0.5, 0.0, 0.5]))
    dst = ot.DiscreteMeasure(np.array([[0.25], [0.75]]), np.array([0.5, 0.5]))
    C = ot.cost_matrix(src, dst, 0.8, 1, state_dim=1)
    cost, _ = ot.exact_ot_lp(src, dst, C)
    assert cost == pytest.approx(0.25)


def test_pairwise_divergence_matrix():
    rng = np.random.default_rng(16)
    ms = [rand_measure(rng, 5) for _ in range(3)]
    cfg = ot.SinkhornConfig(epsilon=0.1, tol=1e-9, max_iters=20000)
    M = ot.pairwise_divergence_matrix(ms, cfg, 0.8)
    assert M.shape == (3, 3)
    np.testing.assert_allclose(M, M.T, atol=1e-12)
    np.testing.assert_allclose(np.diag(M), 0.0, atol=1e-9)
    for i in range(3):
        for j in range(i + 1, 3):
            want = ot.sinkhorn_divergence(ms[i], ms[j], cfg, 0.8)
            assert M[i, j] == pytest.approx(want, abs=1e-9)


def test_pairwise_identical_measures():
    rng = np.random.default_rng(17)
    m = rand_measure(rng, 5)
    cfg = ot.SinkhornConfig(epsilon=0.1, tol=1e-9, max_iters=20000)
    M = ot.pairwise_divergence_matrix([m, m, m], cfg, 0.8)
    assert M.max() <= 1e-9


def test_dedupe_support():
    pts = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    out = ot.dedupe_support(pts)
    assert out.shape == (2, 2)
