import math

import numpy as np
import pytest
from scipy.optimize import nnls

from monocone.cones import ConeSpec, mc_statdim, project_with_norms
from monocone.denoise import (DifferenceOperator, QpFailure, dist_qp, dist_sq_fixed_tau, empirical_risk, levy_bound,
                              minimax_risk, operator_identities_check, optimal_lambda, prox_certificate, prox_denoise,
                              tau_avg, tau_star, walk_max_expectation)
from monocone.signals import ChangePointSet, random_instance
from monocone.statdim import sd_nonneg


def spitzer_m(n):
    """E max(0, S_1..S_n) from Spitzer's identity: sum_k E[S_k^+] / k."""
    return sum(1.0 / math.sqrt(2 * math.pi * k) for k in range(1, n + 1))


def random_nonneg_cps(rng, n):
    k = int(rng.integers(1, n + 1))
    idx = np.sort(rng.choice(np.arange(1, n + 1), size=k, replace=False))
    return ChangePointSet(n, tuple(int(i) for i in idx), "nonneg")


def cvxopt_dist_qp(g, cps):
    """Reference solve of the distance QP in (w, tau) with a generic interior-point solver."""
    cvxopt = pytest.importorskip("cvxopt")
    n = cps.n
    G = DifferenceOperator(n).dense()
    P = np.zeros((n + 1, n + 1))
    P[:n, :n] = 2 * G @ G.T
    q = np.zeros(n + 1)
    q[:n] = -2 * G @ g
    on = np.zeros(n, dtype=bool)
    on[np.asarray(cps.indices) - 1] = True
    ineq = [np.eye(n + 1)[j] - np.eye(n + 1)[n] for j in np.flatnonzero(~on)] + [-np.eye(n + 1)[n]]
    eq = [np.eye(n + 1)[j] - np.eye(n + 1)[n] for j in np.flatnonzero(on)]
    m = lambda rows: cvxopt.matrix(np.array(rows, dtype=float))
    opts = {"show_progress": False, "abstol": 1e-12, "reltol": 1e-12, "feastol": 1e-12}
    sol = cvxopt.solvers.qp(m(P), m(q[:, None]), m(ineq), m(np.zeros((len(ineq), 1))), m(eq),
                            m(np.zeros((len(eq), 1))), options=opts)
    z = np.array(sol["x"]).ravel()
    return z[:n], z[n]


def test_operator_identities():
    for n in (1, 3, 20, 50):
        assert operator_identities_check(n)["ok"]
    F = DifferenceOperator(3).dense_f()
    assert F[0, 0] == 3 and F[1, 2] == 1
    with pytest.raises(ValueError):
        operator_identities_check(51)


def test_difference_operator_implicit_matches_dense():
    rng = np.random.default_rng(0)
    op = DifferenceOperator(9)
    x = rng.standard_normal(9)
    np.testing.assert_allclose(op.apply(x), op.dense() @ x)
    np.testing.assert_allclose(op.apply_transpose(x), op.dense().T @ x)
    np.testing.assert_allclose(op.apply_transpose(op.inverse_transpose(x)), x)


def test_dist_qp_zero_distance():
    for tau0 in (0.3, 2.0):
        cps = ChangePointSet(6, (2, 5), "nonneg")
        g = DifferenceOperator(6).apply_transpose(np.full(6, tau0))
        sol = dist_qp(g, cps)
        assert sol.value == pytest.approx(0.0, abs=1e-20)
        assert sol.tau == pytest.approx(tau0, abs=1e-12)


def test_dist_qp_example():
    cps = ChangePointSet(3, (1,), "nonneg")
    g = np.array([1.0, -2.0, 0.5])
    sol = dist_qp(g, cps)
    assert sol.tau == pytest.approx(0.5, abs=1e-12)
    w_ref, tau_ref = cvxopt_dist_qp(g, cps)
    assert tau_ref == pytest.approx(0.5, abs=1e-6)
    np.testing.assert_allclose(sol.w, w_ref, atol=1e-6)


def test_dist_qp_against_generic_solver():
    rng = np.random.default_rng(1)
    for _ in range(40):
        n = int(rng.integers(1, 12))
        cps = random_nonneg_cps(rng, n)
        g = rng.standard_normal(n) * 2
        sol = dist_qp(g, cps)
        w_ref, tau_ref = cvxopt_dist_qp(g, cps)
        r = g - DifferenceOperator(n).apply_transpose(w_ref)
        assert sol.value == pytest.approx(float(r @ r), abs=1e-6)
        assert sol.tau == pytest.approx(tau_ref, abs=1e-5)


def test_dist_qp_kkt_and_w_recursion():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = int(rng.integers(1, 30))
        cps = random_nonneg_cps(rng, n)
        g = rng.standard_normal(n)
        sol = dist_qp(g, cps)
        assert sol.max_kkt <= 1e-8
        j = np.arange(1, n + 1)
        tails = np.cumsum(g[::-1])[::-1]
        weights = np.maximum(j[None, :] - j[:, None], 0)  # (i - j) for i > j
        w = tails + (n - j + 1) * sol.lam_tau + weights @ sol.lam
        np.testing.assert_allclose(sol.w, w, atol=1e-6)


def test_dist_qp_fixed_tau_matches_polar_projection():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n = int(rng.integers(1, 25))
        cps = random_nonneg_cps(rng, n)
        g = rng.standard_normal(n)
        tau = float(rng.uniform(0, 3))
        sol = dist_qp(g, cps, tau=tau)
        assert sol.tau == tau and sol.lam_tau is None
        assert sol.max_kkt <= 1e-8
        assert sol.value == pytest.approx(float(dist_sq_fixed_tau(g, cps, tau)[0]), abs=1e-10)


def test_dist_qp_rejections():
    with pytest.raises(ValueError, match="variant"):
        dist_qp(np.ones(3), ChangePointSet(3, (2,), "plain"))
    with pytest.raises(ValueError, match="indices"):
        dist_qp(np.ones(3), ChangePointSet(3, (), "nonneg"))
    with pytest.raises(ValueError, match="g"):
        dist_qp(np.ones(4), ChangePointSet(3, (2,), "nonneg"))
    with pytest.raises(QpFailure):
        dist_qp(np.random.default_rng(0).standard_normal(20), ChangePointSet(20, (1,), "nonneg"), max_iter=1)


def test_tau_star_examples():
    assert tau_star([-1.0, -1.0, -1.0], 1) == 0.0
    assert tau_star([0.5, -1.0, 2.0], 2) == 2.0
    assert tau_star(np.zeros(5), 3) == 0.0
    with pytest.raises(ValueError, match="i_k"):
        tau_star([1.0], 2)


def test_tau_star_matches_qp():
    rng = np.random.default_rng(4)
    for _ in range(300):
        n = int(rng.integers(1, 31))
        cps = random_nonneg_cps(rng, n)
        g = rng.standard_normal(n)
        assert dist_qp(g, cps).tau == pytest.approx(tau_star(g, cps.last), abs=1e-8)


def test_moreau_duality_with_descent_cone():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n = int(rng.integers(1, 40))
        cps = random_nonneg_cps(rng, n)
        g = rng.standard_normal(n)
        sq = project_with_norms(g, ConeSpec.descent(cps))[1]
        assert dist_qp(g, cps).value == pytest.approx(sq, abs=1e-10)


def test_levy_bound():
    assert levy_bound(1) == pytest.approx(math.sqrt(2 / math.pi))
    with pytest.raises(ValueError):
        levy_bound(0)


def test_spitzer_oracle_reproduces_known_values():
    assert spitzer_m(1) == pytest.approx(1 / math.sqrt(2 * math.pi))
    assert spitzer_m(2) == pytest.approx((1 + math.sqrt(2)) / (2 * math.sqrt(math.pi)))


@pytest.mark.parametrize("n", [1, 2, 3, 7, 25])
def test_walk_max_against_spitzer(n):
    est = walk_max_expectation(n, 400_000, seed=n)
    assert est.contains(spitzer_m(n))
    assert est.mean <= levy_bound(n)


def test_walk_max_nondecreasing():
    means = [walk_max_expectation(n, 100_000, seed=11).mean for n in (1, 2, 4, 8, 16, 32)]
    assert all(b >= a for a, b in zip(means, means[1:]))


def test_tau_avg_two_estimators():
    cps = ChangePointSet(10, (2, 8), "nonneg")
    est = walk_max_expectation(3, 1_000_000, seed=21)
    assert tau_avg(cps, 1_000_000, seed=21) == est.mean
    g = np.random.default_rng(22).standard_normal((1_000_000, 10))
    direct = np.maximum(np.cumsum(g[:, 7:][:, ::-1], axis=1).max(axis=1), 0.0)
    # one per-sample check of the vectorized tail maximum against tau_star
    assert direct[0] == tau_star(g[0], 8)
    se = math.hypot(est.std_error, direct.std(ddof=1) / math.sqrt(direct.size))
    assert abs(direct.mean() - est.mean) <= 3 * se
    assert tau_avg(ChangePointSet(10, (10,), "nonneg"), 1_000_000, seed=1) == pytest.approx(spitzer_m(1), abs=0.002)


def nnls_prox(y, lam, variant):
    """Generic QP oracle: min 0.5||x - y||^2 + lam f(x) over the explicit constraint set."""
    n = y.size
    c = np.zeros(n)
    c[-1] += 1.0
    if variant == "plain":
        c[0] -= 1.0
        C = ConeSpec.chain(n).inequalities()
    else:
        C = ConeSpec.nonneg_chain(n).inequalities()
    t = y - lam * c
    if C.shape[0] == 0:
        return t
    mu, _ = nnls(C.T, t, maxiter=1000)
    return t - C.T @ mu


def test_prox_examples():
    np.testing.assert_allclose(prox_denoise([2.0, 3.0], 1.0, "nonneg"), [2, 2])
    np.testing.assert_allclose(prox_denoise([1.0, 0.0], 0.5, "plain"), [0.5, 0.5])
    y = np.array([0.0, 1.0, 1.0, 4.0])
    np.testing.assert_array_equal(prox_denoise(y, 0.0, "nonneg"), y)
    np.testing.assert_array_equal(prox_denoise(y - 2, 0.0, "plain"), y - 2)
    with pytest.raises(ValueError, match="lambda"):
        prox_denoise(y, -1.0)


@pytest.mark.parametrize("variant", ["plain", "nonneg"])
def test_prox_matches_oracle_and_certificate(variant):
    rng = np.random.default_rng(6)
    for _ in range(300):
        n = int(rng.integers(1, 13))
        y = np.cumsum(rng.standard_normal(n)) + rng.standard_normal(n)
        lam = float(rng.exponential(1.0))
        x = prox_denoise(y, lam, variant)
        np.testing.assert_allclose(x, nnls_prox(y, lam, variant), atol=1e-9)
        assert max(prox_certificate(y, x, lam, variant).values()) <= 1e-8


def test_prox_objective_beats_perturbations():
    cvxopt = pytest.importorskip("cvxopt")
    rng = np.random.default_rng(7)
    n = 8
    y = rng.standard_normal(n)
    C = ConeSpec.nonneg_chain(n).inequalities()
    q = -y.copy()
    q[-1] += 0.7
    sol = cvxopt.solvers.qp(cvxopt.matrix(np.eye(n)), cvxopt.matrix(q), cvxopt.matrix(C), cvxopt.matrix(np.zeros(n)),
                            options={"show_progress": False, "abstol": 1e-12, "reltol": 1e-12, "feastol": 1e-12})
    np.testing.assert_allclose(prox_denoise(y, 0.7), np.array(sol["x"]).ravel(), atol=1e-6)


def test_prox_batch():
    y = np.random.default_rng(8).standard_normal((20, 6))
    out = prox_denoise(y, 0.4)
    for row, x in zip(y, out):
        np.testing.assert_array_equal(prox_denoise(row, 0.4), x)


def test_minimax_single_coordinate():
    cps = ChangePointSet(1, (1,), "nonneg")
    risk = minimax_risk(cps, samples=20_000, seed=3, walk_samples=20_000)
    assert abs(risk.eta_hat - 1.0) <= 3 * risk.eta_se + 1e-3
    assert risk.tau_opt <= 0.05
    assert 0.0 in risk.tau_grid


def test_minimax_risk_sandwich_and_definitions_agree():
    cps = ChangePointSet(8, (2, 5, 6), "nonneg")
    risk = minimax_risk(cps, samples=20_000, seed=4)
    delta = mc_statdim(ConeSpec.descent(cps), 100_000, seed=5)
    assert delta.contains(sd_nonneg(cps))
    assert delta.mean <= risk.eta_hat + 3 * risk.eta_se
    g = np.random.default_rng(6).standard_normal((3000, 8))
    per_sample = np.array([dist_qp(row, cps).value for row in g])
    se = math.hypot(delta.std_error, per_sample.std(ddof=1) / math.sqrt(per_sample.size))
    assert abs(per_sample.mean() - delta.mean) <= 3 * se
    assert risk.to_dict()["grid"][0]["tau"] == 0.0


def test_minimax_rejects_negative_grid():
    with pytest.raises(ValueError, match="tau_grid"):
        minimax_risk(ChangePointSet(3, (2,), "nonneg"), tau_grid=[-1.0], samples=100, walk_samples=100)


def test_optimal_lambda():
    cps = ChangePointSet(5, (5,), "nonneg")
    assert optimal_lambda(cps, 0.0, 100_000, seed=1)["lambda"] == 0.0
    assert optimal_lambda(cps, 1.0, 1_000_000, seed=1)["lambda"] == pytest.approx(0.3989, abs=0.002)
    out = optimal_lambda(cps, 2.0, 100_000, seed=1, with_minimax=True, risk_samples=2000)
    assert out["lambda_minimax"] == pytest.approx(2 * out["tau_opt"])


def test_empirical_risk_below_minimax():
    x0, cps = random_instance(20, 4, "uniform", seed=9, variant="nonneg")
    sigma = 1e-3
    lam = optimal_lambda(cps, sigma, 200_000, seed=10)
    risk = minimax_risk(cps, samples=10_000, seed=11)
    emp = empirical_risk(x0, lam["tau_avg"], sigma, 10_000, seed=12)
    assert emp.mean <= risk.eta_hat * 1.1 + 3 * emp.std_error
