import math

import numpy as np
import pytest
from scipy import stats

from carinfer import _kernels
from carinfer.errors import InputError, RerandomizationBudgetError, SingularCovarianceError
from carinfer.randomizers import (
    Assignment,
    ProcedureConfig,
    allocate,
    complete_randomization,
    da_bcd_allocate,
    dabcd_probability,
    imbalance_report,
    imbalance_vector,
    mahalanobis,
    psr_allocate,
    rerandomize,
)


def rng(seed=0):
    return np.random.default_rng(seed)


def gaussian_X(n=500, k=6, seed=0):
    return rng(seed).standard_normal((n, k))


def test_imbalance_vector_examples():
    assert imbalance_vector(np.array([[2.5], [2.5]]), [1, 0])[0] == 0.0
    assert imbalance_vector(np.array([[1.0], [2.0]]), [1, 1])[0] == 3.0


def test_imbalance_vector_cr_band():
    n = 10000
    X = gaussian_X(n, 3, 1)
    T = complete_randomization(n, rng(2))
    assert np.all(np.abs(imbalance_vector(X, T)) < 4 * math.sqrt(n))


def test_imbalance_report_scaling():
    X = gaussian_X(50, 2, 3)
    T = complete_randomization(50, rng(4))
    rep = imbalance_report(X, T)
    assert np.array_equal(rep.scaled, rep.raw / math.sqrt(50))
    assert rep.mahalanobis >= 0


def test_mahalanobis_equal_means_is_zero():
    assert mahalanobis(np.array([1.0, -1.0, 1.0, -1.0]), [1, 1, 0, 0]) == pytest.approx(0.0, abs=1e-15)


def test_mahalanobis_matches_definition():
    X = gaussian_X(40, 3, 5)
    t = np.array([1, 0] * 20)
    d = X[t == 1].mean(0) - X[t == 0].mean(0)
    S = np.cov(X, rowvar=False)
    ref = d @ np.linalg.solve((1 / 20 + 1 / 20) * S, d)
    assert mahalanobis(X, t) == pytest.approx(ref, rel=1e-12)


def test_mahalanobis_affine_invariance():
    x = gaussian_X(30, 1, 6)
    t = np.array([1, 0, 0] * 10)
    assert mahalanobis(3 * x + 7, t) == pytest.approx(mahalanobis(x, t), rel=1e-10)


def test_mahalanobis_singular_covariance():
    x = gaussian_X(20, 1, 7)
    with pytest.raises(SingularCovarianceError):
        mahalanobis(np.hstack([x, 2 * x]), np.tile([1, 0], 10))


def test_mahalanobis_cr_mean_near_dimension():
    X = gaussian_X(500, 6, 8)
    g = rng(9)
    ms = [mahalanobis(X, complete_randomization(500, g)) for _ in range(10000)]
    assert 5.7 < np.mean(ms) < 6.3


def test_complete_randomization_n2():
    g = rng(10)
    first = []
    for _ in range(10000):
        t = complete_randomization(2, g).T
        assert t.sum() == 1
        first.append(t[0])
    assert abs(np.mean(first) - 0.5) < 0.02


def test_complete_randomization_large_n_and_reproducible():
    a = complete_randomization(100000, rng(11))
    assert abs(a.n1 / a.n - 0.5) < 0.01
    assert np.array_equal(a.T, complete_randomization(100000, rng(11)).T)
    with pytest.raises(InputError):
        complete_randomization(1, rng())


def test_rerandomize_huge_threshold_accepts_first():
    X = gaussian_X(100, 3, 12)
    a, attempts = rerandomize(X, ProcedureConfig("RR", rr_threshold=1e12), rng(13))
    assert attempts == 1 and a.info["attempts"] == 1


def test_rerandomize_postcondition_and_budget():
    X = gaussian_X(500, 6, 14)
    cfg = ProcedureConfig("RR", rr_threshold=3.0)
    g = rng(15)
    for _ in range(200):
        a, _ = rerandomize(X, cfg, g)
        assert mahalanobis(X, a) < 3.0
    with pytest.raises(RerandomizationBudgetError, match="10 attempts"):
        rerandomize(X, ProcedureConfig("RR", rr_threshold=1e-6, rr_max_attempts=10), g)


def test_rerandomize_mean_attempts():
    # attempts are geometric with success probability P(chi2_6 < 3) = 0.1912
    # (n = 500 makes M very close to chi2_6), so the mean is about 5.23
    p = stats.chi2.cdf(3, 6)
    cfg = ProcedureConfig("RR", rr_threshold=3.0)
    g = rng(16)
    attempts = []
    for r in range(1000):
        X = gaussian_X(500, 6, 1000 + r)
        attempts.append(rerandomize(X, cfg, g)[1])
    se = math.sqrt((1 - p) / p**2 / 1000)
    assert abs(np.mean(attempts) - 1 / p) < 4 * se


def test_rerandomize_accepted_m_is_truncated_chi2():
    X = gaussian_X(500, 6, 17)
    cfg = ProcedureConfig("RR", rr_threshold=3.0)
    g = rng(18)
    ms = np.array([rerandomize(X, cfg, g)[0].info["mahalanobis"] for _ in range(10000)])
    c = stats.chi2.cdf(3.0, 6)
    ks = stats.kstest(ms, lambda x: stats.chi2.cdf(np.minimum(x, 3.0), 6) / c).statistic
    assert ks < 0.03


def test_psr_even_n_is_balanced_and_reproducible():
    X = gaussian_X(200, 4, 19)
    a = psr_allocate(X, ProcedureConfig("PSR"), rng(20))
    assert a.n1 == a.n2 == 100
    assert np.array_equal(a.T, psr_allocate(X, ProcedureConfig("PSR"), rng(20)).T)


def test_psr_odd_n_last_unit():
    X = gaussian_X(201, 2, 21)
    a = psr_allocate(X, ProcedureConfig("PSR"), rng(22))
    assert abs(a.n1 - a.n2) == 1


def test_psr_pair_probability_is_rho():
    # one covariate; the first pair leaves d = 1, and the second pair (+1, -1)
    # lowers M when assigned (0, 1), i.e. M^(1) > M^(2)
    Xp = np.array([[1.0], [0.0], [1.0], [-1.0]])
    A = np.array([[1.0]])
    u = rng(23).random((20000, 3))
    first = np.array([_kernels.psr_kernel(Xp, A, row, 0.75)[2] for row in u])
    assert abs(first.mean() - 0.25) < 0.015
    # mirrored pair (-1, +1): now (1, 0) lowers M
    Xp2 = np.array([[1.0], [0.0], [-1.0], [1.0]])
    first = np.array([_kernels.psr_kernel(Xp2, A, row, 0.75)[2] for row in u])
    assert abs(first.mean() - 0.75) < 0.015


def test_psr_tie_gives_half():
    Xp = np.array([[1.0], [1.0], [2.0], [2.0]])
    u = rng(24).random((20000, 3))
    first = np.array([_kernels.psr_kernel(Xp, np.eye(1), row, 0.9)[2] for row in u])
    assert abs(first.mean() - 0.5) < 0.015


def test_psr_mean_mahalanobis_small():
    cfg = ProcedureConfig("PSR")
    g = rng(25)
    ms = []
    for r in range(1000):
        X = gaussian_X(500, 6, 3000 + r)
        ms.append(mahalanobis(X, psr_allocate(X, cfg, g)))
    assert np.mean(ms) < 0.5


def test_dabcd_probability_examples():
    assert dabcd_probability(0.0) == 0.5
    assert dabcd_probability(1.0) == 0.0
    assert dabcd_probability(-1.0) == 1.0


def test_dabcd_matches_direct_formula():
    X = gaussian_X(60, 2, 26)
    u = rng(27).random(60)
    t, fallback = _kernels.dabcd_kernel(X, u, 4)
    assert fallback == 0
    # replay with explicit solves
    ref = np.zeros(60, dtype=int)
    for j in range(60):
        if j < 4:
            prob = 0.5
        else:
            F = np.column_stack([np.ones(j), X[:j]])
            b = (2 * ref[:j] - 1) @ F
            q = np.r_[1.0, X[j]] @ np.linalg.solve(F.T @ F, b)
            prob = dabcd_probability(q)
        ref[j] = 1 if u[j] < prob else 0
    np.testing.assert_array_equal(t, ref)


def test_dabcd_fallback_on_singular_gram():
    # identical covariate rows keep F'F singular, so every unit uses a fair coin
    X = np.ones((20, 1))
    a = da_bcd_allocate(X, ProcedureConfig("DABCD", dabcd_burn_in=3), rng(28))
    assert a.info["fallback_units"] == 17


def test_dabcd_burn_in_validation():
    with pytest.raises(InputError):
        ProcedureConfig("DABCD", dabcd_burn_in=2).burn_in(6)
    with pytest.raises(InputError):
        da_bcd_allocate(gaussian_X(8, 6, 0), ProcedureConfig("DABCD"), rng())


def test_procedure_config_validation():
    assert ProcedureConfig("d_a-bcd").kind == "DABCD"
    for bad in (dict(kind="XYZ"), dict(kind="RR", rr_threshold=0.0),
                dict(kind="PSR", psr_rho=0.5), dict(kind="PSR", psr_rho=1.0),
                dict(kind="RR", rr_max_attempts=0)):
        with pytest.raises(InputError):
            ProcedureConfig(**bad)


def test_assignment_from_vector():
    a = Assignment.from_vector([1, 0, 1])
    assert (a.n1, a.n2, a.n) == (2, 1, 3)
    with pytest.raises(ValueError):
        Assignment.from_vector([0, 2])


def test_global_balance_all_procedures():
    for kind in ("CR", "RR", "PSR", "DABCD"):
        g = rng(29)
        gaps = []
        for r in range(100):
            X = gaussian_X(2000, 3, 5000 + r)
            a = allocate(X, ProcedureConfig(kind), g)
            gaps.append(abs(a.n1 / a.n - 0.5))
        assert np.mean(np.array(gaps) < 0.05) >= 0.99, kind


def test_mahalanobis_ranking():
    reps = 400
    out = {}
    for kind in ("CR", "RR", "PSR", "DABCD"):
        g = rng(30)
        ms = []
        for r in range(reps):
            X = gaussian_X(500, 6, 7000 + r)
            ms.append(mahalanobis(X, allocate(X, ProcedureConfig(kind), g)))
        out[kind] = (np.mean(ms), np.std(ms, ddof=1) / math.sqrt(reps))

    def separated(lo, hi):
        (m1, s1), (m2, s2) = out[lo], out[hi]
        return m2 - m1 >= 3 * math.hypot(s1, s2)

    assert separated("PSR", "RR")
    assert separated("RR", "CR")
    assert separated("DABCD", "CR")
