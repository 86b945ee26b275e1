import math

import numpy as np
import pytest
from scipy import stats

from carinfer import seeding
from carinfer.errors import DegenerateTestError, InvalidContrastError
from carinfer.inference import (
    CovariateTest,
    TreatmentTest,
    asymptotic_power,
    coefficient_contrast,
    covariate_statistic,
    traditional_decision,
    treatment_statistic,
)
from carinfer.laws import NuisanceParams, null_law_for
from carinfer.model import (
    Dataset,
    DGPSpec,
    WorkingModelSpec,
    build_design,
    generate_covariates,
    ols_fit,
    realize_responses,
)
from carinfer.randomizers import ProcedureConfig, allocate


def rng(seed=0):
    return np.random.default_rng(seed)


def four_point_fit():
    G = build_design(Dataset(np.zeros((4, 0))), [1, 1, 0, 0], WorkingModelSpec(()))
    return ols_fit(G, [3.0, 1.0, 2.0, 0.0])


def random_fit(n=100, k=3, seed=0):
    X = rng(seed).standard_normal((n, k))
    t = rng(seed + 1).integers(0, 2, n)
    y = 0.3 * t + X @ np.ones(k) + rng(seed + 2).standard_normal(n)
    return ols_fit(build_design(Dataset(X), t, WorkingModelSpec(tuple(range(k)))), y)


def w1_law(kind, a=3.0):
    nu = NuisanceParams.from_components([1.0] * 6, [1.0] * 6, 4.0, 6)
    return null_law_for(ProcedureConfig(kind, rr_threshold=a), nu)


def test_treatment_statistic_four_point():
    tt = treatment_statistic(four_point_fit())
    assert tt.s == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert tt.estimate == pytest.approx(1.0)
    assert tt.s == pytest.approx(tt.estimate / tt.se)


def test_treatment_statistic_equal_means():
    G = build_design(Dataset(np.zeros((4, 0))), [1, 1, 0, 0], WorkingModelSpec(()))
    assert treatment_statistic(ols_fit(G, [1.0, 3.0, 0.0, 4.0])).s == 0.0


def test_treatment_statistic_degenerate():
    G = build_design(Dataset(np.zeros((4, 0))), [1, 1, 0, 0], WorkingModelSpec(()))
    with pytest.raises(DegenerateTestError):
        treatment_statistic(ols_fit(G, [1.0, 1.0, 2.0, 2.0]))


def test_treatment_statistic_cr_variance():
    spec = DGPSpec(0, 0, [1.0] * 4, [1.0] * 4, 2.0, 500)
    s = []
    for r in range(10000):
        cov, alloc, err = seeding.replication_streams(7, r)
        data = generate_covariates(spec, cov)
        a = allocate(data.X, ProcedureConfig("CR"), alloc)
        full = realize_responses(data, a, spec, err)
        s.append(treatment_statistic(ols_fit(build_design(full, a, WorkingModelSpec((0, 1))), full.y)).s)
    assert 0.94 < np.var(s, ddof=1) < 1.06


def test_se_close_to_four_sigma_over_n_on_balanced_designs():
    n = 400
    X = rng(3).standard_normal((n, 2))
    t = allocate(X, ProcedureConfig("PSR"), rng(4))
    y = X.sum(1) + rng(5).standard_normal(n)
    fit = ols_fit(build_design(Dataset(X), t, WorkingModelSpec((0,))), y)
    se2 = treatment_statistic(fit).se ** 2
    target = 4 * fit.sigma_w2_hat / n
    assert abs(se2 - target) / target < 10 / n


def test_covariate_statistic_zero_at_estimate():
    fit = random_fit()
    C = coefficient_contrast(3, 1)
    assert covariate_statistic(fit, C, C @ fit.theta_hat).s_star == pytest.approx(0.0, abs=1e-20)


def test_covariate_statistic_single_coefficient_is_squared_t():
    fit = random_fit(seed=10)
    k = 2
    C = coefficient_contrast(3, k)
    pos = k + 2
    t_stat = fit.theta_hat[pos] / math.sqrt(fit.sigma_w2_hat * fit.gram_inv[pos, pos])
    assert covariate_statistic(fit, C).s_star == pytest.approx(t_stat**2, rel=1e-10)


def test_covariate_statistic_multi_row_matches_formula():
    fit = random_fit(seed=20)
    C = np.zeros((2, 5))
    C[0, 2], C[1, 3], C[1, 4] = 1.0, 1.0, -1.0
    c0 = np.array([0.5, 0.1])
    r = C @ fit.theta_hat - c0
    ref = r @ np.linalg.inv(C @ fit.gram_inv @ C.T) @ r / (2 * fit.sigma_w2_hat)
    assert covariate_statistic(fit, C, c0).s_star == pytest.approx(ref, rel=1e-10)


def test_covariate_statistic_invalid_contrasts():
    fit = random_fit(seed=30)
    with pytest.raises(InvalidContrastError):
        covariate_statistic(fit, [[1, 0, 0, 0, 0]])
    with pytest.raises(InvalidContrastError):
        covariate_statistic(fit, [[0, 0, 1, 0]])
    with pytest.raises(InvalidContrastError):
        covariate_statistic(fit, [[0, 0, 1, 0, 0], [0, 0, 2, 0, 0]])
    with pytest.raises(InvalidContrastError):
        coefficient_contrast(3, 3)


def test_traditional_decisions():
    d = traditional_decision(TreatmentTest(0.0, 1.0, 0.0), 0.05)
    assert d.p_value == 1.0 and not d.reject
    d = traditional_decision(TreatmentTest(2.5, 1.0, 2.5), 0.05)
    assert d.reject and d.critical_value == pytest.approx(1.959964, abs=1e-6)
    d = traditional_decision(CovariateTest(3.0, np.zeros((1, 3)), np.zeros(1), 1), 0.05)
    assert not d.reject and d.critical_value == pytest.approx(3.841459, abs=1e-6)
    with pytest.raises(ValueError):
        traditional_decision(TreatmentTest(0.0, 1.0, 0.0), 1.5)


def test_covariate_test_size_every_procedure():
    # m * S* under H0 is chi2_1, regardless of the allocation procedure
    spec = DGPSpec(0, 0, [1.0, 1.0, 0.0, 1.0], [1.0] * 4, 2.0, 500)
    C = coefficient_contrast(2, 1)
    for kind in ("CR", "RR", "PSR", "DABCD"):
        vals = []
        for r in range(2000):
            cov, alloc, err = seeding.replication_streams(11, r)
            data = generate_covariates(spec, cov)
            a = allocate(data.X, ProcedureConfig(kind), alloc)
            full = realize_responses(data, a, spec, err)
            fit = ols_fit(build_design(full, a, WorkingModelSpec((0, 2))), full.y)
            vals.append(covariate_statistic(fit, C).s_star)
        vals = np.array(vals)
        assert stats.kstest(vals, stats.chi2(1).cdf).statistic < 0.04, kind
        assert abs(np.mean(vals > 3.841459) - 0.05) < 0.015, kind


def test_covariate_test_power_matches_noncentral_chi2():
    # noncentrality n * b^2 * Var(x3) / sigma_w^2, sigma_w^2 counting the omitted covariates
    n = 500
    sigma_w2 = 4.0 + 2.0  # two omitted unit-variance covariates
    C = coefficient_contrast(1, 0)
    for b in (0.1, 0.2, 0.3):
        spec = DGPSpec(0, 0, [1.0, 1.0, b], [1.0] * 3, 2.0, n)
        rej = 0
        reps = 5000
        for r in range(reps):
            cov, alloc, err = seeding.replication_streams(13, r)
            data = generate_covariates(spec, cov)
            a = allocate(data.X, ProcedureConfig("CR"), alloc)
            full = realize_responses(data, a, spec, err)
            fit = ols_fit(build_design(full, a, WorkingModelSpec((2,))), full.y)
            rej += covariate_statistic(fit, C).s_star > 3.841459
        phi = n * b**2 / sigma_w2
        pred = stats.ncx2.sf(3.841459, 1, phi)
        assert abs(rej / reps - pred) < 0.02, (b, rej / reps, pred)


def test_asymptotic_power_size_recovery():
    for kind in ("CR", "PSR", "DABCD"):
        assert asymptotic_power(w1_law("CR"), 0.0) == pytest.approx(0.05, abs=1e-3)
        law = w1_law(kind)
        assert asymptotic_power(law, 0.0, critical="oracle") == pytest.approx(0.05, abs=1e-3)
    law = w1_law("RR")
    assert asymptotic_power(law, 0.0, critical="oracle", stream=rng(1)) == pytest.approx(0.05, abs=3e-3)


def test_asymptotic_power_cr_w1():
    delta = math.sqrt(500) * 0.3
    h = 0.5 * delta / math.sqrt(10)
    z = stats.norm.ppf(0.975)
    ref = stats.norm.cdf(-z + h) + stats.norm.cdf(-z - h)
    assert ref == pytest.approx(0.186, abs=0.002)
    assert asymptotic_power(w1_law("CR"), delta) == pytest.approx(ref, abs=1e-9)


def test_asymptotic_power_dabcd_oracle_w1():
    delta = math.sqrt(500) * 0.3
    assert asymptotic_power(w1_law("DABCD"), delta, critical="oracle") == pytest.approx(0.313, abs=0.005)


def test_asymptotic_power_monotone_in_delta():
    grid = np.linspace(0, 10, 11)
    for kind in ("CR", "PSR", "DABCD"):
        law = w1_law(kind)
        p = [asymptotic_power(law, d, critical="oracle") for d in grid]
        assert np.all(np.diff(p) >= 0)
        p_neg = [asymptotic_power(law, -d, critical="oracle") for d in grid]
        np.testing.assert_allclose(p, p_neg)
    law = w1_law("RR")
    p = [asymptotic_power(law, d, critical=1.5, stream=rng(2)) for d in grid]
    assert np.all(np.diff(p) >= -1e-12)
