import itertools
import math

import numpy as np
import pytest
from scipy import stats

from dpsurvey.core import (
    Bounds,
    DomainError,
    SampleSummary,
    SurveySample,
    approx_ht_variance,
    ht_variance_full,
    lambda_critical,
    min_feasible_awd,
    sensitivity_variance,
    sensitivity_weighted_mean,
)
from dpsurvey.mechanisms import RandomSource, lambda_posterior_params
from dpsurvey.simulate import (
    PSID_GAP_INC3,
    PSID_GAP_POV,
    PSID_SPEARMAN_INC3,
    ExperimentConfig,
    PopulationSpec,
    brute_force_sensitivity,
    exp_mech_density_oracle,
    generate_population,
    poisson_ht_replicates,
    poisson_sample,
    reference_sample,
    run_coverage_experiment,
    run_feasibility_grid,
    run_lambda_distribution,
    run_mse_curves,
    srswor_joint_inclusion,
    srswor_means,
    srswor_sample,
)

TOY = Bounds(0, 1, 1, 20)


@pytest.fixture(scope="module")
def psid():
    return generate_population(PopulationSpec.psid_like(), RandomSource(0, (0,)))


# --- population specs -------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(response="gamma"),
        dict(pop_size=100, expected_n=200),
        dict(pop_size=1000, expected_n=10, u_w=50),
        dict(target_corr=1.0),
        dict(p=0.0),
        dict(u_y=0.0),
    ],
)
def test_spec_rejects(kwargs):
    with pytest.raises(DomainError):
        PopulationSpec(**kwargs)


def test_psid_like_overrides():
    spec = PopulationSpec.psid_like(u_w=200.0)
    assert spec.response == "psid" and spec.u_w == 200.0 and spec.pop_size == 100_000


# --- psid-like population ---------------------------------------------------


def test_psid_variables_and_bounds(psid):
    assert psid.variables == ["inc3", "pov", "bern"]
    for name in psid.variables:
        y = psid.responses[name]
        b = psid.bounds(name)
        assert y.min() >= b.l_y and y.max() <= b.u_y
    assert set(np.unique(psid.responses["pov"])) <= {0.0, 1.0}
    assert np.all(psid.pi >= 1 / psid.u_w) and np.all(psid.pi <= 1)
    assert psid.pi.sum() == pytest.approx(1000, rel=1e-9)


def test_psid_weight_correlation(psid):
    rho = stats.spearmanr(1 / psid.pi, psid.responses["inc3"]).statistic
    assert rho == pytest.approx(PSID_SPEARMAN_INC3, abs=0.05)


@pytest.mark.parametrize("name, target, tol", [("inc3", PSID_GAP_INC3, 0.05), ("pov", PSID_GAP_POV, 0.003), ("bern", 0.0, 0.02)])
def test_psid_expected_gaps(psid, name, target, tol):
    assert psid.expected_gap(name) == pytest.approx(target, abs=tol)


def test_psid_realized_gaps(psid):
    gaps = {name: [] for name in psid.variables}
    for r in range(1000):
        draw = poisson_sample(psid, RandomSource(9, (1, r)))
        for name in psid.variables:
            summ = psid.sample_at(draw.index, name).summary()
            gaps[name].append(summ.theta_0 - summ.theta_w)
    for name, target in (("inc3", PSID_GAP_INC3), ("pov", PSID_GAP_POV), ("bern", 0.0)):
        g = np.array(gaps[name])
        assert abs(g.mean() - target) < 4 * g.std() / math.sqrt(g.size)
    assert abs(np.mean(gaps["bern"])) < 0.02


def test_population_deterministic():
    spec = PopulationSpec(pop_size=2000, expected_n=100, u_w=50, response="binary", target_corr=0.3)
    a = generate_population(spec, RandomSource(5))
    b = generate_population(spec, RandomSource(5))
    np.testing.assert_array_equal(a.pi, b.pi)
    np.testing.assert_array_equal(a.responses["y"], b.responses["y"])


# --- generic populations ----------------------------------------------------


@pytest.mark.parametrize("response, corr", [("binary", 0.3), ("binary", -0.2), ("bounded", 0.4), ("bounded", 0.0)])
def test_generic_rank_correlation(response, corr):
    spec = PopulationSpec(pop_size=20_000, expected_n=500, u_w=200, response=response, target_corr=corr, u_y=3.0)
    pop = generate_population(spec, RandomSource(1))
    y = pop.responses["y"]
    assert stats.spearmanr(1 / pop.pi, y).statistic == pytest.approx(corr, abs=0.01)
    assert y.min() >= 0 and y.max() <= pop.u_y["y"]


def test_binary_prevalence():
    spec = PopulationSpec(pop_size=20_000, expected_n=500, u_w=200, response="binary", p=0.2)
    pop = generate_population(spec, RandomSource(2))
    assert pop.mean("y") == pytest.approx(0.2, abs=0.01)


def test_equal_probability_design_has_no_gap():
    spec = PopulationSpec(pop_size=20_000, expected_n=500, u_w=200, response="binary", beta=0.0)
    pop = generate_population(spec, RandomSource(3))
    np.testing.assert_allclose(pop.pi, 500 / 20_000)
    assert pop.expected_gap("y") == pytest.approx(0.0, abs=1e-12)


def test_infeasible_correlation_raises():
    spec = PopulationSpec(pop_size=2000, expected_n=100, u_w=50, response="binary", beta=0.0, target_corr=0.5)
    with pytest.raises(DomainError):
        generate_population(spec, RandomSource(4))


# --- Poisson sampling -------------------------------------------------------


def test_census_returns_population():
    spec = PopulationSpec(pop_size=50, expected_n=50, u_w=1.0, response="bounded", beta=0.0)
    pop = generate_population(spec, RandomSource(6))
    draw = poisson_sample(pop, RandomSource(7))
    assert draw.sample.n == 50 and draw.rejected == 0
    np.testing.assert_array_equal(draw.sample.w, 1.0)
    np.testing.assert_array_equal(np.sort(draw.sample.y), np.sort(pop.responses["y"]))


def test_poisson_expected_size():
    spec = PopulationSpec(pop_size=5000, expected_n=100, u_w=200, response="binary", target_corr=0.2)
    pop = generate_population(spec, RandomSource(8))
    sizes = np.array([poisson_sample(pop, RandomSource(8, (1, r))).sample.n for r in range(10_000)])
    se = math.sqrt(np.sum(pop.pi * (1 - pop.pi)) / sizes.size)
    assert abs(sizes.mean() - 100) < 3 * se


def test_poisson_reproducible(psid):
    a = poisson_sample(psid, RandomSource(1, (1, 3)), "inc3")
    b = poisson_sample(psid, RandomSource(1, (1, 3)), "inc3")
    np.testing.assert_array_equal(a.index, b.index)


def test_poisson_rejects_tiny_samples():
    # N / n <= u_w forces n >= 5 while E[n] = 5
    spec = PopulationSpec(pop_size=100, expected_n=5, u_w=20, response="binary", beta=0.0)
    pop = generate_population(spec, RandomSource(1))
    rejected = sum(poisson_sample(pop, RandomSource(2, (r,))).rejected for r in range(200))
    assert rejected > 0
    with pytest.raises(DomainError):
        poisson_sample(pop, RandomSource(3), max_tries=0)


def test_ht_replicates_unbiased():
    rng = RandomSource(10)
    y = rng.child(0).uniform(15)
    pi = 0.2 + 0.6 * rng.child(1).uniform(15)
    means, var_hat = poisson_ht_replicates(y, pi, 100_000, RandomSource(11))
    assert abs(means.mean() - y.mean()) < 4 * means.std() / math.sqrt(means.size)
    true_var = np.sum((1 - pi) / pi * y**2) / 15**2
    assert means.var() == pytest.approx(true_var, rel=0.02)
    assert var_hat.mean() == pytest.approx(true_var, rel=0.02)


# --- SRSWOR -----------------------------------------------------------------


def test_srswor_joint_inclusion():
    f = srswor_joint_inclusion(8, 4)
    assert f(0, 1) == pytest.approx(12 / 56)
    with pytest.raises(DomainError):
        srswor_joint_inclusion(8, 1)


def test_srswor_sample_weights():
    s = srswor_sample(np.arange(10.0), 4, RandomSource(1), Bounds(0, 9, 1, 2.5))
    assert s.n == 4 and np.all(s.w == 2.5) and len(set(s.y)) == 4


def test_srswor_variance_exact_over_all_subsets():
    y_pop = np.array([0.1, 0.9, 0.4, 0.4, 0.0, 1.0, 0.7, 0.2])
    N, n = 8, 4
    joint = srswor_joint_inclusion(N, n)
    b = Bounds(0, 1, 1, 2)
    means, vhats = [], []
    for idx in itertools.combinations(range(N), n):
        s = SurveySample(y_pop[list(idx)], np.full(n, 2.0), N, b)
        means.append(s.y.mean())
        vhats.append(float(ht_variance_full(s, joint)))
    true_var = np.var(means)
    assert np.mean(vhats) == pytest.approx(true_var, rel=1e-12)
    mc = srswor_means(y_pop, n, 100_000, RandomSource(2))
    assert mc.var() == pytest.approx(true_var, rel=0.03)


# --- brute-force sensitivity ------------------------------------------------


def test_brute_force_weighted_mean_reaches_closed_form():
    got = brute_force_sensitivity("weighted_mean", TOY, 100, 4, 20)
    assert got == pytest.approx(sensitivity_weighted_mean(TOY, 100))


def test_brute_force_below_closed_form_off_grid():
    # u_w is still on the grid, so the corners are reached
    got = brute_force_sensitivity("weighted_mean", TOY, 100, 3, 7)
    assert got <= sensitivity_weighted_mean(TOY, 100) * (1 + 1e-12)


def test_brute_force_regularized_at_full_shrinkage():
    # all weights become N/n: change is u_y / n
    assert brute_force_sensitivity("regularized_mean", TOY, 100, 5, 10, lam=1.0) == pytest.approx(1 / 5)


def test_brute_force_unweighted():
    assert brute_force_sensitivity("unweighted_mean", TOY, 100, 4, 5) == pytest.approx(0.25)


def test_brute_force_variance_ratio():
    got = brute_force_sensitivity("approx_variance", TOY, 100, 4, 20)
    closed = sensitivity_variance(TOY, 100)
    assert got <= closed
    assert got / closed == pytest.approx(1 - 1 / 20, rel=1e-12)


@pytest.mark.parametrize(
    "statistic, n, steps, lam",
    [("weighted_mean", 9, 10, None), ("weighted_mean", 4, 1, None), ("weighted_mean", 4, 65, None), ("regularized_mean", 4, 10, None), ("median", 4, 10, None)],
)
def test_brute_force_guards(statistic, n, steps, lam):
    with pytest.raises(DomainError):
        brute_force_sensitivity(statistic, TOY, 100, n, steps, lam=lam)


# --- density oracle ---------------------------------------------------------


@pytest.mark.parametrize("awd, rho1", [(0.1, 1.0), (0.0, 1.0), (0.02, 100.0), (0.5, 0.01)])
def test_density_oracle(awd, rho1):
    summ = SampleSummary(0.0, 0.0, awd, 1)
    table = exp_mech_density_oracle(summ, TOY, 100, 10, rho1, 1.0)
    assert np.trapezoid(table.density, table.lams) == pytest.approx(1.0, abs=1e-9)
    assert table.cdf[0] == 0 and table.cdf[-1] == pytest.approx(1.0)
    star = min(1.0, lambda_critical(awd, TOY, 100, 10, 1.0)) if awd > 0 else 1.0
    assert abs(table.argmax - star) <= 1 / 4000 + 1e-12

    post = lambda_posterior_params(summ, TOY, 100, 10, rho1, 1.0)
    ref = stats.truncnorm((0 - post.mean) / post.sd, (1 - post.mean) / post.sd, loc=post.mean, scale=post.sd)
    np.testing.assert_allclose(table.cdf, ref.cdf(table.lams), atol=1e-4)


def test_density_oracle_grid_guard():
    with pytest.raises(DomainError):
        exp_mech_density_oracle(SampleSummary(0, 0, 0.1, 1), TOY, 100, 10, 1.0, 1.0, grid_points=999)


# --- experiment runners -----------------------------------------------------


@pytest.fixture(scope="module")
def small_config():
    spec = PopulationSpec(pop_size=5000, expected_n=200, u_w=100, response="binary", target_corr=0.3)
    return ExperimentConfig(population=spec, rho1s=(0.1, 1.0), rho2s=(0.1, 1.0), rho3s=(1.0,), replicates=1000, master_seed=3)


@pytest.mark.parametrize("kwargs", [dict(replicates=0), dict(rho1s=()), dict(rho2s=(0.0,)), dict(alphas=(1.0,)), dict(lambda_grid_points=1)])
def test_config_rejects(kwargs):
    with pytest.raises(DomainError):
        ExperimentConfig(population=PopulationSpec(pop_size=100, expected_n=10, u_w=20), **kwargs)


def test_reference_sample_unknown_variable(small_config):
    cfg = ExperimentConfig(population=small_config.population, variable="inc3")
    with pytest.raises(DomainError):
        reference_sample(cfg)


def test_mse_curves(small_config):
    rows = run_mse_curves(small_config)
    for rho2 in small_config.rho2s:
        curve = [r for r in rows if r["rho2"] == rho2]
        stars = [r for r in curve if r["lambda_star"]]
        assert len(stars) == 1
        assert stars[0]["mse"] <= min(r["mse"] for r in curve) * (1 + 1e-12)
        assert all(r["relative"] for r in curve)
    star = {r["rho2"]: r["lambda"] for r in rows if r["lambda_star"]}
    assert star[0.1] >= star[1.0]


def test_mse_curves_psid_variables():
    base = dict(population=PopulationSpec.psid_like(), rho2s=(1e-3, 1e-2, 1e-1), lambda_grid_points=11)
    star = {}
    for name in ("inc3", "pov"):
        rows = run_mse_curves(ExperimentConfig(variable=name, **base))
        star[name] = [r["lambda"] for r in rows if r["lambda_star"]]
        assert all(a >= b for a, b in zip(star[name], star[name][1:]))
    # the income gap is small relative to its range, the poverty gap is not
    assert all(i >= p for i, p in zip(star["inc3"], star["pov"]))


def test_feasibility_grid():
    rows = run_feasibility_grid(pop_sizes=(1e8,), ns=(1e3, 4e3), ratios=(1.0, 1e4), rhos=(1.0,))
    by = {(r["n"], r["ratio"]): r["min_awd"] for r in rows}
    assert by[(1e3, 1.0)] == 0.0
    assert by[(1e3, 1e4)] == pytest.approx(math.sqrt(0.0049995), rel=1e-12)
    # at fixed ratio, min_awd scales as 1/n
    assert by[(4e3, 1e4)] == pytest.approx(by[(1e3, 1e4)] / 4, rel=1e-12)
    assert rows[0]["u_w"] == 1e8 / 1e3


def test_feasibility_grid_rejects():
    with pytest.raises(DomainError):
        run_feasibility_grid(ratios=())
    with pytest.raises(DomainError):
        run_feasibility_grid(ratios=(0.5,))


def test_lambda_distribution(small_config):
    out = run_lambda_distribution(small_config)
    assert len(out.rows) == 4
    for (rho1, rho2), (lams, dm) in out.draws.items():
        assert lams.size == 1000 and np.all((lams >= 0) & (lams <= 1))
        assert np.all(dm >= 0)
    for row in out.rows:
        assert row["q05"] <= row["q50"] <= row["q95"]
        assert row["awd"] == out.awd


def test_lambda_distribution_needs_replicates(small_config):
    cfg = ExperimentConfig(population=small_config.population, replicates=999)
    with pytest.raises(DomainError):
        run_lambda_distribution(cfg)


def test_coverage_runner(small_config):
    cfg = ExperimentConfig(population=small_config.population, rho1s=(1.0,), rho2s=(1.0,), rho3s=(0.1, 10.0), replicates=1000, master_seed=1)
    rows = run_coverage_experiment(cfg)
    assert len(rows) == 2
    for row in rows:
        for key in ("coverage", "coverage_pop", "nondp_coverage", "nondp_coverage_pop"):
            assert 0 <= row[key] <= 1
        assert row["mean_width_ratio"] >= 1
    assert rows[0]["nondp_coverage"] == pytest.approx(0.95, abs=0.025)
    assert rows[0]["coverage"] >= rows[0]["nondp_coverage"] - 0.02
    assert run_coverage_experiment(cfg) == rows


def test_coverage_needs_replicates(small_config):
    with pytest.raises(DomainError):
        run_coverage_experiment(ExperimentConfig(population=small_config.population, replicates=10))
