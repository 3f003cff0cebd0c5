"""Synthetic populations, Poisson and SRSWOR sampling, verification oracles and experiment runners.

The ``psid`` response model is a synthetic stand-in for a household panel
with three variables: a capped income-like amount (``inc3``), a poverty flag
(``pov``) and an independent coin (``bern``). Selection probabilities come
from a latent log-normal size measure; the weight/response association is
tuned numerically.

Stream layout for a master seed ``s``: the population uses
``RandomSource(s, (0,))``, replicate ``r`` draws its sample from
``(s, (1, r))``, its mechanisms from ``(s, (2, r))`` and its simulated truth
from ``(s, (3, r))``. Every table is therefore a pure function of the config
and seed regardless of the order in which replicates run, and all budget
cells share their random numbers.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple, Optional

import numpy as np
from scipy import optimize, special, stats
from scipy.integrate import cumulative_trapezoid, trapezoid

from .algorithms import dp_confidence_interval
from .core import (
    Bounds,
    DomainError,
    SampleSummary,
    SurveySample,
    approx_ht_variance,
    bias_inverse_dminus,
    dp_mse_loss_grid,
    min_feasible_awd,
    optimal_lambda,
    sensitivity_loss,
    shrink_weights,
    weighted_mean,
    z_upper,
)
from .mechanisms import PrivacyBudget, RandomSource, exp_mech_lambda

RESPONSE_MODELS = ("binary", "bounded", "psid")

# Targets for the psid-like generator: rank correlation of weights with
# inc3 and expected unweighted-minus-weighted gaps.
PSID_SPEARMAN_INC3 = 0.14
PSID_GAP_INC3 = -0.67
PSID_GAP_POV = 0.022
PSID_POV_RATE = 0.11
PSID_U_Y = {"inc3": 150.0, "pov": 1.0, "bern": 1.0}


@dataclass(frozen=True)
class PopulationSpec:
    """Recipe for a synthetic population.

    ``beta`` is the elasticity of the selection probability in the latent
    size ``z``: ``pi = clip(c * exp(-beta * z), 1/u_w, 1)`` with ``c`` set so
    that ``sum(pi) == expected_n``. ``target_corr`` is the Spearman
    correlation between weights and response (``binary``/``bounded`` only).
    """

    pop_size: int = 100_000
    expected_n: float = 1_000.0
    u_w: float = 500.0
    response: str = "psid"
    beta: float = 0.5
    target_corr: float = 0.0
    p: float = 0.5
    shape: tuple = (2.0, 2.0)
    u_y: float = 1.0

    def __post_init__(self):
        if self.response not in RESPONSE_MODELS:
            raise DomainError(f"response must be one of {RESPONSE_MODELS}, got {self.response!r}")
        if self.pop_size < 1 or not 0 < self.expected_n <= self.pop_size:
            raise DomainError("need 0 < expected_n <= pop_size")
        if not self.u_w >= 1:
            raise DomainError("u_w must be at least 1")
        if self.pop_size / self.u_w > self.expected_n:
            raise DomainError("expected_n is below N/u_w: probabilities cannot respect the weight bound")
        if not -1 < self.target_corr < 1:
            raise DomainError("target_corr must lie in (-1, 1)")
        if not 0 < self.p < 1:
            raise DomainError("p must lie in (0, 1)")
        if not self.u_y > 0:
            raise DomainError("u_y must be positive")

    @classmethod
    def psid_like(cls, **overrides) -> "PopulationSpec":
        """Desk-scale default: N = 1e5, E[n] = 1e3, u_w = 500 (weight ratio 5)."""
        base = dict(pop_size=100_000, expected_n=1_000.0, u_w=500.0, response="psid")
        base.update(overrides)
        return cls(**base)


@dataclass
class Population:
    pi: np.ndarray
    responses: dict
    u_y: dict
    u_w: float
    tuning: dict = field(default_factory=dict)

    @property
    def pop_size(self) -> int:
        return int(self.pi.size)

    @property
    def variables(self) -> list:
        return list(self.responses)

    def bounds(self, name: str) -> Bounds:
        return Bounds(0.0, self.u_y[name], 1.0, self.u_w)

    def mean(self, name: str) -> float:
        return float(np.mean(self.responses[name]))

    def sample_at(self, index: np.ndarray, name: str) -> SurveySample:
        return SurveySample(self.responses[name][index], 1.0 / self.pi[index], self.pop_size, self.bounds(name))

    def expected_gap(self, name: str) -> float:
        """Expected ``theta_0 - theta_w`` under Poisson sampling, to first order."""
        y = self.responses[name]
        return float(np.dot(self.pi, y) / self.pi.sum() - y.mean())


def _selection_probs(z, beta, expected_n, u_w):
    lo = 1.0 / u_w
    if beta == 0:
        return np.full(z.shape, expected_n / z.size)

    def total(log_c):
        return np.clip(np.exp(log_c - beta * z), lo, 1.0).sum() - expected_n

    a = beta * z.min() - math.log(u_w) - 1.0
    b = beta * z.max() + 1.0
    if total(a) >= 0:
        return np.full(z.shape, lo)
    log_c = optimize.brentq(total, a, b, xtol=1e-12)
    return np.clip(np.exp(log_c - beta * z), lo, 1.0)


def _spearman(a, b) -> float:
    rho = stats.spearmanr(a, b)[0]
    return float(rho)


def _solve_mixing(fn, target, what):
    """Solve ``fn(r) == target`` for ``r`` in ``[-1, 1]``; ``fn`` increasing in ``r`` up to sampling noise."""
    lo, hi = fn(-1.0), fn(1.0)
    if not min(lo, hi) < target < max(lo, hi):
        raise DomainError(f"{what} target {target} is infeasible; attainable range [{min(lo, hi):.4g}, {max(lo, hi):.4g}]")
    return optimize.brentq(lambda r: fn(r) - target, -1.0, 1.0, xtol=1e-6)


def _mix(r, z, e):
    return r * z + math.sqrt(max(1.0 - r * r, 0.0)) * e


def _generic_population(spec: PopulationSpec, rng: RandomSource) -> Population:
    z = rng.child(0).normal(spec.pop_size)
    e = rng.child(1).normal(spec.pop_size)
    pi = _selection_probs(z, spec.beta, spec.expected_n, spec.u_w)
    w = 1.0 / pi

    if spec.response == "binary":
        cut = special.ndtri(1.0 - spec.p)

        def make(r):
            return (_mix(r, z, e) > cut).astype(float)

        u_y = 1.0
    else:
        a, b = spec.shape

        def make(r):
            return spec.u_y * stats.beta.ppf(special.ndtr(_mix(r, z, e)), a, b)

        u_y = spec.u_y

    if np.ptp(w) == 0:
        if spec.target_corr != 0:
            raise DomainError("constant weights cannot carry a non-zero rank correlation")
        r = 0.0
    else:
        r = _solve_mixing(lambda r: _spearman(w, make(r)), spec.target_corr, "rank correlation")
    return Population(pi, {"y": make(r)}, {"y": u_y}, spec.u_w, {"mixing": r})


def _psid_population(spec: PopulationSpec, rng: RandomSource) -> Population:
    N = spec.pop_size
    z = rng.child(0).normal(N)
    e = rng.child(1).normal(N)
    e2 = rng.child(2).normal(N)
    bern = (rng.child(3).uniform(N) < 0.5).astype(float)

    def inc3(r):
        return np.minimum(PSID_U_Y["inc3"], np.exp(math.log(40.0) + 0.4 * _mix(r, z, e)))

    def gap(pi, y):
        return float(np.dot(pi, y) / pi.sum() - y.mean())

    # alternate: mixing for the rank correlation, then beta for the gap
    beta = spec.beta
    for _ in range(2):
        pi = _selection_probs(z, beta, spec.expected_n, spec.u_w)
        r = _solve_mixing(lambda r: _spearman(1.0 / pi, inc3(r)), PSID_SPEARMAN_INC3, "inc3 rank correlation")
        y = inc3(r)
        f = lambda b: gap(_selection_probs(z, b, spec.expected_n, spec.u_w), y) - PSID_GAP_INC3
        if f(1e-6) * f(5.0) > 0:
            raise DomainError("inc3 gap target is infeasible for this design")
        beta = optimize.brentq(f, 1e-6, 5.0, xtol=1e-8)
    pi = _selection_probs(z, beta, spec.expected_n, spec.u_w)
    y_inc = inc3(r)

    def pov(a):
        x = -a * z + math.sqrt(max(1.0 - a * a, 0.0)) * e2
        return (x > np.quantile(x, 1.0 - PSID_POV_RATE)).astype(float)

    a = _solve_mixing(lambda a: gap(pi, pov(a)), PSID_GAP_POV, "pov gap")
    responses = {"inc3": y_inc, "pov": pov(a), "bern": bern}
    tuning = {"inc3_mixing": r, "beta": beta, "pov_mixing": a}
    return Population(pi, responses, dict(PSID_U_Y), spec.u_w, tuning)


def generate_population(spec: PopulationSpec, rng: RandomSource) -> Population:
    """Draw a synthetic population; deterministic given ``rng``."""
    if spec.response == "psid":
        return _psid_population(spec, rng)
    return _generic_population(spec, rng)


class PoissonDraw(NamedTuple):
    sample: SurveySample
    index: np.ndarray
    rejected: int


def poisson_sample(population: Population, rng: RandomSource, response: Optional[str] = None, max_tries: int = 1000) -> PoissonDraw:
    """Include each record independently with probability ``pi``; weights ``1/pi``.

    Realized samples that are empty, or so small that ``N/n`` exceeds
    ``u_w``, are discarded and redrawn; the number of discards is reported.
    """
    name = response or population.variables[0]
    N = population.pop_size
    for attempt in range(max_tries):
        index = np.flatnonzero(rng.uniform(N) < population.pi)
        if index.size >= 1 and N / index.size <= population.u_w:
            return PoissonDraw(population.sample_at(index, name), index, attempt)
    raise DomainError(f"no usable Poisson sample in {max_tries} attempts")


def poisson_ht_replicates(y, pi, replicates: int, rng: RandomSource, chunk: int = 20_000):
    """Vectorized Poisson-design replicates of the HT mean and the approximate HT variance.

    Empty samples are kept (the HT estimate is then 0), which is the design
    under which both estimators are unbiased.
    """
    y = np.asarray(y, dtype=float)
    pi = np.asarray(pi, dtype=float)
    N = y.size
    w = 1.0 / pi
    means, variances = [], []
    done = 0
    while done < replicates:
        m = min(chunk, replicates - done)
        mask = rng.uniform((m, N)) < pi
        means.append(mask @ (y * w) / N)
        variances.append(mask @ (w * (w - 1.0) * y * y) / N**2)
        done += m
    return np.concatenate(means), np.concatenate(variances)


def srswor_joint_inclusion(pop_size: int, n: int):
    """Joint inclusion probability ``n (n-1) / (N (N-1))`` of simple random sampling without replacement."""
    if not 2 <= n <= pop_size:
        raise DomainError("need 2 <= n <= N")
    p = Fraction(n * (n - 1), pop_size * (pop_size - 1))
    return lambda i, j: p


def srswor_sample(y_pop, n: int, rng: RandomSource, bounds: Bounds) -> SurveySample:
    y_pop = np.asarray(y_pop, dtype=float)
    N = y_pop.size
    idx = rng.generator.choice(N, size=n, replace=False)
    return SurveySample(y_pop[idx], np.full(n, N / n), N, bounds)


def srswor_means(y_pop, n: int, replicates: int, rng: RandomSource) -> np.ndarray:
    """Vectorized SRSWOR replicates of the HT mean (which is the sample mean)."""
    y_pop = np.asarray(y_pop, dtype=float)
    keys = rng.uniform((replicates, y_pop.size))
    idx = np.argpartition(keys, n - 1, axis=1)[:, :n]
    return y_pop[idx].mean(axis=1)


# --- brute-force sensitivity oracle ---------------------------------------

STATISTICS = ("weighted_mean", "unweighted_mean", "regularized_mean", "approx_variance", "discrepancy")


def _statistic_parts(statistic, bounds, pop_size, n, lam):
    """Per-record contribution ``f(y, w)`` and the aggregation of the sum."""
    if statistic == "weighted_mean":
        return lambda y, w: y * w / pop_size
    if statistic == "unweighted_mean":
        return lambda y, w: y / n
    if statistic == "regularized_mean":
        if lam is None:
            raise DomainError("regularized_mean needs lam")
        return lambda y, w: y * shrink_weights(w, lam, pop_size, n) / pop_size
    if statistic == "approx_variance":
        return lambda y, w: w * (w - 1.0) * y * y / pop_size**2
    if statistic == "discrepancy":
        return lambda y, w: y * w / pop_size - y / n
    raise DomainError(f"unknown statistic {statistic!r}; choose from {STATISTICS}")


def brute_force_sensitivity(
    statistic: str,
    bounds: Bounds,
    pop_size: float,
    n: int,
    grid_steps: int,
    lam: Optional[float] = None,
    context_steps: int = 3,
) -> float:
    """Largest change of ``statistic`` when one record of an ``n``-record sample is replaced.

    The replaced record ranges over a ``grid_steps x grid_steps`` grid on
    ``[l_y, u_y] x [l_w, u_w]``; the other ``n - 1`` records range over all
    multisets of a coarse ``context_steps``-point grid. Because the grid
    contains the corners it approaches the true sensitivity from below.
    """
    if not 1 <= n <= 8:
        raise DomainError("brute force is limited to n <= 8")
    if not 2 <= grid_steps <= 64:
        raise DomainError("grid_steps must lie in [2, 64]")
    if not 1 <= context_steps <= 4:
        raise DomainError("context_steps must lie in [1, 4]")
    f = _statistic_parts(statistic, bounds, pop_size, n, lam)

    ys, ws = np.meshgrid(np.linspace(bounds.l_y, bounds.u_y, grid_steps), np.linspace(bounds.l_w, bounds.u_w, grid_steps))
    free = f(ys.ravel(), ws.ravel())
    coarse = [
        (y, w)
        for y in np.linspace(bounds.l_y, bounds.u_y, context_steps)
        for w in np.linspace(bounds.l_w, bounds.u_w, context_steps)
    ]
    best = 0.0
    for ctx in itertools.combinations_with_replacement(coarse, n - 1):
        base = math.fsum(float(f(np.float64(y), np.float64(w))) for y, w in ctx)
        values = base + free
        best = max(best, float(values.max() - values.min()))
    return best


# --- exponential-mechanism density oracle ---------------------------------


@dataclass(frozen=True)
class DensityTable:
    lams: np.ndarray
    density: np.ndarray
    cdf: np.ndarray

    def cdf_at(self, x):
        return np.interp(x, self.lams, self.cdf)

    @property
    def argmax(self) -> float:
        return float(self.lams[np.argmax(self.density)])


def exp_mech_density_oracle(
    summary: SampleSummary, bounds: Bounds, pop_size: float, n: int, rho1: float, rho2: float, grid_points: int = 4001
) -> DensityTable:
    """Lambda density evaluated directly from the loss on a uniform grid, normalized by quadrature."""
    if grid_points < 1000:
        raise DomainError("grid_points must be at least 1000")
    lams = np.linspace(0.0, 1.0, grid_points)
    loss = dp_mse_loss_grid(summary, bounds, pop_size, n, lams, rho2)
    scale = math.sqrt(2.0 * rho1) / (2.0 * sensitivity_loss(bounds, pop_size, n))
    log_dens = -scale * (loss - loss.min())
    dens = np.exp(log_dens)
    dens /= trapezoid(dens, lams)
    cdf = cumulative_trapezoid(dens, lams, initial=0.0)
    cdf /= cdf[-1]
    return DensityTable(lams, dens, cdf)


# --- experiment runners ---------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    population: PopulationSpec = field(default_factory=PopulationSpec.psid_like)
    rho1s: tuple = (1e-3, 1e-2, 1e-1)
    rho2s: tuple = (1e-3, 1e-2, 1e-1)
    rho3s: tuple = (1e-3, 1e-2, 1e-1)
    alphas: tuple = (0.05,)
    alpha_vs: tuple = (0.05,)
    replicates: int = 1000
    master_seed: int = 0
    variable: Optional[str] = None
    lambda_grid_points: int = 101

    def __post_init__(self):
        if self.replicates < 1:
            raise DomainError("replicates must be at least 1")
        for name in ("rho1s", "rho2s", "rho3s"):
            values = getattr(self, name)
            if not values or any(not (v > 0 and math.isfinite(v)) for v in values):
                raise DomainError(f"{name} must be a non-empty list of positive budgets")
        for name in ("alphas", "alpha_vs"):
            values = getattr(self, name)
            if not values or any(not 0 < v < 1 for v in values):
                raise DomainError(f"{name} must be a non-empty list in (0, 1)")
        if self.lambda_grid_points < 2:
            raise DomainError("lambda_grid_points must be at least 2")


def _setup(config: ExperimentConfig):
    pop = generate_population(config.population, RandomSource(config.master_seed, (0,)))
    name = config.variable or pop.variables[0]
    if name not in pop.responses:
        raise DomainError(f"population has no variable {name!r}; choose from {pop.variables}")
    return pop, name


def reference_sample(config: ExperimentConfig):
    """The population and the fixed reference sample used by the single-sample runners."""
    pop, name = _setup(config)
    draw = poisson_sample(pop, RandomSource(config.master_seed, (1, 0)), name)
    return pop, name, draw


def run_mse_curves(config: ExperimentConfig) -> list:
    """DP mean squared error over a lambda grid, one curve per ``rho2``.

    Each curve carries exactly one row flagged ``lambda_star``. The
    noise-to-signal column divides the loss by the weighted mean; when that
    is zero the column is NaN and ``relative`` is false.
    """
    _, name, draw = reference_sample(config)
    s = draw.sample
    summary = s.summary()
    theta = weighted_mean(s)
    grid = np.linspace(0.0, 1.0, config.lambda_grid_points)
    rows = []
    for rho2 in config.rho2s:
        star = optimal_lambda(summary, s.bounds, s.pop_size, s.n, rho2).lambda_star
        lams = np.unique(np.append(grid, star))
        loss = dp_mse_loss_grid(summary, s.bounds, s.pop_size, s.n, lams, rho2)
        for lam, mse in zip(lams, loss):
            rows.append(
                {
                    "variable": name,
                    "rho2": rho2,
                    "lambda": float(lam),
                    "mse": float(mse),
                    "noise_to_signal": float(mse / theta) if theta != 0 else math.nan,
                    "relative": theta != 0,
                    "lambda_star": bool(lam == star),
                }
            )
    return rows


def run_feasibility_grid(pop_sizes=(1.29e8,), ns=(1e3, 1e4), ratios=(10.0, 100.0, 1e3, 1e4), rhos=(1e-3, 1e-2, 1e-1, 1.0), u_y: float = 1.0) -> list:
    """Minimum feasible discrepancy over ``N x n x weight ratio x rho``; ratio is ``u_w / (N/n)``."""
    for name, grid in (("pop_sizes", pop_sizes), ("ns", ns), ("ratios", ratios), ("rhos", rhos)):
        if not grid:
            raise DomainError(f"{name} grid is empty")
    rows = []
    for N, n, ratio, rho in itertools.product(pop_sizes, ns, ratios, rhos):
        if not (n <= N and ratio >= 1 and rho > 0):
            raise DomainError(f"invalid grid cell N={N}, n={n}, ratio={ratio}, rho={rho}")
        b = Bounds(0.0, u_y, 1.0, ratio * N / n)
        rows.append({"N": N, "n": n, "ratio": ratio, "u_w": b.u_w, "rho": rho, "u_y": u_y, "min_awd": min_feasible_awd(b, N, n, rho)})
    return rows


def _dminus_many(lams, bounds, N, n, rho2):
    return np.array([bias_inverse_dminus(l, bounds, N, n, rho2) if l > 0 else math.inf for l in lams])


@dataclass
class LambdaDistribution:
    awd: float
    draws: dict
    rows: list


def run_lambda_distribution(config: ExperimentConfig) -> LambdaDistribution:
    """Draws of ``lambda_hat`` and the implied ``D^-(lambda_hat)`` per ``(rho1, rho2)``.

    All cells reuse the same uniform stream, so differences between cells are
    due to the budgets alone.
    """
    if config.replicates < 1000:
        raise DomainError("the lambda distribution runner needs at least 1000 replicates")
    _, name, draw = reference_sample(config)
    s = draw.sample
    summary = s.summary()
    draws, rows = {}, []
    for rho1, rho2 in itertools.product(config.rho1s, config.rho2s):
        rng = RandomSource(config.master_seed, (2, 0, 0))
        lams = exp_mech_lambda(summary, s.bounds, s.pop_size, s.n, rho1, rho2, rng, size=config.replicates)
        dm = _dminus_many(lams, s.bounds, s.pop_size, s.n, rho2)
        draws[(rho1, rho2)] = (lams, dm)
        q = np.quantile(lams, [0.05, 0.25, 0.5, 0.75, 0.95])
        rows.append(
            {
                "variable": name,
                "rho1": rho1,
                "rho2": rho2,
                "lambda_star": optimal_lambda(summary, s.bounds, s.pop_size, s.n, rho2).lambda_star,
                "mean_lambda": float(lams.mean()),
                "q05": q[0], "q25": q[1], "q50": q[2], "q75": q[3], "q95": q[4],
                "awd": summary.awd,
                "mean_dminus": float(dm.mean()),
                "median_dminus": float(np.median(dm)),
            }
        )
    return LambdaDistribution(summary.awd, draws, rows)


def run_coverage_experiment(config: ExperimentConfig, min_replicates: int = 1000) -> list:
    """Empirical coverage and width of the private interval over replicated Poisson samples.

    Two truths are scored. ``coverage`` draws a truth per replicate from the
    non-private normal approximation around the weighted mean;
    ``coverage_pop`` uses the fixed population mean. ``nondp_*`` columns
    score the classical interval on the same replicates and truths.
    """
    if config.replicates < min_replicates:
        raise DomainError(f"the coverage runner needs at least {min_replicates} replicates")
    pop, name = _setup(config)
    pop_mean = pop.mean(name)
    cells = list(itertools.product(config.rho1s, config.rho2s, config.rho3s, config.alphas, config.alpha_vs))
    budgets = {c: PrivacyBudget(c[0], c[1], c[2]) for c in cells}
    R = config.replicates
    hit = {c: np.zeros(R, bool) for c in cells}
    hit_pop = {c: np.zeros(R, bool) for c in cells}
    ratio = {c: np.zeros(R) for c in cells}
    nd_hit = {a: np.zeros(R, bool) for a in config.alphas}
    nd_hit_pop = {a: np.zeros(R, bool) for a in config.alphas}
    rejected = 0

    for r in range(R):
        draw = poisson_sample(pop, RandomSource(config.master_seed, (1, r)), name)
        rejected += draw.rejected
        s = draw.sample
        theta = weighted_mean(s)
        v = approx_ht_variance(s)
        truth = theta + math.sqrt(v) * float(RandomSource(config.master_seed, (3, r)).normal())
        mech = RandomSource(config.master_seed, (2, r))
        nd_half = {}
        for a in config.alphas:
            nd_half[a] = z_upper(a / 2) * math.sqrt(v)
            nd_hit[a][r] = abs(truth - theta) <= nd_half[a]
            nd_hit_pop[a][r] = abs(pop_mean - theta) <= nd_half[a]
        for c in cells:
            rel = dp_confidence_interval(s, budgets[c], c[3], c[4], mech)
            hit[c][r] = rel.lower <= truth <= rel.upper
            hit_pop[c][r] = rel.lower <= pop_mean <= rel.upper
            ratio[c][r] = rel.half_width / nd_half[c[3]] if nd_half[c[3]] > 0 else math.inf

    rows = []
    for c in cells:
        rho1, rho2, rho3, a, av = c
        rows.append(
            {
                "variable": name,
                "rho1": rho1,
                "rho2": rho2,
                "rho3": rho3,
                "alpha": a,
                "alpha_v": av,
                "replicates": R,
                "coverage": float(hit[c].mean()),
                "coverage_pop": float(hit_pop[c].mean()),
                "nondp_coverage": float(nd_hit[a].mean()),
                "nondp_coverage_pop": float(nd_hit_pop[a].mean()),
                "mean_width_ratio": float(ratio[c].mean()),
                "rejected_samples": rejected,
            }
        )
    return rows
