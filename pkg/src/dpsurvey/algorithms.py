"""End-to-end private releases of a population mean and its confidence interval.

Each release draws its randomness from per-stage child streams of the
``RandomSource`` it is given (lambda, mean, variance, sign), so two releases
with the same source but different budgets share their underlying standard
variates.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

from scipy.special import expit

from .core import (
    Bounds,
    DomainError,
    SampleSummary,
    SurveySample,
    _check_rho,
    approx_ht_variance,
    bias_inverse_dminus,
    regularized_mean,
    sensitivity_regularized_mean,
    sensitivity_unweighted_mean,
    sensitivity_variance,
    sensitivity_weighted_mean,
    shrunk_upper_weight,
    z_upper,
)
from .mechanisms import (
    STAGE_LAMBDA,
    STAGE_MEAN,
    STAGE_SIGN,
    STAGE_VARIANCE,
    PrivacyBudget,
    RandomSource,
    exp_mech_lambda,
    gaussian_mechanism,
    sup_sigma2,
)

SIGN_MODES = ("pos", "neg", "unknown", "dp")


@dataclass(frozen=True)
class DiscrepancySignPolicy:
    """How the sign of ``theta_w - theta_0`` is obtained for the plug-in bias correction.

    ``pos``/``neg`` treat the sign as public knowledge, ``unknown`` disables
    the correction and ``dp`` estimates it privately at cost ``rho_s``.
    """

    mode: str = "unknown"
    rho_s: float = 0.0

    def __post_init__(self):
        if self.mode not in SIGN_MODES:
            raise DomainError(f"sign mode must be one of {SIGN_MODES}, got {self.mode!r}")
        if self.mode == "dp":
            _check_rho(self.rho_s, "rho_s")
        elif self.rho_s != 0.0:
            raise DomainError("rho_s is only meaningful in dp mode")

    @classmethod
    def parse(cls, text: str) -> "DiscrepancySignPolicy":
        """Parse ``pos``, ``neg``, ``unknown`` or ``dp:<rho>``."""
        if text.startswith("dp:"):
            try:
                rho = float(text[3:])
            except ValueError:
                raise DomainError(f"bad sign budget in {text!r}") from None
            return cls("dp", rho)
        return cls(text)

    @property
    def cost(self) -> float:
        return self.rho_s if self.mode == "dp" else 0.0

    def resolve(self, summary: SampleSummary, bounds: Bounds, pop_size: float, n: int, rng: RandomSource):
        """Sign to use, or ``None`` when no correction should be applied."""
        if self.mode == "pos":
            return 1
        if self.mode == "neg":
            return -1
        if self.mode == "dp":
            return dp_sign_estimate(summary, bounds, pop_size, n, self.rho_s, rng)
        return None


@dataclass(frozen=True)
class DpMeanRelease:
    lambda_hat: float
    theta_dp: float
    noise_sd: float
    plugin_adjusted: Optional[float]
    rho_spent: float
    spends: tuple = ()


@dataclass(frozen=True)
class DpIntervalRelease:
    release: DpMeanRelease
    v_dp: float
    lower: float
    upper: float
    alpha: float
    alpha_v: float
    rho_spent: float
    spends: tuple = ()

    @property
    def half_width(self) -> float:
        return 0.5 * (self.upper - self.lower)


def dp_sign_estimate(
    summary: SampleSummary, bounds: Bounds, pop_size: float, n: int, rho_s: float, rng: RandomSource
) -> int:
    """Exponential mechanism over ``{-1, +1}`` for the sign of ``theta_w - theta_0``.

    Utility ``s * (theta_w - theta_0)`` has sensitivity at most
    ``Delta(theta_w) + Delta(theta_0)``; the two-point mechanism then reduces
    to a logistic coin.
    """
    rho_s = _check_rho(rho_s, "rho_s")
    sens = sensitivity_weighted_mean(bounds, pop_size) + sensitivity_unweighted_mean(bounds, n)
    u = float(rng.uniform())
    if sens == 0:
        p_pos = 0.5
    else:
        diff = summary.theta_w - summary.theta_0
        p_pos = float(expit(math.sqrt(2.0 * rho_s) * diff / sens))
    return 1 if u < p_pos else -1


def plugin_bias_adjust(
    release: DpMeanRelease, bounds: Bounds, pop_size: float, n: int, rho2: float, sign: Optional[int]
) -> float:
    """Add back the mechanism bias implied by the released lambda.

    ``sign`` is the (public or privately estimated) sign of
    ``theta_w - theta_0``; ``None`` leaves the estimate untouched. The
    correction ``sign * lambda_hat * D^-(lambda_hat)`` is post-processing of
    the release and costs no extra budget.
    """
    if sign is None:
        return release.theta_dp
    if sign not in (-1, 1):
        raise DomainError(f"sign must be -1, +1 or None, got {sign}")
    lam = release.lambda_hat
    if lam <= 0:
        warnings.warn("lambda_hat is 0; plug-in bias correction undefined, returning theta_dp", stacklevel=2)
        return release.theta_dp
    return release.theta_dp + sign * lam * bias_inverse_dminus(lam, bounds, pop_size, n, rho2)


def concentration_bound_cstar(
    lambda_hat: float, bounds: Bounds, pop_size: float, n: int, rho1: float, rho2: float, alpha: float
) -> float:
    """High-probability bound on ``|theta_dp - theta_w|`` computable from public inputs.

    Uses ``z_{alpha/4}`` for both the lambda-tail and noise terms. The
    argument of ``D^-`` is clamped where the implied discrepancy hits zero.
    """
    if not 0.0 < lambda_hat <= 1.0:
        raise DomainError(f"lambda_hat must lie in (0, 1], got {lambda_hat}")
    z = z_upper(alpha / 4)
    arg = lambda_hat + z * math.sqrt(sup_sigma2(bounds, pop_size, n, rho1, rho2))
    bias_term = bias_inverse_dminus(arg, bounds, pop_size, n, rho2) / lambda_hat
    noise_term = z * shrunk_upper_weight(bounds, pop_size, n, lambda_hat) * bounds.span_y / (
        pop_size * math.sqrt(2.0 * rho2)
    )
    return bias_term + noise_term


def _release_mean(sample, rho1, rho2, rng, sign_policy):
    canon = sample.canonical()
    bounds, N, n = canon.bounds, canon.pop_size, canon.n
    summary = canon.summary()

    lam = exp_mech_lambda(summary, bounds, N, n, rho1, rho2, rng.child(STAGE_LAMBDA))
    sens = sensitivity_regularized_mean(bounds, N, n, lam)
    theta = gaussian_mechanism(regularized_mean(canon, lam), sens, rho2, rng.child(STAGE_MEAN))
    theta += sample.bounds.l_y
    spends = [("lambda", rho1), ("mean", rho2)]

    adjusted = None
    if sign_policy is not None and sign_policy.mode != "unknown":
        sign = sign_policy.resolve(summary, bounds, N, n, rng.child(STAGE_SIGN))
        if sign_policy.mode == "dp":
            spends.append(("sign", sign_policy.rho_s))
        partial = DpMeanRelease(lam, theta, sens / math.sqrt(2.0 * rho2), None, 0.0)
        adjusted = plugin_bias_adjust(partial, bounds, N, n, rho2, sign)
    return canon, lam, theta, sens, adjusted, spends


def _total(spends) -> float:
    total = 0.0
    for _, rho in spends:
        total += rho
    return total


def dp_regularized_estimate(
    sample: SurveySample,
    rho1: float,
    rho2: float,
    rng: RandomSource,
    sign_policy: Optional[DiscrepancySignPolicy] = None,
) -> DpMeanRelease:
    """Private point estimate with data-adaptive weight shrinkage; ``(rho1 + rho2)``-zCDP.

    Draws ``lambda_hat`` with the exponential mechanism (budget ``rho1``),
    then releases the regularized mean with Gaussian noise (budget ``rho2``).
    With a sign policy other than ``unknown`` the plug-in bias-corrected
    estimate is also returned; ``dp`` mode spends an extra ``rho_s``.
    """
    _check_rho(rho1, "rho1")
    _check_rho(rho2, "rho2")
    _, lam, theta, sens, adjusted, spends = _release_mean(sample, rho1, rho2, rng, sign_policy)
    return DpMeanRelease(
        lambda_hat=lam,
        theta_dp=theta,
        noise_sd=sens / math.sqrt(2.0 * rho2),
        plugin_adjusted=adjusted,
        rho_spent=_total(spends),
        spends=tuple(spends),
    )


def dp_confidence_interval(
    sample: SurveySample,
    budget: PrivacyBudget,
    alpha: float,
    alpha_v: float,
    rng: RandomSource,
    sign_policy: Optional[DiscrepancySignPolicy] = None,
) -> DpIntervalRelease:
    """Private ``(1 - alpha)`` interval for the population mean; ``(rho1 + rho2 + rho3)``-zCDP.

    The sampling variance is the approximate HT variance with the original
    (unshrunk) weights, released with budget ``rho3``, floored at zero and
    padded by a ``(1 - alpha_v)`` upper allowance for its own noise.
    """
    if not budget.rho3 > 0:
        raise DomainError("the interval needs rho3 > 0")
    for name, value in (("alpha", alpha), ("alpha_v", alpha_v)):
        if not 0.0 < value < 1.0:
            raise DomainError(f"{name} must lie in (0, 1), got {value}")

    canon, lam, theta, sens, adjusted, spends = _release_mean(
        sample, budget.rho1, budget.rho2, rng, sign_policy
    )
    noise_var = sens**2 / (2.0 * budget.rho2)
    release = DpMeanRelease(lam, theta, math.sqrt(noise_var), adjusted, _total(spends), tuple(spends))

    var_sens = sensitivity_variance(canon.bounds, canon.pop_size)
    v_dp = gaussian_mechanism(approx_ht_variance(canon), var_sens, budget.rho3, rng.child(STAGE_VARIANCE))
    spends.insert(2, ("variance", budget.rho3))

    slack = z_upper(alpha_v / 2) * var_sens / math.sqrt(2.0 * budget.rho3)
    half = z_upper(alpha / 2) * math.sqrt(noise_var + max(v_dp, 0.0) + slack)
    return DpIntervalRelease(
        release=release,
        v_dp=v_dp,
        lower=theta - half,
        upper=theta + half,
        alpha=alpha,
        alpha_v=alpha_v,
        rho_spent=_total(spends),
        spends=tuple(spends),
    )
