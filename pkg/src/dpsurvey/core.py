"""Survey-weighted estimators, sensitivities and the closed-form weight regularizer.

Everything here is deterministic: no randomness and no privacy state. All
sensitivity formulas assume the response lower bound has been shifted to zero
(see :meth:`SurveySample.canonical`); they use ``Bounds.span_y`` so that they
stay correct when handed raw bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Union

import numpy as np
from scipy.special import ndtri


class DomainError(ValueError):
    """An argument is outside the domain where a formula is defined."""


class ValidationError(ValueError):
    """Input data violate the declared schema (bounds, sizes, shapes)."""


@dataclass(frozen=True)
class Bounds:
    """Schema bounds ``[l_y, u_y] x [l_w, u_w]`` for responses and weights."""

    l_y: float
    u_y: float
    l_w: float
    u_w: float

    def __post_init__(self):
        for name in ("l_y", "u_y", "l_w", "u_w"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValidationError(f"{name} must be finite, got {value}")
        if self.l_y > self.u_y:
            raise ValidationError(f"l_y={self.l_y} exceeds u_y={self.u_y}")
        if not 1.0 <= self.l_w <= self.u_w:
            raise ValidationError(f"weight bounds must satisfy 1 <= l_w <= u_w, got [{self.l_w}, {self.u_w}]")

    @property
    def span_y(self) -> float:
        return self.u_y - self.l_y

    @property
    def is_canonical(self) -> bool:
        return self.l_y == 0.0

    def canonical(self) -> "Bounds":
        """Bounds after shifting responses so that ``l_y = 0``."""
        return Bounds(0.0, self.span_y, self.l_w, self.u_w)


@dataclass(frozen=True)
class SampleSummary:
    theta_w: float
    theta_0: float
    awd: float
    disc_sign: int

    @classmethod
    def from_means(cls, theta_w: float, theta_0: float) -> "SampleSummary":
        diff = theta_w - theta_0
        return cls(theta_w, theta_0, abs(diff), int(np.sign(diff)))


@dataclass(frozen=True)
class SurveySample:
    """Responses ``y`` with design weights ``w`` drawn from a population of ``pop_size``.

    The arrays are copied and frozen on construction. ``pop_size`` and the
    realized sample size are treated as public.
    """

    y: np.ndarray
    w: np.ndarray
    pop_size: float
    bounds: Bounds

    def __post_init__(self):
        y = np.array(self.y, dtype=float).ravel()
        w = np.array(self.w, dtype=float).ravel()
        y.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "pop_size", float(self.pop_size))

        n = y.size
        if n < 1:
            raise ValidationError("no records")
        if w.size != n:
            raise ValidationError(f"y has {n} entries but w has {w.size}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(w))):
            raise ValidationError("responses and weights must be finite")
        if self.pop_size < n:
            raise ValidationError(f"sample size n={n} exceeds population size N={self.pop_size:g}")
        b = self.bounds
        if np.any(y < b.l_y) or np.any(y > b.u_y):
            raise ValidationError(f"responses outside [{b.l_y}, {b.u_y}]")
        if np.any(w < b.l_w) or np.any(w > b.u_w):
            raise ValidationError(f"weights outside [{b.l_w}, {b.u_w}]")
        if b.u_w < self.pop_size / n:
            raise ValidationError(f"u_w={b.u_w} is below N/n={self.pop_size / n:g}")

    @property
    def n(self) -> int:
        return int(self.y.size)

    @property
    def uniform_weight(self) -> float:
        """``N/n``, the weight of a simple random sample of the same size."""
        return self.pop_size / self.n

    def canonical(self) -> "SurveySample":
        """The same sample with responses shifted by ``-l_y``.

        The shift is schema metadata, so it can be added back to released
        point estimates without privacy cost.
        """
        if self.bounds.is_canonical:
            return self
        return SurveySample(self.y - self.bounds.l_y, self.w, self.pop_size, self.bounds.canonical())

    def summary(self) -> SampleSummary:
        return SampleSummary.from_means(weighted_mean(self), unweighted_mean(self))


@dataclass(frozen=True)
class RegularizationSolution:
    lambda_star: float
    lambda_crit: float
    loss_at_star: float
    min_feasible_awd: float


def weighted_mean(sample: SurveySample) -> float:
    """Horvitz-Thompson mean ``sum(y * w) / N``."""
    return math.fsum(sample.y * sample.w) / sample.pop_size


def unweighted_mean(sample: SurveySample) -> float:
    return math.fsum(sample.y) / sample.n


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"lambda must lie in [0, 1], got {lam}")
    return lam


def shrink_weights(w, lam: float, pop_size: float, n: int) -> np.ndarray:
    """Shrink weights linearly towards ``N/n``: ``(1 - lam) * w + lam * N / n``."""
    lam = _check_lambda(lam)
    return (1.0 - lam) * np.asarray(w, dtype=float) + lam * (pop_size / n)


def regularized_mean(sample: SurveySample, lam: float) -> float:
    """Weighted mean computed with shrunken weights.

    Algebraically equal to ``lam * theta_0 + (1 - lam) * theta_w``.
    """
    g = shrink_weights(sample.w, lam, sample.pop_size, sample.n)
    return math.fsum(sample.y * g) / sample.pop_size


def mechanism_bias(summary: SampleSummary, lam: float) -> float:
    """Expected offset of the regularized release from the weighted mean."""
    return _check_lambda(lam) * (summary.theta_0 - summary.theta_w)


def sensitivity_weighted_mean(bounds: Bounds, pop_size: float) -> float:
    return bounds.u_w * bounds.span_y / pop_size


def sensitivity_unweighted_mean(bounds: Bounds, n: int) -> float:
    return bounds.span_y / n


def shrunk_upper_weight(bounds: Bounds, pop_size: float, n: int, lam: float) -> float:
    """``u_w`` pushed through the shrinkage map."""
    return (1.0 - lam) * bounds.u_w + lam * (pop_size / n)


def sensitivity_regularized_mean(bounds: Bounds, pop_size: float, n: int, lam: float) -> float:
    lam = _check_lambda(lam)
    return shrunk_upper_weight(bounds, pop_size, n, lam) * bounds.span_y / pop_size


def sensitivity_loss(bounds: Bounds, pop_size: float, n: int) -> float:
    """Sensitivity of the DP-MSE loss used by the lambda exponential mechanism.

    Equals ``(Delta(theta_w) - Delta(theta_0))**2``, written as
    ``(u_y * (u_w - N/n) / N)**2`` to avoid subtracting two close numbers.
    """
    gap = bounds.u_w - pop_size / n
    return (bounds.span_y * gap / pop_size) ** 2


def sensitivity_variance(bounds: Bounds, pop_size: float) -> float:
    return sensitivity_weighted_mean(bounds, pop_size) ** 2


def _check_rho(rho: float, name: str = "rho") -> float:
    rho = float(rho)
    if not rho > 0.0:
        raise DomainError(f"{name} must be positive, got {rho}")
    return rho


def dp_mse_loss(summary: SampleSummary, bounds: Bounds, pop_size: float, n: int, lam: float, rho: float) -> float:
    """Gaussian-noise variance at ``lam`` plus squared mechanism bias."""
    rho = _check_rho(rho)
    lam = _check_lambda(lam)
    noise_sd_sq = sensitivity_regularized_mean(bounds, pop_size, n, lam) ** 2 / (2.0 * rho)
    return noise_sd_sq + (lam * summary.awd) ** 2


def dp_mse_loss_grid(summary: SampleSummary, bounds: Bounds, pop_size: float, n: int, lams, rho: float) -> np.ndarray:
    """Vectorized :func:`dp_mse_loss` over an array of lambdas."""
    rho = _check_rho(rho)
    lams = np.asarray(lams, dtype=float)
    if np.any(lams < 0.0) or np.any(lams > 1.0):
        raise DomainError("lambda grid must lie in [0, 1]")
    sens = ((1.0 - lams) * bounds.u_w + lams * (pop_size / n)) * bounds.span_y / pop_size
    return sens**2 / (2.0 * rho) + (lams * summary.awd) ** 2


def lambda_critical(awd: float, bounds: Bounds, pop_size: float, n: int, rho: float) -> float:
    """Unclipped stationary point of the loss; may exceed 1."""
    rho = _check_rho(rho)
    gap = bounds.u_w - pop_size / n
    if gap <= 0.0 or bounds.span_y == 0.0:
        return 0.0
    # divide numerator and denominator by (u_y / N)**2 / rho
    k = 2.0 * rho * (awd * pop_size / bounds.span_y) ** 2
    return bounds.u_w * gap / (gap * gap + k)


def min_feasible_awd(bounds: Bounds, pop_size: float, n: int, rho: float) -> float:
    """Smallest discrepancy for which the optimal lambda is below 1."""
    rho = _check_rho(rho)
    gap = max(bounds.u_w - pop_size / n, 0.0)
    return math.sqrt(bounds.span_y**2 * gap / (2.0 * rho * pop_size * n))


def min_feasible_rho(bounds: Bounds, pop_size: float, n: int, awd: float) -> float:
    """Smallest budget for which the optimal lambda is below 1.

    Returns ``inf`` when ``awd == 0``: no finite budget makes weighting pay off.
    """
    if awd < 0:
        raise DomainError(f"awd must be non-negative, got {awd}")
    gap = max(bounds.u_w - pop_size / n, 0.0)
    num = bounds.span_y**2 * gap
    if awd == 0.0:
        return math.inf if num > 0 else 0.0
    return num / (2.0 * awd**2 * pop_size * n)


def optimal_lambda(summary: SampleSummary, bounds: Bounds, pop_size: float, n: int, rho: float) -> RegularizationSolution:
    """Closed-form minimizer of :func:`dp_mse_loss` over ``[0, 1]``.

    At the boundary ``awd == min_feasible_awd`` the minimizer is reported as 1.
    """
    if bounds.u_w < pop_size / n:
        raise DomainError("optimal_lambda requires u_w >= N/n")
    crit = lambda_critical(summary.awd, bounds, pop_size, n, rho)
    threshold = min_feasible_awd(bounds, pop_size, n, rho)
    gap = bounds.u_w - pop_size / n
    if gap > 0 and summary.awd <= threshold:
        star = 1.0
    else:
        star = min(1.0, crit)
    loss = dp_mse_loss(summary, bounds, pop_size, n, star, rho)
    return RegularizationSolution(star, crit, loss, threshold)


def bias_inverse_dminus(lam: float, bounds: Bounds, pop_size: float, n: int, rho2: float) -> float:
    """Discrepancy implied by an interior optimal lambda (inverse of the lambda* map).

    Arguments at or beyond ``u_w / (u_w - N/n)`` map to 0, the limit where the
    implied discrepancy vanishes.
    """
    rho2 = _check_rho(rho2, "rho2")
    lam = float(lam)
    if not lam > 0.0:
        raise DomainError(f"lambda must be positive, got {lam}")
    gap = bounds.u_w - pop_size / n
    if gap <= 0.0:
        return 0.0
    # u_w / lam - gap == (u_w - lam * gap) / lam; the former cancels badly near the clamp
    shrunk = (1.0 - lam) * bounds.u_w + lam * (pop_size / n)
    if shrunk <= 0.0:
        return 0.0
    scale = (bounds.span_y / pop_size) ** 2 / rho2
    return math.sqrt(0.5 * scale * gap * shrunk / lam)


def approx_ht_variance(sample: SurveySample) -> float:
    """First (diagonal) term of the HT variance estimator; unbiased under Poisson sampling."""
    w = sample.w
    return math.fsum(w * (w - 1.0) * sample.y**2) / sample.pop_size**2


JointInclusion = Union[Callable[[int, int], object], np.ndarray]


def _lookup_joint(joint_inclusion: JointInclusion, i: int, j: int):
    try:
        if callable(joint_inclusion):
            value = joint_inclusion(i, j)
        else:
            value = joint_inclusion[i][j]
    except (KeyError, IndexError) as exc:
        raise DomainError(f"no joint inclusion probability for pair ({i}, {j})") from exc
    if value is None:
        raise DomainError(f"no joint inclusion probability for pair ({i}, {j})")
    value = value if isinstance(value, Fraction) else Fraction(float(value))
    if not 0 < value <= 1:
        raise DomainError(f"joint inclusion probability for ({i}, {j}) must lie in (0, 1], got {float(value)}")
    return value


def ht_variance_full(sample: SurveySample, joint_inclusion: JointInclusion) -> float:
    """Unbiased HT variance estimator including the pairwise term.

    ``joint_inclusion`` maps sampled positions ``(i, j)``, ``i != j``, to the
    joint inclusion probability, either as a callable or an indexable table.
    Accumulation is done in exact rational arithmetic over the float inputs so
    that designs with exactly cancelling terms return exactly zero. Meant for
    small designs only; the cost is quadratic in ``n``.
    """
    n = sample.n
    w = [Fraction(float(v)) for v in sample.w]
    y = [Fraction(float(v)) for v in sample.y]
    total = sum(((wi * wi - wi) * yi * yi for wi, yi in zip(w, y)), Fraction(0))
    for i in range(n):
        if y[i] == 0:
            continue
        for j in range(n):
            if i == j or y[j] == 0:
                continue
            pij = _lookup_joint(joint_inclusion, i, j)
            # (pij - pi pj) / (pi pj pij) == wi wj - 1 / pij
            total += (w[i] * w[j] - 1 / pij) * y[i] * y[j]
    return float(total / (Fraction(sample.pop_size) ** 2))


def z_upper(alpha: float) -> float:
    """Upper ``alpha`` quantile of the standard normal, ``z`` with ``P(Z > z) = alpha``."""
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    return float(-ndtri(alpha))


def classical_interval(sample: SurveySample, alpha: float) -> tuple[float, float]:
    """Non-private normal-approximation interval from the approximate HT variance."""
    canon = sample.canonical()
    half = z_upper(alpha / 2) * math.sqrt(approx_ht_variance(canon))
    theta = weighted_mean(canon) + sample.bounds.l_y
    return theta - half, theta + half
