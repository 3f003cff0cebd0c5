"""Calibrated randomization: Gaussian noise, the lambda exponential mechanism, seeded streams.

Randomness comes from numpy's PCG64 seeded through ``SeedSequence``. That is
fine for reproducible research but is *not* a cryptographically secure source,
and floating-point Gaussian sampling has known side channels; production
deployments need a CSPRNG and a hardened sampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtri_exp

from .core import (
    Bounds,
    DomainError,
    SampleSummary,
    _check_rho,
    lambda_critical,
    sensitivity_loss,
)

# Stage keys for per-stage child streams; see RandomSource.child.
STAGE_LAMBDA = 0
STAGE_MEAN = 1
STAGE_VARIANCE = 2
STAGE_SIGN = 3


class RandomSource:
    """A reproducible random stream identified by ``(master_seed, stream_id)``.

    ``stream_id`` is a tuple of non-negative integers used as the
    ``SeedSequence`` spawn key, so ``RandomSource(seed, (r, s))`` for
    replicate ``r`` and stage ``s`` is a fixed stream no matter in which
    order, or in which process, replicates are run. Distinct ids give
    streams that are independent for all practical purposes (SeedSequence
    hashes the full key).
    """

    def __init__(self, master_seed: int, stream_id=()):
        if isinstance(stream_id, (int, np.integer)):
            stream_id = (int(stream_id),)
        self.master_seed = int(master_seed)
        self.stream_id = tuple(int(k) for k in stream_id)
        if self.master_seed < 0 or any(k < 0 for k in self.stream_id):
            raise DomainError("seeds and stream ids must be non-negative")
        seq = np.random.SeedSequence(self.master_seed, spawn_key=self.stream_id)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def __repr__(self):
        return f"RandomSource(master_seed={self.master_seed}, stream_id={self.stream_id})"

    def child(self, *keys: int) -> "RandomSource":
        """Fresh stream keyed by this stream's id extended with ``keys``.

        Children do not depend on how much of the parent has been consumed.
        """
        return RandomSource(self.master_seed, self.stream_id + tuple(keys))

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def uniform(self, size=None):
        return self.generator.random(size)


@dataclass(frozen=True)
class PrivacyBudget:
    """zCDP allocations for lambda selection, mean release and variance release."""

    rho1: float
    rho2: float
    rho3: float = 0.0

    def __post_init__(self):
        for name in ("rho1", "rho2"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise DomainError(f"{name} must be positive and finite, got {value}")
        if not (self.rho3 >= 0 and math.isfinite(self.rho3)):
            raise DomainError(f"rho3 must be non-negative and finite, got {self.rho3}")

    def total(self) -> float:
        return self.rho1 + self.rho2 + self.rho3


@dataclass(frozen=True)
class LambdaPosterior:
    """Normal(mean, variance) truncated to ``[lo, hi]``: the lambda sampling density."""

    mean: float
    variance: float
    lo: float = 0.0
    hi: float = 1.0

    @property
    def sd(self) -> float:
        return math.sqrt(self.variance)


def gaussian_mechanism(value: float, sensitivity: float, rho: float, rng: RandomSource) -> float:
    """``value + Normal(0, sensitivity**2 / (2 rho))``, which is rho-zCDP."""
    rho = _check_rho(rho)
    if not sensitivity >= 0:
        raise DomainError(f"sensitivity must be non-negative, got {sensitivity}")
    z = float(rng.normal())
    if sensitivity == 0:
        return float(value)
    return float(value) + z * sensitivity / math.sqrt(2.0 * rho)


def _require_informative(bounds: Bounds, pop_size: float, n: int) -> None:
    if not bounds.u_w > pop_size / n:
        raise DomainError("the lambda mechanism needs u_w > N/n (loss sensitivity is zero otherwise)")
    if bounds.span_y == 0:
        raise DomainError("the lambda mechanism needs a non-degenerate response range")


def lambda_posterior_params(
    summary: SampleSummary, bounds: Bounds, pop_size: float, n: int, rho1: float, rho2: float
) -> LambdaPosterior:
    """Location and scale of the truncated normal that the lambda mechanism samples.

    The loss is a quadratic ``a * (lam - lam_c)**2 + const`` with
    ``a = (u_y * (u_w - N/n) / N)**2 / (2 rho2) + awd**2``, so the density
    ``exp(-sqrt(2 rho1) / (2 Delta(loss)) * loss)`` is Gaussian with variance ``Delta(loss) / (sqrt(2 rho1) * a)``.
    """
    rho1 = _check_rho(rho1, "rho1")
    rho2 = _check_rho(rho2, "rho2")
    _require_informative(bounds, pop_size, n)
    gap = bounds.u_w - pop_size / n
    slope_sq = (bounds.span_y * gap / pop_size) ** 2
    a = slope_sq / (2.0 * rho2) + summary.awd**2
    variance = sensitivity_loss(bounds, pop_size, n) / (math.sqrt(2.0 * rho1) * a)
    mean = lambda_critical(summary.awd, bounds, pop_size, n, rho2)
    return LambdaPosterior(mean, variance)


def sup_sigma2(bounds: Bounds, pop_size: float, n: int, rho1: float, rho2: float) -> float:
    """Data-independent upper bound on the lambda density variance (``awd = 0``)."""
    rho1 = _check_rho(rho1, "rho1")
    rho2 = _check_rho(rho2, "rho2")
    _require_informative(bounds, pop_size, n)
    # Delta(loss) / (sqrt(2 rho1) * slope_sq / (2 rho2)) with Delta(loss) == slope_sq
    return 2.0 * rho2 / math.sqrt(2.0 * rho1)


def _truncnorm_standard(a, b, u):
    """Inverse-CDF draw of a standard normal truncated to ``[a, b]`` from uniforms ``u``.

    Works in log space and reflects intervals that lie to the right so the
    lower tail is always the one being inverted; stays exact when the
    interval sits hundreds of standard deviations from the mode.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    flip = (a + b) > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    log_lo = log_ndtr(lo)
    log_hi = log_ndtr(hi)
    with np.errstate(divide="ignore"):
        # CDF value (1 - u) * Phi(lo) + u * Phi(hi), in log space
        log_p = np.logaddexp(np.log1p(-u) + log_lo, np.log(u) + log_hi)
    x = ndtri_exp(np.minimum(log_p, 0.0))
    x = np.clip(x, lo, hi)
    return np.where(flip, -x, x)


def sample_truncated_normal(mean: float, sd: float, lo: float, hi: float, rng: RandomSource, size=None):
    """Exact draw(s) from ``Normal(mean, sd**2)`` conditioned on ``[lo, hi]``.

    One uniform is consumed per draw, so a stream yields the same draws for
    different parameters (common random numbers across configurations).
    """
    if not sd > 0:
        raise DomainError(f"sd must be positive, got {sd}")
    if not lo < hi:
        raise DomainError(f"need lo < hi, got [{lo}, {hi}]")
    u = rng.uniform(size)
    x = _truncnorm_standard((lo - mean) / sd, (hi - mean) / sd, u)
    out = np.clip(mean + sd * x, lo, hi)
    if size is None:
        return float(out)
    return out


def exp_mech_lambda(
    summary: SampleSummary,
    bounds: Bounds,
    pop_size: float,
    n: int,
    rho1: float,
    rho2: float,
    rng: RandomSource,
    size=None,
):
    """rho1-zCDP draw of the regularization parameter.

    Samples ``lam in [0, 1]`` with density proportional to
    ``exp(-sqrt(2 rho1) / (2 Delta(loss)) * loss(lam))``, where the loss is
    :func:`~dpsurvey.core.dp_mse_loss` evaluated at ``rho2``.
    """
    post = lambda_posterior_params(summary, bounds, pop_size, n, rho1, rho2)
    return sample_truncated_normal(post.mean, post.sd, post.lo, post.hi, rng, size=size)
