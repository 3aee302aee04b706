"""Expected back-propagation threshold of the zeroth-order estimator.

A neuron takes part in the backward pass when its gap to threshold is at
most ``delta * max_k |z_k|``.  The expectation of that band half-width,
``delta * E[max(|z_1|, ..., |z_m|)]``, is the threshold a gated baseline
must use to be compared fairly.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from . import distributions as dists
from .errors import ConfigurationError, DomainError, ThresholdDivergenceWarning

__all__ = [
    "ThresholdQuery",
    "expected_threshold",
    "expected_threshold_tabulated",
    "empirical_threshold",
    "standard_thresholds",
]


@dataclass(frozen=True)
class ThresholdQuery:
    dist: dists.Distribution
    m: int = 1
    delta: float = 1.0

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ConfigurationError(f"m must be a positive integer, got {self.m!r}")
        if not (np.isfinite(self.delta) and self.delta > 0):
            raise ConfigurationError(f"delta must be > 0, got {self.delta!r}")


def _max_abs_mean_quad(dist, m):
    """E[max of m |z|] for an analytic family by adaptive quadrature."""
    upper = dist.abs_upper(1e-12)

    def integrand(t):
        return t * m * float(dist.abs_cdf(t)) ** (m - 1) * 2.0 * float(dist.pdf(t))

    val, _ = integrate.quad(integrand, 0.0, upper, epsabs=1e-12, epsrel=1e-12, limit=400)
    return val


def _max_abs_mean_grid(t, half_density, m):
    """Same expectation from a density sampled on ``t >= 0``.

    ``half_density`` is the density of z on the grid; it is doubled for |z|
    and renormalized over the grid, and the |z| CDF is a running trapezoid sum.
    """
    lam = 2.0 * half_density
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (lam[1:] + lam[:-1]) * np.diff(t))])
    mass = cum[-1]
    lam, F = lam / mass, cum / mass
    return float(np.trapezoid(t * m * F ** (m - 1) * lam, t))


def expected_threshold(dist, m=1, delta=1.0):
    """``delta * E[max_k |z_k|]`` for ``m`` independent draws from ``dist``.

    Uniform(-b, b) uses the closed form ``delta * b * m / (m + 1)``; other
    analytic families use quadrature truncated where the |z| CDF exceeds
    ``1 - 1e-12``; tabulated ones integrate their stored grid.
    """
    q = ThresholdQuery(dist, m, delta)
    if not dist.even:
        raise DomainError(f"{dist!r} is not even about 0")
    if isinstance(dist, dists.Uniform):
        e = dist.b * q.m / (q.m + 1.0)
    elif isinstance(dist, dists.Tabulated):
        keep = dist.x >= 0
        e = _max_abs_mean_grid(dist.x[keep], dist.density[keep], q.m)
    else:
        e = _max_abs_mean_quad(dist, q.m)
    return q.delta * e


def _tabulated_value(lam, hi, m, n_points):
    t = np.linspace(0.0, hi, n_points)
    return _max_abs_mean_grid(t, np.asarray(lam(t), dtype=float), m)


def expected_threshold_tabulated(lam, support, m=1, delta=None, n_points=1_000_001, check_doubling=True):
    """Expected threshold for a derived density restricted to ``support``.

    The density is renormalized over the support, matching the tabulated
    sampler that draws from it.  If doubling the support moves the value by
    more than 1%, a :class:`ThresholdDivergenceWarning` is emitted and the
    finite-support value is still returned.
    """
    if delta is None:
        delta = lam.delta
    if int(m) != m or m < 1 or not delta > 0:
        raise ConfigurationError(f"invalid m={m!r} or delta={delta!r}")
    lo, hi = float(support[0]), float(support[1])
    if not math.isclose(lo, -hi):
        raise DomainError("support must be symmetric about 0")
    e = _tabulated_value(lam, hi, m, n_points)
    if check_doubling:
        e2 = _tabulated_value(lam, 2.0 * hi, m, 2 * n_points - 1)
        if abs(e2 - e) > 0.01 * abs(e):
            warnings.warn(
                f"expected threshold changes from {delta * e:.6g} to {delta * e2:.6g} when the support "
                f"is doubled to [{-2 * hi:g}, {2 * hi:g}]; the unbounded value may not exist",
                ThresholdDivergenceWarning,
                stacklevel=2,
            )
    return delta * e


def empirical_threshold(dist, m, delta, trials, rng, chunk=1_000_000, return_se=False):
    """Monte-Carlo mean of ``delta * max(|z_1|, ..., |z_m|)``."""
    if trials < 1:
        raise ConfigurationError("trials must be >= 1")
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        t = delta * np.max(np.abs(dist.sample(rng, n * m).reshape(n, m)), axis=1)
        total += float(t.sum())
        total_sq += float(np.dot(t, t))
        done += n
    mean = total / trials
    if not return_se:
        return mean
    var = max(total_sq / trials - mean * mean, 0.0)
    return mean, math.sqrt(var / trials)


def standard_thresholds(ms=(1, 5), delta=1.0):
    """Expected thresholds for the three unit-variance families.

    Returns ``{(name, m): value}``.
    """
    return {
        (name, m): expected_threshold(dists.by_name(name), m, delta)
        for name in ("normal", "uniform", "laplace")
        for m in ms
    }
