"""Count distributions used by the generative model.

Scalar log-probability functions with full argument validation, matching
samplers, and the closed-form KL divergences the training objective
needs. The vectorized training path lives in :mod:`crossvi.kernels`;
these scalar forms are the readable reference the kernels are tested
against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError

COUNT_TOL = 1e-6


def _check_count(x) -> float:
    x = float(x)
    if not math.isfinite(x) or x < -COUNT_TOL:
        raise DomainError(f"count must be a finite non-negative number, got {x}")
    rounded = round(x)
    if abs(x - rounded) > COUNT_TOL:
        raise DomainError(f"count must be integer-valued within {COUNT_TOL}, got {x}")
    return float(rounded)


def _check_positive(value, name) -> float:
    value = float(value)
    if not math.isfinite(value) or value <= 0.0:
        raise DomainError(f"{name} must be positive and finite, got {value}")
    return value


@dataclass(frozen=True)
class NBParams:
    """Negative binomial in (mean, inverse dispersion) form.

    Variance is mean + mean^2 / inv_dispersion, so large inv_dispersion
    approaches Poisson.
    """

    mean: float
    inv_dispersion: float

    def __post_init__(self):
        _check_positive(self.mean, "mean")
        _check_positive(self.inv_dispersion, "inv_dispersion")


@dataclass(frozen=True)
class ZINBParams:
    """NB mixed with a point mass at zero; dropout_logit is sigmoid-space."""

    nb: NBParams
    dropout_logit: float

    def __post_init__(self):
        if not math.isfinite(float(self.dropout_logit)):
            raise DomainError(f"dropout_logit must be finite, got {self.dropout_logit}")


@dataclass(frozen=True)
class LogNormalParams:
    """Parameters of the underlying normal (mean mu, std sigma)."""

    mu: float
    sigma: float

    def __post_init__(self):
        if not math.isfinite(float(self.mu)):
            raise DomainError(f"mu must be finite, got {self.mu}")
        _check_positive(self.sigma, "sigma")


def _softplus(t: float) -> float:
    return math.log1p(math.exp(-abs(t))) + max(t, 0.0)


def poisson_logpmf(x, rate) -> float:
    x = _check_count(x)
    rate = _check_positive(rate, "rate")
    return x * math.log(rate) - rate - math.lgamma(x + 1.0)


def nb_logpmf(x, p: NBParams) -> float:
    x = _check_count(x)
    mu, th = p.mean, p.inv_dispersion
    return (
        math.lgamma(x + th)
        - math.lgamma(th)
        - math.lgamma(x + 1.0)
        + th * math.log(th / (th + mu))
        + x * math.log(mu / (th + mu))
    )


def zinb_logpmf(x, p: ZINBParams) -> float:
    x = _check_count(x)
    log_pi = -_softplus(-p.dropout_logit)
    log_1mpi = -_softplus(p.dropout_logit)
    if x == 0:
        return float(np.logaddexp(log_pi, log_1mpi + nb_logpmf(0, p.nb)))
    return log_1mpi + nb_logpmf(x, p.nb)


def lognormal_logpdf(x, p: LogNormalParams) -> float:
    x = float(x)
    if not math.isfinite(x) or x <= 0.0:
        raise DomainError(f"log-normal support is x > 0, got {x}")
    z = (math.log(x) - p.mu) / p.sigma
    return -math.log(x) - math.log(p.sigma) - 0.5 * math.log(2.0 * math.pi) - 0.5 * z * z


def kl_diag_normal_std(mu, log_var) -> float:
    """KL(N(mu, diag exp(log_var)) || N(0, I))."""
    mu = np.asarray(mu, dtype=float)
    log_var = np.asarray(log_var, dtype=float)
    if mu.shape != log_var.shape:
        raise ContractError(f"shape mismatch: {mu.shape} vs {log_var.shape}")
    return float(0.5 * np.sum(np.exp(log_var) + mu**2 - 1.0 - log_var))


def kl_lognormal(q: LogNormalParams, p: LogNormalParams) -> float:
    """KL between log-normals = KL between the underlying normals."""
    return (
        math.log(p.sigma / q.sigma)
        + (q.sigma**2 + (q.mu - p.mu) ** 2) / (2.0 * p.sigma**2)
        - 0.5
    )


def sample_poisson(rate, rng: np.random.Generator, size=None):
    rate = _check_positive(rate, "rate")
    return rng.poisson(rate, size=size)


def sample_nb(p: NBParams, rng: np.random.Generator, size=None):
    # gamma-Poisson mixture: shape theta, scale mean/theta
    lam = rng.gamma(shape=p.inv_dispersion, scale=p.mean / p.inv_dispersion, size=size)
    return rng.poisson(lam)


def sample_zinb(p: ZINBParams, rng: np.random.Generator, size=None):
    counts = sample_nb(p.nb, rng, size=size)
    pi = 1.0 / (1.0 + math.exp(-p.dropout_logit))
    dropped = rng.random(size=np.shape(counts)) < pi
    return np.where(dropped, 0, counts)


def sample_lognormal(p: LogNormalParams, rng: np.random.Generator, size=None):
    return rng.lognormal(mean=p.mu, sigma=p.sigma, size=size)
