"""Pure-numpy count-likelihood kernels (fallback backend).

All functions take 2D float64 arrays of matching shape (cells x genes),
with the inverse dispersion ``theta`` given per gene. Means and inverse
dispersions are floored at ``PARAM_FLOOR`` before evaluation; a floored
mean gets zero gradient. ``*_grad`` variants return per-entry gradients;
the per-gene theta gradient is returned entrywise so the caller can
reduce over cells.
"""

from __future__ import annotations

import numpy as np
from scipy.special import digamma, gammaln

PARAM_FLOOR = 1e-8


def _softplus(t):
    return np.log1p(np.exp(-np.abs(t))) + np.maximum(t, 0.0)


def poisson_logpmf(x, rate):
    rate = np.maximum(rate, PARAM_FLOOR)
    return x * np.log(rate) - rate - gammaln(x + 1.0)


def poisson_logpmf_grad(x, rate):
    floored = rate < PARAM_FLOOR
    rate = np.maximum(rate, PARAM_FLOOR)
    ll = x * np.log(rate) - rate - gammaln(x + 1.0)
    drate = np.where(floored, 0.0, x / rate - 1.0)
    return ll, drate


def _nb_terms(x, mean, theta):
    mean_floored = mean < PARAM_FLOOR
    mu = np.maximum(mean, PARAM_FLOOR)
    th = np.maximum(theta, PARAM_FLOOR)[None, :]
    denom = th + mu
    log_ratio = np.log(th) - np.log(denom)
    ll = (
        gammaln(x + th)
        - gammaln(th)
        - gammaln(x + 1.0)
        + th * log_ratio
        + x * (np.log(mu) - np.log(denom))
    )
    return mean_floored, mu, th, denom, log_ratio, ll


def nb_logpmf(x, mean, theta):
    return _nb_terms(x, mean, theta)[-1]


def nb_logpmf_grad(x, mean, theta):
    mean_floored, mu, th, denom, log_ratio, ll = _nb_terms(x, mean, theta)
    dmean = np.where(mean_floored, 0.0, x / mu - (x + th) / denom)
    dtheta = digamma(x + th) - digamma(th) + log_ratio + (mu - x) / denom
    return ll, dmean, dtheta


def zinb_logpmf(x, mean, theta, logit):
    _, _, _, _, _, nb_ll = _nb_terms(x, mean, theta)
    log_pi = -_softplus(-logit)
    log_1mpi = -_softplus(logit)
    zero_ll = np.logaddexp(log_pi, log_1mpi + nb_ll)
    return np.where(x == 0, zero_ll, log_1mpi + nb_ll)


def zinb_logpmf_grad(x, mean, theta, logit):
    mean_floored, mu, th, denom, log_ratio, nb_ll = _nb_terms(x, mean, theta)
    nb_dmean = np.where(mean_floored, 0.0, x / mu - (x + th) / denom)
    nb_dtheta = digamma(x + th) - digamma(th) + log_ratio + (mu - x) / denom

    pi = 1.0 / (1.0 + np.exp(-logit))
    log_pi = -_softplus(-logit)
    log_1mpi = -_softplus(logit)

    zero = x == 0
    ll_zero = np.logaddexp(log_pi, log_1mpi + nb_ll)
    # posterior weight of the NB branch at x = 0
    w = np.exp(log_1mpi + nb_ll - ll_zero)

    ll = np.where(zero, ll_zero, log_1mpi + nb_ll)
    dmean = np.where(zero, w * nb_dmean, nb_dmean)
    dtheta = np.where(zero, w * nb_dtheta, nb_dtheta)
    dlogit = np.where(zero, (1.0 - pi) * np.exp(log_pi - ll_zero) - pi * w, -pi)
    return ll, dmean, dtheta, dlogit
