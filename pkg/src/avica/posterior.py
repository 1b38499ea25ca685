"""Closed-form posterior of the shared sources given all views."""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .model import LOG_2PI, PRIOR_VARIANCES, ModelParams, MultiViewDataset, unmix, weighted_mean_sources


class PosteriorComponents(NamedTuple):
    """One entry per prior component along the leading axis."""

    log_theta: np.ndarray
    theta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    alpha: tuple = PRIOR_VARIANCES


@dataclass
class PosteriorMoments:
    mean: np.ndarray
    second_moment: np.ndarray
    s_tilde: np.ndarray
    within_variance: np.ndarray

    @property
    def variance(self) -> np.ndarray:
        """Exact posterior variance of each source."""
        return self.second_moment - self.mean**2


def posterior_components(s_tilde, sigma, m: int) -> PosteriorComponents:
    """Mixture weights, means and variances of ``p(s_j | x)``.

    Each component ``alpha`` has weight ``N(s_tilde; 0, alpha + sigma^2/m)``,
    mean ``m alpha s_tilde / (m alpha + sigma^2)`` and variance
    ``sigma^2 alpha / (m alpha + sigma^2)``.
    """
    s_tilde = np.asarray(s_tilde, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    s_tilde, sigma = np.broadcast_arrays(s_tilde, sigma)
    sig2 = sigma**2
    alpha = np.array(PRIOR_VARIANCES).reshape((-1,) + (1,) * s_tilde.ndim)
    v = alpha + sig2 / m
    log_theta = -0.5 * (LOG_2PI + np.log(v)) - s_tilde**2 / (2 * v)
    mean = m * alpha * s_tilde / (m * alpha + sig2)
    var = sig2 * alpha / (m * alpha + sig2) * np.ones_like(s_tilde)
    return PosteriorComponents(log_theta, np.exp(log_theta), mean, var)


def moments_from_weighted_mean(s_tilde, sigma, m: int) -> PosteriorMoments:
    """Posterior moments given the weighted unmixed average ``s_tilde``.

    ``sigma`` broadcasts against ``s_tilde`` (pass ``sigma[:, None]`` for a
    ``(k, n)`` average).
    """
    comp = posterior_components(s_tilde, sigma, m)
    # responsibilities with a max shift so large |s_tilde| cannot underflow
    w = np.exp(comp.log_theta - comp.log_theta.max(axis=0))
    w /= w.sum(axis=0)
    mean = (w * comp.mean).sum(axis=0)
    second = (w * (comp.var + comp.mean**2)).sum(axis=0)
    within = (w * comp.var).sum(axis=0)
    return PosteriorMoments(mean, second, np.asarray(s_tilde, dtype=float), within)


def mmse_sources(params: ModelParams, data: MultiViewDataset) -> PosteriorMoments:
    """Posterior mean (the MMSE source estimate) and second moments."""
    Y = unmix(params, data)
    s_tilde = weighted_mean_sources(Y, params.lambda_sq)
    return moments_from_weighted_mean(s_tilde, params.sigma[:, None], params.m)
