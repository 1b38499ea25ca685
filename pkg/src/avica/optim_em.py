"""Generalized EM for the same likelihood.

E-step: closed-form posterior moments. M-step: closed-form per-view noise
variances, then one line-searched quasi-Newton step per unmixing matrix on
the expected complete-data objective.
"""

import logging
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp, softmax

from .model import (
    SINGULAR_LOGDET,
    ModelParams,
    MultiViewDataset,
    SingularMatrixError,
    default_params,
    loss_gradients,
    neg_log_likelihood,
    source_losses,
    unmix,
    weighted_mean_sources,
)
from .optim_mle import (
    ConvergenceTrace,
    FitResult,
    Termination,
    line_search,
    regularized_block_solve,
    rescale_search,
)
from .posterior import PosteriorMoments, mmse_sources, moments_from_weighted_mean

logger = logging.getLogger(__name__)


@dataclass
class EmConfig:
    tol: float = 1e-3
    mu_sq: float = 0.0
    max_sweeps: int = 1000
    ls_max_halvings: int = 20
    hess_floor: float = 1e-2
    seed: int = 0
    rescale_steps: bool = True
    max_log_scale: float = 5.0

    def check(self, m: int) -> None:
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not 0.0 <= self.mu_sq * m < 1.0:
            raise ValueError(f"need 0 <= m * mu_sq < 1, got {self.mu_sq * m}")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be at least 1")


def m_step_noise(moments: PosteriorMoments, unmixed) -> np.ndarray:
    """Closed-form per-view noise variances, shape ``(m, k)``.

    ``Sigma^i_j = mean_t (y^i_j - E[s_j|x])^2 + Var[s_j|x]``.
    """
    Y = np.asarray(unmixed, dtype=float)
    resid = Y - moments.mean[None]
    return (resid**2).mean(axis=2) + moments.variance.mean(axis=1)[None]


def noise_reparam(Sigma):
    """Map per-view noise variances to ``(sigma, lambda_sq)``.

    ``sigma_j = (mean_i 1 / Sigma^i_j)^(-1/2)`` and
    ``lambda_sq[i, j] = sigma_j^2 / (m Sigma^i_j)``.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    if np.any(Sigma <= 0):
        raise ValueError("noise variances must be positive")
    m = Sigma.shape[0]
    prec = 1.0 / Sigma
    total = prec.sum(axis=0)
    sigma = np.sqrt(m / total)
    # normalized precisions so columns sum to one by construction
    lambda_sq = prec / total
    return sigma, lambda_sq


def noise_reparam_inverse(sigma, lambda_sq) -> np.ndarray:
    lambda_sq = np.asarray(lambda_sq, dtype=float)
    return np.asarray(sigma, dtype=float) ** 2 / (lambda_sq.shape[0] * lambda_sq)


def complete_objective(W, x, mean, Sigma_i) -> float:
    """Expected complete-data objective of one view, up to W-independent terms."""
    _, logdet = np.linalg.slogdet(W)
    y = W @ x
    return float(-logdet + (((y - mean) ** 2) / (2 * Sigma_i[:, None])).mean(axis=1).sum())


def complete_gradient(y, mean, Sigma_i):
    """Relative gradient and diagonal curvature of the complete objective."""
    k, n = y.shape
    eye = np.eye(k)
    G = ((y - mean) / Sigma_i[:, None]) @ y.T / n - eye
    D = np.outer(1.0 / Sigma_i, (y**2).mean(axis=1)) + eye
    return G, D


def m_step_unmixing(params: ModelParams, data: MultiViewDataset, moments: PosteriorMoments, i: int, Sigma=None, config: Optional[EmConfig] = None):
    """One quasi-Newton step on ``W^i`` for the expected complete objective.

    ``Sigma`` defaults to the noise variances implied by ``params``.
    Returns the updated copy of ``params``.
    """
    config = config or EmConfig()
    params = params.copy()
    if Sigma is None:
        Sigma = params.noise_variances
    W, x = params.unmixing[i], data.views[i]
    params.unmixing[i] = _unmixing_update(W, x, W @ x, moments.mean, Sigma[i], config)[0]
    return params


def _unmixing_update(W, x, y, mean, Sigma_i, config):
    k = W.shape[0]
    G, D = complete_gradient(y, mean, Sigma_i)
    _, base_logdet = np.linalg.slogdet(W)
    f0 = -base_logdet + (((y - mean) ** 2) / (2 * Sigma_i[:, None])).mean(axis=1).sum()

    def loss_at(cand):
        M, yc = cand
        sign, ld = np.linalg.slogdet(M)
        if sign == 0 or base_logdet + ld < SINGULAR_LOGDET:
            raise SingularMatrixError("candidate unmixing matrix is singular")
        return -(base_logdet + ld) + (((yc - mean) ** 2) / (2 * Sigma_i[:, None])).mean(axis=1).sum()

    def try_direction(direction):
        def apply(rho):
            M = np.eye(k) + rho * direction
            return M, M @ y

        return line_search(loss_at, apply, f0, config.ls_max_halvings)

    if not np.any(G):
        return W, y
    res = try_direction(-regularized_block_solve(G, D, config.hess_floor))
    if not res.accepted:
        res = try_direction(-G)
    if not res.accepted:
        return W, y
    M, yc = res.candidate
    return M @ W, yc


def _clamp_precisions(lambda_sq, mu_sq):
    m = lambda_sq.shape[0]
    out = np.clip(lambda_sq, mu_sq, 1.0 - (m - 1) * mu_sq)
    out = out / out.sum(axis=0)
    # renormalizing can push entries back under the floor; lift them and
    # take the excess from the others proportionally
    low = out < mu_sq
    if np.any(low):
        excess = np.where(low, 0.0, out - mu_sq)
        deficit = np.where(low, mu_sq - out, 0.0).sum(axis=0)
        out = np.where(low, mu_sq, out - excess * deficit / excess.sum(axis=0))
    return out


def constrained_noise_step(spread, current, mu_sq):
    """Noise M-step under the floor ``lambda_sq >= mu_sq``.

    Minimizes ``sum_i 0.5 log Sigma_i + spread_i / (2 Sigma_i)`` per source.
    Columns whose closed-form solution already respects the floor keep it;
    the others are solved numerically in log precisions, starting from the
    feasible ``current`` variances, and never end above their start value.

    Parameters
    ----------
    spread : ndarray, shape (m, k)
        ``mean_t E[(y - s)^2 | x]`` per view and source.
    current : ndarray, shape (m, k)
        Feasible noise variances of the current parameters.
    """
    Sigma = np.array(spread, dtype=float)
    if mu_sq <= 0:
        return Sigma
    log_floor = np.log(mu_sq)

    def objective(q, S):
        return float((-0.5 * q + 0.5 * S * np.exp(q)).sum())

    for j in range(Sigma.shape[1]):
        S = spread[:, j]
        lam = (1 / S) / (1 / S).sum()
        if np.all(lam >= mu_sq):
            continue
        q0 = -np.log(current[:, j])
        res = minimize(
            objective,
            q0,
            args=(S,),
            jac=lambda q, S: -0.5 + 0.5 * S * np.exp(q),
            method="SLSQP",
            constraints=[{
                "type": "ineq",
                "fun": lambda q: q - logsumexp(q) - log_floor,
                "jac": lambda q: np.eye(len(q)) - softmax(q)[None, :],
            }],
            options={"ftol": 1e-14, "maxiter": 200},
        )
        # make the solution exactly feasible before comparing
        total = np.exp(logsumexp(res.x))
        lam = _clamp_precisions(softmax(res.x)[:, None], mu_sq)[:, 0]
        q = np.log(lam * total)
        Sigma[:, j] = np.exp(-q) if objective(q, S) <= objective(q0, S) else current[:, j]
    return Sigma


def _rescale_sweep(params, Y, config):
    """Joint row/precision rescaling searches on the true loss, in place."""
    src = source_losses(Y, params.lambda_sq, params.sigma)
    for j in range(params.k):
        for i in range(params.m):
            ok, v, lam, loss_j = rescale_search(
                Y[:, j, :], params.lambda_sq[:, j], params.sigma[j], i, params.mu_sq, src[j], config.max_log_scale,
                config.ls_max_halvings,
            )
            if ok:
                params.unmixing[i, j] *= np.exp(v)
                Y[i, j] *= np.exp(v)
                params.lambda_sq[:, j] = lam
                src[j] = loss_j


def fit_em(
    data: MultiViewDataset,
    config: Optional[EmConfig] = None,
    init: Optional[ModelParams] = None,
) -> FitResult:
    """Fit the model with generalized EM.

    Each sweep records the gradient sup-norms of the true loss at the
    current parameters, then runs one E-step, the noise M-step and one
    unmixing step per view. Stops once the recorded norms fall below
    ``config.tol``. With ``config.rescale_steps`` each sweep ends with
    joint rescaling searches of unmixing rows and precisions, which only
    ever lower the loss.
    """
    config = config or EmConfig()
    config.check(data.m)
    if init is None:
        init = default_params(data.m, data.k, config.mu_sq)
    params = init.copy()
    params.mu_sq = config.mu_sq
    params.validate()

    m, k = data.m, data.k
    trace = ConvergenceTrace(initial_nll=neg_log_likelihood(params, data))
    start = time.perf_counter()
    terminated = Termination.MAX_SWEEPS
    Y = unmix(params, data)
    nll = trace.initial_nll
    for sweep in range(config.max_sweeps):
        grads = loss_gradients(params, data)
        gw = float(np.abs(grads.grad_unmixing).max())
        ge = float(np.abs(grads.grad_precision).max()) if m > 1 else 0.0
        gs = float(np.abs(grads.grad_sigma).max())
        if max(gw, ge, gs) <= config.tol:
            trace.append(gw, ge, gs, nll, time.perf_counter() - start)
            terminated = Termination.CONVERGED
            break

        s_tilde = weighted_mean_sources(Y, params.lambda_sq)
        moments = moments_from_weighted_mean(s_tilde, params.sigma[:, None], m)
        Sigma = constrained_noise_step(m_step_noise(moments, Y), params.noise_variances, config.mu_sq)
        for i in range(m):
            params.unmixing[i], Y[i] = _unmixing_update(
                params.unmixing[i], data.views[i], Y[i], moments.mean, Sigma[i], config
            )
        sigma, lambda_sq = noise_reparam(Sigma)
        if config.mu_sq > 0:
            # only rounding can take the floor away here
            lambda_sq = np.maximum(lambda_sq, config.mu_sq)
            lambda_sq /= lambda_sq.sum(axis=0)
        params.sigma, params.lambda_sq = sigma, lambda_sq
        if config.rescale_steps and m > 1:
            _rescale_sweep(params, Y, config)

        nll = neg_log_likelihood(params, data)
        trace.step_nll.append(nll)
        trace.append(gw, ge, gs, nll, time.perf_counter() - start)
        logger.debug("sweep %d: tol=%.3e nll=%.10f", sweep, max(gw, ge, gs), nll)

    sources = mmse_sources(params, data).mean
    return FitResult(params, sources, trace, terminated)


__all__ = [
    "EmConfig",
    "complete_gradient",
    "complete_objective",
    "constrained_noise_step",
    "fit_em",
    "m_step_noise",
    "m_step_unmixing",
    "noise_reparam",
    "noise_reparam_inverse",
]
