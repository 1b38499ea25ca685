"""Generative model, smoothed source density and closed-form likelihood.

Array conventions used throughout the package:

* observations and unmixed data are stacked as ``(m, k, n)`` arrays
  (views, components, samples);
* ``lambda_sq`` is an ``(m, k)`` table whose columns sum to one;
* ``sigma`` is a length-``k`` vector of global noise levels.

The loss is the negative log-likelihood averaged over samples, with the
additive constants dropped.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import null_space

# Variances of the two Gaussian components of the source prior.
PRIOR_VARIANCES = (0.5, 1.5)
SINGULAR_LOGDET = np.log(1e-300)
LOG_2PI = np.log(2.0 * np.pi)


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when an unmixing matrix has a vanishing determinant."""


class MultiViewDataset:
    """``m`` views of ``k`` components observed at ``n`` common samples."""

    def __init__(self, views):
        arr = np.array(views, dtype=float)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ValueError(
                f"views must stack to a (m, k, n) array, got shape {arr.shape}"
            )
        if arr.shape[0] < 1:
            raise ValueError("at least one view is required")
        if not np.all(np.isfinite(arr)):
            raise ValueError("views contain non-finite entries")
        self.views = arr

    @property
    def m(self) -> int:
        return self.views.shape[0]

    @property
    def k(self) -> int:
        return self.views.shape[1]

    @property
    def n(self) -> int:
        return self.views.shape[2]

    def __len__(self):
        return self.m

    def __getitem__(self, i):
        return self.views[i]

    def __repr__(self):
        return f"MultiViewDataset(m={self.m}, k={self.k}, n={self.n})"


@dataclass
class ModelParams:
    """Parameters of the model.

    Attributes
    ----------
    unmixing : ndarray, shape (m, k, k)
        Unmixing matrices ``W^i``.
    lambda_sq : ndarray, shape (m, k)
        Relative noise precisions; every column sums to one.
    sigma : ndarray, shape (k,)
        Global noise levels.
    mu_sq : float
        Lower bound on every relative precision.
    """

    unmixing: np.ndarray
    lambda_sq: np.ndarray
    sigma: np.ndarray
    mu_sq: float = 0.0

    def __post_init__(self):
        self.unmixing = np.array(self.unmixing, dtype=float)
        self.lambda_sq = np.array(self.lambda_sq, dtype=float)
        self.sigma = np.array(self.sigma, dtype=float)
        self.mu_sq = float(self.mu_sq)

    @property
    def m(self) -> int:
        return self.unmixing.shape[0]

    @property
    def k(self) -> int:
        return self.unmixing.shape[1]

    @property
    def mixing(self) -> np.ndarray:
        return np.linalg.inv(self.unmixing)

    @property
    def eta(self) -> np.ndarray:
        """Sphere coordinates, ``eta**2 + mu_sq == lambda_sq``, nonnegative."""
        return np.sqrt(np.maximum(self.lambda_sq - self.mu_sq, 0.0))

    @property
    def noise_variances(self) -> np.ndarray:
        """Per-view source-space noise variances ``sigma_j**2 / (m lambda_sq)``."""
        return self.sigma**2 / (self.m * self.lambda_sq)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.unmixing.copy(), self.lambda_sq.copy(), self.sigma.copy(), self.mu_sq
        )

    def validate(self, atol: float = 1e-12) -> None:
        """Raise ``ValueError`` if any parameter invariant is violated."""
        m, k = self.m, self.k
        if self.unmixing.shape != (m, k, k):
            raise ValueError(f"unmixing must have shape (m, k, k), got {self.unmixing.shape}")
        if self.lambda_sq.shape != (m, k):
            raise ValueError(f"lambda_sq must have shape ({m}, {k}), got {self.lambda_sq.shape}")
        if self.sigma.shape != (k,):
            raise ValueError(f"sigma must have shape ({k},), got {self.sigma.shape}")
        if not 0.0 <= m * self.mu_sq < 1.0:
            raise ValueError(f"need 0 <= m * mu_sq < 1, got {m * self.mu_sq}")
        if np.any(self.sigma <= 0) or not np.all(np.isfinite(self.sigma)):
            raise ValueError("sigma must be finite and positive")
        col = self.lambda_sq.sum(axis=0)
        if np.any(np.abs(col - 1.0) > atol):
            raise ValueError(f"lambda_sq columns must sum to 1, got {col}")
        if np.any(self.lambda_sq < self.mu_sq - atol) or np.any(self.lambda_sq < 0):
            raise ValueError("lambda_sq below the floor mu_sq")
        for W in self.unmixing:
            _logabsdet(W)


@dataclass
class GradientBundle:
    """Gradients and Hessian information of the loss for every block.

    ``hess_unmixing[i][a, b]`` is the curvature of the loss along the
    relative perturbation ``W^i <- (I + t E_ab) W^i``; together with the
    unit coupling between ``(a, b)`` and ``(b, a)`` it defines the 2x2
    block-diagonal Hessian approximation. ``grad_precision`` and
    ``hess_precision`` are taken with respect to a perturbation ``eps`` of
    ``eta_j`` followed by the sphere retraction.
    """

    grad_unmixing: np.ndarray  # (m, k, k)
    hess_unmixing: np.ndarray  # (m, k, k)
    grad_precision: np.ndarray  # (k, m)
    hess_precision: np.ndarray  # (k, m, m)
    grad_sigma: np.ndarray  # (k,)
    hess_sigma: np.ndarray  # (k,)


class SmoothedDensity(NamedTuple):
    phi: np.ndarray
    d_s: np.ndarray
    d2_s: np.ndarray
    d_sigma: np.ndarray
    d2_sigma: np.ndarray


def _mixture_derivatives(log_terms, d1, d2):
    """First and second derivatives of ``-log(sum exp(log_terms))``.

    ``d1`` and ``d2`` are the derivatives of each log-term along the
    leading axis.
    """
    shift = log_terms.max(axis=0)
    r = np.exp(log_terms - shift)
    total = r.sum(axis=0)
    r = r / total
    mean_d1 = (r * d1).sum(axis=0)
    first = -mean_d1
    second = -(r * (d2 + d1**2)).sum(axis=0) + mean_d1**2
    return -(shift + np.log(total)), first, second


def smoothed_density(s, sigma, m: int) -> SmoothedDensity:
    """Smoothed source density ``phi`` and its partial derivatives.

    ``phi(s, sigma) = -log(N(s; 0, 1/2 + sigma^2/m) + N(s; 0, 3/2 + sigma^2/m))``.
    Inputs broadcast against each other.
    """
    s = np.asarray(s, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    if m < 1:
        raise ValueError("m must be at least 1")
    s, sigma = np.broadcast_arrays(s, sigma)
    v = np.stack([a + sigma**2 / m for a in PRIOR_VARIANCES])
    s2 = s**2
    log_terms = -0.5 * (LOG_2PI + np.log(v)) - s2 / (2 * v)

    phi, d_s, d2_s = _mixture_derivatives(log_terms, -s / v, -1.0 / v)

    # chain rule through v(sigma) = alpha + sigma^2 / m
    dv, d2v = 2 * sigma / m, 2.0 / m
    dl_dv = s2 / (2 * v**2) - 1 / (2 * v)
    d2l_dv2 = -s2 / v**3 + 1 / (2 * v**2)
    _, d_sigma, d2_sigma = _mixture_derivatives(
        log_terms, dl_dv * dv, d2l_dv2 * dv**2 + dl_dv * d2v
    )
    return SmoothedDensity(phi, d_s, d2_s, d_sigma, d2_sigma)


def smoothed_phi(s, sigma, m: int) -> np.ndarray:
    """Value of ``phi`` alone; cheaper than :func:`smoothed_density`."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    s2 = np.asarray(s, dtype=float) ** 2
    extra = sigma**2 / m
    v1, v2 = PRIOR_VARIANCES[0] + extra, PRIOR_VARIANCES[1] + extra
    l1 = -0.5 * (LOG_2PI + np.log(v1)) - s2 / (2 * v1)
    l2 = -0.5 * (LOG_2PI + np.log(v2)) - s2 / (2 * v2)
    return -np.logaddexp(l1, l2)


def _check_shapes(params: ModelParams, data: MultiViewDataset):
    if params.unmixing.shape[0] != data.m or params.unmixing.shape[1:] != (data.k, data.k):
        raise ValueError(
            f"unmixing of shape {params.unmixing.shape} incompatible with {data!r}"
        )


def _logabsdet(W) -> float:
    sign, logdet = np.linalg.slogdet(W)
    if sign == 0 or logdet < SINGULAR_LOGDET:
        raise SingularMatrixError("unmixing matrix is singular")
    return logdet


def unmix(params: ModelParams, data: MultiViewDataset) -> np.ndarray:
    """Unmixed data ``y^i = W^i x^i`` stacked as ``(m, k, n)``."""
    _check_shapes(params, data)
    return np.matmul(params.unmixing, data.views)


def weighted_mean_sources(unmixed, lambda_sq) -> np.ndarray:
    """Precision-weighted average of the unmixed views, shape ``(k, n)``."""
    unmixed = np.asarray(unmixed, dtype=float)
    lambda_sq = np.asarray(lambda_sq, dtype=float)
    if unmixed.shape[:2] != lambda_sq.shape:
        raise ValueError("unmixed data and lambda_sq disagree on (m, k)")
    return np.einsum("ij,ijt->jt", lambda_sq, unmixed)


def source_losses(Y, lambda_sq, sigma) -> np.ndarray:
    """Per-source part of the loss (everything except the log-determinants).

    ``Y`` may hold all sources ``(m, k, n)`` or a single one ``(m, n)`` with
    matching ``lambda_sq`` of shape ``(m,)`` and scalar ``sigma``.
    """
    Y = np.asarray(Y, dtype=float)
    single = Y.ndim == 2
    if single:
        Y, lambda_sq = Y[:, None, :], np.asarray(lambda_sq, dtype=float)[:, None]
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    m = Y.shape[0]
    s_tilde = np.einsum("ij,ijt->jt", lambda_sq, Y)
    quad = np.einsum("ij,ijt->jt", lambda_sq, (Y - s_tilde) ** 2)
    per_sample = (m / (2 * sigma**2))[:, None] * quad + smoothed_phi(s_tilde, sigma[:, None], m)
    out = (
        per_sample.mean(axis=1)
        - 0.5 * np.log(lambda_sq).sum(axis=0)
        + 0.5 * (1 - m) * np.log(m / sigma**2)
    )
    return out[0] if single else out


def loss_from_unmixed(Y, logdets, lambda_sq, sigma) -> float:
    return float(-np.sum(logdets) + source_losses(Y, lambda_sq, sigma).sum())


def neg_log_likelihood(params: ModelParams, data: MultiViewDataset) -> float:
    """Negative log-likelihood averaged over samples, up to a constant."""
    logdets = [_logabsdet(W) for W in params.unmixing]
    Y = unmix(params, data)
    return loss_from_unmixed(Y, logdets, params.lambda_sq, params.sigma)


# Block gradients. ``Y`` is always the current unmixed data.


def unmixing_gradient(Y, i, lambda_sq, sigma):
    """Relative gradient of the loss w.r.t. ``W^i`` and the diagonal curvature.

    Returns ``(G, D)`` with ``G[a, b] = E[psi_a y_b] - delta_ab`` and
    ``D[a, b] = E[h_a y_b^2] + delta_ab``.
    """
    m, k, n = Y.shape
    s_tilde = weighted_mean_sources(Y, lambda_sq)
    dens = smoothed_density(s_tilde, sigma[:, None], m)
    l = lambda_sq[i][:, None]
    prec = (m / sigma**2)[:, None]
    y = Y[i]
    psi = l * (prec * (y - s_tilde) + dens.d_s)
    h = l**2 * dens.d2_s + prec * (1 - l) * l
    eye = np.eye(k)
    G = psi @ y.T / n - eye
    D = h @ (y**2).T / n + eye
    return G, D


def shared_unmixing_gradient(Y, lambda_sq, sigma):
    """Gradient and diagonal curvature for one update ``W^i <- (I + E) W^i`` of every view.

    The gradient is the sum of the per-view relative gradients. Along a
    shared update the views keep their agreement, so the noise term only
    sees how far view ``b`` spreads around its source-``a``-weighted mean.
    The log-determinants couple ``E_ab`` and ``E_ba`` with weight ``m``.
    """
    m, k, n = Y.shape
    s_tilde = weighted_mean_sources(Y, lambda_sq)
    dens = smoothed_density(s_tilde, sigma[:, None], m)
    prec = (m / sigma**2)[:, None]
    psi = lambda_sq[:, :, None] * (prec * (Y - s_tilde) + dens.d_s)
    G = np.einsum("iat,ibt->ab", psi, Y) / n - m * np.eye(k)
    # moving s_tilde_a along view b uses the weights of source a
    U = np.einsum("ia,ibt->abt", lambda_sq, Y)
    spread = np.einsum("ia,ibt->ab", lambda_sq, Y**2) / n - (U**2).mean(axis=2)
    D = prec * spread + np.einsum("at,abt->ab", dens.d2_s, U**2) / n + m * np.eye(k)
    return G, D


def sphere_radius(m: int, mu_sq: float) -> float:
    return float(np.sqrt(1.0 - m * mu_sq))


def precision_gradient(Yj, lambda_sq_j, sigma_j, mu_sq):
    """Riemannian gradient and Hessian for the sphere coordinates of source j.

    ``Yj`` has shape ``(m, n)``. Returns ``(G, H, H_tan)`` where ``H`` is the
    second-order term of ``eps -> loss(R(eta + eps))`` and ``H_tan`` is the
    symmetric tangent-space Hessian used for Newton steps.
    """
    m, n = Yj.shape
    l = np.asarray(lambda_sq_j, dtype=float)
    eta = np.sqrt(np.maximum(l - mu_sq, 0.0))
    s_tilde = l @ Yj
    dens = smoothed_density(s_tilde, sigma_j, m)
    c = m / (2 * sigma_j**2)
    resid = Yj - s_tilde

    # derivatives in lambda_sq, on the constraint set
    dl = -0.5 / l + c * (resid**2).mean(axis=1) + (Yj * dens.d_s).mean(axis=1)
    cross = (
        2 * c * (-(Yj @ Yj.T) + np.outer(Yj @ s_tilde, np.ones(m)) + np.outer(np.ones(m), Yj @ s_tilde))
        + (Yj * dens.d2_s) @ Yj.T
    ) / n
    d2l = np.diag(0.5 / l**2) + cross

    g = 2 * eta * dl
    hess_euc = 4 * np.outer(eta, eta) * d2l + np.diag(2 * dl)

    r = sphere_radius(m, mu_sq)
    norm = np.linalg.norm(eta)
    u = eta / norm if norm > 0 else np.full(m, 1 / np.sqrt(m))
    P = np.eye(m) - np.outer(u, u)
    G = P @ g
    gu = g @ u
    H_tan = P @ (hess_euc - gu / r * np.eye(m)) @ P
    H_tan = 0.5 * (H_tan + H_tan.T)
    H = H_tan - (np.outer(G, u) + np.outer(u, G)) / r
    return G, H, H_tan


def sigma_gradient(Yj, lambda_sq_j, sigma_j):
    """Gradient and second derivative of the loss w.r.t. ``sigma_j``."""
    m = Yj.shape[0]
    l = np.asarray(lambda_sq_j, dtype=float)
    s_tilde = l @ Yj
    spread = (l @ (Yj - s_tilde) ** 2).mean()
    dens = smoothed_density(s_tilde, sigma_j, m)
    G = (m - 1) / sigma_j - m * spread / sigma_j**3 + dens.d_sigma.mean()
    H = -(m - 1) / sigma_j**2 + 3 * m * spread / sigma_j**4 + dens.d2_sigma.mean()
    return float(G), float(H)


def _density_in_variance(u, v):
    """``-log(N(u; 0, 1/2 + v) + N(u; 0, 3/2 + v))`` with all derivatives
    up to second order in ``(u, v)``.

    Returns ``(F, F_u, F_v, F_uu, F_uv, F_vv)``.
    """
    u, v = np.broadcast_arrays(np.asarray(u, dtype=float), np.asarray(v, dtype=float))
    w = np.stack([a + v for a in PRIOR_VARIANCES])
    log_terms = -0.5 * (LOG_2PI + np.log(w)) - u**2 / (2 * w)
    lu, lv = -u / w, -1 / (2 * w) + u**2 / (2 * w**2)
    luu, luv, lvv = -1 / w, u / w**2, 1 / (2 * w**2) - u**2 / w**3
    shift = log_terms.max(axis=0)
    r = np.exp(log_terms - shift)
    total = r.sum(axis=0)
    r = r / total
    mu, mv = (r * lu).sum(axis=0), (r * lv).sum(axis=0)
    return (
        -(shift + np.log(total)),
        -mu,
        -mv,
        -(r * (luu + lu * lu)).sum(axis=0) + mu * mu,
        -(r * (luv + lu * lv)).sum(axis=0) + mu * mv,
        -(r * (lvv + lv * lv)).sum(axis=0) + mv * mv,
    )


def noise_precision_gradient(Yj, log_precision):
    """Gradient and Hessian of a source loss in per-view log precisions.

    With ``p_i = exp(q_i) = 1 / Sigma^i_j`` the pair ``(sigma_j, lambda_sq_j)``
    is ``sigma_j^2 = m / sum(p)`` and ``lambda_sq_j = p / sum(p)``, and the
    source loss becomes an unconstrained function of ``q``. Returns
    ``(G, H)`` with respect to ``q``.
    """
    m, n = Yj.shape
    p = np.exp(np.asarray(log_precision, dtype=float))
    P = p.sum()
    u = p @ Yj / P
    d = Yj - u
    _, Fu, Fv, Fuu, Fuv, Fvv = _density_in_variance(u, 1.0 / P)

    Edd = d @ d.T / n
    a = (d * Fu).mean(axis=1)  # E[F_u d_i]
    mFv = Fv.mean()
    g = -0.5 / p + 0.5 / P + 0.5 * np.diag(Edd) + a / P - mFv / P**2

    b = (d * Fuv).mean(axis=1)  # E[F_uv d_i]
    Hp = (
        np.diag(0.5 / p**2)
        - 0.5 / P**2
        - Edd / P
        + ((d * Fuu) @ d.T / n) / P**2
        - np.add.outer(b, b) / P**3
        - (np.outer(a, np.ones(m)) + np.outer(np.ones(m), a)) / P**2
        + Fvv.mean() / P**4
        + 2 * mFv / P**3
    )
    G = p * g
    H = np.outer(p, p) * Hp + np.diag(G)
    return G, 0.5 * (H + H.T)


def loss_gradients(params: ModelParams, data: MultiViewDataset) -> GradientBundle:
    """Analytic gradients and Hessian information for every parameter block."""
    Y = unmix(params, data)
    for W in params.unmixing:
        _logabsdet(W)
    m, k = params.m, params.k
    gW = np.empty((m, k, k))
    hW = np.empty((m, k, k))
    for i in range(m):
        gW[i], hW[i] = unmixing_gradient(Y, i, params.lambda_sq, params.sigma)
    g_eta = np.empty((k, m))
    h_eta = np.empty((k, m, m))
    g_sig = np.empty(k)
    h_sig = np.empty(k)
    for j in range(k):
        Yj, lj, sj = Y[:, j, :], params.lambda_sq[:, j], params.sigma[j]
        g_eta[j], h_eta[j], _ = precision_gradient(Yj, lj, sj, params.mu_sq)
        g_sig[j], h_sig[j] = sigma_gradient(Yj, lj, sj)
    return GradientBundle(gW, hW, g_eta, h_eta, g_sig, h_sig)


def retract(x, radius: float) -> np.ndarray:
    """Project a nonzero vector onto the sphere of the given radius."""
    return np.asarray(x, dtype=float) * (radius / np.linalg.norm(x))


def tangent_basis(u) -> np.ndarray:
    """Orthonormal basis (as columns) of the complement of ``u``."""
    return null_space(np.atleast_2d(u))


def default_params(m: int, k: int, mu_sq: float = 0.0) -> ModelParams:
    """Identity unmixing, uniform precisions and unit noise levels."""
    return ModelParams(
        np.tile(np.eye(k), (m, 1, 1)), np.full((m, k), 1.0 / m), np.ones(k), mu_sq
    )


