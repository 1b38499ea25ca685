"""Group-ICA baselines and initializers: PCA, ConcatICA, PermICA, MVICA."""

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .metrics import correlation_matrix, hungarian_assign
from .model import ModelParams, MultiViewDataset, SingularMatrixError, weighted_mean_sources, unmix
from .optim_mle import FitResult, OptimizerConfig, fit_mle
from .synth import box_muller, make_rng


@dataclass
class ReductionOperator:
    projections: np.ndarray  # (m, k_out, k_in)
    means: np.ndarray  # (m, k_in)
    explained_variance_ratio: np.ndarray  # (m,)

    @property
    def back_projections(self) -> np.ndarray:
        return np.transpose(self.projections, (0, 2, 1))

    def reduce(self, views) -> np.ndarray:
        return np.matmul(self.projections, np.asarray(views) - self.means[:, :, None])

    def reconstruct(self, reduced) -> np.ndarray:
        return np.matmul(self.back_projections, reduced) + self.means[:, :, None]


@dataclass
class GroupICAResult:
    unmixing: np.ndarray  # (m, k, k)
    sources: np.ndarray  # (k, n)

    def as_init(self, mu_sq: float = 0.0) -> ModelParams:
        """Starting point for the likelihood optimizers."""
        m, k = self.unmixing.shape[:2]
        return ModelParams(self.unmixing.copy(), np.full((m, k), 1.0 / m), np.ones(k), mu_sq)


def _principal_axes(x):
    """Eigen-decomposition of the sample covariance, descending order.

    Eigenvector signs are fixed so that each largest-magnitude entry is
    positive.
    """
    cov = x @ x.T / x.shape[1]
    w, V = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    w, V = w[order], V[:, order]
    pivot = np.abs(V).argmax(axis=0)
    V = V * np.sign(V[pivot, np.arange(V.shape[1])])
    return np.maximum(w, 0.0), V


def pca_reduce_per_view(data: MultiViewDataset, k_out: int):
    """Center every view and keep its top ``k_out`` principal directions."""
    if k_out > data.k:
        raise ValueError(f"cannot keep {k_out} components out of {data.k}")
    means = data.views.mean(axis=2)
    projections, ratios = [], []
    for x, mu in zip(data.views, means):
        w, V = _principal_axes(x - mu[:, None])
        projections.append(V[:, :k_out].T)
        total = w.sum()
        ratios.append(w[:k_out].sum() / total if total > 0 else 1.0)
    op = ReductionOperator(np.array(projections), means, np.array(ratios))
    return MultiViewDataset(op.reduce(data.views)), op


def _random_rotation(k, seed):
    q, r = np.linalg.qr(box_muller(make_rng(seed), (k, k)))
    return q * np.sign(np.diag(r))


def single_view_ica(x, config: Optional[OptimizerConfig] = None):
    """ICA of one ``(k, n)`` matrix with the smoothed-density likelihood.

    Starts from PCA whitening followed by a seeded random rotation.

    Returns
    -------
    W : ndarray, shape (k, k)
    sources : ndarray, shape (k, n)
        ``W @ x``.
    """
    x = np.asarray(x, dtype=float)
    config = replace(config or OptimizerConfig(), mu_sq=0.0)
    k = x.shape[0]
    w, V = _principal_axes(x - x.mean(axis=1, keepdims=True))
    if w[-1] <= 1e-12 * max(w[0], 1e-300):
        raise SingularMatrixError("data matrix is rank deficient")
    whitening = V.T / np.sqrt(w)[:, None]
    W0 = _random_rotation(k, config.seed) @ whitening
    init = ModelParams(W0[None], np.ones((1, k)), np.ones(k), 0.0)
    fit = fit_mle(MultiViewDataset(x[None]), config, init)
    W = fit.params.unmixing[0]
    return W, W @ x


def _least_squares_unmixing(x, sources):
    gram = x @ x.T
    if np.linalg.cond(gram) > 1e12:
        raise SingularMatrixError("view covariance is singular")
    return np.linalg.solve(gram, x @ sources.T).T


def concat_ica(
    data: MultiViewDataset,
    k: Optional[int] = None,
    config: Optional[OptimizerConfig] = None,
    whiten_views: bool = True,
) -> GroupICAResult:
    """PCA on the stacked views followed by ICA.

    With ``whiten_views`` every view is whitened before stacking so that no
    single view dominates the group PCA. Per-view unmixing matrices are the
    least-squares maps from each view to the shared sources.
    """
    k = k or data.k
    centered = data.views - data.views.mean(axis=2, keepdims=True)
    if whiten_views:
        blocks = []
        for x in centered:
            w, V = _principal_axes(x)
            if w[-1] <= 0:
                raise SingularMatrixError("view covariance is singular")
            blocks.append(V.T @ x / np.sqrt(w)[:, None])
        centered = np.array(blocks)
    stacked = centered.reshape(-1, data.n)
    w, V = _principal_axes(stacked)
    reduced = V[:, :k].T @ stacked
    _, sources = single_view_ica(reduced, config)
    unmixing = np.array([_least_squares_unmixing(x, sources) for x in data.views])
    return GroupICAResult(unmixing, sources)


def perm_ica(data: MultiViewDataset, config: Optional[OptimizerConfig] = None) -> GroupICAResult:
    """Separate ICA per view, matched to view 1 and averaged."""
    config = config or OptimizerConfig()
    unmixing, estimates = [], []
    for i, x in enumerate(data.views):
        W, s = single_view_ica(x, replace(config, seed=config.seed + i))
        scale = s.std(axis=1)
        unmixing.append(W / scale[:, None])
        estimates.append(s / scale[:, None])
    reference = estimates[0]
    aligned_W, aligned_s = [], []
    for W, s in zip(unmixing, estimates):
        corr = correlation_matrix(reference, s)
        perm = hungarian_assign(-np.abs(corr))
        signs = np.sign(corr[np.arange(len(perm)), perm])
        signs[signs == 0] = 1.0
        aligned_W.append(signs[:, None] * W[perm])
        aligned_s.append(signs[:, None] * s[perm])
    return GroupICAResult(np.array(aligned_W), np.mean(aligned_s, axis=0))


def mvica_fit(data: MultiViewDataset, config: Optional[OptimizerConfig] = None, init: Optional[ModelParams] = None) -> FitResult:
    """Fixed-noise multiview ICA: precisions 1/m, unit noise levels.

    Only the unmixing matrices are optimized; the returned sources are the
    plain average of the unmixed views.
    """
    config = replace(config or OptimizerConfig(), mu_sq=0.0)
    m, k = data.m, data.k
    if init is None:
        init = concat_ica(data, config=config).as_init()
    init = ModelParams(init.unmixing, np.full((m, k), 1.0 / m), np.ones(k), 0.0)
    fit = fit_mle(data, config, init, fixed_noise=True)
    fit.sources = weighted_mean_sources(unmix(fit.params, data), fit.params.lambda_sq)
    return fit


__all__ = [
    "GroupICAResult",
    "ReductionOperator",
    "concat_ica",
    "mvica_fit",
    "pca_reduce_per_view",
    "perm_ica",
    "single_view_ica",
]
