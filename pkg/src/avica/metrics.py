"""Evaluation metrics: assignment, source alignment and recovery scores."""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass
class Alignment:
    """Matching of estimated sources to true ones.

    ``permutation[j]`` is the row of the estimate matched to true source
    ``j``; ``signs[j]`` flips it so the correlation is positive.
    """

    permutation: np.ndarray
    signs: np.ndarray
    correlations: np.ndarray

    def apply(self, estimate) -> np.ndarray:
        estimate = np.asarray(estimate)
        return self.signs[:, None] * estimate[self.permutation]


def hungarian_assign(cost) -> np.ndarray:
    """Permutation ``p`` minimizing ``sum_j cost[j, p[j]]``."""
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost must be finite")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(rows), dtype=int)
    perm[rows] = cols
    return perm


def _standardize(x):
    x = np.asarray(x, dtype=float)
    x = x - x.mean(axis=-1, keepdims=True)
    std = x.std(axis=-1, keepdims=True)
    if np.any(std == 0):
        raise ValueError("rows with zero variance cannot be normalized")
    return x / std


def correlation_matrix(a, b) -> np.ndarray:
    """Sample correlations (1/n normalization) between rows of ``a`` and ``b``."""
    a, b = _standardize(a), _standardize(b)
    return a @ b.T / a.shape[-1]


def align_sources(truth, estimate) -> Alignment:
    corr = correlation_matrix(truth, estimate)
    perm = hungarian_assign(-np.abs(corr))
    matched = corr[np.arange(len(perm)), perm]
    signs = np.where(matched < 0, -1.0, 1.0)
    return Alignment(perm, signs, np.abs(matched))


def reconstruction_error(truth, estimate) -> float:
    """Mean over sources of ``1 - corr(s_j, s_hat_j)`` after alignment."""
    truth = np.atleast_2d(truth)
    estimate = np.atleast_2d(estimate)
    return float(np.mean(1.0 - align_sources(truth, estimate).correlations))


def precision_error(truth_lambda_sq, est_lambda_sq, alignment: Alignment) -> float:
    """Squared error between precision tables after matching sources."""
    truth_lambda_sq = np.asarray(truth_lambda_sq, dtype=float)
    est_lambda_sq = np.asarray(est_lambda_sq, dtype=float)
    if truth_lambda_sq.shape != est_lambda_sq.shape:
        raise ValueError("precision tables differ in shape")
    return float(((truth_lambda_sq - est_lambda_sq[:, alignment.permutation]) ** 2).sum())


def unmixing_recovery_score(unmixing, mixing_true) -> float:
    """Distance of every ``W^i A^i`` from a scaled permutation matrix.

    Rows are scaled to unit max-absolute entry; the score is the largest,
    over views, total absolute mass left outside the best assignment.
    """
    scores = []
    for W, A in zip(unmixing, mixing_true):
        C = np.abs(np.asarray(W) @ np.asarray(A))
        peak = C.max(axis=1, keepdims=True)
        if np.any(peak == 0):
            raise ValueError("W A has a zero row")
        C = C / peak
        perm = hungarian_assign(-C)
        scores.append(C.sum() - C[np.arange(len(perm)), perm].sum())
    return float(max(scores))


def r2_score(truth, prediction) -> float:
    truth = np.asarray(truth, dtype=float)
    prediction = np.asarray(prediction, dtype=float)
    if truth.size < 2:
        raise ValueError("need at least two samples")
    ss_tot = ((truth - truth.mean()) ** 2).sum()
    if ss_tot == 0:
        raise ValueError("truth is constant")
    return float(1.0 - ((truth - prediction) ** 2).sum() / ss_tot)
