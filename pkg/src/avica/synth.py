"""Seeded synthetic multiview data.

Draws come from one counter-based Philox stream in a fixed order:

1. sources ``(k, n)`` (inverse-CDF Laplace),
2. mixing matrices ``(m, k, k)`` (Box-Muller normals),
3. relative precisions, one Dirichlet column per source,
4. log noise levels ``(k,)`` (Box-Muller normals),
5. source-space noise ``(m, k, n)`` (Box-Muller normals).

Steps 3 and 4 are skipped when the noise variances are given explicitly.
"""

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .model import MultiViewDataset


@dataclass
class SynthConfig:
    m: int = 10
    k: int = 5
    n: int = 1000
    mean_log_sigma: float = 0.0
    std_log_sigma: float = float(np.sqrt(0.5))
    dirichlet_alpha: float = 1.0
    seed: int = 0
    sigma_override: Optional[float] = None
    # (m, k) table of per-view noise variances; replaces the random draws
    noise_variances: Optional[list] = None

    def check(self):
        if min(self.m, self.k, self.n) < 1:
            raise ValueError("m, k and n must be at least 1")
        if self.std_log_sigma < 0:
            raise ValueError("std_log_sigma must be nonnegative")
        if self.dirichlet_alpha <= 0:
            raise ValueError("dirichlet_alpha must be positive")
        if self.sigma_override is not None and self.sigma_override <= 0:
            raise ValueError("sigma_override must be positive")
        if self.noise_variances is not None:
            nv = np.asarray(self.noise_variances, dtype=float)
            if nv.shape != (self.m, self.k) or np.any(nv <= 0):
                raise ValueError("noise_variances must be a positive (m, k) table")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroundTruth:
    sources: np.ndarray
    mixing: np.ndarray
    lambda_sq: np.ndarray
    sigma: np.ndarray
    noise: np.ndarray

    @property
    def unmixing(self) -> np.ndarray:
        return np.linalg.inv(self.mixing)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _uniform_open(rng, size):
    """Uniform draws on the open interval (0, 1)."""
    u = rng.random(size)
    return np.where(u == 0.0, np.nextafter(0.0, 1.0), u)


def box_muller(rng, size) -> np.ndarray:
    count = int(np.prod(size))
    pairs = (count + 1) // 2
    u1 = _uniform_open(rng, pairs)
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([radius * np.cos(2 * np.pi * u2), radius * np.sin(2 * np.pi * u2)])
    return z[:count].reshape(size)


def laplace(rng, size) -> np.ndarray:
    """Unit-variance Laplace draws by inverting the CDF."""
    u = _uniform_open(rng, size) - 0.5
    scale = 1.0 / np.sqrt(2.0)
    return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def dirichlet_columns(rng, m: int, k: int, alpha: float = 1.0) -> np.ndarray:
    """``(m, k)`` table whose columns are Dirichlet(alpha, ..., alpha) draws."""
    if alpha == 1.0:
        g = -np.log(_uniform_open(rng, (k, m)))
    else:
        g = rng.standard_gamma(alpha, size=(k, m))
    return (g / g.sum(axis=1, keepdims=True)).T


def generate_dataset(config: SynthConfig):
    """Sample ``x^i = A^i (s + n^i)`` for every view.

    Returns
    -------
    (MultiViewDataset, GroundTruth)
    """
    from .optim_em import noise_reparam

    config.check()
    m, k, n = config.m, config.k, config.n
    rng = make_rng(config.seed)
    sources = laplace(rng, (k, n))
    mixing = box_muller(rng, (m, k, k))
    if config.noise_variances is not None:
        sigma, lambda_sq = noise_reparam(np.asarray(config.noise_variances, dtype=float))
    else:
        lambda_sq = dirichlet_columns(rng, m, k, config.dirichlet_alpha)
        log_sigma = config.mean_log_sigma + config.std_log_sigma * box_muller(rng, (k,))
        sigma = np.exp(log_sigma)
        if config.sigma_override is not None:
            sigma = np.full(k, float(config.sigma_override))
    std = sigma / np.sqrt(m * lambda_sq)
    noise = std[:, :, None] * box_muller(rng, (m, k, n))
    views = np.matmul(mixing, sources[None] + noise)
    truth = GroundTruth(sources, mixing, lambda_sq, sigma, noise)
    return MultiViewDataset(views), truth


def adaptive_scaling_config(view2_variance: float, seed: int = 0, n: int = 1000, view1_variance: float = 100.0) -> SynthConfig:
    """One source seen by two views with fixed noise variances."""
    return SynthConfig(
        m=2, k=1, n=n, seed=seed, noise_variances=[[view1_variance], [view2_variance]]
    )
