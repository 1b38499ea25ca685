"""Alternating quasi-Newton maximum-likelihood optimizer.

One sweep updates every unmixing matrix (views in order), then for each
source the precision column (a Riemannian Newton step on a sphere) and the
global noise level. Every update is a backtracking line search that only
accepts strict decreases of the loss.
"""

import enum
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple, Optional

import numpy as np

from .model import (
    SINGULAR_LOGDET,
    ModelParams,
    MultiViewDataset,
    SingularMatrixError,
    _logabsdet,
    default_params,
    noise_precision_gradient,
    precision_gradient,
    retract,
    shared_unmixing_gradient,
    sigma_gradient,
    source_losses,
    sphere_radius,
    tangent_basis,
    unmix,
    unmixing_gradient,
)
from .posterior import mmse_sources

logger = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    tol: float = 1e-3
    mu_sq: float = 1e-3
    max_sweeps: int = 1000
    ls_max_halvings: int = 20
    hess_floor: float = 1e-2
    seed: int = 0
    # joint row/precision rescaling search after each source's block steps
    rescale_steps: bool = True
    max_log_scale: float = 5.0
    # joint Newton step on (sigma_j, lambda_sq_j) in per-view log precisions
    joint_noise_steps: bool = True
    # one step applying the same relative update to every view's unmixing
    shared_unmixing_steps: bool = True

    def check(self, m: int) -> None:
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not 0.0 <= self.mu_sq * m < 1.0:
            raise ValueError(f"need 0 <= m * mu_sq < 1, got {self.mu_sq * m}")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be at least 1")


class Termination(str, enum.Enum):
    CONVERGED = "converged"
    MAX_SWEEPS = "max_sweeps"


@dataclass
class ConvergenceTrace:
    """Per-sweep record of gradient sup-norms, loss and elapsed time.

    Gradient norms are measured before each block update, as in the sweep
    tolerance; ``nll`` is the loss after the sweep. ``step_nll`` holds the
    loss after every accepted block update.
    """

    grad_unmixing: list = field(default_factory=list)
    grad_precision: list = field(default_factory=list)
    grad_sigma: list = field(default_factory=list)
    nll: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    initial_nll: float = np.nan
    step_nll: list = field(default_factory=list)

    def append(self, gw, ge, gs, nll, seconds):
        self.grad_unmixing.append(float(gw))
        self.grad_precision.append(float(ge))
        self.grad_sigma.append(float(gs))
        self.nll.append(float(nll))
        self.seconds.append(float(seconds))

    def tolerance(self, sweep: int = -1) -> float:
        return max(self.grad_unmixing[sweep], self.grad_precision[sweep], self.grad_sigma[sweep])

    def __len__(self):
        return len(self.nll)


@dataclass
class FitResult:
    params: ModelParams
    sources: np.ndarray
    trace: ConvergenceTrace
    terminated: Termination

    @property
    def converged(self) -> bool:
        return self.terminated == Termination.CONVERGED


class LineSearchResult(NamedTuple):
    accepted: bool
    step: float
    loss: float
    candidate: Any


def line_search(
    loss_at: Callable[[Any], float],
    apply_direction: Callable[[float], Any],
    initial_loss: float,
    ls_max_halvings: int = 20,
) -> LineSearchResult:
    """Backtracking search over steps 1, 1/2, 1/4, ...

    Returns the first (largest) step whose candidate strictly decreases the
    loss. Candidates that cannot be built or evaluated, or give a non-finite
    loss, count as failures.
    """
    if not np.isfinite(initial_loss):
        raise ValueError("initial loss must be finite")
    step = 1.0
    for _ in range(ls_max_halvings + 1):
        try:
            # non-finite trial losses are rejected below, so silence their warnings
            with np.errstate(all="ignore"):
                candidate = apply_direction(step)
                loss = loss_at(candidate)
        except (ValueError, np.linalg.LinAlgError, FloatingPointError):
            loss = np.inf
        if np.isfinite(loss) and loss < initial_loss:
            return LineSearchResult(True, step, float(loss), candidate)
        step *= 0.5
    return LineSearchResult(False, 0.0, float(initial_loss), None)


def regularized_block_solve(G, D, floor):
    """Solve the 2x2 block-diagonal system defined by the curvatures ``D``.

    Off-diagonal pairs form ``[[D_ab, 1], [1, D_ba]]``; diagonal entries are
    scalars. Eigenvalues below ``floor`` are lifted to ``floor``.
    """
    D = D.copy()
    diag = np.diag(D).copy()
    discr = np.sqrt((D - D.T) ** 2 + 4.0)
    low = 0.5 * (D + D.T - discr)
    bad = low < floor
    np.fill_diagonal(bad, False)
    D[bad] += floor - low[bad]
    denom = D * D.T - 1.0
    np.fill_diagonal(denom, 1.0)
    out = (G * D.T - G.T) / denom
    np.fill_diagonal(out, np.diag(G) / np.maximum(diag, floor))
    return out


def rescale_search(Yj, lambda_sq_j, sigma_j, i, mu_sq, base_loss, max_log_scale=5.0, ls_max_halvings=20):
    """Line search along a joint rescaling of one view and one precision.

    Row ``j`` of ``W^i`` is multiplied by ``exp(v)`` while ``eta_ij`` is
    multiplied by ``exp(-v)`` and the column is retracted to its sphere.
    The log-determinant shifts by exactly ``v``. This direction is the one
    along which small precisions and large unmixing rows trade off; block
    updates only move along it in tiny zigzag steps.

    Parameters
    ----------
    Yj : ndarray, shape (m, n)
        Unmixed data of source ``j``.
    base_loss : float
        Current value of the source loss of ``j``.

    Returns
    -------
    (accepted, v, lambda_sq_j, source_loss)
    """
    m = Yj.shape[0]
    r = sphere_radius(m, mu_sq)
    eta = np.sqrt(np.maximum(lambda_sq_j - mu_sq, 0.0))
    if eta[i] == 0.0 or eta[i] == np.linalg.norm(eta):
        return False, 0.0, lambda_sq_j, base_loss

    def candidate(v):
        e = eta.copy()
        e[i] *= np.exp(-v)
        return retract(e, r) ** 2 + mu_sq

    def objective(v):
        Y = Yj.copy()
        Y[i] *= np.exp(v)
        return -v + source_losses(Y, candidate(v), sigma_j)

    # Newton step in v from central differences, then backtracking
    h = 1e-4
    f_plus, f_minus = objective(h), objective(-h)
    slope = (f_plus - f_minus) / (2 * h)
    curv = (f_plus - 2 * base_loss + f_minus) / h**2
    # only take model steps where the path is locally convex; a flat or
    # concave path leads towards the boundary and is left to block updates
    if not (np.isfinite(slope) and np.isfinite(curv) and curv > 0):
        return False, 0.0, lambda_sq_j, base_loss
    v = -slope / curv
    v = float(np.clip(v, -max_log_scale, max_log_scale))
    value = np.inf
    for _ in range(ls_max_halvings + 1):
        value = objective(v)
        if np.isfinite(value) and value < base_loss:
            break
        v *= 0.5
    else:
        return False, 0.0, lambda_sq_j, base_loss
    return True, v, candidate(v), value + v


class _Fit:
    """Mutable optimizer state with cached unmixed data and per-source losses."""

    def __init__(self, params: ModelParams, data: MultiViewDataset, config: OptimizerConfig):
        self.params = params.copy()
        self.params.mu_sq = config.mu_sq
        self.config = config
        self.X = data.views
        self.Y = unmix(self.params, data)
        self.logdets = np.array([_logabsdet(W) for W in self.params.unmixing])
        self.src = source_losses(self.Y, self.params.lambda_sq, self.params.sigma)

    @property
    def loss(self) -> float:
        return float(-self.logdets.sum() + self.src.sum())

    def step_unmixing(self, i: int) -> float:
        p, cfg = self.params, self.config
        G, D = unmixing_gradient(self.Y, i, p.lambda_sq, p.sigma)
        norm = float(np.abs(G).max())
        if norm == 0.0:
            return norm
        k = p.k
        other = self.logdets.sum() - self.logdets[i]
        f0 = self.loss

        def loss_at(cand):
            M, Yi = cand
            sign, ld = np.linalg.slogdet(M)
            logdet = self.logdets[i] + ld
            if sign == 0 or logdet < SINGULAR_LOGDET:
                raise SingularMatrixError("candidate unmixing matrix is singular")
            Y = self.Y.copy()
            Y[i] = Yi
            return -(other + logdet) + source_losses(Y, p.lambda_sq, p.sigma).sum()

        def try_direction(direction):
            def apply(rho):
                M = np.eye(k) + rho * direction
                return M, M @ self.Y[i]

            return line_search(loss_at, apply, f0, cfg.ls_max_halvings)

        res = try_direction(-regularized_block_solve(G, D, cfg.hess_floor))
        if not res.accepted:
            res = try_direction(-G)
        if res.accepted:
            M, Yi = res.candidate
            p.unmixing[i] = M @ p.unmixing[i]
            self.logdets[i] += np.linalg.slogdet(M)[1]
            self.Y[i] = Yi
            self.src = source_losses(self.Y, p.lambda_sq, p.sigma)
        return norm

    def step_shared_unmixing(self) -> bool:
        """Quasi-Newton step on ``W^i <- (I + E) W^i`` for all views at once.

        Per-view steps cannot move one view far without breaking its
        agreement with the others, which at small noise levels costs
        ``m / sigma^2``; a shared step keeps that agreement.
        """
        p, cfg = self.params, self.config
        m, k = p.m, p.k
        G, D = shared_unmixing_gradient(self.Y, p.lambda_sq, p.sigma)
        if not np.any(G):
            return False
        f0 = self.loss

        def loss_at(cand):
            M, Y = cand
            sign, ld = np.linalg.slogdet(M)
            logdets = self.logdets + ld
            if sign == 0 or np.any(logdets < SINGULAR_LOGDET):
                raise SingularMatrixError("candidate unmixing matrix is singular")
            return -logdets.sum() + source_losses(Y, p.lambda_sq, p.sigma).sum()

        def try_direction(direction):
            def apply(rho):
                M = np.eye(k) + rho * direction
                return M, np.matmul(M, self.Y)

            return line_search(loss_at, apply, f0, cfg.ls_max_halvings)

        # dividing by m restores the unit coupling the block solver expects
        res = try_direction(-regularized_block_solve(G / m, D / m, cfg.hess_floor))
        if not res.accepted:
            res = try_direction(-G / m)
        if res.accepted:
            M, Y = res.candidate
            p.unmixing = np.matmul(M, p.unmixing)
            self.logdets += np.linalg.slogdet(M)[1]
            self.Y = Y
            self.src = source_losses(Y, p.lambda_sq, p.sigma)
        return res.accepted

    def step_precision(self, j: int) -> float:
        p, cfg = self.params, self.config
        m = p.m
        if m == 1:
            return 0.0
        Yj, l, s = self.Y[:, j, :], p.lambda_sq[:, j], p.sigma[j]
        G, _, H_tan = precision_gradient(Yj, l, s, p.mu_sq)
        norm = float(np.abs(G).max())
        if norm == 0.0:
            return norm
        r = sphere_radius(m, p.mu_sq)
        eta = np.sqrt(np.maximum(l - p.mu_sq, 0.0))
        Q = tangent_basis(eta)
        w, V = np.linalg.eigh(Q.T @ H_tan @ Q)
        B = Q @ V
        newton = -B @ ((B.T @ G) / np.maximum(w, cfg.hess_floor))

        def loss_at(lam):
            return source_losses(Yj, lam, s)

        def try_direction(direction):
            def apply(rho):
                return retract(eta + rho * direction, r) ** 2 + p.mu_sq

            return line_search(loss_at, apply, self.src[j], cfg.ls_max_halvings)

        res = try_direction(newton)
        if not res.accepted:
            res = try_direction(-G)
        if res.accepted:
            p.lambda_sq[:, j] = res.candidate
            self.src[j] = res.loss
        return norm

    def step_rescale(self, i: int, j: int) -> bool:
        p = self.params
        ok, v, lam, src = rescale_search(
            self.Y[:, j, :], p.lambda_sq[:, j], p.sigma[j], i, p.mu_sq, self.src[j],
            self.config.max_log_scale, self.config.ls_max_halvings,
        )
        if ok:
            scale = np.exp(v)
            p.unmixing[i, j] *= scale
            self.Y[i, j] *= scale
            self.logdets[i] += v
            p.lambda_sq[:, j] = lam
            self.src[j] = src
        return ok

    def step_noise(self, j: int) -> bool:
        """Joint update of ``sigma_j`` and ``lambda_sq[:, j]``.

        Works in ``q_i = log(m lambda_sq_ij / sigma_j^2)``, the log inverse
        per-view noise variances, where the two blocks decouple.
        """
        p, cfg = self.params, self.config
        m = p.m
        Yj = self.Y[:, j, :]
        with np.errstate(divide="ignore"):
            q = np.log(m * p.lambda_sq[:, j] / p.sigma[j] ** 2)
        if not np.all(np.isfinite(q)):
            return False
        G, H = noise_precision_gradient(Yj, q)
        if not np.any(G):
            return False
        w, V = np.linalg.eigh(H)
        newton = -V @ ((V.T @ G) / np.maximum(w, cfg.hess_floor))

        def loss_at(cand):
            return source_losses(Yj, cand[1], cand[0])

        def try_direction(direction):
            def apply(rho):
                z = q + rho * direction
                # shifting by the max keeps exp in range; lambda_sq is scale free
                prec = np.exp(z - z.max())
                lam = prec / prec.sum()
                if np.any(lam <= 0) or np.any(lam < p.mu_sq):
                    raise ValueError("precision below the floor")
                total = np.exp(z.max()) * prec.sum()
                if not np.isfinite(total) or total <= 0:
                    raise ValueError("precision out of range")
                return np.sqrt(m / total), lam

            return line_search(loss_at, apply, self.src[j], cfg.ls_max_halvings)

        res = try_direction(newton)
        if not res.accepted:
            res = try_direction(-G)
        if res.accepted:
            p.sigma[j], p.lambda_sq[:, j] = res.candidate
            self.src[j] = res.loss
        return res.accepted

    def step_sigma(self, j: int) -> float:
        p, cfg = self.params, self.config
        Yj, l, s = self.Y[:, j, :], p.lambda_sq[:, j], p.sigma[j]
        G, H = sigma_gradient(Yj, l, s)
        norm = abs(G)
        if norm == 0.0:
            return norm
        if H <= 0:
            H = abs(H) + cfg.hess_floor

        def loss_at(cand):
            return source_losses(Yj, l, cand)

        def try_direction(direction):
            def apply(rho):
                cand = s + rho * direction
                if cand <= 0:
                    raise ValueError("non-positive sigma")
                return cand

            return line_search(loss_at, apply, self.src[j], cfg.ls_max_halvings)

        res = try_direction(-G / H)
        if not res.accepted:
            res = try_direction(-G)
        if res.accepted:
            p.sigma[j] = res.candidate
            self.src[j] = res.loss
        return norm


def _single_step(params, data, config, which, index):
    config = config or OptimizerConfig(mu_sq=params.mu_sq)
    state = _Fit(params, data, config)
    norm = getattr(state, which)(index)
    return state.params, norm


def step_unmixing(params: ModelParams, data: MultiViewDataset, i: int, config: Optional[OptimizerConfig] = None):
    """One line-searched quasi-Newton update of ``W^i``.

    Returns the updated parameters (a copy) and the pre-step gradient
    sup-norm.
    """
    return _single_step(params, data, config, "step_unmixing", i)


def step_precision(params: ModelParams, data: MultiViewDataset, j: int, config: Optional[OptimizerConfig] = None):
    """One Riemannian Newton update of the precisions of source ``j``."""
    return _single_step(params, data, config, "step_precision", j)


def step_sigma(params: ModelParams, data: MultiViewDataset, j: int, config: Optional[OptimizerConfig] = None):
    """One Newton update of the noise level of source ``j``."""
    return _single_step(params, data, config, "step_sigma", j)


def fit_mle(
    data: MultiViewDataset,
    config: Optional[OptimizerConfig] = None,
    init: Optional[ModelParams] = None,
    fixed_noise: bool = False,
) -> FitResult:
    """Fit the model by alternating quasi-Newton steps.

    Parameters
    ----------
    data : MultiViewDataset
    config : OptimizerConfig, optional
    init : ModelParams, optional
        Starting point; identity unmixing, uniform precisions and unit noise
        levels when omitted. ``init.mu_sq`` is replaced by ``config.mu_sq``.
    fixed_noise : bool
        Only update the unmixing matrices (precisions and noise levels keep
        their initial values).

    Returns
    -------
    FitResult
        Fitted parameters, posterior-mean sources, per-sweep trace and the
        termination reason.
    """
    config = config or OptimizerConfig()
    config.check(data.m)
    if init is None:
        init = default_params(data.m, data.k, config.mu_sq)
    init = init.copy()
    init.mu_sq = config.mu_sq
    init.validate()

    state = _Fit(init, data, config)
    trace = ConvergenceTrace(initial_nll=state.loss)
    start = time.perf_counter()
    terminated = Termination.MAX_SWEEPS
    for sweep in range(config.max_sweeps):
        gw = ge = gs = 0.0
        for i in range(data.m):
            gw = max(gw, state.step_unmixing(i))
            trace.step_nll.append(state.loss)
        if config.shared_unmixing_steps and data.m > 1 and state.step_shared_unmixing():
            trace.step_nll.append(state.loss)
        if not fixed_noise:
            for j in range(data.k):
                ge = max(ge, state.step_precision(j))
                trace.step_nll.append(state.loss)
                gs = max(gs, state.step_sigma(j))
                trace.step_nll.append(state.loss)
                if config.joint_noise_steps and state.step_noise(j):
                    trace.step_nll.append(state.loss)
                if config.rescale_steps and data.m > 1:
                    for i in range(data.m):
                        if state.step_rescale(i, j):
                            trace.step_nll.append(state.loss)
        trace.append(gw, ge, gs, state.loss, time.perf_counter() - start)
        logger.debug("sweep %d: tol=%.3e nll=%.10f", sweep, trace.tolerance(), state.loss)
        if max(gw, ge, gs) <= config.tol:
            terminated = Termination.CONVERGED
            break

    params = state.params
    sources = mmse_sources(params, data).mean
    return FitResult(params, sources, trace, terminated)
