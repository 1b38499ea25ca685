import numpy as np
import pytest
from scipy.optimize import brentq

from avica.model import ModelParams, MultiViewDataset, loss_gradients, neg_log_likelihood, smoothed_density, source_losses
from avica.optim_mle import (
    OptimizerConfig,
    _Fit,
    fit_mle,
    line_search,
    regularized_block_solve,
    rescale_search,
    step_precision,
    step_sigma,
    step_unmixing,
)
from avica.synth import adaptive_scaling_config, generate_dataset
from conftest import random_instance


def test_line_search_quadratic():
    f = lambda w: float(w @ w)
    w = np.array([3.0, -1.0])
    res = line_search(f, lambda rho: w - rho * w, f(w))
    assert res.accepted and res.step == 1.0 and res.loss == 0.0


def test_line_search_overshooting_newton_scale():
    res = line_search(lambda w: w**2, lambda rho: 3.0 - 2.0 * rho, 9.0)
    assert res.accepted and res.step == 1.0 and res.loss == 1.0


def test_line_search_rejects_ascent():
    calls = []

    def f(w):
        calls.append(w)
        return w**2

    res = line_search(f, lambda rho: 3.0 + rho, 9.0, ls_max_halvings=5)
    assert not res.accepted and res.candidate is None
    assert len(calls) == 6


def test_line_search_failure_counts_as_rejection():
    def apply(rho):
        if rho > 0.3:
            raise np.linalg.LinAlgError("bad")
        return rho

    res = line_search(lambda x: -x, apply, 0.0)
    assert res.accepted and res.step == 0.25


def test_block_solve_matches_dense():
    rng = np.random.default_rng(0)
    k = 4
    G = rng.standard_normal((k, k))
    D = rng.uniform(2, 3, (k, k))
    out = regularized_block_solve(G, D, 1e-2)
    for a in range(k):
        assert out[a, a] == pytest.approx(G[a, a] / D[a, a])
        for b in range(a + 1, k):
            sol = np.linalg.solve([[D[a, b], 1.0], [1.0, D[b, a]]], [G[a, b], G[b, a]])
            assert out[a, b] == pytest.approx(sol[0]) and out[b, a] == pytest.approx(sol[1])


def test_block_solve_lifts_indefinite_blocks():
    G = np.array([[0.0, 1.0], [1.0, 0.0]])
    D = np.array([[1.0, 0.1], [0.1, 1.0]])
    out = regularized_block_solve(G, D, 1e-2)
    # the lifted block is positive definite, so the direction is a descent one
    assert np.sum(out * G) > 0


def _stationary_scalar():
    # m = k = n = 1 with W chosen so that y phi'(y) = 1, the zero of G
    y = brentq(lambda y: y * smoothed_density(y, 1.0, 1).d_s - 1.0, 0.5, 10.0)
    return ModelParams([[[y]]], [[1.0]], [1.0]), MultiViewDataset([[[1.0]]])


def test_step_unmixing_at_stationary_point():
    params, data = _stationary_scalar()
    new, norm = step_unmixing(params, data, 0)
    assert norm < 1e-12
    assert np.allclose(new.unmixing, params.unmixing, atol=1e-12)


def test_steps_strictly_decrease(rng):
    params, data = random_instance(rng, 3, 3, 40)
    cfg = OptimizerConfig(mu_sq=0.0)
    for step, idx in [(step_unmixing, 0), (step_unmixing, 2), (step_precision, 1), (step_sigma, 2)]:
        before = neg_log_likelihood(params, data)
        new, norm = step(params, data, idx, cfg)
        assert norm > 0
        assert neg_log_likelihood(new, data) < before
        params = new
    params.validate()


def test_repeated_unmixing_steps_converge():
    rng = np.random.default_rng(5)
    params, data = random_instance(rng, 3, 4, 200)
    cfg = OptimizerConfig(mu_sq=0.0)
    for _ in range(200):
        norms = []
        for i in range(3):
            params, n = step_unmixing(params, data, i, cfg)
            norms.append(n)
        if max(norms) < 1e-3:
            break
    assert np.abs(loss_gradients(params, data).grad_unmixing).max() < 1e-3


def test_step_precision_symmetric_views(rng):
    x = rng.standard_normal((2, 30))
    W = rng.standard_normal((2, 2)) + 2 * np.eye(2)
    params = ModelParams([W, W], np.full((2, 2), 0.5), [1.0, 1.0], 1e-3)
    new, norm = step_precision(params, MultiViewDataset([x, x]), 0)
    assert norm < 1e-13
    assert np.allclose(new.lambda_sq, params.lambda_sq)


def test_step_precision_keeps_constraints(rng):
    mu_sq = 0.05
    params, data = random_instance(rng, 4, 2, 60, mu_sq)
    cfg = OptimizerConfig(mu_sq=mu_sq)
    for _ in range(10):
        for j in range(2):
            params, _ = step_precision(params, data, j, cfg)
        assert np.allclose(params.lambda_sq.sum(axis=0), 1.0, atol=1e-14)
        assert np.all(params.lambda_sq >= mu_sq - 1e-15)


def test_precision_adapts_to_noisy_view():
    data, truth = generate_dataset(adaptive_scaling_config(1e-2, seed=0))
    cfg = OptimizerConfig(mu_sq=1e-3)
    params = ModelParams(truth.unmixing, [[0.5], [0.5]], truth.sigma, 1e-3)
    for _ in range(50):
        params, norm = step_precision(params, data, 0, cfg)
        if norm < 1e-10:
            break
    # grid oracle over the first view's weight with everything else fixed
    Y = np.matmul(params.unmixing, data.views)[:, 0]
    grid = np.linspace(1e-3, 1 - 1e-3, 9999)
    losses = [source_losses(Y, np.array([g, 1 - g]), params.sigma[0]) for g in grid]
    best = grid[int(np.argmin(losses))]
    assert params.lambda_sq[1, 0] > 0.9
    assert params.lambda_sq[0, 0] == pytest.approx(best, abs=2e-4)


def test_step_sigma_direction():
    params = ModelParams([[[1.0]]], [[1.0]], [1.0])
    data = MultiViewDataset([[[0.0]]])
    g = loss_gradients(params, data).grad_sigma[0]
    assert g == pytest.approx(0.5502688871723445, abs=1e-12)
    new, norm = step_sigma(params, data, 0)
    assert norm == pytest.approx(g)
    # a positive gradient can only be reduced by shrinking sigma
    assert 0 < new.sigma[0] < 1.0
    assert neg_log_likelihood(new, data) < neg_log_likelihood(params, data)


def test_rescale_search_is_a_descent_step(rng):
    params, data = random_instance(rng, 3, 2, 50)
    Y = np.matmul(params.unmixing, data.views)
    base = source_losses(Y[:, 0], params.lambda_sq[:, 0], params.sigma[0])
    ok, v, lam, loss = rescale_search(Y[:, 0], params.lambda_sq[:, 0], params.sigma[0], 1, 0.0, base)
    if ok:
        # the log-determinant of W^1 rises by v, so the total changes by loss - v - base
        assert loss - v < base
        assert lam.sum() == pytest.approx(1.0)
        new = params.copy()
        new.unmixing[1, 0] *= np.exp(v)
        new.lambda_sq[:, 0] = lam
        total = neg_log_likelihood(new, data) - neg_log_likelihood(params, data)
        assert total == pytest.approx(loss - v - base, abs=1e-12)


def test_fit_mle_monotone_and_converges():
    data, _ = generate_dataset(adaptive_scaling_config(1.0, seed=2, n=500))
    fit = fit_mle(data, OptimizerConfig(mu_sq=1e-3))
    assert fit.converged
    assert fit.trace.tolerance() <= 1e-3
    steps = np.array([fit.trace.initial_nll] + fit.trace.step_nll)
    assert np.all(np.diff(steps) <= 1e-9)
    fit.params.validate()
    assert fit.sources.shape == (1, 500)

    # restarting at the solution stops after one sweep
    again = fit_mle(data, OptimizerConfig(mu_sq=1e-3), fit.params)
    assert again.converged and len(again.trace) == 1


def test_fixed_noise_freezes_precisions(rng):
    params, data = random_instance(rng, 3, 2, 60)
    fit = fit_mle(data, OptimizerConfig(mu_sq=0.0, max_sweeps=5), params, fixed_noise=True)
    assert np.array_equal(fit.params.lambda_sq, params.lambda_sq)
    assert np.array_equal(fit.params.sigma, params.sigma)
    assert len(fit.trace) == 5 or fit.converged


def test_config_check():
    with pytest.raises(ValueError):
        OptimizerConfig(tol=0).check(2)
    with pytest.raises(ValueError):
        OptimizerConfig(mu_sq=0.5).check(2)
    with pytest.raises(ValueError):
        OptimizerConfig(max_sweeps=0).check(2)


def test_shared_unmixing_step_keeps_views_in_agreement():
    # noiseless views of a badly unmixed source estimate: per-view steps
    # stall, the shared step moves every view together
    rng = np.random.default_rng(4)
    s = rng.laplace(size=(3, 2000)) / np.sqrt(2)
    R = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
    A = rng.standard_normal((4, 3, 3))
    data = MultiViewDataset(np.matmul(A, s[None]))
    W = np.matmul(R, np.linalg.inv(A))
    params = ModelParams(W, np.full((4, 3), 0.25), np.full(3, 1e-3), 0.0)
    Y = np.matmul(W, data.views)
    assert np.abs(Y - Y[0]).max() < 1e-8

    state = _Fit(params, data, OptimizerConfig(mu_sq=0.0))
    before = state.loss
    assert state.step_shared_unmixing()
    assert state.loss < before - 1e-3
    Y = state.Y
    assert np.abs(Y - Y[0]).max() < 1e-8
    assert np.allclose(np.matmul(state.params.unmixing, data.views), Y)
