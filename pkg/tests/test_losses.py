import math

import numpy as np
import pytest

from ldpfl.core import ConvergenceError, PreconditionError
from ldpfl.losses import (
    MoreauEnvelope,
    absolute_loss,
    batched_mean_grad,
    grad,
    hinge_loss,
    logistic_loss,
    mean_grad,
    moreau_value_grad,
    moreau_wrap,
    per_sample_grads,
    per_sample_values,
    quadratic_loss,
    smoothing_beta,
    squared_loss,
)
from ldpfl.oracles import finite_diff_grad


def test_quadratic_gradient_example():
    g = grad(quadratic_loss(10.0), [1.0, 0.0], [0.0, 0.0])
    np.testing.assert_array_equal(g.grad, [1.0, 0.0])
    assert g.loss_value == 0.5


def test_logistic_gradient_at_zero():
    x = np.array([0.5, -2.0, 1.0])
    loss = logistic_loss(x[None, :], D=5.0)
    for y in (1.0, -1.0):
        g = grad(loss, np.zeros(3), x, y)
        np.testing.assert_allclose(g.grad, -y * x / 2, rtol=1e-15)
        assert g.loss_value == pytest.approx(math.log(2.0), rel=1e-15)


def test_logistic_margin_is_clipped():
    x = np.array([1.0, 0.0])
    loss = logistic_loss(x[None, :], D=100.0)
    g = grad(loss, [40.0, 0.0], x, -1.0)
    np.testing.assert_array_equal(g.grad, [0.0, 0.0])
    assert g.loss_value == pytest.approx(np.logaddexp(0, 15.0))


def test_gradient_clipping_example():
    loss = quadratic_loss(20.0, clip_threshold=5.0)
    np.testing.assert_allclose(grad(loss, [6.0, 8.0], [0.0, 0.0]).grad, [3.0, 4.0], rtol=1e-15)


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        grad(quadratic_loss(1.0), [0.0, 0.0], [0.0, 0.0, 0.0])


def _families(rng, d=4, k=6):
    X = rng.normal(size=(k, d))
    y_pm = rng.choice([-1.0, 1.0], size=k)
    y_real = rng.normal(size=k)
    return [
        (quadratic_loss(3.0, X), X, None),
        (logistic_loss(X, 3.0), X, y_pm),
        (squared_loss(X, y_real, 3.0), X, y_real),
    ]


def test_finite_difference_all_smooth_families():
    rng = np.random.default_rng(0)
    for loss, X, y in _families(rng):
        for _ in range(100):
            w = rng.normal(size=X.shape[1])
            j = rng.integers(len(X))
            yj = None if y is None else y[j]
            analytic = grad(loss, w, X[j], yj).grad
            numeric = finite_diff_grad(loss, w, X[j], y=yj)
            assert np.linalg.norm(analytic - numeric) <= 1e-5 * max(1.0, np.linalg.norm(analytic))


def test_finite_difference_through_envelope():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(20, 3))
    y = rng.normal(size=20)
    env = MoreauEnvelope(absolute_loss(X, 10.0), beta=2.0, prox_tol=1e-10)
    for j in range(20):
        w = rng.normal(size=3)
        value = lambda v: moreau_value_grad(env, v, X[j], y[j])[0]
        numeric = finite_diff_grad(value, w)
        analytic = moreau_value_grad(env, w, X[j], y[j])[1]
        assert np.linalg.norm(analytic - numeric) <= 1e-4 * max(1.0, np.linalg.norm(analytic))


def test_lipschitz_audit():
    rng = np.random.default_rng(2)
    D = 3.0
    for loss, X, y in _families(rng):
        for _ in range(50):
            w = rng.normal(size=X.shape[1])
            w *= min(1.0, D / np.linalg.norm(w))
            G = per_sample_grads(loss, w, X, y)
            assert np.all(np.linalg.norm(G, axis=1) <= loss.L * (1 + 1e-12))


def test_moreau_quadratic_example():
    env = MoreauEnvelope(quadratic_loss(100.0), beta=1.0)
    value, g = moreau_value_grad(env, [2.0], [0.0])
    assert value == pytest.approx(1.0, abs=1e-9)
    assert g[0] == pytest.approx(1.0, abs=1e-9)


def test_moreau_absolute_example():
    env = MoreauEnvelope(absolute_loss([[1.0]], 100.0), beta=1.0)
    value, g = moreau_value_grad(env, [2.0], [1.0], 0.0)
    assert value == pytest.approx(1.5, abs=1e-9)
    assert g[0] == pytest.approx(1.0, abs=1e-9)


def test_moreau_sandwich_and_large_beta():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(10, 3))
    y = rng.choice([-1.0, 1.0], size=10)
    for inner in (absolute_loss(X, 10.0), hinge_loss(X, 10.0)):
        for beta in (1.0, 10.0, 1e6):
            env = MoreauEnvelope(inner, beta)
            for _ in range(20):
                w = rng.normal(size=3)
                j = rng.integers(10)
                f = float(per_sample_values(inner, w, X[j:j + 1], y[j:j + 1])[0])
                fb = moreau_value_grad(env, w, X[j], y[j])[0]
                gap = f - fb
                assert -1e-9 <= gap <= inner.L**2 / (2 * beta) + 10 * env.prox_tol


def test_envelope_gradient_is_beta_lipschitz():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(5, 3))
    y = rng.choice([-1.0, 1.0], size=5)
    env = MoreauEnvelope(hinge_loss(X, 10.0), beta=3.0)
    for _ in range(50):
        w, w2 = rng.normal(size=3), rng.normal(size=3)
        j = rng.integers(5)
        g1 = moreau_value_grad(env, w, X[j], y[j])[1]
        g2 = moreau_value_grad(env, w2, X[j], y[j])[1]
        assert np.linalg.norm(g1 - g2) <= 3.0 * np.linalg.norm(w - w2) * (1 + 1e-6) + 1e-9


def test_moreau_wrapped_loss_matches_envelope():
    X = np.array([[1.0, 2.0], [-1.0, 0.5]])
    y = np.array([1.0, -1.0])
    inner = hinge_loss(X, 5.0)
    wrapped = moreau_wrap(inner, 4.0)
    assert wrapped.L == 2 * inner.L and wrapped.beta == 4.0
    w = np.array([0.3, -0.2])
    expected = np.mean([moreau_value_grad(MoreauEnvelope(inner, 4.0), w, X[j], y[j])[1] for j in range(2)], axis=0)
    np.testing.assert_allclose(mean_grad(wrapped, w, X, y), expected, rtol=1e-12)


def test_prox_solver_cap_raises_with_best_iterate():
    X = np.array([[1.0, 2.0]])
    env = MoreauEnvelope(logistic_loss(X, 5.0), beta=1e-3, prox_tol=1e-300, prox_max_iter=2)
    with pytest.raises(ConvergenceError) as info:
        moreau_value_grad(env, [0.5, 0.5], X[0], 1.0)
    assert info.value.best is not None


def test_batched_mean_grad_matches_loop():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(3, 7, 4))
    y = rng.choice([-1.0, 1.0], size=(3, 7))
    W = rng.normal(size=(3, 4))
    for loss in (logistic_loss(X.reshape(-1, 4), 5.0), logistic_loss(X.reshape(-1, 4), 5.0, clip_threshold=0.5),
                 quadratic_loss(5.0)):
        yy = None if loss.family == "quadratic" else y
        out = batched_mean_grad(loss, W, X, yy)
        for i in range(3):
            np.testing.assert_allclose(out[i], mean_grad(loss, W[i], X[i], None if yy is None else y[i]),
                                       rtol=1e-12, atol=1e-15)


def test_smoothing_beta_examples():
    assert smoothing_beta("mbsgd-convex", L=1, D=1, M_tilde=4, n_min=100, d=1, Xi_tilde=1) == pytest.approx(2.0)
    assert smoothing_beta("mbsgd-sc", mu=1, M_tilde=4, n_min=100, d=1, Xi_tilde=0.001) == pytest.approx(400.0)
    with pytest.raises(PreconditionError, match="smoothing parameter underflow"):
        smoothing_beta("mbsgd-convex", L=1, D=1, M_tilde=4, n_min=100, d=1, Xi_tilde=math.inf)
    with pytest.raises(PreconditionError, match="unknown"):
        smoothing_beta("nope")
