import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ldpfl.core import ClientDataset, PreconditionError, federation
from ldpfl.fedsim import AvailabilityModel
from ldpfl.losses import logistic_loss, quadratic_loss
from ldpfl.oracles import (
    OracleReport,
    calibration_report,
    finite_diff_grad,
    gradient_variance_bound,
    gradient_variance_mc,
    quadratic_benchmark,
    random_zero_sum,
    run_suite,
    stability_experiment,
    subset_variance_closed_form,
    subset_variance_exact,
    subset_variance_mc,
)


def test_subset_variance_small_example():
    a = [[1.0], [-1.0], [0.0]]
    assert subset_variance_exact(a, 2) == pytest.approx(1 / 6, abs=1e-15)
    assert subset_variance_closed_form(a, 2) == pytest.approx(1 / 6, abs=1e-15)
    assert subset_variance_exact(a, 3) == pytest.approx(0.0, abs=1e-15)
    assert subset_variance_exact(a, 1) == pytest.approx(2 / 3, abs=1e-15)


def test_subset_variance_limits():
    rng = np.random.default_rng(0)
    with pytest.raises(PreconditionError, match="use Monte-Carlo path"):
        subset_variance_exact(random_zero_sum(rng, 21, 2), 3)
    with pytest.raises(PreconditionError, match="sum to zero"):
        subset_variance_exact([[1.0], [1.0]], 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_subset_variance_enumeration_matches_closed_form(n, d, seed):
    A = random_zero_sum(np.random.default_rng(seed), n, d)
    for m in range(1, n + 1):
        assert subset_variance_exact(A, m) == pytest.approx(subset_variance_closed_form(A, m), rel=1e-12, abs=1e-12)


def test_subset_variance_monte_carlo_beyond_enumeration():
    A = random_zero_sum(np.random.default_rng(1), 30, 3)
    est, se = subset_variance_mc(A, 7, draws=200_000)
    assert abs(est - subset_variance_closed_form(A, 7)) <= 4 * se


def test_gradient_variance_zero_for_identical_full_batch():
    X = np.random.default_rng(0).normal(size=(5, 2))
    fed = federation([ClientDataset(X) for _ in range(3)])
    est, se = gradient_variance_mc(fed, quadratic_loss(5.0, X), np.zeros(2), 5, 0.0,
                                   AvailabilityModel.fixed(2), draws=200)
    # with-replacement draws still vary, so compare against the single-client sampling term
    bound = gradient_variance_bound(fed, quadratic_loss(5.0, X), np.zeros(2), 5, 0.0, AvailabilityModel.fixed(2))
    assert est <= bound + 3 * se


def test_gradient_variance_single_client_matches_analytic():
    X = np.random.default_rng(2).normal(size=(10, 3))
    fed = federation([ClientDataset(X)])
    loss = quadratic_loss(5.0, X)
    phi = float(np.mean(np.sum((X - X.mean(axis=0)) ** 2, axis=1)))
    est, se = gradient_variance_mc(fed, loss, np.zeros(3), 1, 0.5, AvailabilityModel.fixed(1), draws=20_000)
    assert abs(est - (phi + 3 * 0.5)) <= 4 * se


def test_gradient_variance_heterogeneous_two_clients():
    fed = federation([ClientDataset([[1.0], [1.0]]), ClientDataset([[-1.0], [-1.0]])])
    loss = quadratic_loss(5.0, [[1.0], [-1.0]])
    # upsilon^2 = 1, phi = 0, M = 1 of N = 2: bound = (1 - 0) * 1 / 1 = 1
    bound = gradient_variance_bound(fed, loss, np.zeros(1), 1, 0.0, AvailabilityModel.fixed(1))
    assert bound == pytest.approx(1.0)
    est, se = gradient_variance_mc(fed, loss, np.zeros(1), 1, 0.0, AvailabilityModel.fixed(1), draws=10_000)
    assert est <= bound + 3 * se


def test_gradient_variance_suite_passes():
    reports = run_suite("variance")
    assert len(reports) == 6
    assert all(r.passed for r in reports), [r.row() for r in reports]


def test_finite_diff_examples():
    np.testing.assert_allclose(finite_diff_grad(quadratic_loss(5.0), [1.0, 0.0], [0.0, 0.0]), [1.0, 0.0], atol=1e-6)
    x = np.array([1.0, -0.5])
    np.testing.assert_allclose(finite_diff_grad(logistic_loss(x[None, :], 5.0), np.zeros(2), x, y=1.0), -x / 2,
                               atol=1e-5)
    with pytest.raises(ValueError):
        finite_diff_grad(lambda v: 0.0, [0.0], h=0.0)


def test_stability_trivial_and_scaling():
    fed, loss = quadratic_benchmark(N=5, n=20, d=5)
    assert stability_experiment(fed, loss, 0.5, 0, 4, 5).measured == 0.0
    small = stability_experiment(fed, loss, 0.5, 20, 4, 5, seed_pairs=30)
    fed2, loss2 = quadratic_benchmark(N=5, n=40, d=5)
    big = stability_experiment(fed2, loss2, 0.5, 20, 4, 5, seed_pairs=30)
    assert big.reference * 2 == pytest.approx(small.reference * loss2.L**2 / loss.L**2)
    assert big.passed and small.passed
    with pytest.raises(PreconditionError):
        stability_experiment(fed, loss, 2.0, 5, 4, 5)


def test_calibration_detects_fault():
    assert calibration_report().passed
    assert not calibration_report(0.5).passed


def test_report_semantics():
    assert OracleReport("x", 1.0, 1.0, 0.0).passed
    assert not OracleReport("x", 1.1, 1.0, 0.05).passed
    assert OracleReport("x", 0.5, 1.0, 0.0, one_sided=True).passed
    assert not OracleReport("x", math.nan, 1.0, 1.0).passed


def test_suite_rejects_unknown_names():
    with pytest.raises(ValueError):
        run_suite("nope")
    with pytest.raises(ValueError):
        run_suite(fault="bogus")
