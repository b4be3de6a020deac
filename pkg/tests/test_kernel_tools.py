import math

import numpy as np
import pytest

from errors import InvalidArgumentError, UnsupportedOperationError
from kernel_tools import (
    RELU_NORM,
    ActivationKind,
    activate,
    analytic_bn,
    batch_normalize,
    correlated_gaussian_pairs,
    mc_relu_bn_kernel,
    mc_sign_kernel,
    mu,
    mu_upper_bound_gap,
    relu_bn_kernel,
    relu_bn_ratio,
    relu_bn_ratio_limit,
    relu_plain_kernel,
    rho_for,
)


def test_activate_examples():
    assert activate(ActivationKind.SGN, -3.2) == -1.0
    assert activate(ActivationKind.SGN, 0.0) == 1.0
    assert activate(ActivationKind.RELU, -3.2) == 0.0
    assert activate(ActivationKind.RELU, 2.5) == 2.5
    assert activate("sigmoid", 0.0) == 0.5


def test_mu_examples():
    assert mu(0.0) == 0.0
    assert mu(1.0) == pytest.approx(1.0)
    assert mu(-1.0) == pytest.approx(-1.0)
    assert mu(0.5) == pytest.approx(1.0 / 3.0, abs=1e-15)


def test_mu_rejects_outside_unit_interval():
    with pytest.raises(InvalidArgumentError):
        mu(1.5)


def test_mu_upper_bound_gap():
    assert mu_upper_bound_gap(0.0) == pytest.approx(0.0, abs=1e-15)
    assert mu_upper_bound_gap(1.0) == pytest.approx(1.0 - math.sqrt(2.0) / math.pi, abs=1e-12)
    sweep = mu_upper_bound_gap(np.linspace(1e-6, 1.0, 10**4))
    assert np.all(sweep >= -1e-12)


def test_rho_for():
    assert rho_for(0.5) == pytest.approx(2.0 / 3.0)
    assert rho_for(1e-6) == pytest.approx(2.0 / math.pi, abs=1e-6)
    assert rho_for(0.9) == pytest.approx(0.79104, abs=1e-5)
    with pytest.raises(InvalidArgumentError):
        rho_for(1.0)


def test_relu_plain_kernel():
    assert relu_plain_kernel(1.0) == pytest.approx(0.5)
    assert relu_plain_kernel(0.0) == pytest.approx(1.0 / (2.0 * math.pi))
    assert relu_plain_kernel(0.5) == pytest.approx(0.25 - 1.0 / 12.0 + math.sqrt(3.0) / (4.0 * math.pi))


def test_relu_bn_ratio_endpoints():
    assert relu_bn_ratio(1.0) == pytest.approx(1.0)
    assert relu_bn_ratio(1e-9) == pytest.approx(relu_bn_ratio_limit(), abs=1e-8)
    assert relu_bn_ratio_limit() == pytest.approx(0.73342, abs=1e-5)
    assert relu_bn_ratio(-1.0) == pytest.approx(1.0 / (math.pi - 1.0))
    with pytest.raises(InvalidArgumentError):
        relu_bn_ratio(0.0)


def test_relu_bn_ratio_bounded_by_one():
    grid = np.linspace(1e-4, 1.0, 10**4)
    ratios = relu_bn_ratio(grid)
    assert np.all(ratios <= 1.0 + 1e-12)
    assert np.all(ratios > 0.0)
    assert np.all(np.abs(relu_bn_ratio(-grid)) <= 1.0)


def test_relu_bn_kernel_matches_centered_plain_kernel():
    assert relu_bn_kernel(0.0) == 0.0
    assert relu_bn_kernel(1.0) == pytest.approx(1.0)
    centered = (relu_plain_kernel(0.5) - 1.0 / (2.0 * math.pi)) / RELU_NORM.s_squared
    assert relu_bn_kernel(0.5) == pytest.approx(centered, abs=1e-12)
    np.testing.assert_allclose(relu_bn_kernel(np.array([0.0, 0.5])), [0.0, centered], atol=1e-12)


def test_relu_bn_kernel_monte_carlo(seed):
    mean, stderr = mc_relu_bn_kernel(0.5, 10**6, seed)
    assert abs(mean - relu_bn_kernel(0.5)) < 4.0 * stderr


def test_sign_kernel_monte_carlo(seed):
    mean, stderr = mc_sign_kernel(0.5, 10**5, seed)
    assert abs(mean - 1.0 / 3.0) < 4.0 * stderr


KERNEL_GRID = [-0.9, -0.5, -0.1, 0.1, 0.5, 0.9]


@pytest.mark.parametrize("c0", KERNEL_GRID)
def test_relu_bn_kernel_monte_carlo_grid(seed, c0):
    mean, stderr = mc_relu_bn_kernel(c0, 10**5, seed)
    assert abs(mean - relu_bn_kernel(c0)) < 4.0 * stderr


@pytest.mark.slow
@pytest.mark.parametrize("c0", KERNEL_GRID)
def test_relu_bn_kernel_monte_carlo_desk_scale(seed, c0):
    mean, stderr = mc_relu_bn_kernel(c0, 10**7, seed)
    assert abs(mean - relu_bn_kernel(c0)) < 3.0 * stderr


@pytest.mark.parametrize("estimator", [mc_relu_bn_kernel, mc_sign_kernel])
def test_doubling_samples_shrinks_std_err(seed, estimator):
    _, small = estimator(0.5, 50_000, seed)
    _, large = estimator(0.5, 100_000, seed.spawn(1))
    assert 1.0 / math.sqrt(2.0) - 0.1 <= large / small <= 1.0 / math.sqrt(2.0) + 0.1


def test_mu_is_odd_and_increasing():
    grid = np.linspace(-1.0, 1.0, 10**4 + 1)
    values = mu(grid)
    np.testing.assert_allclose(mu(-grid), -values, atol=1e-15)
    assert np.all(np.diff(values) > 0)


def test_mu_twice_has_only_trivial_fixed_points():
    grid = np.linspace(-1.0, 1.0, 10**4 + 1)
    interior = grid[(np.abs(grid) > 1e-12) & (np.abs(grid) < 1.0)]
    assert np.all(np.abs(mu(mu(interior))) < np.abs(interior))
    for c in (-1.0, 0.0, 1.0):
        assert mu(mu(c)) == pytest.approx(c, abs=1e-7)


@pytest.mark.parametrize("mu0", [0.05, 0.2, 0.5, 0.75, 0.95])
def test_rho_bounds_mu_inside_window(mu0):
    c = np.linspace(-mu0, mu0, 2001)
    assert np.all(np.abs(mu(c)) <= rho_for(mu0) * np.abs(c) + 1e-12)


def test_correlated_pairs_have_requested_correlation(seed):
    x, y = correlated_gaussian_pairs(-0.3, 10**5, seed)
    assert np.corrcoef(x, y)[0, 1] == pytest.approx(-0.3, abs=0.02)


def test_analytic_bn():
    zeros = analytic_bn(ActivationKind.RELU, np.zeros(3))
    np.testing.assert_allclose(zeros, -RELU_NORM.m / RELU_NORM.s)
    assert zeros[0] == pytest.approx(-0.68316, abs=1e-5)
    assert analytic_bn(ActivationKind.RELU, np.array([RELU_NORM.m]))[0] == pytest.approx(0.0, abs=1e-15)
    samples = analytic_bn(ActivationKind.RELU, np.random.default_rng(3).standard_normal(10**6))
    assert abs(samples.mean()) < 0.005
    assert abs(samples.var() - 1.0) < 0.01


def test_analytic_bn_is_relu_only():
    with pytest.raises(UnsupportedOperationError):
        analytic_bn(ActivationKind.SGN, np.zeros(2))


def test_batch_normalize():
    values = np.random.default_rng(1).normal(3.0, 2.0, size=(50, 4))
    normalized, mean, var = batch_normalize(values, 1e-8)
    np.testing.assert_allclose(normalized.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(normalized.var(axis=0), 1.0, atol=1e-6)
    constant, _, _ = batch_normalize(np.ones((3, 2)), 1e-8)
    np.testing.assert_array_equal(constant, 0.0)
    with pytest.raises(InvalidArgumentError):
        batch_normalize(np.ones((1, 2)), 1e-8)
