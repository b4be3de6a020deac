import math

import numpy as np
import pytest

from correlation_tools import (
    QueryFunction,
    all_halfspace_inputs,
    gram_determinant_check,
    halfspace_inputs,
    kway_cov_check,
    kway_cov_summary,
    kway_tv,
    linear_chain,
    linear_learner_correlation,
    predicted_bound,
    random_sign_inputs,
    sq_correlation,
    sq_correlation_exhaustive,
    squared_correlation_estimate,
)
from errors import InvalidArgumentError, UnsupportedOperationError
from kernel_tools import ActivationKind
from network_tools import NetworkSpec, Normalization, forward_batch, sample_network
from rng_tools import SeedSpec, matvec


def test_halfspace_inputs_pin_first_coordinate(seed):
    xs = halfspace_inputs(6, 50, seed.generator())
    assert np.all(xs[:, 0] == 1.0)
    assert set(np.unique(xs)) <= {-1.0, 1.0}
    full = all_halfspace_inputs(4)
    assert full.shape == (8, 4)
    assert len({tuple(row) for row in full}) == 8


def test_query_functions():
    xs = np.array([[1.0, -1.0, -1.0, 1.0], [1.0, 1.0, -1.0, 1.0]])
    np.testing.assert_array_equal(QueryFunction.parity([1, 2]).evaluate(xs), [1.0, -1.0])
    np.testing.assert_array_equal(QueryFunction.dictator(2).evaluate(xs), [-1.0, -1.0])
    np.testing.assert_array_equal(QueryFunction.majority().evaluate(xs), [1.0, 1.0])
    np.testing.assert_array_equal(QueryFunction.parity([1, 2]).negated().evaluate(xs), [-1.0, 1.0])
    with pytest.raises(InvalidArgumentError):
        QueryFunction.dictator(9).evaluate(xs)


def test_squared_correlation_estimate_is_noise_corrected():
    assert squared_correlation_estimate(np.ones((5, 10)))[0] == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    noise = np.where(rng.random((400, 200)) < 0.5, -1.0, 1.0)
    estimate, stderr = squared_correlation_estimate(noise)
    assert abs(estimate) < 4.0 * stderr


def test_predicted_bound():
    bound, decay, inverse_n = predicted_bound(11, 3)
    assert decay == pytest.approx(math.exp(-3))
    assert inverse_n == pytest.approx(2.0**-10)
    assert bound == pytest.approx(decay + inverse_n)


def test_network_query_from_the_teacher_spec_matches_the_teacher():
    spec = NetworkSpec(8, 8, 3)
    seed = SeedSpec(31)
    teacher = sample_network(spec.with_seed(seed.spawn(0).spawn(0)))
    xs = all_halfspace_inputs(8)
    g = QueryFunction.independent_network(teacher.spec)
    assert np.mean(g.evaluate(xs) * forward_batch(teacher, xs).labels) == 1.0


def test_exhaustive_and_sampled_estimates_agree():
    spec = NetworkSpec(10, 16, 2)
    g = QueryFunction.parity([1, 2])
    exact = sq_correlation_exhaustive(g, spec, 60, SeedSpec(4))
    sampled = sq_correlation(g, spec, 60, 4000, SeedSpec(4))
    assert exact.n_x == 512
    assert abs(exact.estimate - sampled.estimate) < 4.0 * (exact.std_err + sampled.std_err) + 0.01


def test_sq_correlation_stays_under_predicted_bound():
    g = QueryFunction.parity([1, 2])
    for depth in (1, 4, 8):
        report = sq_correlation(g, NetworkSpec(32, 32, depth), 100, 2000, SeedSpec(5))
        assert report.depth == depth
        assert report.estimate <= report.predicted_bound + 3.0 * report.std_err


def test_sq_correlation_validates():
    with pytest.raises(InvalidArgumentError):
        sq_correlation(QueryFunction.majority(), NetworkSpec(8, 8, 1), 10, 2000, SeedSpec(1))
    relu = NetworkSpec(8, 8, 1, ActivationKind.RELU, Normalization.ANALYTIC_RELU)
    with pytest.raises(UnsupportedOperationError):
        sq_correlation(QueryFunction.majority(), relu, 100, 2000, SeedSpec(1))


def test_linear_chain_matches_matvec():
    net = sample_network(NetworkSpec(6, 5, 3))
    x = np.arange(6, dtype=float)
    expected = matvec(net.layers[1], matvec(net.layers[0], x))
    np.testing.assert_allclose(linear_chain(net, x, 2), expected)
    np.testing.assert_array_equal(linear_chain(net, x, 0), x)


def test_linear_learner_first_layer_correlation():
    report = linear_learner_correlation(NetworkSpec(128, 128, 1), 500, 40, SeedSpec(6))
    assert abs(report.corr[0] - math.sqrt(2.0 / math.pi)) < 3.0 * report.std_err[0] + 0.01


@pytest.mark.slow
def test_linear_learner_factor_near_gamma():
    report = linear_learner_correlation(NetworkSpec(256, 256, 8), 2000, 200, SeedSpec(6))
    assert 0.75 <= report.fitted_factor <= 0.85


def test_kway_single_bit_is_unbiased():
    spec = NetworkSpec(16, 16, 3)
    x = random_sign_inputs(1, 16, SeedSpec(2))
    report = kway_tv(spec, 1, x, 2000, SeedSpec(3))
    assert report.tv_distance <= 3.0 * report.std_err + 0.01


def test_kway_orthogonal_pair_is_uniform_at_depth_one():
    spec = NetworkSpec(8, 8, 1)
    xs = np.array([[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0]])
    report = kway_tv(spec, 2, xs, 4000, SeedSpec(3))
    assert report.tv_distance <= 3.0 * report.std_err + 0.01
    assert report.multiplicative_gap >= 0.0


def test_kway_deep_network_is_closer_to_independent():
    xs = random_sign_inputs(4, 64, SeedSpec(8), correlation=0.6)
    shallow = kway_tv(NetworkSpec(64, 64, 1), 4, xs, 3000, SeedSpec(9))
    deep = kway_tv(NetworkSpec(64, 64, 12), 4, xs, 3000, SeedSpec(9))
    assert deep.tv_distance <= shallow.tv_distance + 2.0 * (deep.std_err + shallow.std_err)


def test_kway_rejects_small_samples_and_collinear_inputs():
    spec = NetworkSpec(8, 8, 1)
    xs = random_sign_inputs(2, 8, SeedSpec(1))
    with pytest.raises(InvalidArgumentError):
        kway_tv(spec, 2, xs, 10, SeedSpec(1))
    with pytest.raises(InvalidArgumentError):
        kway_tv(spec, 2, np.ones((2, 8)), 500, SeedSpec(1))


def test_gram_determinant_identity():
    report = gram_determinant_check(np.eye(4))
    assert report.det_cov == pytest.approx(1.0)
    assert report.delta_max == 0.0
    assert report.bound_holds


@pytest.mark.parametrize("delta", [0.1, 0.3, 0.5])
def test_gram_determinant_two_by_two(delta):
    report = gram_determinant_check(np.array([[1.0, delta], [delta, 1.0]]))
    assert report.det_cov == pytest.approx(1.0 - delta**2)
    assert report.bound_holds


def test_gram_determinant_singular():
    report = gram_determinant_check(np.ones((3, 3)))
    assert report.det_cov == 0.0
    assert not report.bound_holds


def test_kway_cov_summary_mixes_toward_orthogonal():
    spec = NetworkSpec(200, 200, 6)
    xs = random_sign_inputs(4, 200, SeedSpec(10))
    summary = kway_cov_summary(spec, 4, xs, 6, 30, SeedSpec(11))
    assert summary.median_delta_max < 5.0 * math.sqrt(math.log(200) / 200)
    assert len(summary.reports) == 30
    inputs_only = kway_cov_check(spec, 4, xs, 0, SeedSpec(11))
    unit = xs / np.linalg.norm(xs, axis=1)[:, None]
    off_diagonal = np.abs(unit @ unit.T)[~np.eye(4, dtype=bool)]
    assert inputs_only.delta_max == pytest.approx(off_diagonal.max())


def test_sq_correlation_ignores_query_sign():
    g = QueryFunction.parity([1, 2])
    spec = NetworkSpec(16, 16, 2)
    plain = sq_correlation(g, spec, 50, 1000, SeedSpec(13))
    flipped = sq_correlation(g.negated(), spec, 50, 1000, SeedSpec(13))
    assert abs(plain.estimate - flipped.estimate) <= 3.0 * plain.std_err + 1e-15


def test_deep_independent_networks_are_uncorrelated():
    g = QueryFunction.independent_network(NetworkSpec(64, 64, 10, seed=SeedSpec(77)))
    report = sq_correlation(g, NetworkSpec(64, 64, 12), 50, 2000, SeedSpec(12))
    assert report.estimate <= 0.01


def test_linear_learner_correlation_does_not_grow_with_depth():
    report = linear_learner_correlation(NetworkSpec(64, 64, 6), 500, 40, SeedSpec(14))
    for d in range(len(report.corr) - 1):
        slack = 3.0 * (report.std_err[d] + report.std_err[d + 1])
        assert report.corr[d + 1] <= report.corr[d] + slack


def test_kway_determinant_bound_holds_at_the_median():
    spec = NetworkSpec(200, 200, 6)
    xs = random_sign_inputs(4, 200, SeedSpec(15))
    summary = kway_cov_summary(spec, 4, xs, 6, 100, SeedSpec(16))
    assert summary.median_abs_log_det <= 2.0 * summary.median_delta_max * 4**2
    assert summary.pass_fraction >= 0.5


@pytest.mark.slow
def test_sq_correlation_decays_with_depth_at_desk_scale():
    # 0-based: coordinate 0 is pinned, so this is the {1, 2} parity counted from one
    g = QueryFunction.parity([0, 1])
    estimates = [
        sq_correlation(g, NetworkSpec(64, 64, depth), 400, 5000, SeedSpec(17)).estimate
        for depth in (2, 4, 6, 8)
    ]
    assert all(b < a for a, b in zip(estimates, estimates[1:]))
    assert estimates[-1] < 0.02
