import numpy as np
import pytest

from chain_tools import fit_decay
from errors import InvalidArgumentError, UnsupportedOperationError
from kernel_tools import RELU_NORM, ActivationKind, mu, relu_bn_kernel
from network_tools import (
    Network,
    NetworkSpec,
    Normalization,
    default_normalization,
    empirical_decay,
    forward,
    forward_batch,
    iterated_kernel,
    layer_gram,
    pair_at_cosine,
    propagate_pair,
    sample_network,
)
from rng_tools import SeedSpec


def _spec(n=8, w=8, h=2, kind=ActivationKind.SGN, norm=Normalization.NONE, seed=SeedSpec(5)):
    return NetworkSpec(n, w, h, kind, norm, seed)


def test_sample_network_shapes_and_determinism():
    spec = _spec(n=4, w=4, h=2)
    net = sample_network(spec)
    assert [layer.shape for layer in net.layers] == [(4, 4), (4, 4), (1, 4)]
    again = sample_network(spec)
    for a, b in zip(net.layers, again.layers):
        np.testing.assert_array_equal(a, b)


def test_first_layer_variance():
    net = sample_network(_spec(n=256, w=256, h=1))
    assert net.layers[0].var() == pytest.approx(1.0 / 256, rel=0.05)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"n": 0},
        {"h": 0},
        {"norm": Normalization.BATCH_EMPIRICAL},
        {"kind": ActivationKind.SIGMOID, "norm": Normalization.ANALYTIC_RELU},
    ],
)
def test_invalid_specs(kwargs):
    with pytest.raises(InvalidArgumentError):
        _spec(**kwargs)


def test_spec_fields_round_trip():
    spec = _spec(kind=ActivationKind.RELU, norm=Normalization.ANALYTIC_RELU, seed=SeedSpec(9, 4))
    assert NetworkSpec.from_fields(spec.to_fields()) == spec


def test_default_normalization():
    assert default_normalization(ActivationKind.SGN) is Normalization.NONE
    assert default_normalization(ActivationKind.SIGMOID) is Normalization.BATCH_EMPIRICAL


def test_forward_through_identity_layers_keeps_sign_inputs():
    spec = _spec(n=4, w=4, h=3)
    layers = [np.eye(4)] * 3 + [np.ones((1, 4))]
    net = Network(spec, tuple(layers))
    x = np.array([1.0, -1.0, -1.0, 1.0])
    label, outputs = forward(net, x)
    assert label == 1
    for output in outputs:
        np.testing.assert_array_equal(output, x)


def test_forward_sgn_outputs_are_sign_vectors():
    net = sample_network(_spec(n=16, w=12, h=3))
    x = np.where(np.random.default_rng(0).random(16) < 0.5, -1.0, 1.0)
    label, outputs = forward(net, x)
    assert label in (-1, 1)
    for output in outputs:
        assert set(np.unique(output)) <= {-1.0, 1.0}
        assert np.linalg.norm(output) == pytest.approx(np.sqrt(12))


def test_forward_analytic_relu_of_zero_input():
    net = sample_network(_spec(kind=ActivationKind.RELU, norm=Normalization.ANALYTIC_RELU))
    _, outputs = forward(net, np.zeros(8))
    np.testing.assert_allclose(outputs[0], -RELU_NORM.m / RELU_NORM.s)


def test_forward_refuses_batch_norm_and_bad_lengths():
    with pytest.raises(UnsupportedOperationError):
        forward(sample_network(_spec(kind=ActivationKind.RELU, norm=Normalization.BATCH_EMPIRICAL)), np.ones(8))
    with pytest.raises(InvalidArgumentError):
        forward(sample_network(_spec()), np.ones(5))


def test_forward_batch_normalizes_each_dimension():
    net = sample_network(_spec(n=8, w=16, h=3, kind=ActivationKind.SIGMOID, norm=Normalization.BATCH_EMPIRICAL))
    xs = np.random.default_rng(1).standard_normal((64, 8))
    result = forward_batch(net, xs)
    assert len(result.stats) == 3
    for output in result.layer_outputs:
        np.testing.assert_allclose(output.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(output.var(axis=0), 1.0, atol=1e-6)


def test_forward_batch_identical_inputs_center_to_zero():
    net = sample_network(_spec(kind=ActivationKind.RELU, norm=Normalization.BATCH_EMPIRICAL))
    result = forward_batch(net, np.ones((4, 8)))
    np.testing.assert_allclose(result.layer_outputs[0], 0.0, atol=1e-6)


def test_forward_batch_matches_forward_for_sgn():
    net = sample_network(_spec(n=10, w=10, h=4))
    xs = np.where(np.random.default_rng(2).random((6, 10)) < 0.5, -1.0, 1.0)
    batch = forward_batch(net, xs)
    assert list(batch.labels) == [forward(net, x)[0] for x in xs]


def test_forward_batch_needs_two_rows_under_batch_norm():
    net = sample_network(_spec(kind=ActivationKind.RELU, norm=Normalization.BATCH_EMPIRICAL))
    with pytest.raises(InvalidArgumentError):
        forward_batch(net, np.ones((1, 8)))


def test_propagate_pair_starts_at_input_cosine():
    n = 20
    net = sample_network(_spec(n=n, w=20, h=3))
    x = np.ones(n)
    y = x.copy()
    y[0] = -1.0
    trace = propagate_pair(net, x, y)
    assert trace.depth == 3
    assert trace.c_values[0] == pytest.approx(1.0 - 2.0 / n)
    orthogonal = propagate_pair(net, np.r_[np.ones(10), np.ones(10)], np.r_[np.ones(10), -np.ones(10)])
    assert orthogonal.c_values[0] == 0.0


def test_propagate_pair_rejects_collinear():
    net = sample_network(_spec())
    with pytest.raises(InvalidArgumentError):
        propagate_pair(net, np.ones(8), -np.ones(8))


def test_propagate_pair_under_batch_norm_is_not_antipodal():
    net = sample_network(_spec(n=16, w=32, h=2, kind=ActivationKind.RELU, norm=Normalization.BATCH_EMPIRICAL))
    x, y = pair_at_cosine(ActivationKind.RELU, 16, 0.8, SeedSpec(3))
    trace = propagate_pair(net, x, y)
    assert trace.c_values[1] > 0.0


def test_pair_at_cosine():
    x, y = pair_at_cosine(ActivationKind.SGN, 100, 0.5, SeedSpec(1))
    assert float(x @ y) / 100 == pytest.approx(0.5)
    x, y = pair_at_cosine(ActivationKind.RELU, 32, -0.25, SeedSpec(1))
    assert float(x @ y) / (np.linalg.norm(x) * np.linalg.norm(y)) == pytest.approx(-0.25)
    with pytest.raises(InvalidArgumentError):
        pair_at_cosine(ActivationKind.SGN, 4, 0.99, SeedSpec(1))


def test_layer_gram_has_unit_diagonal():
    net = sample_network(_spec(n=16, w=16, h=2))
    xs = np.where(np.random.default_rng(4).random((3, 16)) < 0.5, -1.0, 1.0)
    gram = layer_gram(net, xs, 2)
    np.testing.assert_allclose(np.diag(gram), 1.0)
    np.testing.assert_allclose(gram, gram.T)


@pytest.mark.slow
def test_first_layer_cosine_follows_mu():
    spec = _spec(n=512, w=512, h=1)
    x, y = pair_at_cosine(ActivationKind.SGN, 512, 0.5, SeedSpec(2))
    c1 = [propagate_pair(sample_network(spec.with_seed(SeedSpec(2, t))), x, y).c_values[1] for t in range(2000)]
    stderr = np.std(c1, ddof=1) / np.sqrt(len(c1))
    assert abs(np.mean(c1) - mu(0.5)) < 3.0 * stderr


def test_sgn_cosines_live_on_the_lattice():
    w = 15
    net = sample_network(_spec(n=w, w=w, h=5))
    x, y = pair_at_cosine(ActivationKind.SGN, w, 0.2, SeedSpec(6))
    for c in propagate_pair(net, x, y).c_values:
        agreements = c * w
        assert agreements == pytest.approx(round(agreements), abs=1e-9)
        assert (round(agreements) - w) % 2 == 0


def test_empirical_decay_is_symmetric_at_zero():
    points = empirical_decay(_spec(n=32, w=32, h=4), 0.0, 200, SeedSpec(8))
    assert [p.layer for p in points] == [0, 1, 2, 3, 4]
    for point in points[1:]:
        assert abs(point.mean_c) <= 4.0 * point.std_err + 1e-12


def test_empirical_decay_relu_stays_under_iterated_kernel():
    spec = _spec(n=64, w=64, h=4, kind=ActivationKind.RELU, norm=Normalization.ANALYTIC_RELU)
    points = empirical_decay(spec, 0.5, 200, SeedSpec(9))
    reference = iterated_kernel(relu_bn_kernel, points[0].mean_c, spec.depth)
    for point, ref in zip(points, reference):
        assert point.abs_mean_c <= abs(ref) + 3.0 * point.std_err + 0.05


@pytest.mark.parametrize("c0", [0.3, 0.5, 0.8])
def test_empirical_decay_relu_slope_is_negative(c0):
    spec = _spec(n=64, w=64, h=5, kind=ActivationKind.RELU, norm=Normalization.ANALYTIC_RELU)
    points = empirical_decay(spec, c0, 300, SeedSpec(10))
    fit = fit_decay([p.layer for p in points], [p.mean_c for p in points], noise=[p.std_err for p in points])
    assert fit.rate < 1.0


@pytest.mark.slow
def test_empirical_decay_relu_tracks_iterated_kernel_at_desk_scale():
    spec = _spec(n=256, w=256, h=6, kind=ActivationKind.RELU, norm=Normalization.ANALYTIC_RELU)
    points = empirical_decay(spec, 0.5, 2000, SeedSpec(11))
    fit = fit_decay([p.layer for p in points], [p.mean_c for p in points], noise=[p.std_err for p in points])
    assert fit.rate < 1.0
    reference = iterated_kernel(relu_bn_kernel, points[0].mean_c, spec.depth)
    # the mean map ignores a bias of order 1/width
    for point, ref in zip(points, reference):
        assert abs(point.mean_c - ref) <= 3.0 * point.std_err + 2.0 / spec.width


def test_empirical_decay_is_worker_count_independent():
    spec = _spec(n=16, w=16, h=3)
    single = empirical_decay(spec, 0.5, 100, SeedSpec(4), workers=1)
    pooled = empirical_decay(spec, 0.5, 100, SeedSpec(4), workers=3)
    assert single == pooled


def test_empirical_decay_needs_enough_trials():
    with pytest.raises(InvalidArgumentError):
        empirical_decay(_spec(), 0.5, 10, SeedSpec(1))
