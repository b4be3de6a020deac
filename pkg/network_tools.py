import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np

from config import BN_EPSILON, COLLINEAR_TOLERANCE, DEFAULT_MASTER_SEED, PAIR_REFERENCE_BATCH
from errors import InvalidArgumentError, UnsupportedOperationError
from kernel_tools import ActivationKind, activate, analytic_bn, batch_normalize
from rng_tools import SeedSpec, as_vector, cosine, gaussian_matrix, map_trials, mean_and_stderr

logger = logging.getLogger(__name__)

WEIGHT_VARIANCE_RULE = "1/fan_in"
_REFERENCE_STREAM = 0xB47C


class Normalization(str, Enum):
    NONE = "none"
    ANALYTIC_RELU = "analytic_relu"
    BATCH_EMPIRICAL = "batch_empirical"


def default_normalization(activation: ActivationKind) -> Normalization:
    """sgn layers need no rescaling; relu and sigmoid teachers are batch-normalized."""
    if ActivationKind(activation) is ActivationKind.SGN:
        return Normalization.NONE
    return Normalization.BATCH_EMPIRICAL


@dataclass(frozen=True)
class NetworkSpec:
    """Topology of a random fully-connected teacher network."""

    input_dim: int
    width: int
    depth: int
    activation: ActivationKind = ActivationKind.SGN
    normalization: Normalization = Normalization.NONE
    seed: SeedSpec = field(default_factory=lambda: SeedSpec(DEFAULT_MASTER_SEED))

    def __post_init__(self):
        try:
            object.__setattr__(self, "activation", ActivationKind(self.activation))
            object.__setattr__(self, "normalization", Normalization(self.normalization))
        except ValueError as e:
            raise InvalidArgumentError(str(e)) from e
        for name in ("input_dim", "width", "depth"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidArgumentError(f"{name} must be a positive integer, got {value!r}")
        if self.activation is ActivationKind.SGN and self.normalization is not Normalization.NONE:
            raise InvalidArgumentError("sgn networks take no normalization")
        if (
            self.normalization is Normalization.ANALYTIC_RELU
            and self.activation is not ActivationKind.RELU
        ):
            raise InvalidArgumentError("analytic_relu normalization requires relu activation")
        if not isinstance(self.seed, SeedSpec):
            raise InvalidArgumentError("seed must be a SeedSpec")

    def with_depth(self, depth: int) -> "NetworkSpec":
        return replace(self, depth=depth)

    def with_seed(self, seed: SeedSpec) -> "NetworkSpec":
        return replace(self, seed=seed)

    def to_fields(self) -> List[Tuple[str, str]]:
        return [
            ("input_dim", str(self.input_dim)),
            ("width", str(self.width)),
            ("depth", str(self.depth)),
            ("activation", self.activation.value),
            ("normalization", self.normalization.value),
            ("weight_variance_rule", WEIGHT_VARIANCE_RULE),
            ("master_seed", str(self.seed.master_seed)),
            ("stream_id", str(self.seed.stream_id)),
        ]

    @classmethod
    def from_fields(cls, fields: Sequence[Tuple[str, str]]) -> "NetworkSpec":
        values = dict(fields)
        try:
            return cls(
                input_dim=int(values["input_dim"]),
                width=int(values["width"]),
                depth=int(values["depth"]),
                activation=ActivationKind(values["activation"]),
                normalization=Normalization(values["normalization"]),
                seed=SeedSpec(int(values["master_seed"]), int(values["stream_id"])),
            )
        except (KeyError, ValueError) as e:
            raise InvalidArgumentError(f"Malformed network spec fields: {e}") from e


@dataclass(frozen=True)
class Network:
    spec: NetworkSpec
    layers: Tuple[np.ndarray, ...]

    def __post_init__(self):
        spec = self.spec
        layers = tuple(np.asarray(layer, dtype=np.float64) for layer in self.layers)
        if len(layers) != spec.depth + 1:
            raise InvalidArgumentError(f"Expected {spec.depth + 1} layers, got {len(layers)}")
        expected = [(spec.width, spec.input_dim)]
        expected += [(spec.width, spec.width)] * (spec.depth - 1)
        expected += [(1, spec.width)]
        for index, (layer, shape) in enumerate(zip(layers, expected)):
            if layer.shape != shape:
                raise InvalidArgumentError(f"Layer {index} has shape {layer.shape}, expected {shape}")
            if not np.all(np.isfinite(layer)):
                raise InvalidArgumentError(f"Layer {index} has non-finite entries")
        object.__setattr__(self, "layers", layers)


@dataclass(frozen=True)
class LayerBatchStats:
    mean: np.ndarray
    var: np.ndarray


@dataclass(frozen=True)
class BatchForward:
    labels: np.ndarray
    scores: np.ndarray
    layer_outputs: List[np.ndarray]
    stats: List[LayerBatchStats]


@dataclass(frozen=True)
class AngleTrace:
    """Cosines c_0 (inputs) through c_h (last hidden layer)."""

    c_values: Tuple[float, ...]

    def __post_init__(self):
        values = tuple(float(c) for c in self.c_values)
        if not values or any(not -1.0 <= c <= 1.0 for c in values):
            raise InvalidArgumentError("Cosine trace values must lie in [-1, 1]")
        object.__setattr__(self, "c_values", values)

    @property
    def depth(self) -> int:
        return len(self.c_values) - 1


@dataclass(frozen=True)
class DecayPoint:
    layer: int
    mean_c: float
    abs_mean_c: float
    std_err: float


def sample_network(spec: NetworkSpec) -> Network:
    """Draw W^(1..h+1) with N(0, 1/fan_in) entries, one stream per layer."""
    layers = [gaussian_matrix(spec.width, spec.input_dim, 1.0 / spec.input_dim, spec.seed.spawn(0))]
    for index in range(1, spec.depth):
        layers.append(gaussian_matrix(spec.width, spec.width, 1.0 / spec.width, spec.seed.spawn(index)))
    layers.append(gaussian_matrix(1, spec.width, 1.0 / spec.width, spec.seed.spawn(spec.depth)))
    return Network(spec=spec, layers=tuple(layers))


def _run_layers(net: Network, rows: np.ndarray) -> BatchForward:
    kind = net.spec.activation
    normalization = net.spec.normalization
    current = rows
    outputs, stats = [], []
    for weights in net.layers[:-1]:
        pre = current @ weights.T
        if normalization is Normalization.ANALYTIC_RELU:
            current = analytic_bn(kind, pre)
        else:
            current = activate(kind, pre)
            if normalization is Normalization.BATCH_EMPIRICAL:
                current, mean, var = batch_normalize(current, BN_EPSILON)
                stats.append(LayerBatchStats(mean=mean, var=var))
        outputs.append(current)
    scores = (current @ net.layers[-1].T)[:, 0]
    labels = np.where(scores >= 0, 1, -1).astype(np.int8)
    return BatchForward(labels=labels, scores=scores, layer_outputs=outputs, stats=stats)


def _as_rows(net: Network, xs) -> np.ndarray:
    rows = np.asarray(xs, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != net.spec.input_dim:
        raise InvalidArgumentError(
            f"Inputs must have shape (batch, {net.spec.input_dim}), got {rows.shape}"
        )
    if not np.all(np.isfinite(rows)):
        raise InvalidArgumentError("Inputs must be finite")
    return rows


def forward(net: Network, x) -> Tuple[int, List[np.ndarray]]:
    """Label and hidden-layer outputs for a single input."""
    if net.spec.normalization is Normalization.BATCH_EMPIRICAL:
        raise UnsupportedOperationError("Batch-normalized networks need forward_batch")
    vector = as_vector(x)
    if vector.shape[0] != net.spec.input_dim:
        raise InvalidArgumentError(f"Input has length {vector.shape[0]}, expected {net.spec.input_dim}")
    result = _run_layers(net, vector[None, :])
    return int(result.labels[0]), [output[0] for output in result.layer_outputs]


def forward_batch(net: Network, xs) -> BatchForward:
    rows = _as_rows(net, xs)
    if net.spec.normalization is Normalization.BATCH_EMPIRICAL and rows.shape[0] < 2:
        raise InvalidArgumentError("Batch normalization needs a batch of at least two inputs")
    return _run_layers(net, rows)


def _reference_batch(net: Network) -> np.ndarray:
    rng = net.spec.seed.spawn(_REFERENCE_STREAM).generator()
    return rng.standard_normal((PAIR_REFERENCE_BATCH, net.spec.input_dim))


def propagate_pair(net: Network, x, y) -> AngleTrace:
    """Cosine of the two hidden states after every layer of one network.

    Under batch normalization the pair rides inside a fixed reference batch:
    statistics of a two-row batch would map the pair to antipodal points.
    """
    x = as_vector(x)
    y = as_vector(y)
    if x.shape[0] != net.spec.input_dim or y.shape[0] != net.spec.input_dim:
        raise InvalidArgumentError(f"Inputs must have length {net.spec.input_dim}")
    c0 = cosine(x, y)
    if abs(c0) >= 1.0 - COLLINEAR_TOLERANCE:
        raise InvalidArgumentError("Inputs are collinear")
    rows = np.vstack([x, y])
    if net.spec.normalization is Normalization.BATCH_EMPIRICAL:
        rows = np.vstack([rows, _reference_batch(net)])
    result = _run_layers(net, rows)
    values = [c0] + [cosine(output[0], output[1]) for output in result.layer_outputs]
    return AngleTrace(c_values=tuple(values))


def layer_gram(net: Network, xs, layer: int) -> np.ndarray:
    """Cosine Gram matrix U of the k inputs' states at ``layer`` (0 = inputs)."""
    rows = _as_rows(net, xs)
    if not 0 <= layer <= net.spec.depth:
        raise InvalidArgumentError(f"layer must lie in [0, {net.spec.depth}]")
    if layer == 0:
        states = rows
    else:
        states = forward_batch(net, rows).layer_outputs[layer - 1]
    norms = np.linalg.norm(states, axis=1)
    if np.any(norms == 0):
        raise InvalidArgumentError("A hidden state is the zero vector")
    unit = states / norms[:, None]
    return unit @ unit.T


def pair_at_cosine(kind: ActivationKind, n: int, c0: float, seed: SeedSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Input pair whose cosine is (approximately, for sgn exactly on the lattice) c0."""
    if not -1.0 < c0 < 1.0:
        raise InvalidArgumentError(f"c0 must lie in (-1, 1), got {c0}")
    rng = seed.generator()
    if ActivationKind(kind) is ActivationKind.SGN:
        flips = int(round(n * (1.0 - c0) / 2.0))
        if flips in (0, n):
            raise InvalidArgumentError(f"c0 = {c0} rounds to a collinear pair at n = {n}")
        x = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        y = x.copy()
        y[rng.choice(n, size=flips, replace=False)] *= -1.0
        return x, y
    if n < 2:
        raise InvalidArgumentError("Real-valued pairs need n >= 2")
    x = rng.standard_normal(n)
    x_hat = x / np.linalg.norm(x)
    other = rng.standard_normal(n)
    other -= other.dot(x_hat) * x_hat
    other_hat = other / np.linalg.norm(other)
    scale = np.sqrt(n)
    y = c0 * x_hat + np.sqrt(1.0 - c0 * c0) * other_hat
    return scale * x_hat, scale * y


def empirical_decay(
    spec: NetworkSpec,
    c0: float,
    trials: int,
    seed: SeedSpec,
    workers: int = 1,
) -> List[DecayPoint]:
    """Per-layer mean cosine of a fixed pair over freshly sampled networks.

    Args:
        spec (NetworkSpec): Topology; its seed is replaced per trial
        c0 (float): Target input cosine, strictly inside (-1, 1)
        trials (int): Number of independent networks, at least 100
        seed (SeedSpec): Stream for the pair and the per-trial networks
        workers (int): Thread count; results do not depend on it

    Returns:
        List[DecayPoint]: One entry per layer 0..h
    """
    if abs(c0) >= 1.0:
        raise InvalidArgumentError("c0 = +-1 is a collinear start")
    if trials < 100:
        raise InvalidArgumentError(f"trials must be at least 100, got {trials}")
    x, y = pair_at_cosine(spec.activation, spec.input_dim, c0, seed.spawn(0))
    network_seeds = seed.spawn(1)

    def trial(index: int) -> Tuple[float, ...]:
        net = sample_network(spec.with_seed(network_seeds.spawn(index)))
        return propagate_pair(net, x, y).c_values

    logger.info(
        "Empirical decay: %s/%s n=%d w=%d h=%d c0=%.3f trials=%d",
        spec.activation.value, spec.normalization.value, spec.input_dim, spec.width, spec.depth, c0, trials,
    )
    traces = np.array(map_trials(trial, trials, workers))
    means, stderrs = mean_and_stderr(traces, axis=0)
    return [
        DecayPoint(layer=layer, mean_c=float(m), abs_mean_c=float(abs(m)), std_err=float(s))
        for layer, (m, s) in enumerate(zip(means, stderrs))
    ]


def iterated_kernel(kernel, c0: float, depth: int) -> List[float]:
    """Deterministic mean-map reference c_{i+1} = kernel(c_i), i = 0..depth."""
    values = [float(c0)]
    for _ in range(depth):
        values.append(float(kernel(values[-1])))
    return values
