import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from config import (
    COLLINEAR_TOLERANCE,
    GAMMA_SGN,
    KWAY_DET_CONSTANT,
    KWAY_MAX_K,
    KWAY_SAMPLES_PER_CELL,
    SQ_MIN_INPUTS,
    SQ_MIN_NETWORKS,
)
from errors import InvalidArgumentError, ResourceLimitError, UnsupportedOperationError
from kernel_tools import ActivationKind, activate, analytic_bn
from network_tools import (
    Network,
    NetworkSpec,
    Normalization,
    forward_batch,
    layer_gram,
    sample_network,
)
from rng_tools import SeedSpec, map_trials, matvec, mean_and_stderr

logger = logging.getLogger(__name__)

EXHAUSTIVE_MAX_N = 20


class QueryKind(str, Enum):
    PARITY = "parity"
    MAJORITY = "majority"
    DICTATOR = "dictator"
    INDEPENDENT_NETWORK = "independent_network"


@dataclass(frozen=True)
class QueryFunction:
    """A fixed +-1 valued function g of the input, correlated against the teacher.

    Coordinates are 0-based; coordinate 0 is the one pinned to +1 on the
    halfspace the correlation is measured over.
    """

    kind: QueryKind
    coordinates: Tuple[int, ...] = ()
    network: Optional[Network] = None
    sign: int = 1

    @classmethod
    def parity(cls, coordinates: Sequence[int]) -> "QueryFunction":
        if not coordinates:
            raise InvalidArgumentError("Parity needs at least one coordinate")
        return cls(QueryKind.PARITY, tuple(int(c) for c in coordinates))

    @classmethod
    def majority(cls) -> "QueryFunction":
        return cls(QueryKind.MAJORITY)

    @classmethod
    def dictator(cls, coordinate: int) -> "QueryFunction":
        return cls(QueryKind.DICTATOR, (int(coordinate),))

    @classmethod
    def independent_network(cls, spec: NetworkSpec) -> "QueryFunction":
        return cls(QueryKind.INDEPENDENT_NETWORK, network=sample_network(spec))

    def negated(self) -> "QueryFunction":
        return QueryFunction(self.kind, self.coordinates, self.network, -self.sign)

    def evaluate(self, xs: np.ndarray) -> np.ndarray:
        n = xs.shape[1]
        if any(not 0 <= c < n for c in self.coordinates):
            raise InvalidArgumentError(f"Query coordinates {self.coordinates} out of range for n={n}")
        if self.kind is QueryKind.PARITY:
            values = np.prod(xs[:, list(self.coordinates)], axis=1)
        elif self.kind is QueryKind.DICTATOR:
            values = xs[:, self.coordinates[0]]
        elif self.kind is QueryKind.MAJORITY:
            values = np.where(xs.sum(axis=1) >= 0, 1.0, -1.0)
        else:
            values = forward_batch(self.network, xs).labels.astype(np.float64)
        return self.sign * values

    def describe(self) -> str:
        if self.kind is QueryKind.INDEPENDENT_NETWORK:
            return f"{self.kind.value}(h={self.network.spec.depth})"
        return f"{self.kind.value}{list(self.coordinates)}"


@dataclass(frozen=True)
class CorrelationReport:
    estimate: float
    std_err: float
    n_W: int
    n_x: int
    predicted_bound: float
    depth: int
    decay_term: float
    inverse_n_term: float


@dataclass(frozen=True)
class LinearLearnerReport:
    depths: Tuple[int, ...]
    corr: Tuple[float, ...]
    std_err: Tuple[float, ...]
    fitted_factor: float
    gamma: float


@dataclass(frozen=True)
class KWayReport:
    """k-way independence diagnostics.

    The 30 * 2^k sample floor and the C = 2 determinant constant are
    implementation constants.
    """

    k: int
    tv_distance: Optional[float] = None
    samples: int = 0
    det_cov: Optional[float] = None
    delta_max: Optional[float] = None
    std_err: Optional[float] = None
    multiplicative_gap: Optional[float] = None
    log_det: Optional[float] = None
    bound_holds: Optional[bool] = None


@dataclass(frozen=True)
class KWaySummary:
    median_delta_max: float
    median_abs_log_det: float
    pass_fraction: float
    reports: Tuple[KWayReport, ...]


def _require_sgn(spec: NetworkSpec, operation: str):
    if spec.activation is not ActivationKind.SGN:
        raise UnsupportedOperationError(f"{operation} is defined for sgn networks, not {spec.activation.value}")


def halfspace_inputs(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points of {+-1}^n with coordinate 0 fixed to +1."""
    xs = np.where(rng.random((count, n)) < 0.5, -1.0, 1.0)
    xs[:, 0] = 1.0
    return xs


def all_halfspace_inputs(n: int) -> np.ndarray:
    if n > EXHAUSTIVE_MAX_N:
        raise ResourceLimitError(f"Exhaustive enumeration is limited to n <= {EXHAUSTIVE_MAX_N}")
    index = np.arange(2 ** (n - 1))[:, None]
    bits = (index >> np.arange(n - 1)[None, :]) & 1
    return np.hstack([np.ones((index.shape[0], 1)), np.where(bits == 1, 1.0, -1.0)])


def predicted_bound(n: int, depth: int) -> Tuple[float, float, float]:
    """(1/N + e^-h, e^-h, 1/N) with N = 2^(n-1); 1/N underflows to 0 for large n."""
    inverse_n = math.ldexp(1.0, -(n - 1))
    decay = math.exp(-depth)
    return inverse_n + decay, decay, inverse_n


def squared_correlation_estimate(products: np.ndarray) -> Tuple[float, float]:
    """Noise-corrected estimate of E_W[(E_x[g f])^2].

    Each row holds g(x) f(x) for one network. The squared row mean is biased
    up by Var/n_x, so the unbiased within-row variance over n_x is removed.
    """
    products = np.asarray(products, dtype=np.float64)
    if products.ndim != 2 or products.shape[1] < 2:
        raise InvalidArgumentError("Need a (networks, inputs) matrix with at least two inputs per row")
    n_x = products.shape[1]
    row_means = products.mean(axis=1)
    row_vars = products.var(axis=1, ddof=1)
    return mean_and_stderr(row_means**2 - row_vars / n_x)


def _teacher(spec: NetworkSpec, seed: SeedSpec, trial: int) -> Network:
    return sample_network(spec.with_seed(seed.spawn(0).spawn(trial)))


def sq_correlation(
    g: QueryFunction,
    spec: NetworkSpec,
    n_W: int,
    n_x: int,
    seed: SeedSpec,
    workers: int = 1,
) -> CorrelationReport:
    """Monte Carlo estimate of E_W[E_x[g(x) f_W(x)]^2] over the x_0 = +1 halfspace."""
    _require_sgn(spec, "sq_correlation")
    if n_W < SQ_MIN_NETWORKS:
        raise InvalidArgumentError(f"n_W must be at least {SQ_MIN_NETWORKS}")
    if n_x < SQ_MIN_INPUTS:
        raise InvalidArgumentError(f"n_x must be at least {SQ_MIN_INPUTS}")

    def trial(index: int) -> np.ndarray:
        teacher = _teacher(spec, seed, index)
        xs = halfspace_inputs(spec.input_dim, n_x, seed.spawn(1).spawn(index).generator())
        return g.evaluate(xs) * forward_batch(teacher, xs).labels

    products = np.array(map_trials(trial, n_W, workers))
    estimate, stderr = squared_correlation_estimate(products)
    bound, decay, inverse_n = predicted_bound(spec.input_dim, spec.depth)
    logger.info("SQ correlation %s h=%d: %.3e +- %.1e", g.describe(), spec.depth, estimate, stderr)
    return CorrelationReport(estimate, stderr, n_W, n_x, bound, spec.depth, decay, inverse_n)


def sq_correlation_exhaustive(g: QueryFunction, spec: NetworkSpec, n_W: int, seed: SeedSpec) -> CorrelationReport:
    """Exact inner expectation over every halfspace point; same teachers as sq_correlation."""
    _require_sgn(spec, "sq_correlation_exhaustive")
    xs = all_halfspace_inputs(spec.input_dim)
    g_values = g.evaluate(xs)
    squares = [
        np.mean(g_values * forward_batch(_teacher(spec, seed, index), xs).labels) ** 2
        for index in range(n_W)
    ]
    estimate, stderr = mean_and_stderr(squares)
    bound, decay, inverse_n = predicted_bound(spec.input_dim, spec.depth)
    return CorrelationReport(estimate, stderr, n_W, xs.shape[0], bound, spec.depth, decay, inverse_n)


def linear_chain(net: Network, x, depth: int) -> np.ndarray:
    """W^(depth) ... W^(1) x, the linear learner's state after ``depth`` layers."""
    if not 0 <= depth <= len(net.layers):
        raise InvalidArgumentError(f"depth must lie in [0, {len(net.layers)}]")
    z = np.asarray(x, dtype=np.float64)
    for weights in net.layers[:depth]:
        z = matvec(weights, z)
    return z


def _layer_correlations(net: Network, xs: np.ndarray) -> np.ndarray:
    spec = net.spec
    hidden = xs
    linear = xs
    correlations = []
    for weights in net.layers[: spec.depth]:
        pre = hidden @ weights.T
        linear = linear @ weights.T
        if spec.normalization is Normalization.ANALYTIC_RELU:
            hidden = analytic_bn(spec.activation, pre)
        else:
            hidden = activate(spec.activation, pre)
        numerator = np.mean(hidden * linear)
        correlations.append(numerator / math.sqrt(np.mean(hidden**2) * np.mean(linear**2)))
    return np.array(correlations)


def linear_learner_correlation(
    spec: NetworkSpec,
    n_x: int,
    n_W: int,
    seed: SeedSpec,
    workers: int = 1,
) -> LinearLearnerReport:
    """Normalized correlation between each layer's units and the linear chain.

    For sgn the depth-d value concentrates at gamma^d with gamma = sqrt(2/pi);
    the fitted factor is exp of the least-squares slope of log corr vs d.
    """
    if spec.activation is ActivationKind.RELU and spec.normalization is Normalization.ANALYTIC_RELU:
        logger.info("Linear learner on relu is exploratory; no reference factor applies")
    elif spec.activation is not ActivationKind.SGN:
        raise UnsupportedOperationError(
            f"Linear learner supports sgn and analytic relu, not {spec.activation.value}/{spec.normalization.value}"
        )
    if n_x < 2 or n_W < 2:
        raise InvalidArgumentError("Need at least two inputs and two networks")

    def trial(index: int) -> np.ndarray:
        net = _teacher(spec, seed, index)
        rng = seed.spawn(1).spawn(index).generator()
        xs = np.where(rng.random((n_x, spec.input_dim)) < 0.5, -1.0, 1.0)
        return _layer_correlations(net, xs)

    per_network = np.array(map_trials(trial, n_W, workers))
    means, stderrs = mean_and_stderr(per_network, axis=0)
    depths = np.arange(1, spec.depth + 1)
    positive = means > 0
    if np.count_nonzero(positive) >= 2:
        slope, _ = np.polyfit(depths[positive], np.log(means[positive]), 1)
        factor = math.exp(slope)
    else:
        factor = float("nan")
    gamma = GAMMA_SGN if spec.activation is ActivationKind.SGN else float("nan")
    logger.info("Linear learner n=%d h=%d: fitted factor %.4f", spec.input_dim, spec.depth, factor)
    return LinearLearnerReport(
        depths=tuple(int(d) for d in depths),
        corr=tuple(float(m) for m in means),
        std_err=tuple(float(s) for s in stderrs),
        fitted_factor=factor,
        gamma=gamma,
    )


def check_kway_inputs(spec: NetworkSpec, k: int, inputs) -> np.ndarray:
    xs = np.asarray(inputs, dtype=np.float64)
    if not 1 <= k <= KWAY_MAX_K:
        raise InvalidArgumentError(f"k must lie in [1, {KWAY_MAX_K}]")
    if xs.shape != (k, spec.input_dim):
        raise InvalidArgumentError(f"Expected {k} inputs of length {spec.input_dim}, got shape {xs.shape}")
    norms = np.linalg.norm(xs, axis=1)
    if np.any(norms == 0):
        raise InvalidArgumentError("Inputs must be nonzero")
    unit = xs / norms[:, None]
    gram = np.abs(unit @ unit.T)
    np.fill_diagonal(gram, 0.0)
    if np.any(gram >= 1.0 - COLLINEAR_TOLERANCE):
        raise InvalidArgumentError("Inputs must be pairwise non-collinear")
    return xs


def kway_tv(
    spec: NetworkSpec,
    k: int,
    inputs,
    samples: int,
    seed: SeedSpec,
    workers: int = 1,
) -> KWayReport:
    """Total-variation distance of the k output bits from uniform on {+-1}^k."""
    xs = check_kway_inputs(spec, k, inputs)
    minimum = KWAY_SAMPLES_PER_CELL * 2**k
    if samples < minimum:
        raise InvalidArgumentError(f"Need at least {minimum} samples for k={k}, got {samples}")
    weights = 2 ** np.arange(k)

    def trial(index: int) -> int:
        net = sample_network(spec.with_seed(seed.spawn(index)))
        bits = (forward_batch(net, xs).labels > 0).astype(np.int64)
        return int(bits @ weights)

    cells = np.bincount(map_trials(trial, samples, workers), minlength=2**k)
    p_hat = cells / samples
    uniform = 2.0**-k
    tv = 0.5 * float(np.abs(p_hat - uniform).sum())
    stderr = 0.5 * float(np.sqrt(p_hat * (1.0 - p_hat) / samples).sum())
    gap = float(np.max(np.abs(p_hat / uniform - 1.0)))
    logger.info("k-way TV k=%d h=%d: %.4f +- %.4f", k, spec.depth, tv, stderr)
    return KWayReport(k=k, tv_distance=tv, samples=samples, std_err=stderr, multiplicative_gap=gap)


def gram_determinant_check(gram: np.ndarray) -> KWayReport:
    """det(U), delta_max and the |log det U| <= C * delta_max * k^2 contract."""
    gram = np.asarray(gram, dtype=np.float64)
    k = gram.shape[0]
    off_diagonal = np.abs(gram[~np.eye(k, dtype=bool)])
    delta_max = float(off_diagonal.max()) if off_diagonal.size else 0.0
    sign, log_det = np.linalg.slogdet(gram)
    if sign <= 0 or not np.isfinite(log_det):
        logger.warning("Singular Gram matrix (k=%d, delta_max=%.3f)", k, delta_max)
        return KWayReport(k=k, det_cov=0.0, delta_max=delta_max, log_det=float("-inf"), bound_holds=False)
    holds = abs(log_det) <= KWAY_DET_CONSTANT * delta_max * k * k + 1e-12
    return KWayReport(
        k=k,
        det_cov=float(math.exp(log_det)),
        delta_max=delta_max,
        log_det=float(log_det),
        bound_holds=bool(holds),
    )


def kway_cov_check(spec: NetworkSpec, k: int, inputs, depth_probe: int, seed: SeedSpec) -> KWayReport:
    _require_sgn(spec, "kway_cov_check")
    if not 0 <= depth_probe <= spec.depth:
        raise InvalidArgumentError(f"depth_probe must lie in [0, {spec.depth}]")
    xs = check_kway_inputs(spec, k, inputs)
    net = sample_network(spec.with_seed(seed))
    return gram_determinant_check(layer_gram(net, xs, depth_probe))


def kway_cov_summary(
    spec: NetworkSpec,
    k: int,
    inputs,
    depth_probe: int,
    networks: int,
    seed: SeedSpec,
    workers: int = 1,
) -> KWaySummary:
    """Median delta_max and pass rate of kway_cov_check over many networks."""
    if networks < 1:
        raise InvalidArgumentError("networks must be positive")
    reports = map_trials(
        lambda index: kway_cov_check(spec, k, inputs, depth_probe, seed.spawn(index)),
        networks,
        workers,
    )
    return KWaySummary(
        median_delta_max=float(np.median([r.delta_max for r in reports])),
        median_abs_log_det=float(np.median([abs(r.log_det) for r in reports])),
        pass_fraction=float(np.mean([r.bound_holds for r in reports])),
        reports=tuple(reports),
    )


def random_sign_inputs(k: int, n: int, seed: SeedSpec, correlation: float = 0.0) -> np.ndarray:
    """k random +-1 inputs; with correlation > 0 each copies a shared base with that agreement bias."""
    if not 0.0 <= correlation < 1.0:
        raise InvalidArgumentError("correlation must lie in [0, 1)")
    rng = seed.generator()
    base = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    xs = np.where(rng.random((k, n)) < 0.5, -1.0, 1.0)
    keep = rng.random((k, n)) < correlation
    return np.where(keep, base[None, :], xs)
