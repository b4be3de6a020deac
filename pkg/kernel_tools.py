import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Tuple, Union

import numpy as np
from scipy.special import expit

from errors import InvalidArgumentError, UnsupportedOperationError
from rng_tools import SeedSpec, mean_and_stderr

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

_DOMAIN_TOLERANCE = 1e-12


class ActivationKind(str, Enum):
    SGN = "sgn"
    RELU = "relu"
    SIGMOID = "sigmoid"


@dataclass(frozen=True)
class ReluNormConstants:
    """Mean and variance of relu(Z) for a standard normal Z."""

    m: float = 1.0 / math.sqrt(2.0 * math.pi)
    s_squared: float = 0.5 - 1.0 / (2.0 * math.pi)

    @property
    def s(self) -> float:
        return math.sqrt(self.s_squared)


RELU_NORM = ReluNormConstants()


def _scalar_or_array(result: np.ndarray, template) -> ArrayLike:
    return float(result) if np.ndim(template) == 0 else result


def activate(kind: ActivationKind, x: ArrayLike) -> ArrayLike:
    """Apply an activation elementwise; sgn(0) is +1."""
    kind = ActivationKind(kind)
    values = np.asarray(x, dtype=np.float64)
    if kind is ActivationKind.SGN:
        result = np.where(values >= 0, 1.0, -1.0)
    elif kind is ActivationKind.RELU:
        result = np.maximum(values, 0.0)
    else:
        result = expit(values)
    return _scalar_or_array(result, x)


def _check_unit_interval(name: str, c: ArrayLike) -> np.ndarray:
    values = np.asarray(c, dtype=np.float64)
    if np.any(~np.isfinite(values)) or np.any(np.abs(values) > 1.0 + _DOMAIN_TOLERANCE):
        raise InvalidArgumentError(f"{name} must lie in [-1, 1]")
    return np.clip(values, -1.0, 1.0)


def mu(c: ArrayLike) -> ArrayLike:
    """Expected cosine after one sgn layer: (2/pi) * arcsin(c)."""
    values = _check_unit_interval("c", c)
    return _scalar_or_array(2.0 / np.pi * np.arcsin(values), c)


def mu_upper_bound_gap(x: ArrayLike) -> ArrayLike:
    """[1 - sqrt(2x)/pi] - mu(1 - x); nonnegative on [0, 1]."""
    values = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(values)) or np.any(values < 0) or np.any(values > 1):
        raise InvalidArgumentError("x must lie in [0, 1]")
    result = 1.0 - np.sqrt(2.0 * values) / np.pi - mu(1.0 - values)
    return _scalar_or_array(result, x)


def rho_for(mu0: float) -> float:
    """Tightest rho with |mu(c)| <= rho |c| on [-mu0, mu0].

    mu(c)/c increases on (0, 1), so the supremum sits at the endpoint.
    """
    if not 0.0 < mu0 < 1.0:
        raise InvalidArgumentError(f"mu0 must lie in (0, 1), got {mu0}")
    return mu(mu0) / mu0


def relu_plain_kernel(c0: ArrayLike) -> ArrayLike:
    """E[relu(x) relu(y)] for standard normals with correlation c0."""
    values = _check_unit_interval("c0", c0)
    theta = np.arccos(values)
    result = values / 2.0 - values * theta / (2.0 * np.pi) + np.sin(theta) / (2.0 * np.pi)
    return _scalar_or_array(result, c0)


def relu_bn_ratio(c0: ArrayLike) -> ArrayLike:
    """Ratio c1/c0 of the normalized relu kernel.

    Written as (pi - theta - cos(theta)/(1 + sin(theta)))/(pi - 1) with
    theta = arccos(c0), which avoids the tan - sec cancellation near pi/2.
    """
    values = _check_unit_interval("c0", c0)
    if np.any(values == 0):
        raise InvalidArgumentError("relu_bn_ratio is undefined at c0 = 0; use relu_bn_kernel")
    theta = np.arccos(values)
    result = (np.pi - theta - np.cos(theta) / (1.0 + np.sin(theta))) / (np.pi - 1.0)
    return _scalar_or_array(result, c0)


def relu_bn_ratio_limit() -> float:
    return (math.pi / 2.0) / (math.pi - 1.0)


def relu_bn_kernel(c0: ArrayLike) -> ArrayLike:
    """E[B(relu(x)) B(relu(y))], the cosine after one normalized relu layer."""
    values = _check_unit_interval("c0", c0)
    flat = np.atleast_1d(values)
    result = np.zeros_like(flat)
    nonzero = flat != 0
    if np.any(nonzero):
        result[nonzero] = flat[nonzero] * relu_bn_ratio(flat[nonzero])
    return _scalar_or_array(result.reshape(values.shape), c0)


def analytic_bn(kind: ActivationKind, v) -> np.ndarray:
    """Apply relu and the Gaussian-calibrated normalization B."""
    if ActivationKind(kind) is not ActivationKind.RELU:
        raise UnsupportedOperationError(f"Analytic normalization is only defined for relu, not {kind}")
    values = np.asarray(v, dtype=np.float64)
    return (np.maximum(values, 0.0) - RELU_NORM.m) / RELU_NORM.s


def correlated_gaussian_pairs(c0: float, samples: int, seed: SeedSpec) -> Tuple[np.ndarray, np.ndarray]:
    c0 = float(_check_unit_interval("c0", c0))
    if samples < 2:
        raise InvalidArgumentError("Need at least two samples")
    rng = seed.generator()
    x = rng.standard_normal(samples)
    noise = rng.standard_normal(samples)
    y = c0 * x + math.sqrt(max(0.0, 1.0 - c0 * c0)) * noise
    return x, y


def mc_relu_bn_kernel(c0: float, samples: int, seed: SeedSpec) -> Tuple[float, float]:
    """Monte Carlo mean and standard error of B(relu(x)) * B(relu(y))."""
    x, y = correlated_gaussian_pairs(c0, samples, seed)
    products = analytic_bn(ActivationKind.RELU, x) * analytic_bn(ActivationKind.RELU, y)
    return mean_and_stderr(products)


def mc_sign_kernel(c0: float, samples: int, seed: SeedSpec) -> Tuple[float, float]:
    """Monte Carlo mean and standard error of sgn(x) * sgn(y)."""
    x, y = correlated_gaussian_pairs(c0, samples, seed)
    products = activate(ActivationKind.SGN, x) * activate(ActivationKind.SGN, y)
    return mean_and_stderr(products)


def batch_normalize(values: np.ndarray, epsilon: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-column batch normalization; returns (normalized, mean, var)."""
    batch = np.asarray(values, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] < 2:
        raise InvalidArgumentError("Batch normalization needs a batch of at least two rows")
    mean = batch.mean(axis=0)
    var = batch.var(axis=0)
    return (batch - mean) / np.sqrt(var + epsilon), mean, var
