import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple, TypeVar

import numpy as np

from errors import InvalidArgumentError

logger = logging.getLogger(__name__)

T = TypeVar("T")

_UINT64_LIMIT = 2**64


@dataclass(frozen=True)
class SeedSpec:
    """Key of one deterministic random stream.

    The stream is a Philox4x64 counter-based generator keyed by
    (master_seed, stream_id), so two specs with the same pair always replay
    the same sequence and distinct keys give independent streams.
    """

    master_seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("master_seed", "stream_id"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise InvalidArgumentError(f"{name} must be an integer, got {value!r}")
            if not 0 <= int(value) < _UINT64_LIMIT:
                raise InvalidArgumentError(f"{name} must fit in 64 unsigned bits")
            object.__setattr__(self, name, int(value))

    def generator(self) -> np.random.Generator:
        key = np.array([self.master_seed, self.stream_id], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def spawn(self, index: int) -> "SeedSpec":
        """Child stream for trial/layer ``index`` under this stream."""
        if index < 0:
            raise InvalidArgumentError("spawn index must be nonnegative")
        derived = np.random.SeedSequence(
            [self.master_seed, self.stream_id, int(index)]
        ).generate_state(1, dtype=np.uint64)[0]
        return SeedSpec(self.master_seed, int(derived))


def _check_count(name: str, value: int) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise InvalidArgumentError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def as_vector(values) -> np.ndarray:
    vector = np.asarray(values, dtype=np.float64)
    if vector.ndim != 1:
        raise InvalidArgumentError(f"Expected a vector, got shape {vector.shape}")
    if not np.all(np.isfinite(vector)):
        raise InvalidArgumentError("Vector entries must be finite")
    return vector


def as_matrix(values) -> np.ndarray:
    matrix = np.asarray(values, dtype=np.float64)
    if matrix.ndim != 2 or 0 in matrix.shape:
        raise InvalidArgumentError(f"Expected a nonempty matrix, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise InvalidArgumentError("Matrix entries must be finite")
    return matrix


def gaussian_matrix(rows: int, cols: int, variance: float, seed: SeedSpec) -> np.ndarray:
    """Sample a rows x cols matrix of i.i.d. N(0, variance) entries.

    Args:
        rows (int): Number of rows
        cols (int): Number of columns
        variance (float): Entry variance, strictly positive
        seed (SeedSpec): Stream the entries are drawn from

    Returns:
        np.ndarray: float64 matrix, identical for identical arguments
    """
    rows = _check_count("rows", rows)
    cols = _check_count("cols", cols)
    if not np.isfinite(variance) or variance <= 0:
        raise InvalidArgumentError(f"variance must be positive, got {variance}")
    return seed.generator().normal(0.0, np.sqrt(variance), size=(rows, cols))


def matvec(m, v) -> np.ndarray:
    matrix = as_matrix(m)
    vector = as_vector(v)
    if matrix.shape[1] != vector.shape[0]:
        raise InvalidArgumentError(
            f"Dimension mismatch: matrix has {matrix.shape[1]} columns, vector has {vector.shape[0]} entries"
        )
    return matrix @ vector


def cosine(x, y) -> float:
    """Cosine similarity, clamped to [-1, 1] against rounding."""
    x = as_vector(x)
    y = as_vector(y)
    if x.shape != y.shape:
        raise InvalidArgumentError("Vectors must have the same length")
    norm_x = np.linalg.norm(x)
    norm_y = np.linalg.norm(y)
    if norm_x == 0 or norm_y == 0:
        raise InvalidArgumentError("Cosine is undefined for a zero vector")
    return float(np.clip(np.dot(x, y) / (norm_x * norm_y), -1.0, 1.0))


def row_cosines(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Row-wise cosine of two equally shaped batches."""
    norms = np.linalg.norm(xs, axis=1) * np.linalg.norm(ys, axis=1)
    if np.any(norms == 0):
        raise InvalidArgumentError("Cosine is undefined for a zero vector")
    return np.clip(np.einsum("ij,ij->i", xs, ys) / norms, -1.0, 1.0)


def map_trials(fn: Callable[[int], T], count: int, workers: int = 1) -> List[T]:
    """Apply ``fn`` to trial indices 0..count-1, results in index order."""
    if workers <= 1 or count <= 1:
        return [fn(index) for index in range(count)]
    logger.debug("Dispatching %d trials over %d workers", count, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))


def mean_and_stderr(values: Sequence, axis: int = 0) -> Tuple:
    """Sample mean and standard error along ``axis`` (ddof=1)."""
    data = np.asarray(values, dtype=np.float64)
    count = data.shape[axis]
    if count == 0:
        raise InvalidArgumentError("Cannot average an empty sample")
    mean = data.mean(axis=axis)
    if count == 1:
        stderr = np.zeros_like(mean)
    else:
        stderr = data.std(axis=axis, ddof=1) / np.sqrt(count)
    if np.ndim(mean) == 0:
        return float(mean), float(stderr)
    return mean, stderr
