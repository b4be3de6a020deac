import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import gammaln, xlog1py, xlogy

from config import (
    CHAIN_BLOCK_SIZE,
    DEFAULT_MASTER_SEED,
    DOMINANCE_MAX_N,
    EXACT_CHAIN_MAX_N,
    EXACT_NOISE_FLOOR,
    MIXING_ESCAPE_THRESHOLD,
    MU0,
    PHI_CHECK_MAX_N,
    PHI_TOLERANCE,
)
from errors import FitInfeasibleError, InvalidArgumentError, ResourceLimitError
from kernel_tools import mu, rho_for
from rng_tools import SeedSpec, map_trials

logger = logging.getLogger(__name__)

_PROBABILITY_TOLERANCE = 1e-12
# rounding allowed per exact step: 1e-10 over 100 steps
_DRIFT_PER_STEP = 1e-12
_DOMINANCE_TOLERANCE = 1e-12


def support_values(n: int) -> np.ndarray:
    """Values (2k - n)/n of an average of n signs, k = 0..n."""
    return (2.0 * np.arange(n + 1) - n) / n


@dataclass(frozen=True)
class SupportDistribution:
    """Law of the cosine on the (n+1)-point lattice."""

    n: int
    probs: np.ndarray
    tolerance: float = field(default=_PROBABILITY_TOLERANCE, repr=False, compare=False)

    def __post_init__(self):
        if self.n < 1:
            raise InvalidArgumentError("n must be positive")
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.shape != (self.n + 1,):
            raise InvalidArgumentError(f"Expected {self.n + 1} probabilities, got {probs.shape}")
        if np.any(probs < -self.tolerance) or abs(probs.sum() - 1.0) > self.tolerance:
            raise InvalidArgumentError("Probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "probs", np.clip(probs, 0.0, None))

    @property
    def values(self) -> np.ndarray:
        return support_values(self.n)

    def mean(self) -> float:
        return float(self.probs @ self.values)

    def mass_outside(self, radius: float) -> float:
        return float(self.probs[np.abs(self.values) > radius + 1e-12].sum())

    @staticmethod
    def snap_index(n: int, c: float) -> int:
        if abs(c) > 1.0:
            raise InvalidArgumentError(f"c must lie in [-1, 1], got {c}")
        return int(np.clip(np.rint((c + 1.0) * n / 2.0), 0, n))

    @classmethod
    def point_mass(cls, n: int, c: float) -> "SupportDistribution":
        """Point mass at the support value nearest to c."""
        probs = np.zeros(n + 1)
        probs[cls.snap_index(n, c)] = 1.0
        return cls(n=n, probs=probs)

    @classmethod
    def mixture(cls, n: int, weights: Sequence[Tuple[float, float]]) -> "SupportDistribution":
        """Mixture of point masses given as (value, weight) pairs."""
        probs = np.zeros(n + 1)
        for value, weight in weights:
            probs[cls.snap_index(n, value)] += weight
        return cls(n=n, probs=probs)


@dataclass(frozen=True)
class ChainConfig:
    n: int
    c0: float
    steps: int
    trials: int = 1
    seed: SeedSpec = field(default_factory=lambda: SeedSpec(DEFAULT_MASTER_SEED))
    mu0: float = MU0
    workers: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise InvalidArgumentError("n must be positive")
        if not -1.0 <= self.c0 <= 1.0:
            raise InvalidArgumentError(f"c0 must lie in [-1, 1], got {self.c0}")
        if self.steps < 1:
            raise InvalidArgumentError("steps must be at least 1")
        if self.trials < 1:
            raise InvalidArgumentError("trials must be at least 1")
        if not 0.0 < self.mu0 < 1.0:
            raise InvalidArgumentError("mu0 must lie in (0, 1)")


@dataclass(frozen=True)
class ChainStep:
    step: int
    mean_c: float
    std_err: float
    mean_abs_c: float
    sink_fraction: float


@dataclass(frozen=True)
class DecayFit:
    """Least-squares fit log|E[c_i]| = log_intercept + i * log(rate)."""

    rate: float
    log_intercept: float
    layers_used: Tuple[int, ...]
    residual: float


@dataclass(frozen=True)
class MixingReport:
    snapped_c0: float
    d_hat: int
    fit: DecayFit
    expected_c: Tuple[float, ...]
    rate_within_bound: bool


@dataclass(frozen=True)
class PhiStep:
    step: int
    phi: float
    ratio: Optional[float]
    escaped_mass: float
    mean_c: float
    bound_holds: bool


def _binomial_pmf(n: int, prob: np.ndarray) -> np.ndarray:
    """Binomial(n, prob) pmf for each prob (rows) over k = 0..n (columns)."""
    k = np.arange(n + 1, dtype=np.float64)
    prob = np.clip(np.atleast_1d(np.asarray(prob, dtype=np.float64)), 0.0, 1.0)[:, None]
    log_pmf = (
        gammaln(n + 1.0)
        - gammaln(k + 1.0)
        - gammaln(n - k + 1.0)
        + xlogy(k, prob)
        + xlog1py(n - k, -prob)
    )
    return np.exp(log_pmf)


def transition_matrix(n: int) -> np.ndarray:
    """Row v holds the law of Bern(n, mu(v)) on the support lattice."""
    if n > EXACT_CHAIN_MAX_N:
        raise ResourceLimitError(f"Exact chain is limited to n <= {EXACT_CHAIN_MAX_N}, got {n}")
    pmf = _binomial_pmf(n, (1.0 + mu(support_values(n))) / 2.0)
    return pmf / pmf.sum(axis=1, keepdims=True)


def bern_sample(n: int, p: float, seed: SeedSpec) -> float:
    """Average of n independent +-1 variables with mean p."""
    if not -1.0 <= p <= 1.0:
        raise InvalidArgumentError(f"p must lie in [-1, 1], got {p}")
    if n < 1:
        raise InvalidArgumentError("n must be positive")
    successes = seed.generator().binomial(n, (1.0 + p) / 2.0)
    return (2.0 * successes - n) / n


def _simulate_block(cfg: ChainConfig, block: int) -> np.ndarray:
    size = min(CHAIN_BLOCK_SIZE, cfg.trials - block * CHAIN_BLOCK_SIZE)
    rng = cfg.seed.spawn(block).generator()
    c = np.full(size, float(cfg.c0))
    # columns: sum, sum of squares, sum of |c|, sink count
    totals = np.zeros((cfg.steps + 1, 4))
    for step in range(cfg.steps + 1):
        if step > 0:
            successes = rng.binomial(cfg.n, (1.0 + mu(c)) / 2.0)
            c = (2.0 * successes - cfg.n) / cfg.n
        totals[step] = (c.sum(), (c * c).sum(), np.abs(c).sum(), np.count_nonzero(np.abs(c) == 1.0))
    return totals


def simulate_chain(cfg: ChainConfig) -> List[ChainStep]:
    """Monte Carlo trajectories c_{i+1} = Bern(n, mu(c_i)).

    Trials run in fixed-size blocks with one stream per block, and block
    totals are summed in block order, so the statistics do not depend on
    the worker count.
    """
    blocks = math.ceil(cfg.trials / CHAIN_BLOCK_SIZE)
    logger.info("Simulating chain n=%d c0=%.4f steps=%d trials=%d", cfg.n, cfg.c0, cfg.steps, cfg.trials)
    partials = map_trials(lambda block: _simulate_block(cfg, block), blocks, cfg.workers)
    totals = np.zeros_like(partials[0])
    for partial in partials:
        totals += partial
    count = cfg.trials
    steps = []
    for step, (total, total_sq, total_abs, sinks) in enumerate(totals):
        mean = total / count
        if count > 1:
            variance = max(0.0, (total_sq - count * mean * mean) / (count - 1))
            stderr = math.sqrt(variance / count)
        else:
            stderr = 0.0
        steps.append(
            ChainStep(
                step=step,
                mean_c=float(mean),
                std_err=float(stderr),
                mean_abs_c=float(total_abs / count),
                sink_fraction=float(sinks / count),
            )
        )
    return steps


def exact_chain(n: int, initial: SupportDistribution, steps: int) -> List[SupportDistribution]:
    """Distributions of c_0..c_steps, evolved exactly on the lattice."""
    if initial.n != n:
        raise InvalidArgumentError(f"Initial distribution lives on n={initial.n}, not {n}")
    if steps < 0:
        raise InvalidArgumentError("steps must be nonnegative")
    transition = transition_matrix(n)
    dists = [initial]
    probs = initial.probs
    for step in range(1, steps + 1):
        probs = probs @ transition
        dists.append(SupportDistribution(n=n, probs=probs, tolerance=_PROBABILITY_TOLERANCE + step * _DRIFT_PER_STEP))
    return dists


def phi(dist: SupportDistribution) -> float:
    """Asymmetry functional: sum over v > 0 of v * |P(v) - P(-v)|."""
    values = dist.values
    probs = dist.probs
    positive = np.nonzero(values > 0)[0]
    mirrored = dist.n - positive
    return float(np.sum(values[positive] * np.abs(probs[positive] - probs[mirrored])))


def check_phi_contraction(
    n: int, initial: SupportDistribution, steps: int, mu0: float = MU0
) -> List[PhiStep]:
    """Evolve the chain conditioned on |c| <= mu0 and track Phi.

    Mass leaving [-mu0, mu0] is dropped and reported, and the rest is
    renormalized. Each step checks Phi_{i+1} <= rho_for(mu0) * Phi_i.
    """
    if n > PHI_CHECK_MAX_N:
        raise ResourceLimitError(f"Phi check is limited to n <= {PHI_CHECK_MAX_N}, got {n}")
    if initial.n != n:
        raise InvalidArgumentError(f"Initial distribution lives on n={initial.n}, not {n}")
    if initial.mass_outside(mu0) > 0:
        raise InvalidArgumentError(f"Initial distribution has mass outside [-{mu0}, {mu0}]")
    rho = rho_for(mu0)
    transition = transition_matrix(n)
    inside = np.abs(support_values(n)) <= mu0 + 1e-12

    current = initial
    previous_phi = phi(current)
    rows = [PhiStep(0, previous_phi, None, 0.0, current.mean(), True)]
    for step in range(1, steps + 1):
        probs = current.probs @ transition
        escaped = float(probs[~inside].sum())
        probs[~inside] = 0.0
        remaining = probs.sum()
        if remaining <= 0:
            raise InvalidArgumentError(f"All mass escaped [-{mu0}, {mu0}] at step {step}")
        current = SupportDistribution(n=n, probs=probs / remaining)
        current_phi = phi(current)
        ratio = current_phi / previous_phi if previous_phi > 1e-14 else None
        holds = current_phi <= rho * previous_phi + PHI_TOLERANCE
        if not holds:
            logger.warning("Phi contraction violated at step %d: %.3e > %.3f * %.3e", step, current_phi, rho, previous_phi)
        rows.append(PhiStep(step, current_phi, ratio, escaped, current.mean(), holds))
        previous_phi = current_phi
    return rows


def fit_decay(
    steps: Sequence[int],
    values: Sequence[float],
    noise: Optional[Sequence[float]] = None,
    floor: float = 10 * EXACT_NOISE_FLOOR,
) -> DecayFit:
    """Fit |values| ~ A * rate^step on the points above the noise floor.

    Exact sequences pass a numeric ``floor``; simulated ones pass their
    standard errors as ``noise`` and keep points above three of them.
    """
    steps = np.asarray(steps, dtype=np.float64)
    magnitudes = np.abs(np.asarray(values, dtype=np.float64))
    usable = magnitudes > floor
    if noise is not None:
        usable &= magnitudes > 3.0 * np.asarray(noise, dtype=np.float64)
    if np.count_nonzero(usable) < 3:
        raise FitInfeasibleError(f"Only {np.count_nonzero(usable)} usable points for a decay fit")
    x = steps[usable]
    y = np.log(magnitudes[usable])
    slope, intercept = np.polyfit(x, y, 1)
    rate = math.exp(slope)
    if not 0.0 < rate < 1.05:
        raise FitInfeasibleError(f"Fitted rate {rate:.4f} shows no decay")
    residual = float(np.sqrt(np.mean((y - (intercept + slope * x)) ** 2)))
    return DecayFit(
        rate=rate,
        log_intercept=float(intercept),
        layers_used=tuple(int(s) for s in x),
        residual=residual,
    )


def mixing_report(cfg: ChainConfig) -> MixingReport:
    """Burn-in length d_hat and the exponential decay rate after it."""
    if abs(cfg.c0) >= 1.0:
        raise InvalidArgumentError("c0 = +-1 is a sink state")
    initial = SupportDistribution.point_mass(cfg.n, cfg.c0)
    snapped = float(initial.values[initial.probs.argmax()])
    if abs(snapped) >= 1.0:
        raise InvalidArgumentError(f"c0 = {cfg.c0} snaps to a sink state at n = {cfg.n}")
    dists = exact_chain(cfg.n, initial, cfg.steps)
    escape = [dist.mass_outside(cfg.mu0) for dist in dists]
    d_hat = next((i for i, mass in enumerate(escape) if mass < MIXING_ESCAPE_THRESHOLD), None)
    if d_hat is None:
        raise FitInfeasibleError(f"Chain never settled inside [-{cfg.mu0}, {cfg.mu0}] in {cfg.steps} steps")
    expected = [dist.mean() for dist in dists]
    fit = fit_decay(range(d_hat, cfg.steps + 1), expected[d_hat:])
    bound = rho_for(cfg.mu0) + 0.05
    if fit.rate > bound:
        logger.warning("Fitted rate %.4f exceeds rho + 0.05 = %.4f", fit.rate, bound)
    logger.info("Mixing n=%d c0=%.4f: d_hat=%d rate=%.4f", cfg.n, snapped, d_hat, fit.rate)
    return MixingReport(
        snapped_c0=snapped,
        d_hat=d_hat,
        fit=fit,
        expected_c=tuple(expected),
        rate_within_bound=fit.rate <= bound,
    )


def _abs_bern_tail(n: int, p: float) -> Tuple[np.ndarray, np.ndarray]:
    pmf = _binomial_pmf(n, np.array([(1.0 + p) / 2.0]))[0]
    magnitudes = np.abs(2 * np.arange(n + 1) - n)
    levels = np.unique(magnitudes)
    masses = np.array([pmf[magnitudes == level].sum() for level in levels])
    tail = np.cumsum(masses[::-1])[::-1]
    return levels / n, tail


def dominance_oracle(n: int, p: float, q: float) -> bool:
    """Whether |Bern(n, q)| stochastically dominates |Bern(n, p)|."""
    if n < 1:
        raise InvalidArgumentError("n must be positive")
    if n > DOMINANCE_MAX_N:
        raise ResourceLimitError(f"Dominance oracle is limited to n <= {DOMINANCE_MAX_N}")
    if not (0.0 <= p <= 1.0 and 0.0 <= q <= 1.0):
        raise InvalidArgumentError("p and q must lie in [0, 1]")
    _, tail_p = _abs_bern_tail(n, p)
    _, tail_q = _abs_bern_tail(n, q)
    return bool(np.all(tail_q >= tail_p - _DOMINANCE_TOLERANCE))


def _signed_sum_distribution(biases: Sequence[float]) -> np.ndarray:
    """P[Y = 2j - m] for j = 0..m, Y a sum of +-1 variables with the given means."""
    dist = np.array([1.0])
    for bias in biases:
        dist = np.convolve(dist, [(1.0 - bias) / 2.0, (1.0 + bias) / 2.0])
    return dist


def asymmetry_lemma_check(biases: Sequence[float], k: int, l: int) -> bool:
    """Whether P[Y = -k - l] <= P[Y = k - l] for Y a sum of nonnegatively biased signs."""
    if len(biases) > DOMINANCE_MAX_N:
        raise ResourceLimitError(f"At most {DOMINANCE_MAX_N} biases are supported")
    if any(not 0.0 <= bias <= 1.0 for bias in biases):
        raise InvalidArgumentError("Biases must lie in [0, 1]")
    if k < 1 or l < 0:
        raise InvalidArgumentError("Need k >= 1 and l >= 0")
    dist = _signed_sum_distribution(biases)
    m = len(biases)

    def prob(total: int) -> float:
        if (total + m) % 2 or abs(total) > m:
            return 0.0
        return float(dist[(total + m) // 2])

    return prob(-k - l) <= prob(k - l) + _DOMINANCE_TOLERANCE
