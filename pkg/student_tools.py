import logging
import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from config import (
    ADAM_BETAS,
    ADAM_EPSILON,
    BN_EPSILON,
    DEFAULT_MASTER_SEED,
    MOMENTUM_BETA,
    STUDENT_BATCH_SIZE,
    STUDENT_BN_MOMENTUM,
    STUDENT_LEARNING_RATE,
    TEACHER_CHUNK_SIZE,
    TRAIN_FRACTION,
)
from errors import InvalidArgumentError, TrainingDivergedError
from kernel_tools import ActivationKind
from network_tools import NetworkSpec, forward_batch, sample_network
from rng_tools import SeedSpec, map_trials, mean_and_stderr

logger = logging.getLogger(__name__)

_SPLIT_STREAM = 0x5B17


class OptimizerKind(str, Enum):
    SGD = "sgd"
    MOMENTUM = "momentum"
    ADAM = "adam"


@dataclass(frozen=True)
class Dataset:
    """Teacher-labeled inputs, uniform in [-0.5, 0.5]^n."""

    inputs: np.ndarray
    labels: np.ndarray
    teacher_spec: NetworkSpec
    seed: SeedSpec
    chunk_sizes: Tuple[int, ...] = ()

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int8)
        if inputs.ndim != 2 or inputs.shape[1] != self.teacher_spec.input_dim:
            raise InvalidArgumentError(f"Inputs must have {self.teacher_spec.input_dim} columns")
        if labels.shape != (inputs.shape[0],) or not np.all(np.abs(labels) == 1):
            raise InvalidArgumentError("Labels must be one +-1 value per input")
        if np.any(np.abs(inputs) > 0.5):
            raise InvalidArgumentError("Inputs must lie in [-0.5, 0.5]")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def positive_fraction(self) -> float:
        return float(np.mean(self.labels > 0))

    def split(self) -> Tuple[np.ndarray, np.ndarray]:
        """Train/test indices: 90/10 by position after a seeded shuffle."""
        order = self.seed.spawn(_SPLIT_STREAM).generator().permutation(self.size)
        cut = min(max(int(round(TRAIN_FRACTION * self.size)), 1), self.size - 1)
        return order[:cut], order[cut:]


@dataclass(frozen=True)
class StudentConfig:
    depth: int
    width: int
    learning_rate: float = STUDENT_LEARNING_RATE
    batch_size: int = STUDENT_BATCH_SIZE
    epochs: int = 10
    optimizer: OptimizerKind = OptimizerKind.ADAM
    momentum: float = MOMENTUM_BETA
    betas: Tuple[float, float] = ADAM_BETAS
    epsilon: float = ADAM_EPSILON
    batch_norm: bool = False
    seed: SeedSpec = field(default_factory=lambda: SeedSpec(DEFAULT_MASTER_SEED, 1))
    activation: ActivationKind = ActivationKind.RELU

    def __post_init__(self):
        try:
            object.__setattr__(self, "optimizer", OptimizerKind(self.optimizer))
        except ValueError as e:
            raise InvalidArgumentError(str(e)) from e
        if ActivationKind(self.activation) is not ActivationKind.RELU:
            raise InvalidArgumentError("Students always use relu hidden layers")
        for name in ("depth", "width", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be at least 1")
        # zero is allowed: it freezes the student, which tests rely on
        if not math.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise InvalidArgumentError("learning_rate must be a finite nonnegative number")
        if not 0.0 <= self.momentum < 1.0 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise InvalidArgumentError("Momentum coefficients must lie in [0, 1)")

    def settings(self) -> Dict[str, object]:
        return {
            "loss": "logistic",
            "optimizer": self.optimizer.value,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "betas": list(self.betas),
            "epsilon": self.epsilon,
            "momentum": self.momentum,
            "batch_norm": self.batch_norm,
        }


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    train_auc: float
    test_auc: float


@dataclass(frozen=True)
class TrainReport:
    epochs: Tuple[EpochMetrics, ...]
    final_test_auc: float
    wall_time: float
    settings: Dict[str, object]


@dataclass(frozen=True)
class CurvePoint:
    activation: str
    teacher_depth: int
    student_depth: int
    mean_auc: float
    std_err: float
    repeats_used: int
    diverged: int
    one_class: int = 0


def teacher_chunks(size: int) -> List[np.ndarray]:
    """Fixed chunking of dataset rows for teacher batch statistics.

    Chunks are balanced so none has fewer than two rows when size >= 2.
    """
    count = max(1, math.ceil(size / TEACHER_CHUNK_SIZE))
    return np.array_split(np.arange(size), count)


def label_with_teacher(spec: NetworkSpec, inputs: np.ndarray) -> np.ndarray:
    net = sample_network(spec)
    return np.concatenate([forward_batch(net, inputs[chunk]).labels for chunk in teacher_chunks(inputs.shape[0])])


def gen_dataset(teacher: NetworkSpec, N: int, seed: SeedSpec) -> Dataset:
    """Sample N uniform inputs in [-0.5, 0.5]^n and label them with the teacher."""
    if N < 2:
        raise InvalidArgumentError(f"N must be at least 2, got {N}")
    inputs = seed.generator().uniform(-0.5, 0.5, size=(N, teacher.input_dim))
    labels = label_with_teacher(teacher, inputs)
    sizes = tuple(len(chunk) for chunk in teacher_chunks(N))
    data = Dataset(inputs=inputs, labels=labels, teacher_spec=teacher, seed=seed, chunk_sizes=sizes)
    logger.debug("Dataset N=%d h=%d positive=%.3f", N, teacher.depth, data.positive_fraction)
    return data


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(labels) > 0
    if scores.shape != positive.shape:
        raise InvalidArgumentError("scores and labels must have the same length")
    n_pos = int(np.count_nonzero(positive))
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InvalidArgumentError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)
    u_statistic = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_statistic / (n_pos * n_neg))


def split_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """AUC of one split, NaN when the split holds a single class."""
    if np.all(labels > 0) or np.all(labels < 0):
        return float("nan")
    return auc(scores, labels)


def logistic_loss(scores: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, -labels * scores)))


class StudentNetwork:
    """Relu MLP with a single linear output, trained on logistic loss.

    Parameters are plain numpy arrays updated in place by the optimizers;
    gradients are derived by hand.
    """

    def __init__(self, input_dim: int, cfg: StudentConfig):
        rng = cfg.seed.spawn(0).generator()
        dims = [input_dim] + [cfg.width] * cfg.depth + [1]
        self.batch_norm = cfg.batch_norm
        self.weights = [
            rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            for fan_in, fan_out in zip(dims[:-1], dims[1:])
        ]
        self.biases = [np.zeros(fan_out) for fan_out in dims[1:]]
        hidden = cfg.depth if cfg.batch_norm else 0
        self.gammas = [np.ones(cfg.width) for _ in range(hidden)]
        self.betas = [np.zeros(cfg.width) for _ in range(hidden)]
        self.running_mean = [np.zeros(cfg.width) for _ in range(hidden)]
        self.running_var = [np.ones(cfg.width) for _ in range(hidden)]

    def parameters(self) -> List[np.ndarray]:
        return self.weights + self.biases + self.gammas + self.betas

    def _forward(self, xs: np.ndarray, training: bool, update_running: bool = False):
        activations = [xs]
        caches = []
        current = xs
        for index, (weights, bias) in enumerate(zip(self.weights[:-1], self.biases[:-1])):
            z = current @ weights + bias
            cache = {}
            if self.batch_norm:
                if training:
                    mean = z.mean(axis=0)
                    var = z.var(axis=0)
                    if update_running:
                        self.running_mean[index] = STUDENT_BN_MOMENTUM * self.running_mean[index] + (1 - STUDENT_BN_MOMENTUM) * mean
                        self.running_var[index] = STUDENT_BN_MOMENTUM * self.running_var[index] + (1 - STUDENT_BN_MOMENTUM) * var
                else:
                    mean, var = self.running_mean[index], self.running_var[index]
                inv_std = 1.0 / np.sqrt(var + BN_EPSILON)
                x_hat = (z - mean) * inv_std
                cache.update(x_hat=x_hat, inv_std=inv_std)
                z = self.gammas[index] * x_hat + self.betas[index]
            cache["pre_relu"] = z
            current = np.maximum(z, 0.0)
            caches.append(cache)
            activations.append(current)
        scores = (current @ self.weights[-1] + self.biases[-1])[:, 0]
        return scores, activations, caches

    def predict(self, xs: np.ndarray) -> np.ndarray:
        scores, _, _ = self._forward(xs, training=False)
        return scores

    def loss_and_gradients(self, xs: np.ndarray, labels: np.ndarray, update_running: bool = False):
        """Mean logistic loss and its gradient, aligned with parameters()."""
        batch = xs.shape[0]
        scores, activations, caches = self._forward(xs, training=True, update_running=update_running)
        loss = logistic_loss(scores, labels)
        d_scores = -labels * expit(-labels * scores) / batch

        grad_w = [None] * len(self.weights)
        grad_b = [None] * len(self.biases)
        grad_gamma = [None] * len(self.gammas)
        grad_beta = [None] * len(self.betas)

        delta = d_scores[:, None]
        grad_w[-1] = activations[-1].T @ delta
        grad_b[-1] = delta.sum(axis=0)
        d_act = delta @ self.weights[-1].T
        for index in reversed(range(len(self.weights) - 1)):
            cache = caches[index]
            d_pre = d_act * (cache["pre_relu"] > 0)
            if self.batch_norm:
                x_hat, inv_std = cache["x_hat"], cache["inv_std"]
                grad_gamma[index] = (d_pre * x_hat).sum(axis=0)
                grad_beta[index] = d_pre.sum(axis=0)
                d_hat = d_pre * self.gammas[index]
                d_pre = inv_std / batch * (
                    batch * d_hat - d_hat.sum(axis=0) - x_hat * (d_hat * x_hat).sum(axis=0)
                )
            grad_w[index] = activations[index].T @ d_pre
            grad_b[index] = d_pre.sum(axis=0)
            d_act = d_pre @ self.weights[index].T
        return loss, grad_w + grad_b + grad_gamma + grad_beta


class SGD:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]):
        for param, grad in zip(params, grads):
            param -= self.learning_rate * grad


class Momentum:
    def __init__(self, learning_rate: float, beta: float):
        self.learning_rate = learning_rate
        self.beta = beta
        self.velocity: Optional[List[np.ndarray]] = None

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]):
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        for param, grad, velocity in zip(params, grads, self.velocity):
            velocity *= self.beta
            velocity += grad
            param -= self.learning_rate * velocity


class Adam:
    def __init__(self, learning_rate: float, betas: Tuple[float, float], epsilon: float):
        self.learning_rate = learning_rate
        self.beta1, self.beta2 = betas
        self.epsilon = epsilon
        self.t = 0
        self.m: Optional[List[np.ndarray]] = None
        self.v: Optional[List[np.ndarray]] = None

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for param, grad, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            param -= self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.epsilon)


def make_optimizer(cfg: StudentConfig):
    if cfg.optimizer is OptimizerKind.SGD:
        return SGD(cfg.learning_rate)
    if cfg.optimizer is OptimizerKind.MOMENTUM:
        return Momentum(cfg.learning_rate, cfg.momentum)
    return Adam(cfg.learning_rate, cfg.betas, cfg.epsilon)


def train_student(data: Dataset, cfg: StudentConfig) -> TrainReport:
    """Mini-batch training of a relu student on the teacher's labels.

    Args:
        data (Dataset): Teacher-labeled examples, split 90/10 internally
        cfg (StudentConfig): Student topology and optimizer settings

    Returns:
        TrainReport: Per-epoch train loss, train AUC and test AUC
            (NaN for a split that holds a single class)
    """
    started = time.perf_counter()
    train_idx, test_idx = data.split()
    x_train, y_train = data.inputs[train_idx], data.labels[train_idx].astype(np.float64)
    x_test, y_test = data.inputs[test_idx], data.labels[test_idx].astype(np.float64)
    if np.unique(y_test).size < 2:
        logger.warning("Test split of %d examples holds a single class; test AUC is NaN", y_test.size)

    model = StudentNetwork(data.teacher_spec.input_dim, cfg)
    optimizer = make_optimizer(cfg)
    params = model.parameters()
    order_seed = cfg.seed.spawn(1)

    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = order_seed.spawn(epoch).generator().permutation(len(train_idx))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            loss, grads = model.loss_and_gradients(x_train[batch], y_train[batch], update_running=True)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch)
            optimizer.step(params, grads)

        train_scores = model.predict(x_train)
        train_loss = logistic_loss(train_scores, y_train)
        if not math.isfinite(train_loss) or not np.all(np.isfinite(train_scores)):
            raise TrainingDivergedError(epoch)
        test_scores = model.predict(x_test)
        metrics = EpochMetrics(
            epoch=epoch,
            train_loss=train_loss,
            train_auc=split_auc(train_scores, y_train),
            test_auc=split_auc(test_scores, y_test),
        )
        logger.debug("Epoch %d: loss=%.4f train_auc=%.4f test_auc=%.4f", *vars(metrics).values())
        history.append(metrics)

    return TrainReport(
        epochs=tuple(history),
        final_test_auc=history[-1].test_auc,
        wall_time=time.perf_counter() - started,
        settings=cfg.settings(),
    )


def curve_dataset(teacher_base: NetworkSpec, depth: int, repeat: int, N: int, seed: SeedSpec) -> Dataset:
    """Dataset for one (depth, repeat) cell of a learnability curve."""
    teacher = teacher_base.with_depth(depth).with_seed(seed.spawn(0).spawn(depth).spawn(repeat))
    return gen_dataset(teacher, N, seed.spawn(1).spawn(depth).spawn(repeat))


def learnability_curve(
    teacher_base: NetworkSpec,
    depths: Sequence[int],
    N: int,
    student_cfg: StudentConfig,
    repeats: int,
    seed: SeedSpec,
    depth_offsets: Sequence[int] = (0,),
    workers: int = 1,
) -> List[CurvePoint]:
    """Mean final test AUC per teacher depth (and student depth offset).

    Repeats that diverge or whose test split holds a single class are left
    out of the mean and counted in ``diverged`` and ``one_class``.
    """
    if not depths:
        raise InvalidArgumentError("depths must be nonempty")
    if repeats < 1:
        raise InvalidArgumentError("repeats must be at least 1")
    if any(offset < 0 for offset in depth_offsets):
        raise InvalidArgumentError("Student depth offsets must be nonnegative")
    cells = [(depth, repeat) for depth in depths for repeat in range(repeats)]

    def run_cell(index: int) -> Dict[int, Optional[float]]:
        depth, repeat = cells[index]
        data = curve_dataset(teacher_base, depth, repeat, N, seed)
        results = {}
        for offset in depth_offsets:
            cfg = replace(
                student_cfg,
                depth=depth + offset,
                seed=student_cfg.seed.spawn(depth).spawn(repeat),
            )
            try:
                results[offset] = train_student(data, cfg).final_test_auc
            except TrainingDivergedError as e:
                logger.warning("Student diverged (teacher h=%d, repeat %d, epoch %d); excluded", depth, repeat, e.epoch)
                results[offset] = None
        logger.info("Teacher %s h=%d repeat %d: %s", teacher_base.activation.value, depth, repeat, results)
        return results

    outcomes = map_trials(run_cell, len(cells), workers)
    points = []
    for depth in depths:
        for offset in depth_offsets:
            values = [
                outcome[offset]
                for (cell_depth, _), outcome in zip(cells, outcomes)
                if cell_depth == depth
            ]
            finished = [v for v in values if v is not None and math.isfinite(v)]
            one_class = sum(1 for v in values if v is not None and not math.isfinite(v))
            if finished:
                mean, stderr = mean_and_stderr(finished)
            else:
                mean, stderr = float("nan"), float("nan")
            points.append(
                CurvePoint(
                    activation=teacher_base.activation.value,
                    teacher_depth=depth,
                    student_depth=depth + offset,
                    mean_auc=mean,
                    std_err=stderr,
                    repeats_used=len(finished),
                    diverged=len(values) - len(finished) - one_class,
                    one_class=one_class,
                )
            )
    return points
