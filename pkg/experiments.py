import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from chain_tools import (
    ChainConfig,
    SupportDistribution,
    asymmetry_lemma_check,
    check_phi_contraction,
    dominance_oracle,
    exact_chain,
    fit_decay,
    mixing_report,
    simulate_chain,
)
from config import (
    ARTIFACT_VERSION,
    CSV_FLOAT_FORMAT,
    DEFAULT_MASTER_SEED,
    DESK_DEPTHS,
    DESK_EXAMPLES,
    DESK_INPUT_DIM,
    DESK_REPEATS,
    DESK_TEACHER_WIDTH,
    DOMINANCE_MAX_N,
    EXACT_CHAIN_MAX_N,
    GAMMA_SGN,
    KWAY_MAX_K,
    KWAY_SAMPLES_PER_CELL,
    MANIFEST_FILENAME,
    MU0,
    OUTPUT_DIR,
    OUTPUT_DIR_ENV,
    PHI_CHECK_MAX_N,
    SCHEMA_VERSION,
    SQ_MIN_INPUTS,
    SQ_MIN_NETWORKS,
    STUDENT_BATCH_SIZE,
    STUDENT_LEARNING_RATE,
    SUMMARY_FILENAME,
)
from correlation_tools import (
    EXHAUSTIVE_MAX_N,
    QueryFunction,
    QueryKind,
    check_kway_inputs,
    kway_cov_summary,
    kway_tv,
    linear_learner_correlation,
    random_sign_inputs,
    sq_correlation,
    sq_correlation_exhaustive,
)
from dataset_io import write_dataset
from errors import ConfigError, FitInfeasibleError, InvalidArgumentError, ResourceLimitError
from kernel_tools import (
    ActivationKind,
    mc_relu_bn_kernel,
    mc_sign_kernel,
    mu,
    relu_bn_kernel,
    relu_bn_ratio,
    relu_bn_ratio_limit,
)
from network_tools import (
    NetworkSpec,
    Normalization,
    default_normalization,
    empirical_decay,
    iterated_kernel,
    pair_at_cosine,
)
from rng_tools import SeedSpec
from student_tools import Dataset, OptimizerKind, StudentConfig, curve_dataset, learnability_curve

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_REQUIRED = object()
_CONFIG_KEYS = ("experiment", "params", "master_seed", "output_dir")


@dataclass(frozen=True)
class Param:
    kind: type
    default: Any = _REQUIRED
    item: Optional[type] = None


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    params: Dict[str, Any]
    master_seed: int = DEFAULT_MASTER_SEED
    output_dir: Path = OUTPUT_DIR

    def echo(self) -> Dict[str, Any]:
        return {
            "experiment": self.experiment,
            "params": self.params,
            "master_seed": self.master_seed,
            "output_dir": str(self.output_dir),
        }


@dataclass
class ExperimentResult:
    tables: Dict[str, pd.DataFrame]
    summary: Dict[str, Any]
    datasets: Dict[str, Dataset] = field(default_factory=dict)


@dataclass(frozen=True)
class RunManifest:
    config: Dict[str, Any]
    artifact_version: str
    schema_version: int
    started_at: str
    finished_at: str
    checksums: Dict[str, str]

    def to_json(self) -> Dict[str, Any]:
        return {
            "config": self.config,
            "artifact_version": self.artifact_version,
            "schema_version": self.schema_version,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "files": self.checksums,
        }


Preparer = Callable[[Dict[str, Any], SeedSpec], Callable[[], ExperimentResult]]


@dataclass(frozen=True)
class Experiment:
    """A named experiment: parameter schema, frozen CSV columns and a preparer.

    The preparer validates everything and returns the work as a thunk, so
    a bad config fails before any output exists.
    """

    name: str
    params: Dict[str, Param]
    tables: Dict[str, Tuple[str, ...]]
    prepare: Preparer


# ---------------------------------------------------------------- parameters


def _coerce(name: str, value: Any, kind: type) -> Any:
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"Parameter '{name}' must be a finite number, got {value!r}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"Parameter '{name}' must be an integer, got {value!r}")
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"Parameter '{name}' must be true or false, got {value!r}")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"Parameter '{name}' must be a string, got {value!r}")
        return value
    raise ConfigError(f"Unsupported parameter type for '{name}'")


def parse_params(schema: Dict[str, Param], raw: Dict[str, Any]) -> Dict[str, Any]:
    """Type-check raw config params against a schema and fill in defaults."""
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"Unknown parameters: {', '.join(unknown)}")
    params = {}
    for name, param in schema.items():
        if name not in raw:
            if param.default is _REQUIRED:
                raise ConfigError(f"Missing required parameter '{name}'")
            params[name] = param.default
            continue
        value = raw[name]
        if value is None and param.default is None:
            params[name] = None
        elif param.kind is list:
            if not isinstance(value, list):
                raise ConfigError(f"Parameter '{name}' must be a list")
            if param.item is list:
                if any(not isinstance(entry, list) for entry in value):
                    raise ConfigError(f"Parameter '{name}' must be a list of lists")
                params[name] = [[_coerce(name, v, float) for v in entry] for entry in value]
            else:
                params[name] = [_coerce(name, v, param.item) for v in value]
        else:
            params[name] = _coerce(name, value, param.kind)
    return params


def _check_workers(params: Dict[str, Any]):
    if params.get("workers", 1) < 1:
        raise InvalidArgumentError("workers must be at least 1")


def _activation(name: str) -> ActivationKind:
    try:
        return ActivationKind(name)
    except ValueError as e:
        raise InvalidArgumentError(f"Unknown activation '{name}'") from e


# ---------------------------------------------------------------- experiments


def _prepare_mixing(p: Dict[str, Any], seed: SeedSpec):
    _check_workers(p)
    n = p["n"]
    if n < 1:
        raise InvalidArgumentError("n must be positive")
    if n > EXACT_CHAIN_MAX_N:
        raise ResourceLimitError(f"Exact chain is limited to n <= {EXACT_CHAIN_MAX_N}, got {n}")
    if abs(p["c0"]) >= 1.0:
        raise InvalidArgumentError("c0 = +-1 is a sink state")
    initial = SupportDistribution.point_mass(n, p["c0"])
    snapped = float(initial.values[initial.probs.argmax()])
    if abs(snapped) >= 1.0:
        raise InvalidArgumentError(f"c0 = {p['c0']} snaps to a sink state at n = {n}")
    cfg = ChainConfig(
        n=n, c0=snapped, steps=p["steps"], trials=p["trials"], seed=seed, mu0=p["mu0"], workers=p["workers"]
    )

    def execute() -> ExperimentResult:
        simulated = simulate_chain(cfg)
        exact = exact_chain(n, initial, cfg.steps)
        frame = pd.DataFrame(
            {
                "step": [s.step for s in simulated],
                "mean_c": [s.mean_c for s in simulated],
                "std_err": [s.std_err for s in simulated],
                "mean_abs_c": [s.mean_abs_c for s in simulated],
                "exact_mean_c": [dist.mean() for dist in exact],
            }
        )
        report = mixing_report(cfg)
        summary = {
            "snapped_c0": report.snapped_c0,
            "d_hat": report.d_hat,
            "fitted_rate": report.fit.rate,
            "fit_layers": list(report.fit.layers_used),
            "rate_within_bound": report.rate_within_bound,
            "final_sink_fraction": simulated[-1].sink_fraction,
        }
        return ExperimentResult(tables={"chain.csv": frame}, summary=summary)

    return execute


def _relu_kernel_grid(p: Dict[str, Any]) -> np.ndarray:
    if p["grid_points"] < 2:
        raise InvalidArgumentError("grid_points must be at least 2")
    if not -1.0 <= p["c_min"] < p["c_max"] <= 1.0:
        raise InvalidArgumentError("Need -1 <= c_min < c_max <= 1")
    grid = np.linspace(p["c_min"], p["c_max"], p["grid_points"])
    grid[np.isclose(grid, 0.0, rtol=0.0, atol=1e-12)] = 0.0
    return grid


def _prepare_relu_kernel(p: Dict[str, Any], seed: SeedSpec):
    grid = _relu_kernel_grid(p)
    if p["samples"] < 2:
        raise InvalidArgumentError("samples must be at least 2")

    def execute() -> ExperimentResult:
        rows = []
        for index, c0 in enumerate(grid):
            if c0 == 0.0:
                rows.append((0.0, relu_bn_ratio_limit()) + (float("nan"),) * 4)
                continue
            mean, stderr = mc_relu_bn_kernel(c0, p["samples"], seed.spawn(index))
            sgn_mean, sgn_stderr = mc_sign_kernel(c0, p["samples"], seed.spawn(index).spawn(1))
            rows.append(
                (float(c0), relu_bn_ratio(c0), mean / c0, stderr / abs(c0), sgn_mean / c0, sgn_stderr / abs(c0))
            )
        frame = pd.DataFrame(rows, columns=list(EXPERIMENTS["relu-kernel"].tables["relu_kernel.csv"]))
        deviation = (frame.ratio_mc - frame.ratio_closed_form).abs() / frame.mc_std_err
        sgn_closed = pd.Series([_sgn_ratio(c) for c in frame.c0])
        sgn_deviation = (frame.ratio_sgn_mc - sgn_closed).abs() / frame.sgn_mc_std_err
        summary = {
            "limit_at_zero": relu_bn_ratio_limit(),
            "max_closed_form": float(frame.ratio_closed_form.max()),
            "min_closed_form": float(frame.ratio_closed_form.min()),
            "closed_form_at_most_one": bool((frame.ratio_closed_form <= 1.0 + 1e-12).all()),
            "max_mc_deviation_in_std_err": float(deviation.max(skipna=True)),
            "max_sgn_mc_deviation_in_std_err": float(sgn_deviation.max(skipna=True)),
        }
        return ExperimentResult(tables={"relu_kernel.csv": frame}, summary=summary)

    return execute


def _query_for(p: Dict[str, Any], seed: SeedSpec) -> QueryFunction:
    n = p["n"]
    try:
        kind = QueryKind(p["query"])
    except ValueError as e:
        raise InvalidArgumentError(f"Unknown query '{p['query']}'") from e
    coordinates = p["coordinates"]
    if any(not 0 <= c < n for c in coordinates):
        raise InvalidArgumentError(f"Query coordinates {coordinates} out of range for n={n}")
    if kind is QueryKind.PARITY:
        return QueryFunction.parity(coordinates)
    if kind is QueryKind.DICTATOR:
        if len(coordinates) != 1:
            raise InvalidArgumentError("A dictator query takes exactly one coordinate")
        return QueryFunction.dictator(coordinates[0])
    if kind is QueryKind.MAJORITY:
        return QueryFunction.majority()
    return QueryFunction.independent_network(NetworkSpec(n, p["width"], p["query_depth"], seed=seed))


def _prepare_sq_corr(p: Dict[str, Any], seed: SeedSpec):
    _check_workers(p)
    if not p["depths"] or min(p["depths"]) < 1:
        raise InvalidArgumentError("depths must be a nonempty list of positive integers")
    spec = NetworkSpec(p["n"], p["width"], max(p["depths"]))
    if p["exhaustive"]:
        if p["n"] > EXHAUSTIVE_MAX_N:
            raise ResourceLimitError(f"Exhaustive enumeration is limited to n <= {EXHAUSTIVE_MAX_N}")
    elif p["n_W"] < SQ_MIN_NETWORKS or p["n_x"] < SQ_MIN_INPUTS:
        raise InvalidArgumentError(f"Need n_W >= {SQ_MIN_NETWORKS} and n_x >= {SQ_MIN_INPUTS}")
    if p["n_W"] < 2:
        raise InvalidArgumentError("n_W must be at least 2")
    query = _query_for(p, seed.spawn(2))

    def execute() -> ExperimentResult:
        reports = []
        for depth in p["depths"]:
            depth_seed = seed.spawn(1).spawn(depth)
            if p["exhaustive"]:
                reports.append(sq_correlation_exhaustive(query, spec.with_depth(depth), p["n_W"], depth_seed))
            else:
                reports.append(
                    sq_correlation(query, spec.with_depth(depth), p["n_W"], p["n_x"], depth_seed, p["workers"])
                )
        frame = pd.DataFrame(
            {
                "depth": [r.depth for r in reports],
                "estimate": [r.estimate for r in reports],
                "std_err": [r.std_err for r in reports],
                "predicted_bound": [r.predicted_bound for r in reports],
                "decay_term": [r.decay_term for r in reports],
                "inverse_n_term": [r.inverse_n_term for r in reports],
            }
        )
        within = frame.estimate <= frame.predicted_bound + 3.0 * frame.std_err
        summary = {
            "query": query.describe(),
            "inputs_per_network": reports[0].n_x,
            "within_bound": within.tolist(),
            "all_within_bound": bool(within.all()),
        }
        return ExperimentResult(tables={"sq_corr.csv": frame}, summary=summary)

    return execute


def _prepare_linear_ub(p: Dict[str, Any], seed: SeedSpec):
    _check_workers(p)
    activation = _activation(p["activation"])
    normalization = Normalization.ANALYTIC_RELU if activation is ActivationKind.RELU else Normalization.NONE
    spec = NetworkSpec(p["n"], p["width"], p["depth"], activation, normalization)
    if activation is ActivationKind.SIGMOID:
        raise InvalidArgumentError("The linear learner experiment supports sgn and relu")
    if p["n_x"] < 2 or p["n_W"] < 2:
        raise InvalidArgumentError("Need at least two inputs and two networks")

    def execute() -> ExperimentResult:
        report = linear_learner_correlation(spec, p["n_x"], p["n_W"], seed, p["workers"])
        frame = pd.DataFrame(
            {
                "depth": list(report.depths),
                "corr": list(report.corr),
                "std_err": list(report.std_err),
                "gamma_power": [report.gamma**d for d in report.depths],
            }
        )
        summary = {
            "activation": activation.value,
            "fitted_factor": report.fitted_factor,
            "gamma": report.gamma,
            "factor_within_tolerance": (
                bool(abs(report.fitted_factor - GAMMA_SGN) <= 0.05) if activation is ActivationKind.SGN else None
            ),
        }
        return ExperimentResult(tables={"linear_ub.csv": frame}, summary=summary)

    return execute


def _prepare_kway(p: Dict[str, Any], seed: SeedSpec):
    _check_workers(p)
    k = p["k"]
    if not 1 <= k <= KWAY_MAX_K:
        raise InvalidArgumentError(f"k must lie in [1, {KWAY_MAX_K}]")
    if not p["depths"] or min(p["depths"]) < 1:
        raise InvalidArgumentError("depths must be a nonempty list of positive integers")
    samples = p["samples"] if p["samples"] is not None else KWAY_SAMPLES_PER_CELL * 2**k
    if samples < KWAY_SAMPLES_PER_CELL * 2**k:
        raise InvalidArgumentError(f"Need at least {KWAY_SAMPLES_PER_CELL * 2**k} samples for k={k}")
    if p["networks"] < 1:
        raise InvalidArgumentError("networks must be positive")
    spec = NetworkSpec(p["n"], p["width"], max(p["depths"]))
    probe = p["cov_depth"] if p["cov_depth"] is not None else spec.depth
    if not 0 <= probe <= spec.depth:
        raise InvalidArgumentError(f"cov_depth must lie in [0, {spec.depth}]")
    inputs = check_kway_inputs(spec, k, random_sign_inputs(k, p["n"], seed.spawn(0), p["input_correlation"]))

    def execute() -> ExperimentResult:
        tv_rows = []
        for depth in p["depths"]:
            report = kway_tv(spec.with_depth(depth), k, inputs, samples, seed.spawn(1).spawn(depth), p["workers"])
            tv_rows.append((depth, report.tv_distance, report.std_err, report.multiplicative_gap, report.samples))
        tv = pd.DataFrame(tv_rows, columns=["depth", "tv_distance", "std_err", "multiplicative_gap", "samples"])
        cov = kway_cov_summary(spec, k, inputs, probe, p["networks"], seed.spawn(2), p["workers"])
        cov_frame = pd.DataFrame(
            [(i, r.det_cov, r.delta_max, r.log_det, r.bound_holds) for i, r in enumerate(cov.reports)],
            columns=["network", "det_cov", "delta_max", "log_det", "bound_holds"],
        )
        summary = {
            "k": k,
            "cov_depth": probe,
            "median_delta_max": cov.median_delta_max,
            "median_abs_log_det": cov.median_abs_log_det,
            "pass_fraction": cov.pass_fraction,
            "tv_first_depth": float(tv.tv_distance.iloc[0]),
            "tv_last_depth": float(tv.tv_distance.iloc[-1]),
        }
        return ExperimentResult(tables={"kway_tv.csv": tv, "kway_cov.csv": cov_frame}, summary=summary)

    return execute


def _prepare_teacher_student(p: Dict[str, Any], seed: SeedSpec):
    _check_workers(p)
    if not p["depths"] or min(p["depths"]) < 1:
        raise InvalidArgumentError("depths must be a nonempty list of positive integers")
    if p["N"] < 2 or p["repeats"] < 1:
        raise InvalidArgumentError("Need N >= 2 and repeats >= 1")
    if not p["depth_offsets"] or min(p["depth_offsets"]) < 0:
        raise InvalidArgumentError("depth_offsets must be a nonempty list of nonnegative integers")
    if not p["activations"]:
        raise InvalidArgumentError("activations must be nonempty")
    try:
        optimizer = OptimizerKind(p["optimizer"])
    except ValueError as e:
        raise InvalidArgumentError(f"Unknown optimizer '{p['optimizer']}'") from e

    plans = []
    for name in p["activations"]:
        kind = _activation(name)
        run_seed = seed.spawn(list(ActivationKind).index(kind))
        teacher = NetworkSpec(p["n"], p["width"], 1, kind, default_normalization(kind))
        student = StudentConfig(
            depth=1,
            width=p["student_width"] if p["student_width"] is not None else p["width"],
            learning_rate=p["learning_rate"],
            batch_size=p["batch_size"],
            epochs=p["epochs"],
            optimizer=optimizer,
            batch_norm=p["batch_norm"],
            seed=run_seed.spawn(1),
        )
        plans.append((kind, teacher, student, run_seed.spawn(0)))

    def execute() -> ExperimentResult:
        points, datasets = [], {}
        for kind, teacher, student, curve_seed in plans:
            points.extend(
                learnability_curve(
                    teacher, p["depths"], p["N"], student, p["repeats"], curve_seed, p["depth_offsets"], p["workers"]
                )
            )
            if p["export_datasets"]:
                for depth in p["depths"]:
                    datasets[f"dataset_{kind.value}_h{depth}.bin"] = curve_dataset(teacher, depth, 0, p["N"], curve_seed)
        frame = pd.DataFrame([asdict(point) for point in points])
        summary = {
            "student_settings": plans[0][2].settings(),
            "diverged_repeats": int(frame.diverged.sum()),
            "one_class_repeats": int(frame.one_class.sum()),
            "mean_auc_by_activation": {
                activation: dict(zip(group.teacher_depth.astype(str), group.mean_auc))
                for activation, group in frame[frame.student_depth == frame.teacher_depth].groupby("activation")
            },
        }
        return ExperimentResult(tables={"learnability.csv": frame}, summary=summary, datasets=datasets)

    return execute


def _prepare_dominance(p: Dict[str, Any], seed: SeedSpec):
    if not 1 <= p["n_max"] <= DOMINANCE_MAX_N:
        raise ResourceLimitError(f"n_max must lie in [1, {DOMINANCE_MAX_N}]")
    if not 0.0 < p["grid_step"] <= 1.0:
        raise InvalidArgumentError("grid_step must lie in (0, 1]")
    if not 1 <= p["max_length"] <= DOMINANCE_MAX_N:
        raise ResourceLimitError(f"max_length must lie in [1, {DOMINANCE_MAX_N}]")
    if p["instances"] < 0 or p["max_k"] < 1 or p["max_l"] < 0:
        raise InvalidArgumentError("Need instances >= 0, max_k >= 1 and max_l >= 0")
    grid = np.round(np.arange(0.0, 1.0 + p["grid_step"] / 2.0, p["grid_step"]), 12)
    grid = grid[grid <= 1.0]

    def execute() -> ExperimentResult:
        dominance = pd.DataFrame(
            [
                (n, float(prob_p), float(prob_q), dominance_oracle(n, prob_p, prob_q))
                for n in range(1, p["n_max"] + 1)
                for prob_p in grid
                for prob_q in grid
                if prob_p <= prob_q
            ],
            columns=["n", "p", "q", "holds"],
        )
        rows = []
        for instance in range(p["instances"]):
            rng = seed.spawn(instance).generator()
            length = int(rng.integers(1, p["max_length"] + 1))
            biases = rng.random(length)
            k = int(rng.integers(1, p["max_k"] + 1))
            l = int(rng.integers(0, p["max_l"] + 1))
            rows.append((instance, length, k, l, asymmetry_lemma_check(biases, k, l)))
        asymmetry = pd.DataFrame(rows, columns=["instance", "length", "k", "l", "holds"])
        summary = {
            "dominance_cases": len(dominance),
            "dominance_all_hold": bool(dominance.holds.all()),
            "asymmetry_cases": len(asymmetry),
            "asymmetry_all_hold": bool(asymmetry.holds.all()),
        }
        return ExperimentResult(tables={"dominance.csv": dominance, "asymmetry.csv": asymmetry}, summary=summary)

    return execute


def _prepare_phi(p: Dict[str, Any], seed: SeedSpec):
    n = p["n"]
    if n < 1:
        raise InvalidArgumentError("n must be positive")
    if n > PHI_CHECK_MAX_N:
        raise ResourceLimitError(f"Phi check is limited to n <= {PHI_CHECK_MAX_N}, got {n}")
    if any(len(entry) != 2 for entry in p["initial"]):
        raise ConfigError("initial must be a list of [value, weight] pairs")
    initial = SupportDistribution.mixture(n, [tuple(entry) for entry in p["initial"]])
    if initial.mass_outside(p["mu0"]) > 0:
        raise InvalidArgumentError(f"Initial distribution has mass outside [-{p['mu0']}, {p['mu0']}]")
    if p["steps"] < 1:
        raise InvalidArgumentError("steps must be at least 1")

    def execute() -> ExperimentResult:
        rows = check_phi_contraction(n, initial, p["steps"], p["mu0"])
        frame = pd.DataFrame(
            {
                "step": [r.step for r in rows],
                "phi": [r.phi for r in rows],
                "ratio": [float("nan") if r.ratio is None else r.ratio for r in rows],
                "escaped_mass": [r.escaped_mass for r in rows],
                "mean_c": [r.mean_c for r in rows],
                "bound_holds": [r.bound_holds for r in rows],
            }
        )
        summary = {
            "mu0": p["mu0"],
            "all_hold": bool(frame.bound_holds.all()),
            "max_ratio": None if frame.ratio.isna().all() else float(frame.ratio.max()),
            "total_escaped_mass": float(frame.escaped_mass.sum()),
        }
        return ExperimentResult(tables={"phi.csv": frame}, summary=summary)

    return execute


def _reference_kernel(spec: NetworkSpec):
    if spec.activation is ActivationKind.SGN:
        return mu
    if spec.activation is ActivationKind.RELU:
        return relu_bn_kernel
    return None


def _prepare_decay(p: Dict[str, Any], seed: SeedSpec):
    _check_workers(p)
    kind = _activation(p["activation"])
    normalization = p["normalization"] if p["normalization"] is not None else default_normalization(kind)
    spec = NetworkSpec(p["n"], p["width"], p["depth"], kind, normalization, seed=seed)
    if p["trials"] < 100:
        raise InvalidArgumentError(f"trials must be at least 100, got {p['trials']}")
    pair_at_cosine(kind, p["n"], p["c0"], seed.spawn(0))

    def execute() -> ExperimentResult:
        points = empirical_decay(spec, p["c0"], p["trials"], seed, p["workers"])
        kernel = _reference_kernel(spec)
        if kernel is None:
            reference = [float("nan")] * len(points)
        else:
            reference = iterated_kernel(kernel, points[0].mean_c, spec.depth)
        frame = pd.DataFrame([asdict(point) for point in points])
        frame["reference"] = reference
        try:
            fit = fit_decay(frame.layer, frame.mean_c, noise=frame.std_err)
            rate = fit.rate
        except FitInfeasibleError as e:
            logger.warning("No decay fit for %s: %s", kind.value, e)
            rate = None
        summary = {
            "activation": kind.value,
            "normalization": spec.normalization.value,
            "start_cosine": points[0].mean_c,
            "fitted_rate": rate,
        }
        return ExperimentResult(tables={"decay.csv": frame}, summary=summary)

    return execute


_WORKERS = Param(int, 1)

EXPERIMENTS: Dict[str, Experiment] = {
    experiment.name: experiment
    for experiment in (
        Experiment(
            name="mixing",
            params={
                "n": Param(int),
                "c0": Param(float),
                "steps": Param(int),
                "trials": Param(int, 10_000),
                "mu0": Param(float, MU0),
                "workers": _WORKERS,
            },
            tables={"chain.csv": ("step", "mean_c", "std_err", "mean_abs_c", "exact_mean_c")},
            prepare=_prepare_mixing,
        ),
        Experiment(
            name="relu-kernel",
            params={
                "grid_points": Param(int, 199),
                "c_min": Param(float, -0.99),
                "c_max": Param(float, 0.99),
                "samples": Param(int, 100_000),
            },
            tables={
                "relu_kernel.csv": (
                    "c0", "ratio_closed_form", "ratio_mc", "mc_std_err", "ratio_sgn_mc", "sgn_mc_std_err",
                )
            },
            prepare=_prepare_relu_kernel,
        ),
        Experiment(
            name="sq-corr",
            params={
                "n": Param(int, 16),
                "width": Param(int, 32),
                "depths": Param(list, [1, 2, 4, 8, 12], int),
                "query": Param(str, "parity"),
                "coordinates": Param(list, [1, 2], int),
                "query_depth": Param(int, 1),
                "n_W": Param(int, 200),
                "n_x": Param(int, 2000),
                "exhaustive": Param(bool, False),
                "workers": _WORKERS,
            },
            tables={
                "sq_corr.csv": ("depth", "estimate", "std_err", "predicted_bound", "decay_term", "inverse_n_term")
            },
            prepare=_prepare_sq_corr,
        ),
        Experiment(
            name="linear-ub",
            params={
                "n": Param(int, 64),
                "width": Param(int, 64),
                "depth": Param(int, 10),
                "activation": Param(str, "sgn"),
                "n_x": Param(int, 2000),
                "n_W": Param(int, 100),
                "workers": _WORKERS,
            },
            tables={"linear_ub.csv": ("depth", "corr", "std_err", "gamma_power")},
            prepare=_prepare_linear_ub,
        ),
        Experiment(
            name="kway",
            params={
                "n": Param(int, 64),
                "width": Param(int, 64),
                "depths": Param(list, [1, 2, 4, 8, 12], int),
                "k": Param(int, 4),
                "samples": Param(int, None),
                "input_correlation": Param(float, 0.6),
                "networks": Param(int, 100),
                "cov_depth": Param(int, None),
                "workers": _WORKERS,
            },
            tables={
                "kway_tv.csv": ("depth", "tv_distance", "std_err", "multiplicative_gap", "samples"),
                "kway_cov.csv": ("network", "det_cov", "delta_max", "log_det", "bound_holds"),
            },
            prepare=_prepare_kway,
        ),
        Experiment(
            name="teacher-student",
            params={
                "activations": Param(list, ["sgn"], str),
                "n": Param(int, DESK_INPUT_DIM),
                "width": Param(int, DESK_TEACHER_WIDTH),
                "depths": Param(list, list(DESK_DEPTHS), int),
                "N": Param(int, DESK_EXAMPLES),
                "repeats": Param(int, DESK_REPEATS),
                "student_width": Param(int, None),
                "depth_offsets": Param(list, [0], int),
                "epochs": Param(int, 10),
                "learning_rate": Param(float, STUDENT_LEARNING_RATE),
                "batch_size": Param(int, STUDENT_BATCH_SIZE),
                "optimizer": Param(str, OptimizerKind.ADAM.value),
                "batch_norm": Param(bool, False),
                "export_datasets": Param(bool, False),
                "workers": _WORKERS,
            },
            tables={
                "learnability.csv": (
                    "activation",
                    "teacher_depth",
                    "student_depth",
                    "mean_auc",
                    "std_err",
                    "repeats_used",
                    "diverged",
                    "one_class",
                )
            },
            prepare=_prepare_teacher_student,
        ),
        Experiment(
            name="dominance-check",
            params={
                "n_max": Param(int, 12),
                "grid_step": Param(float, 0.05),
                "instances": Param(int, 500),
                "max_length": Param(int, 10),
                "max_k": Param(int, 10),
                "max_l": Param(int, 5),
            },
            tables={
                "dominance.csv": ("n", "p", "q", "holds"),
                "asymmetry.csv": ("instance", "length", "k", "l", "holds"),
            },
            prepare=_prepare_dominance,
        ),
        Experiment(
            name="phi-check",
            params={
                "n": Param(int, 60),
                "steps": Param(int, 10),
                "mu0": Param(float, MU0),
                "initial": Param(list, [[0.4, 1.0]], list),
            },
            tables={"phi.csv": ("step", "phi", "ratio", "escaped_mass", "mean_c", "bound_holds")},
            prepare=_prepare_phi,
        ),
        Experiment(
            name="decay",
            params={
                "activation": Param(str, "sgn"),
                "normalization": Param(str, None),
                "n": Param(int, 64),
                "width": Param(int, 64),
                "depth": Param(int, 12),
                "c0": Param(float, 0.5),
                "trials": Param(int, 200),
                "workers": _WORKERS,
            },
            tables={"decay.csv": ("layer", "mean_c", "abs_mean_c", "std_err", "reference")},
            prepare=_prepare_decay,
        ),
    )
}


# ---------------------------------------------------------------- run


def load_config(config_path: PathLike) -> ExperimentConfig:
    """Parse and validate a JSON experiment config.

    Args:
        config_path (str | Path): UTF-8 JSON file with "experiment", "params",
            "master_seed" and "output_dir"

    Returns:
        ExperimentConfig: Config with params type-checked and defaults filled in
    """
    try:
        raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
    except UnicodeDecodeError as e:
        raise ConfigError(f"Config is not UTF-8 text: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("Config must be a JSON object")
    unknown = sorted(set(raw) - set(_CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
    name = raw.get("experiment")
    if name not in EXPERIMENTS:
        raise ConfigError(f"Unknown experiment {name!r}; choose one of {', '.join(EXPERIMENTS)}")
    raw_params = raw.get("params", {})
    if not isinstance(raw_params, dict):
        raise ConfigError("params must be a JSON object")
    master_seed = raw.get("master_seed", DEFAULT_MASTER_SEED)
    if isinstance(master_seed, bool) or not isinstance(master_seed, int) or not 0 <= master_seed < 2**64:
        raise ConfigError("master_seed must be an unsigned 64-bit integer")
    output_dir = raw.get("output_dir", str(OUTPUT_DIR))
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("output_dir must be a nonempty string")
    return ExperimentConfig(
        experiment=name,
        params=parse_params(EXPERIMENTS[name].params, raw_params),
        master_seed=master_seed,
        output_dir=Path(output_dir),
    )


def resolve_output_dir(config: ExperimentConfig) -> Path:
    override = os.getenv(OUTPUT_DIR_ENV)
    return Path(override) if override else config.output_dir


def _json_ready(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    if isinstance(value, Path):
        return str(value)
    return value


def _dump_json(data: Any) -> str:
    return json.dumps(_json_ready(data), indent=2, sort_keys=True) + "\n"


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_table(frame: pd.DataFrame, path: Path, columns: Tuple[str, ...]) -> Path:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ConfigError(f"{path.name} is missing columns {missing}")
    frame[list(columns)].to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return path


def _write_outputs(experiment: Experiment, result: ExperimentResult, out_dir: Path) -> List[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, columns in experiment.tables.items():
        written.append(write_table(result.tables[name], out_dir / name, columns))
    for name, data in sorted(result.datasets.items()):
        written.append(write_dataset(out_dir / name, data))
    summary_path = out_dir / SUMMARY_FILENAME
    summary_path.write_text(_dump_json(result.summary), encoding="utf-8", newline="\n")
    written.append(summary_path)
    return written


def _write_manifest(manifest: RunManifest, out_dir: Path) -> Path:
    path = out_dir / MANIFEST_FILENAME
    staging = out_dir / (MANIFEST_FILENAME + ".tmp")
    staging.write_text(_dump_json(manifest.to_json()), encoding="utf-8", newline="\n")
    os.replace(staging, path)
    return path


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_experiment(config_path: PathLike) -> Tuple[RunManifest, ExperimentResult]:
    """Validate a config, run its experiment and write every output.

    Nothing touches the output directory until the experiment has finished;
    the manifest is written last.

    Args:
        config_path (str | Path): JSON experiment config

    Returns:
        Tuple[RunManifest, ExperimentResult]: Manifest as written and the
            in-memory results
    """
    config = load_config(config_path)
    experiment = EXPERIMENTS[config.experiment]
    execute = experiment.prepare(config.params, SeedSpec(config.master_seed))
    out_dir = resolve_output_dir(config)

    started = _timestamp()
    logger.info("Running %s into %s", experiment.name, out_dir)
    result = execute()
    written = _write_outputs(experiment, result, out_dir)
    manifest = RunManifest(
        config=_json_ready(replace(config, output_dir=out_dir).echo()),
        artifact_version=ARTIFACT_VERSION,
        schema_version=SCHEMA_VERSION,
        started_at=started,
        finished_at=_timestamp(),
        checksums={path.name: sha256_file(path) for path in written},
    )
    _write_manifest(manifest, out_dir)
    logger.info("Finished %s: %d files", experiment.name, len(written))
    return manifest, result


# ---------------------------------------------------------------- plot data

PLOT_KINDS = ("ratio", "auc", "decay")


def _require_columns(frame: pd.DataFrame, columns: Tuple[str, ...], source: Path):
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ConfigError(f"{source.name} does not have the expected columns (missing {missing})")


def _sgn_ratio(c0: float) -> float:
    return 2.0 / math.pi if c0 == 0.0 else mu(c0) / c0


def _ratio_plot(frame: pd.DataFrame, source: Path) -> pd.DataFrame:
    _require_columns(frame, EXPERIMENTS["relu-kernel"].tables["relu_kernel.csv"], source)
    return pd.DataFrame(
        {
            "c0": frame.c0,
            "relu_closed_form": frame.ratio_closed_form,
            "relu_mc": frame.ratio_mc,
            "sgn_closed_form": [_sgn_ratio(c) for c in frame.c0],
            "sgn_mc": frame.ratio_sgn_mc,
        }
    )


def _auc_plot(frame: pd.DataFrame, source: Path) -> pd.DataFrame:
    _require_columns(frame, EXPERIMENTS["teacher-student"].tables["learnability.csv"], source)
    offsets = frame.student_depth - frame.teacher_depth
    series = [
        activation if offset == 0 else f"{activation}+{offset}"
        for activation, offset in zip(frame.activation, offsets)
    ]
    pivot = frame.assign(series=series).pivot_table(index="teacher_depth", columns="series", values="mean_auc")
    pivot.columns.name = None
    return pivot.reset_index()


def _decay_plot(frame: pd.DataFrame, source: Path) -> pd.DataFrame:
    if {"step", "mean_c", "exact_mean_c"} <= set(frame.columns):
        return pd.DataFrame(
            {
                "step": frame.step,
                "abs_mean_c_mc": frame.mean_c.abs(),
                "abs_mean_c_reference": frame.exact_mean_c.abs(),
            }
        )
    _require_columns(frame, EXPERIMENTS["decay"].tables["decay.csv"], source)
    return pd.DataFrame(
        {
            "step": frame.layer,
            "abs_mean_c_mc": frame.abs_mean_c,
            "abs_mean_c_reference": frame.reference.abs(),
        }
    )


_PLOTTERS = {"ratio": _ratio_plot, "auc": _auc_plot, "decay": _decay_plot}


def emit_plot_data(results_csv: PathLike, kind: str) -> Path:
    """Reshape a results CSV into x/series columns next to it as plot_<kind>.csv."""
    if kind not in _PLOTTERS:
        raise ConfigError(f"Unknown plot kind {kind!r}; choose one of {', '.join(PLOT_KINDS)}")
    source = Path(results_csv)
    try:
        frame = pd.read_csv(source)
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as e:
        raise ConfigError(f"Cannot parse {source.name}: {e}") from e
    plot = _PLOTTERS[kind](frame, source)
    target = source.parent / f"plot_{kind}.csv"
    plot.to_csv(target, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    logger.info("Wrote %s plot data to %s", kind, target)
    return target
