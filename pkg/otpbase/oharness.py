"""
End-to-end experiments: offline PR-SGD on a design, smoothing, and online
evaluation on interior test covariates, repeated over replications and
budgets. Every random draw is keyed by (master_seed, replication, role), so a
report depends only on its config, never on the worker count.
"""

from __future__ import annotations

import csv
import math
import time
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from pydantic import ConfigDict, Field, model_validator

from .oalloc import (
    AllocationOverrides,
    AllocationPlan,
    Finding,
    allocate,
    fixed_T_plan,
    is_fittable,
    validate_plan,
)
from .oconst import (
    DEFAULT_GAP_THRESHOLD,
    DEFAULT_N_TEST,
    DEFAULT_PILOT_COVARIATES,
    DEFAULT_REPLICATIONS,
    DEFAULT_T_BAR,
    DEFAULT_TEST_MARGIN,
    EXPERIMENT_CSV_HEADER,
    REPLICATION_STATS,
    SWEEP_CSV_HEADER,
    TABLE_CSV_HEADER,
    AllocationRule,
    DesignKind,
    LabelMode,
    Split,
    Technique,
)
from .odesign import CovariateDesign, build_design, sample_interior
from .oeval import GapSummary, RateFit, empirical_rate, gap_records, offline_gaps, summarize
from .oproblem import CountingOracle, Newsvendor, NewsvendorSpec, SimulationProblem
from .oschemas import _Base, derive_stream, read_artifact, read_document, stream_key, write_artifact
from .osgd import InexactSolutionSet, PrSgdConfig, _solve, batch_solve, default_gamma0
from .osmooth import FittedSolutionMap, SmootherSpec, fit
from .outils import (
    InfeasibleBudgetError,
    InvalidInputError,
    NumericFailureError,
    ParseError,
    PersistenceError,
    ThresholdUnreachableError,
    check_finite,
    exception_handler,
    get_logger,
    handle,
    worker_map,
)

logger = get_logger(__name__)

Array = NDArray[np.float64]

GAP_FLOOR = 1e-16


class ExperimentConfig(_Base):
    """One cell of the benchmark: a problem, a technique, a rule and a budget."""

    model_config = ConfigDict(extra="forbid")

    problem: NewsvendorSpec = Field(default_factory=NewsvendorSpec)
    technique: Technique
    smoother: Optional[SmootherSpec] = Field(
        default=None, description="Base smoother settings (basis, kernel, projection)"
    )
    overrides: AllocationOverrides = Field(default_factory=AllocationOverrides)
    allocation: AllocationRule = "optimal"
    split: Split = Field(default="upper", description="kNN/KS T convention for the optimal rule")
    T_bar: Optional[int] = Field(default=None, ge=1, description="T for the fixed_T rule")
    Gamma: int = Field(..., ge=16, description="Total simulation budget")
    smoothness: Optional[float] = Field(
        default=None, gt=0.0, description="Smoothness m of the solution function; None is infinite"
    )
    design_kind: DesignKind = "farthest_point"
    n_test: int = Field(default=DEFAULT_N_TEST, ge=1)
    test_margin: float = Field(default=DEFAULT_TEST_MARGIN, ge=0.0, lt=0.5)
    replications: int = Field(default=DEFAULT_REPLICATIONS, ge=1)
    master_seed: int = Field(default=0, ge=0)
    gamma0: Optional[float] = Field(default=None, gt=0.0)
    label_mode: LabelMode = "prsgd"

    @model_validator(mode="after")
    def _check(self) -> ExperimentConfig:
        if self.smoother is not None and self.smoother.kind != self.technique:
            raise ValueError("smoother.kind must match technique")
        return self

    @property
    def rule_label(self) -> str:
        return "opt" if self.allocation == "optimal" else f"T={self.T_bar or DEFAULT_T_BAR}"


class ReplicationStats(_Base):
    replication: int
    n: int = Field(..., description="Realized design size")
    online: GapSummary
    offline_mean: float


class ExperimentReport(_Base):
    config: ExperimentConfig
    plan: AllocationPlan
    findings: list[Finding]
    replications: list[ReplicationStats]
    grand_mean: float
    grand_sd: float
    grand_min: float
    grand_max: float
    offline_mean: float
    simulation_calls: int
    wall_clock_seconds: float = Field(default=0.0, description="Not part of the reproducible output")

    @property
    def online_offline_ratio(self) -> float:
        return self.grand_mean / self.offline_mean if self.offline_mean > 0 else math.inf

    def reproducible(self) -> dict[str, Any]:
        return self.model_dump(mode="json", exclude={"wall_clock_seconds"})


class SweepResult(_Base):
    technique: Technique
    reports: list[ExperimentReport]
    rate: RateFit


class PilotResult(_Base):
    selected_T: int
    achieved: dict[int, float] = Field(..., description="Grand average gap per candidate T")


class TableRow(_Base):
    technique: Technique
    gamma: int
    rule: str
    n: Optional[int] = None
    T: Optional[int] = None
    grand_mean_gap: Optional[float] = Field(default=None, description="None when infeasible")


def domain_scale(problem: SimulationProblem) -> float:
    """Geometric mean of the covariate axis ranges."""
    lo, hi = problem.covariate_bounds
    return float(np.exp(np.mean(np.log(hi - lo))))


def plan_for(config: ExperimentConfig, problem: SimulationProblem) -> AllocationPlan:
    basis = config.smoother.basis if config.smoother is not None else None
    if config.allocation == "optimal":
        return allocate(
            config.technique,
            config.Gamma,
            problem.covariate_dim,
            config.smoothness,
            config.overrides,
            domain_scale=domain_scale(problem),
            basis=basis,
            split=config.split,
        )
    return fixed_T_plan(
        config.technique,
        config.Gamma,
        config.T_bar or DEFAULT_T_BAR,
        problem.covariate_dim,
        config.smoothness,
        domain_scale=domain_scale(problem),
        basis=basis,
    )


def _harness_smoother(config: ExperimentConfig, plan: AllocationPlan) -> SmootherSpec:
    base = config.smoother or SmootherSpec.model_validate(
        {"kind": config.technique, **_placeholder_hyper(config.technique)}
    )
    base = base.model_copy(update={"empty_fallback": "nearest"})
    return plan.smoother_spec(base)


def _placeholder_hyper(technique: Technique) -> dict[str, float]:
    return {"knn": {"k": 1}, "ks": {"h": 1.0}, "krr": {"lambda": 1.0}}.get(technique, {})


def _fit_on(spec: SmootherSpec, data: InexactSolutionSet, problem: SimulationProblem) -> FittedSolutionMap:
    if spec.kind == "knn" and spec.k is not None and spec.k > data.design.n:
        spec = spec.model_copy(update={"k": data.design.n})
    return fit(spec, data, problem.decision_bounds)


@handle
def run_otp_experiment(
    config: ExperimentConfig,
    workers: int = 1,
    test_points: Array | None = None,
) -> ExperimentReport:
    """
    Runs the offline and online stages `config.replications` times.

    Each replication builds a fresh design of the planned size, solves every
    design point with PR-SGD, fits the smoother, and scores it on interior
    test covariates. `test_points` pins one test set for all replications.
    """
    started = time.perf_counter()
    problem = Newsvendor(config.problem)
    plan = plan_for(config, problem)
    findings = validate_plan(plan)
    if not is_fittable(plan):
        raise InfeasibleBudgetError(
            f"{plan.summary()}: n={plan.n} cannot carry a {plan.technique} fit",
            constraint="n >= s+1" if plan.technique == "lr" else "n >= 1",
        )
    logger.info("experiment %s", plan.summary())
    sgd = PrSgdConfig(T=plan.T, gamma0=config.gamma0 or default_gamma0(problem.covariate_dim))
    smoother = _harness_smoother(config, plan)
    counter = CountingOracle(problem)
    lo, hi = problem.covariate_bounds
    seed = config.master_seed

    def replicate(r: int) -> ReplicationStats:
        try:
            design = build_design(
                config.design_kind, lo, hi, plan.n, derive_stream(seed, r, "design"), problem.covariate_dim
            )
            data = batch_solve(counter, design, sgd, stream_key(seed, r, "solve"), label_mode=config.label_mode)
            fitted = _fit_on(smoother, data, problem)
            xs = (
                test_points
                if test_points is not None
                else sample_interior(lo, hi, config.n_test, derive_stream(seed, r, "test"), config.test_margin)
            )
            preds = fitted.predict_many(xs)
            check_finite(preds, "predictions")
            online = summarize(gap_records(problem, preds, xs))
            offline = summarize(offline_gaps(problem, data))
        except NumericFailureError as e:
            raise e.locate(replication=r) from e
        logger.debug("replication %s: mean gap %s", r, online.mean)
        return ReplicationStats(replication=r, n=design.n, online=online, offline_mean=offline.mean)

    stats = worker_map(replicate, range(config.replications), workers)
    table = np.array([[s.online.mean, s.online.sd, s.online.min, s.online.max, s.offline_mean] for s in stats])
    grand = table.mean(axis=0)
    clamped = sum(s.online.clamped for s in stats)
    total = sum(s.online.count for s in stats)
    if clamped:
        logger.warning("%s of %s gaps were clamped at zero", clamped, total)
    return ExperimentReport(
        config=config,
        plan=plan,
        findings=findings,
        replications=stats,
        grand_mean=float(grand[0]),
        grand_sd=float(grand[1]),
        grand_min=float(grand[2]),
        grand_max=float(grand[3]),
        offline_mean=float(grand[4]),
        simulation_calls=counter.calls,
        wall_clock_seconds=time.perf_counter() - started,
    )


@handle
def sweep_budget(
    config: ExperimentConfig, gamma_list: Sequence[int], workers: int = 1
) -> SweepResult:
    """Runs one experiment per budget on a shared test set and fits the log-log rate."""
    gammas = [int(g) for g in gamma_list]
    if len(gammas) < 3 or any(b <= a for a, b in zip(gammas, gammas[1:])):
        raise InvalidInputError("a sweep needs at least 3 strictly increasing budgets")
    lo, hi = Newsvendor(config.problem).covariate_bounds
    test_points = sample_interior(
        lo, hi, config.n_test, derive_stream(config.master_seed, "sweep", "test"), config.test_margin
    )
    reports = [
        run_otp_experiment(config.model_copy(update={"Gamma": g}), workers, test_points)
        for g in gammas
    ]
    means = [r.grand_mean for r in reports]
    if min(means) < GAP_FLOOR:
        logger.warning("gaps at the numerical floor; flooring at %s for the rate fit", GAP_FLOOR)
    rate = empirical_rate(gammas, [max(m, GAP_FLOOR) for m in means])
    logger.info("%s sweep slope %.4f (r2 %.4f)", config.technique, rate.slope, rate.r_squared)
    return SweepResult(technique=config.technique, reports=reports, rate=rate)


@handle
def pilot_select_T(
    problem: SimulationProblem,
    gamma0: float,
    candidate_T: Sequence[int],
    gap_threshold: float = DEFAULT_GAP_THRESHOLD,
    n_pilot: int = DEFAULT_PILOT_COVARIATES,
    replications: int = DEFAULT_REPLICATIONS,
    master_seed: int = 0,
    margin: float = DEFAULT_TEST_MARGIN,
    workers: int = 1,
) -> PilotResult:
    """
    Smallest T whose grand-average relative gap of plain PR-SGD solutions,
    over `replications` batches of `n_pilot` random covariates, is below
    `gap_threshold`.
    """
    candidates = [int(t) for t in candidate_T]
    if not candidates or any(b <= a for a, b in zip(candidates, candidates[1:])):
        raise InvalidInputError("candidate_T must be nonempty and strictly increasing")
    if not 0.0 < gap_threshold < 1.0:
        raise InvalidInputError("gap_threshold must lie in (0, 1)")
    lo, hi = problem.covariate_bounds
    achieved: dict[int, float] = {}
    for T in candidates:
        config = PrSgdConfig(T=T, gamma0=gamma0)

        def replicate(r: int) -> float:
            xs = sample_interior(lo, hi, n_pilot, derive_stream(master_seed, "pilot", T, r), margin)
            seed = stream_key(master_seed, "pilot", T, r, "solve")
            thetas = np.vstack(
                [_solve(problem, x, config, derive_stream(seed, i)).theta_bar for i, x in enumerate(xs)]
            )
            return summarize(gap_records(problem, thetas, xs)).mean

        achieved[T] = float(np.mean(worker_map(replicate, range(replications), workers)))
        logger.info("pilot T=%s grand average gap %.5f", T, achieved[T])
        if achieved[T] < gap_threshold:
            return PilotResult(selected_T=T, achieved=achieved)
    raise ThresholdUnreachableError(
        f"no candidate reaches a grand average gap below {gap_threshold}: "
        + ", ".join(f"T={t}: {g:.5f}" for t, g in achieved.items()),
        achieved=achieved,
    )


@handle
def allocation_table(
    config: ExperimentConfig,
    gamma_list: Sequence[int],
    T_bar: int = DEFAULT_T_BAR,
    workers: int = 1,
) -> list[TableRow]:
    """The optimal rule against fixed T in {T_bar, 0.5 T_bar, 1.5 T_bar}, per budget."""
    rows: list[TableRow] = []
    rules: list[tuple[str, AllocationRule, Optional[int]]] = [
        ("opt", "optimal", None),
        ("T_bar", "fixed_T", T_bar),
        ("0.5T_bar", "fixed_T", max(1, round(0.5 * T_bar))),
        ("1.5T_bar", "fixed_T", max(1, round(1.5 * T_bar))),
    ]
    for gamma in gamma_list:
        for label, rule, t in rules:
            cell = config.model_copy(update={"Gamma": int(gamma), "allocation": rule, "T_bar": t})
            try:
                report = run_otp_experiment(cell, workers)
            except InfeasibleBudgetError as e:
                logger.info("%s Gamma=%s %s infeasible: %s", config.technique, gamma, label, e.detail)
                rows.append(TableRow(technique=config.technique, gamma=int(gamma), rule=label))
                continue
            rows.append(
                TableRow(
                    technique=config.technique,
                    gamma=int(gamma),
                    rule=label,
                    n=report.plan.n,
                    T=report.plan.T,
                    grand_mean_gap=report.grand_mean,
                )
            )
    return rows


@exception_handler
def save_model(fitted: FittedSolutionMap, path: str | Path) -> None:
    write_artifact(path, "solution_map", fitted)


@exception_handler
def load_model(path: str | Path) -> FittedSolutionMap:
    return read_artifact(path, "solution_map", FittedSolutionMap)


@exception_handler
def save_design(design: CovariateDesign, path: str | Path) -> None:
    write_artifact(path, "design", design)


@exception_handler
def load_design(path: str | Path) -> CovariateDesign:
    return read_artifact(path, "design", CovariateDesign)


@exception_handler
def save_solutions(data: InexactSolutionSet, path: str | Path) -> None:
    write_artifact(path, "solution_set", data)


@exception_handler
def load_solutions(path: str | Path) -> InexactSolutionSet:
    return read_artifact(path, "solution_set", InexactSolutionSet)


def load_config(path: str | Path, **updates: Any) -> ExperimentConfig:
    """Reads an ExperimentConfig JSON document; unknown keys are rejected."""
    try:
        document = read_document(path)
    except ParseError as e:
        raise InvalidInputError(f"invalid config: {e.detail}") from e
    if not isinstance(document, dict):
        raise InvalidInputError(f"{path}: config must be a JSON object")
    document.update({k: v for k, v in updates.items() if v is not None})
    return ExperimentConfig.model_validate(document)


def _fmt(value: float | int | None) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return format(value, ".6g")


@exception_handler
def emit_csv(
    reports: ExperimentReport | Sequence[ExperimentReport],
    path: str | Path,
    include_offline: bool = True,
) -> None:
    """
    One row per (replication, statistic) plus grand-average and offline-mean
    rows per report,
    columns `technique,rule,gamma,n,T,hyper,replication,stat,value`.
    """
    if isinstance(reports, ExperimentReport):
        reports = [reports]
    with Path(path).open("w", newline="", encoding="utf-8") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(EXPERIMENT_CSV_HEADER)
        for report in reports:
            plan = report.plan
            head = [plan.technique, report.config.rule_label, plan.Gamma, plan.n, plan.T, _fmt(plan.hyper)]
            for rep in report.replications:
                for stat in REPLICATION_STATS:
                    writer.writerow([*head, rep.replication, stat, _fmt(getattr(rep.online, stat))])
            writer.writerow([*head, "", "grand_mean", _fmt(report.grand_mean)])
            if include_offline:
                writer.writerow([*head, "", "offline_mean", _fmt(report.offline_mean)])


@exception_handler
def emit_sweep_csv(result: SweepResult, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(SWEEP_CSV_HEADER)
        for report in result.reports:
            writer.writerow([result.technique, report.plan.Gamma, _fmt(report.grand_mean)])
        stream.write(f"# slope={_fmt(result.rate.slope)} r2={_fmt(result.rate.r_squared)}\n")


@exception_handler
def emit_table_csv(rows: Sequence[TableRow], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(TABLE_CSV_HEADER)
        for row in rows:
            writer.writerow(
                [row.technique, row.gamma, row.rule, _fmt(row.n), _fmt(row.T), _fmt(row.grand_mean_gap)]
            )


def rate_from_sweep_csv(path: str | Path) -> tuple[RateFit, dict[str, float]]:
    """Refits the rate from a sweep CSV; also returns the stored slope and r2."""
    gammas: list[float] = []
    gaps: list[float] = []
    stored: dict[str, float] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise PersistenceError(f"cannot read {path}: {e}") from e
    body = [line for line in lines if not line.startswith("#")]
    for line in lines:
        if line.startswith("#"):
            for token in line[1:].split():
                key, _, value = token.partition("=")
                stored[key] = float(value)
    for lineno, row in enumerate(csv.DictReader(body), start=2):
        try:
            gammas.append(float(row["gamma"]))
            gaps.append(float(row["grand_mean_gap"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"{path}: line {lineno}: {e}") from e
    return empirical_rate(gammas, gaps), stored
