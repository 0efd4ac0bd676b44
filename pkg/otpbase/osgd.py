from __future__ import annotations

import math
from typing import Any, Literal, Optional

import numpy as np
from numpy.typing import NDArray
from pydantic import Field, model_validator

from .oconst import GAMMA0_HIGH_DIM, GAMMA0_LOW_DIM, LabelMode
from .odesign import CovariateDesign, distances
from .oproblem import SimulationProblem
from .oschemas import Matrix, RngStream, Vector, _Base, derive_stream
from .outils import (
    InvalidInputError,
    NumericFailureError,
    exception_handler,
    get_logger,
    handle,
    worker_map,
)

logger = get_logger(__name__)

Array = NDArray[np.float64]


def default_gamma0(d: int) -> float:
    """Step-size constant: 0.8 up to d=2, 4 from d=10, log-linear in between."""
    if d <= 2:
        return GAMMA0_LOW_DIM
    if d >= 10:
        return GAMMA0_HIGH_DIM
    frac = (math.log(d) - math.log(2)) / (math.log(10) - math.log(2))
    return float(
        math.exp(
            math.log(GAMMA0_LOW_DIM)
            + frac * (math.log(GAMMA0_HIGH_DIM) - math.log(GAMMA0_LOW_DIM))
        )
    )


def step_size(gamma0: float, t: int) -> float:
    return gamma0 * math.log(t + 1) / (t + 1)


class PrSgdConfig(_Base):
    T: int = Field(..., ge=0, description="Gradient draws per covariate")
    gamma0: float = Field(..., gt=0.0, description="Step-size constant")
    theta0_policy: Literal["lower_corner", "box_center", "fixed", "warm_start"] = Field(
        default="lower_corner"
    )
    theta0: Optional[Vector] = Field(
        default=None, description="Starting decision when theta0_policy is `fixed`"
    )
    record_trace: bool = Field(default=False)

    @model_validator(mode="after")
    def _check(self) -> PrSgdConfig:
        if self.theta0_policy == "fixed" and self.theta0 is None:
            raise ValueError("theta0 is required with theta0_policy='fixed'")
        return self

    @classmethod
    def for_dimension(cls, T: int, d: int, **kwargs: Any) -> PrSgdConfig:
        return cls(T=T, gamma0=default_gamma0(d), **kwargs)


class InexactSolution(_Base):
    x: Vector
    theta_bar: Vector = Field(..., description="Polyak-Ruppert average of the iterates")
    T: int
    seed: int
    stream_id: int
    final_iterate: Optional[Vector] = None
    trace: Optional[Matrix] = Field(default=None, description="(T+1) x q iterates")


class InexactSolutionSet(_Base):
    design: CovariateDesign
    solutions: list[InexactSolution]
    config: PrSgdConfig
    master_seed: int
    label_mode: LabelMode = "prsgd"

    @model_validator(mode="after")
    def _aligned(self) -> InexactSolutionSet:
        if len(self.solutions) != self.design.n:
            raise ValueError(
                f"{len(self.solutions)} solutions for {self.design.n} design points"
            )
        for i, sol in enumerate(self.solutions):
            if not np.array_equal(sol.x, self.design.points[i]):
                raise ValueError(f"solution {i} is not at design point {i}")
        return self

    @property
    def theta_bars(self) -> Array:
        """n x q matrix of reported solutions in design order."""
        return np.vstack([sol.theta_bar for sol in self.solutions])

    @property
    def simulation_calls(self) -> int:
        return self.design.n * self.config.T if self.label_mode == "prsgd" else 0

    def with_labels(self, labels: Array) -> InexactSolutionSet:
        """Same design and provenance with the reported solutions replaced."""
        labels = np.asarray(labels, dtype=np.float64)
        if labels.shape[0] != self.design.n:
            raise InvalidInputError("labels must have one row per design point")
        solutions = [
            sol.model_copy(update={"theta_bar": np.array(row)})
            for sol, row in zip(self.solutions, labels)
        ]
        return self.model_copy(update={"solutions": solutions})


def project(theta: Any, lo: Any, hi: Any) -> Array:
    """Componentwise clamp onto the box [lo, hi]."""
    return np.clip(np.asarray(theta, dtype=np.float64), lo, hi)


def initial_decision(problem: SimulationProblem, config: PrSgdConfig) -> Array:
    lo, hi = problem.decision_bounds
    if config.theta0_policy == "fixed":
        assert config.theta0 is not None
        return project(problem.check_decision(config.theta0), lo, hi)
    if config.theta0_policy == "box_center":
        return 0.5 * (lo + hi)
    return np.array(lo, dtype=np.float64)


def _solve(
    problem: SimulationProblem,
    x: Array,
    config: PrSgdConfig,
    rng: RngStream,
    theta0: Array | None = None,
) -> InexactSolution:
    lo, hi = problem.decision_bounds
    theta = initial_decision(problem, config) if theta0 is None else project(theta0, lo, hi)
    total = theta.copy()
    trace = [theta] if config.record_trace else None
    for t in range(1, config.T + 1):
        grad = problem.stochastic_gradient(theta, x, rng)
        if not np.all(np.isfinite(grad)):
            raise NumericFailureError(
                f"non-finite stochastic gradient at iteration {t}", iteration=t
            )
        theta = np.clip(theta - step_size(config.gamma0, t) * grad, lo, hi)
        total += theta
        if trace is not None:
            trace.append(theta)
    return InexactSolution(
        x=x,
        theta_bar=project(total / (config.T + 1), lo, hi),
        T=config.T,
        seed=rng.seed,
        stream_id=rng.stream_id,
        final_iterate=theta,
        trace=np.vstack(trace) if trace is not None else None,
    )


@exception_handler
def solve(
    problem: SimulationProblem,
    x: Any,
    config: PrSgdConfig,
    rng: RngStream,
    theta0: Any = None,
) -> InexactSolution:
    """
    Projected SGD with Polyak-Ruppert averaging at a single covariate.

    Runs T projected steps with step size gamma0*log(t+1)/(t+1), one oracle
    gradient per step, and reports the average of theta_0..theta_T.
    """
    x = problem.check_covariate(x)
    if theta0 is not None:
        theta0 = problem.check_decision(theta0)
    return _solve(problem, x, config, rng, theta0)


def _exact_label(
    problem: SimulationProblem,
    x: Array,
    config: PrSgdConfig,
    rng: RngStream,
    label_mode: LabelMode,
) -> InexactSolution:
    lo, hi = problem.decision_bounds
    label = problem.optimal_solution(x)
    if label_mode == "classical":
        scale = problem.solution_noise_scale(x) / math.sqrt(max(config.T, 1))
        label = label + scale * rng.generator.standard_normal(label.shape[0])
    return InexactSolution(
        x=x,
        theta_bar=project(label, lo, hi),
        T=config.T,
        seed=rng.seed,
        stream_id=rng.stream_id,
    )


@handle
def batch_solve(
    problem: SimulationProblem,
    design: CovariateDesign,
    config: PrSgdConfig,
    master_seed: int,
    workers: int = 1,
    label_mode: LabelMode = "prsgd",
) -> InexactSolutionSet:
    """
    Solves the subproblem at every design point.

    Covariate i draws from the stream keyed by (master_seed, i), so the
    result does not depend on `workers` or on the execution order.
    """
    if design.n == 0:
        raise InvalidInputError("design is empty")
    if label_mode != "prsgd" and not problem.has_exact_solution:
        raise InvalidInputError(f"label mode {label_mode!r} needs a closed-form optimum")
    for point in design.points:
        problem.check_covariate(point)

    def run(i: int, theta0: Array | None = None) -> InexactSolution:
        rng = derive_stream(master_seed, i)
        x = design.points[i]
        try:
            if label_mode == "prsgd":
                return _solve(problem, x, config, rng, theta0)
            return _exact_label(problem, x, config, rng, label_mode)
        except NumericFailureError as e:
            raise e.locate(covariate=i) from e

    if config.theta0_policy == "warm_start" and label_mode == "prsgd":
        solutions: list[InexactSolution] = []
        for i in range(design.n):
            theta0 = None
            if solutions:
                near = np.argmin(distances(design, design.points[i])[:i])
                theta0 = solutions[int(near)].theta_bar
            solutions.append(run(i, theta0))
    else:
        solutions = worker_map(run, range(design.n), workers)
    logger.debug(
        "solved %s covariates with T=%s (label_mode=%s)", design.n, config.T, label_mode
    )
    return InexactSolutionSet(
        design=design,
        solutions=solutions,
        config=config,
        master_seed=master_seed,
        label_mode=label_mode,
    )


@handle
def estimate_bias_variance(
    problem: SimulationProblem,
    x: Any,
    config: PrSgdConfig,
    replications: int,
    master_seed: int,
    workers: int = 1,
) -> tuple[Array, Array]:
    """Componentwise bias and sample variance of theta_bar over independent solves."""
    if replications < 2:
        raise InvalidInputError("at least two replications are needed")
    if not problem.has_exact_solution:
        raise InvalidInputError("bias needs a problem with a closed-form optimum")
    x = problem.check_covariate(x)
    bars = np.vstack(
        worker_map(
            lambda r: _solve(problem, x, config, derive_stream(master_seed, r)).theta_bar,
            range(replications),
            workers,
        )
    )
    bias = bars.mean(axis=0) - problem.optimal_solution(x)
    variance = bars.var(axis=0, ddof=1)
    return bias, variance
