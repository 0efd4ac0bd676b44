from __future__ import annotations

import math
from typing import Any, Sequence

import numpy as np
from numpy.typing import NDArray
from pydantic import Field, model_validator
from scipy import stats

from .oconst import GAP_CLAMP, LabelMode
from .odesign import CovariateDesign
from .oproblem import SimulationProblem
from .oschemas import Vector, _Base, stream_key
from .osgd import InexactSolutionSet, PrSgdConfig, batch_solve
from .osmooth import SmootherSpec, fit
from .outils import (
    InvalidInputError,
    UndefinedGapError,
    get_logger,
    handle,
    worker_map,
)

logger = get_logger(__name__)

Array = NDArray[np.float64]


class GapRecord(_Base):
    x: Vector
    theta_hat: Vector
    cost_hat: float
    cost_star: float
    relative_gap: float = Field(..., ge=0.0)
    clamped: bool = Field(default=False, description="A negative rounding gap was set to 0")


class GapSummary(_Base):
    mean: float
    sd: float
    min: float
    max: float
    count: int
    clamped: int = 0


class RateFit(_Base):
    gammas: list[float]
    mean_gaps: list[float]
    slope: float
    intercept: float
    r_squared: float = Field(..., ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _lengths(self) -> RateFit:
        if len(self.gammas) != len(self.mean_gaps) or len(self.gammas) < 3:
            raise ValueError("a rate fit needs at least 3 (Gamma, gap) pairs")
        return self


class MseDecomposition(_Base):
    """Monte-Carlo split of the prediction error at one covariate."""

    bias_sq: float = Field(..., description="Interpolation plus solution bias, squared")
    variance: float = Field(..., description="Trace of the prediction covariance")
    total_mse: float = Field(..., description="bias_sq + variance")
    mean_sq_error: float = Field(..., description="Direct mean of ||theta_hat - theta*||^2")
    mse_standard_error: float
    replications: int

    @property
    def consistent(self) -> bool:
        """Whether the decomposition matches the direct estimate within 4 standard errors."""
        tolerance = 4.0 * self.mse_standard_error + 1e-12 * max(1.0, self.mean_sq_error)
        return abs(self.total_mse - self.mean_sq_error) <= tolerance

    def as_tuple(self) -> tuple[float, float, float]:
        return self.bias_sq, self.variance, self.total_mse


def _require_exact(problem: SimulationProblem) -> None:
    if not problem.has_exact_solution:
        raise InvalidInputError(
            f"{type(problem).__name__} has no closed-form cost and optimum"
        )


def gap_from_costs(cost_hat: float, cost_star: float) -> tuple[float, bool]:
    """Relative gap (cost_hat - cost_star)/cost_star; negatives clamp to 0."""
    if cost_star <= 0.0 or not math.isfinite(cost_star):
        raise UndefinedGapError(f"relative gap undefined for optimal cost {cost_star}")
    gap = (cost_hat - cost_star) / cost_star
    if gap < 0.0:
        if gap < -GAP_CLAMP:
            logger.warning("relative gap %s below the clamp tolerance", gap)
        return 0.0, True
    return gap, False


def relative_optimality_gap(
    problem: SimulationProblem, theta_hat: Any, x: Any
) -> GapRecord:
    _require_exact(problem)
    x = problem.check_covariate(x)
    theta_hat = problem.check_decision(theta_hat)
    cost_star = problem.expected_cost(problem.optimal_solution(x), x)
    cost_hat = problem.expected_cost(theta_hat, x)
    gap, clamped = gap_from_costs(cost_hat, cost_star)
    return GapRecord(
        x=x,
        theta_hat=theta_hat,
        cost_hat=cost_hat,
        cost_star=cost_star,
        relative_gap=gap,
        clamped=clamped,
    )


def gap_records(
    problem: SimulationProblem, thetas: Array, xs: Array
) -> list[GapRecord]:
    return [relative_optimality_gap(problem, t, x) for t, x in zip(thetas, xs)]


def summarize(records: Sequence[GapRecord]) -> GapSummary:
    """Mean, standard deviation, minimum and maximum of the relative gaps."""
    if not records:
        raise InvalidInputError("no gap records to summarize")
    gaps = np.array([r.relative_gap for r in records])
    return GapSummary(
        mean=float(gaps.mean()),
        sd=float(gaps.std(ddof=1)) if gaps.size > 1 else 0.0,
        min=float(gaps.min()),
        max=float(gaps.max()),
        count=int(gaps.size),
        clamped=sum(r.clamped for r in records),
    )


def offline_gaps(problem: SimulationProblem, data: InexactSolutionSet) -> list[GapRecord]:
    """Gaps of the reported solutions at their own design covariates."""
    return gap_records(problem, data.theta_bars, data.design.points)


def empirical_rate(gammas: Sequence[float], mean_gaps: Sequence[float]) -> RateFit:
    """Ordinary least squares of log(gap) on log(Gamma)."""
    g = np.asarray(gammas, dtype=np.float64)
    y = np.asarray(mean_gaps, dtype=np.float64)
    if g.shape != y.shape or g.size < 3:
        raise InvalidInputError("need at least 3 budgets with one gap each")
    if np.any(y <= 0.0) or np.any(g <= 0.0):
        raise InvalidInputError("budgets and gaps must be positive for a log-log fit")
    if g.max() / g.min() < 10.0:
        raise InvalidInputError("budgets must span at least one decade")
    fitted = stats.linregress(np.log(g), np.log(y))
    r_squared = float(fitted.rvalue**2) if math.isfinite(fitted.rvalue) else 0.0
    return RateFit(
        gammas=g.tolist(),
        mean_gaps=y.tolist(),
        slope=float(fitted.slope),
        intercept=float(fitted.intercept),
        r_squared=min(1.0, max(0.0, r_squared)),
    )


@handle
def mse_decomposition_estimate(
    problem: SimulationProblem,
    design: CovariateDesign,
    config: PrSgdConfig,
    spec: SmootherSpec,
    x: Any,
    replications: int,
    master_seed: int,
    label_mode: LabelMode = "prsgd",
    workers: int = 1,
) -> MseDecomposition:
    """
    Repeats the offline stage `replications` times on a fixed design and
    splits the error of the prediction at `x` into squared bias and variance.
    """
    if replications < 10:
        raise InvalidInputError("the decomposition needs at least 10 replications")
    _require_exact(problem)
    x = problem.check_covariate(x)
    target = problem.optimal_solution(x)

    def replicate(r: int) -> Array:
        data = batch_solve(
            problem,
            design,
            config,
            master_seed=stream_key(master_seed, r, "solve"),
            label_mode=label_mode,
        )
        fitted = fit(spec, data, problem.decision_bounds)
        return fitted.predict_many(x[None, :])[0]

    preds = np.vstack(worker_map(replicate, range(replications), workers))
    bias = preds.mean(axis=0) - target
    bias_sq = float(bias @ bias)
    variance = float(preds.var(axis=0, ddof=1).sum())
    sq_err = np.sum((preds - target) ** 2, axis=1)
    result = MseDecomposition(
        bias_sq=bias_sq,
        variance=variance,
        total_mse=bias_sq + variance,
        mean_sq_error=float(sq_err.mean()),
        mse_standard_error=float(sq_err.std(ddof=1) / math.sqrt(replications)),
        replications=replications,
    )
    if not result.consistent:
        logger.warning(
            "bias^2 + variance = %s differs from the direct MSE %s",
            result.total_mse,
            result.mean_sq_error,
        )
    return result
