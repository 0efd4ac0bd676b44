"""
Simulation oracles for contextual strongly convex simulation optimization.

`SimulationProblem` is the contract the offline stage relies on: dimension
accessors, the covariate domain and the feasible decision box, and a
stochastic gradient drawn from the simulator. Problems that know their exact
cost and optimum expose them too, which is what lets the evaluation code
compute optimality gaps without Monte Carlo.
"""

from __future__ import annotations

import math
import threading
from abc import ABC, abstractmethod
from typing import Any, Optional, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import ConfigDict, Field, model_validator
from scipy import optimize, special

from .oconst import (
    DEFAULT_COVARIATE_HI,
    DEFAULT_MU_MAX,
    DEFAULT_NOISE_SCALE,
    DEFAULT_OVERAGE_COST,
    DEFAULT_SHORTAGE_COST,
)
from .oschemas import Matrix, RngStream, Vector, _Base
from .outils import DegenerateDistributionError, InvalidInputError, get_logger

logger = get_logger(__name__)

Array = NDArray[np.float64]

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def normal_cdf(z: Any) -> Any:
    return special.ndtr(z)


def normal_pdf(z: Any) -> Any:
    return np.exp(-0.5 * np.square(z)) / _SQRT_2PI


def normal_quantile(alpha: float, tol: float = 1e-12) -> float:
    """Standard normal `alpha`-quantile, Newton-polished inside a bracket."""
    if not 0.0 < alpha < 1.0:
        raise InvalidInputError(f"quantile level must lie in (0, 1), got {alpha}")
    guess = float(special.ndtri(alpha))
    lo, hi = guess - 1.0, guess + 1.0
    root = optimize.newton(
        lambda z: normal_cdf(z) - alpha,
        guess,
        fprime=normal_pdf,
        tol=tol,
        maxiter=50,
    )
    if not lo <= root <= hi:
        root = optimize.brentq(lambda z: normal_cdf(z) - alpha, lo, hi, xtol=tol)
    return float(root)


class SimulationProblem(ABC):
    """Oracle contract for a CSCSO problem."""

    @property
    @abstractmethod
    def covariate_dim(self) -> int: ...

    @property
    @abstractmethod
    def decision_dim(self) -> int: ...

    @property
    @abstractmethod
    def covariate_bounds(self) -> tuple[Array, Array]: ...

    @property
    @abstractmethod
    def decision_bounds(self) -> tuple[Array, Array]: ...

    @abstractmethod
    def stochastic_gradient(self, theta: Array, x: Array, rng: RngStream) -> Array:
        """One unbiased draw of the gradient of f(.; x) at theta."""

    @property
    def has_exact_solution(self) -> bool:
        return False

    def expected_cost(self, theta: Array, x: Array) -> float:
        raise NotImplementedError(f"{type(self).__name__} has no closed-form cost")

    def cost_gradient(self, theta: Array, x: Array) -> Array:
        raise NotImplementedError(f"{type(self).__name__} has no closed-form gradient")

    def optimal_solution(self, x: Array) -> Array:
        raise NotImplementedError(f"{type(self).__name__} has no closed-form optimum")

    def solution_noise_scale(self, x: Array) -> Array:
        """Per-component scale of unbiased labels for the classical label mode."""
        raise NotImplementedError(f"{type(self).__name__} has no label noise model")

    def check_covariate(self, x: Any, *, bounds: bool = True) -> Array:
        arr = np.asarray(x, dtype=np.float64)
        if arr.shape != (self.covariate_dim,):
            raise InvalidInputError(
                f"covariate has shape {arr.shape}, expected ({self.covariate_dim},)"
            )
        if bounds:
            lo, hi = self.covariate_bounds
            slack = 1e-12 * np.maximum(1.0, hi - lo)
            if np.any(arr < lo - slack) or np.any(arr > hi + slack):
                raise InvalidInputError(f"covariate {arr.tolist()} outside the domain")
        return arr

    def check_decision(self, theta: Any) -> Array:
        arr = np.asarray(theta, dtype=np.float64)
        if arr.shape != (self.decision_dim,):
            raise InvalidInputError(
                f"decision has shape {arr.shape}, expected ({self.decision_dim},)"
            )
        return arr


class NewsvendorSpec(_Base):
    """
    Multi-product newsvendor with a linear factor demand model.

    Demand for product i is `D_i = sum_j w_ij Z_j + eps_i` with
    `Z_j ~ N(x_j, (gamma x_j)^2)` and `eps_i ~ N(mu_i, (gamma mu_i)^2)`.
    Omitted fields take the benchmark defaults.
    """

    q: int = Field(default=5, ge=1, description="Number of products")
    d: int = Field(default=2, ge=1, description="Number of risk factors")
    shortage_cost: Union[float, list[float]] = Field(
        default=DEFAULT_SHORTAGE_COST, description="Per-unit shortage cost c_s"
    )
    overage_cost: Union[float, list[float]] = Field(
        default=DEFAULT_OVERAGE_COST, description="Per-unit overage cost c_o"
    )
    noise_scale: float = Field(
        default=DEFAULT_NOISE_SCALE, ge=0.0, description="Coefficient of variation gamma"
    )
    factor_weights: Optional[Matrix] = Field(
        default=None, description="q x d demand loadings w_ij (default all ones)"
    )
    idiosyncratic_means: Optional[Vector] = Field(
        default=None, description="Idiosyncratic means mu_i (default equally spaced on [0, 0.4])"
    )
    covariate_lo: Optional[Vector] = Field(default=None, description="Covariate lower bounds")
    covariate_hi: Optional[Vector] = Field(default=None, description="Covariate upper bounds")
    decision_lo: Optional[Vector] = Field(default=None, description="Decision lower bounds")
    decision_hi: Optional[Vector] = Field(default=None, description="Decision upper bounds")

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="before")
    @classmethod
    def _fill_defaults(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        q = int(data.get("q", 5))
        d = int(data.get("d", 2))
        if data.get("factor_weights") is None:
            data["factor_weights"] = np.ones((q, d))
        if data.get("idiosyncratic_means") is None:
            data["idiosyncratic_means"] = (
                np.linspace(0.0, DEFAULT_MU_MAX, q) if q > 1 else np.zeros(1)
            )
        if data.get("covariate_lo") is None:
            data["covariate_lo"] = np.zeros(d)
        if data.get("covariate_hi") is None:
            data["covariate_hi"] = np.full(d, DEFAULT_COVARIATE_HI)
        for key in ("covariate_lo", "covariate_hi"):
            if np.ndim(data[key]) == 0:
                data[key] = np.full(d, float(data[key]))
        if data.get("decision_lo") is None:
            data["decision_lo"] = np.zeros(q)
        if np.ndim(data["decision_lo"]) == 0:
            data["decision_lo"] = np.full(q, float(data["decision_lo"]))
        if data.get("decision_hi") is None:
            data["decision_hi"] = _default_decision_hi(data)
        elif np.ndim(data["decision_hi"]) == 0:
            data["decision_hi"] = np.full(q, float(data["decision_hi"]))
        return data

    @model_validator(mode="after")
    def _check(self) -> NewsvendorSpec:
        q, d = self.q, self.d
        assert self.factor_weights is not None and self.idiosyncratic_means is not None
        assert self.covariate_lo is not None and self.covariate_hi is not None
        assert self.decision_lo is not None and self.decision_hi is not None
        if self.factor_weights.shape != (q, d):
            raise ValueError(f"factor_weights must be {q}x{d}")
        for name, vec, size in (
            ("idiosyncratic_means", self.idiosyncratic_means, q),
            ("covariate_lo", self.covariate_lo, d),
            ("covariate_hi", self.covariate_hi, d),
            ("decision_lo", self.decision_lo, q),
            ("decision_hi", self.decision_hi, q),
        ):
            if vec.shape != (size,):
                raise ValueError(f"{name} must have length {size}")
        if np.any(self.idiosyncratic_means < 0):
            raise ValueError("idiosyncratic_means must be nonnegative")
        if np.any(self.covariate_lo >= self.covariate_hi):
            raise ValueError("covariate_lo must be below covariate_hi")
        if np.any(self.decision_lo < 0) or np.any(self.decision_lo > self.decision_hi):
            raise ValueError("decision box must satisfy 0 <= decision_lo <= decision_hi")
        for name in ("shortage_cost", "overage_cost"):
            cost = np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64))
            if cost.shape not in ((1,), (q,)):
                raise ValueError(f"{name} must be a scalar or have length {q}")
            if np.any(cost <= 0):
                raise ValueError(f"{name} must be positive")
        return self

    def costs(self) -> tuple[Array, Array]:
        cs = np.broadcast_to(np.asarray(self.shortage_cost, dtype=np.float64), (self.q,))
        co = np.broadcast_to(np.asarray(self.overage_cost, dtype=np.float64), (self.q,))
        return cs.copy(), co.copy()

    @property
    def critical_ratio(self) -> Array:
        cs, co = self.costs()
        return cs / (cs + co)


def _default_decision_hi(data: dict[str, Any]) -> Array:
    """Mean demand plus four standard deviations at the far corner of the domain."""
    w = np.asarray(data["factor_weights"], dtype=np.float64)
    mu = np.asarray(data["idiosyncratic_means"], dtype=np.float64)
    lo = np.asarray(data["covariate_lo"], dtype=np.float64)
    hi = np.asarray(data["covariate_hi"], dtype=np.float64)
    gamma = float(data.get("noise_scale", DEFAULT_NOISE_SCALE))
    reach = np.maximum(np.abs(lo), np.abs(hi))
    mean = np.abs(w) @ reach + mu
    sd = gamma * np.sqrt(np.square(w) @ np.square(reach) + np.square(mu))
    return np.maximum(mean + 4.0 * sd, 1.0)


class Newsvendor(SimulationProblem):
    """Simulator and closed-form benchmark for a `NewsvendorSpec`."""

    def __init__(self, spec: NewsvendorSpec | None = None) -> None:
        self.spec = spec or NewsvendorSpec()
        s = self.spec
        assert s.factor_weights is not None and s.idiosyncratic_means is not None
        self._w = np.asarray(s.factor_weights)
        self._w2 = np.square(self._w)
        self._mu = np.asarray(s.idiosyncratic_means)
        self._cs, self._co = s.costs()
        self._z_alpha = np.array([normal_quantile(a) for a in s.critical_ratio])
        self._noise_loc_mu = self._mu
        self._noise_scale_mu = s.noise_scale * self._mu

    @property
    def covariate_dim(self) -> int:
        return self.spec.d

    @property
    def decision_dim(self) -> int:
        return self.spec.q

    @property
    def covariate_bounds(self) -> tuple[Array, Array]:
        assert self.spec.covariate_lo is not None and self.spec.covariate_hi is not None
        return self.spec.covariate_lo, self.spec.covariate_hi

    @property
    def decision_bounds(self) -> tuple[Array, Array]:
        assert self.spec.decision_lo is not None and self.spec.decision_hi is not None
        return self.spec.decision_lo, self.spec.decision_hi

    @property
    def has_exact_solution(self) -> bool:
        return True

    def demand_moments(self, x: Array) -> tuple[Array, Array]:
        """Mean and standard deviation of the demand vector at `x`."""
        mean = self._w @ x + self._mu
        sd = self.spec.noise_scale * np.sqrt(self._w2 @ np.square(x) + np.square(self._mu))
        return mean, sd

    def sample_demand(self, x: Array, rng: RngStream) -> Array:
        """One demand realization; draws d common factors then q idiosyncratic terms."""
        x = self.check_covariate(x, bounds=False)
        loc = np.concatenate((x, self._noise_loc_mu))
        scale = np.concatenate((self.spec.noise_scale * np.abs(x), self._noise_scale_mu))
        draws = rng.generator.normal(loc, scale)
        return self._w @ draws[: self.spec.d] + draws[self.spec.d :]

    def stochastic_gradient(self, theta: Array, x: Array, rng: RngStream) -> Array:
        theta = self.check_decision(theta)
        demand = self.sample_demand(x, rng)
        return np.where(demand > theta, -self._cs, self._co)

    def expected_cost(self, theta: Array, x: Array) -> float:
        theta = self.check_decision(theta)
        x = self.check_covariate(x, bounds=False)
        mean, sd = self._moments_checked(x)
        z = (theta - mean) / sd
        cdf, pdf = normal_cdf(z), normal_pdf(z)
        shortage = sd * (pdf - z * (1.0 - cdf))
        overage = sd * (pdf + z * cdf)
        return float(np.sum(self._cs * shortage + self._co * overage))

    def cost_gradient(self, theta: Array, x: Array) -> Array:
        theta = self.check_decision(theta)
        x = self.check_covariate(x, bounds=False)
        mean, sd = self._moments_checked(x)
        cdf = normal_cdf((theta - mean) / sd)
        return -self._cs * (1.0 - cdf) + self._co * cdf

    def optimal_solution(self, x: Array) -> Array:
        x = self.check_covariate(x)
        mean, sd = self.demand_moments(x)
        return mean + self._z_alpha * sd

    def solution_noise_scale(self, x: Array) -> Array:
        return self.demand_moments(self.check_covariate(x, bounds=False))[1]

    def _moments_checked(self, x: Array) -> tuple[Array, Array]:
        mean, sd = self.demand_moments(x)
        if np.any(sd <= 0.0):
            raise DegenerateDistributionError(
                f"demand has zero variance at x={x.tolist()} "
                f"for products {np.flatnonzero(sd <= 0.0).tolist()}"
            )
        return mean, sd


class CountingOracle(SimulationProblem):
    """Wraps a problem and counts stochastic-gradient calls across threads."""

    def __init__(self, problem: SimulationProblem) -> None:
        self.problem = problem
        self._lock = threading.Lock()
        self.calls = 0

    def __repr__(self) -> str:
        return f"CountingOracle({self.problem!r}, calls={self.calls})"

    @property
    def covariate_dim(self) -> int:
        return self.problem.covariate_dim

    @property
    def decision_dim(self) -> int:
        return self.problem.decision_dim

    @property
    def covariate_bounds(self) -> tuple[Array, Array]:
        return self.problem.covariate_bounds

    @property
    def decision_bounds(self) -> tuple[Array, Array]:
        return self.problem.decision_bounds

    @property
    def has_exact_solution(self) -> bool:
        return self.problem.has_exact_solution

    def stochastic_gradient(self, theta: Array, x: Array, rng: RngStream) -> Array:
        with self._lock:
            self.calls += 1
        return self.problem.stochastic_gradient(theta, x, rng)

    # closed forms are not simulation calls
    def expected_cost(self, theta: Array, x: Array) -> float:
        return self.problem.expected_cost(theta, x)

    def cost_gradient(self, theta: Array, x: Array) -> Array:
        return self.problem.cost_gradient(theta, x)

    def optimal_solution(self, x: Array) -> Array:
        return self.problem.optimal_solution(x)

    def solution_noise_scale(self, x: Array) -> Array:
        return self.problem.solution_noise_scale(x)

    def check_covariate(self, x: Any, *, bounds: bool = True) -> Array:
        return self.problem.check_covariate(x, bounds=bounds)

    def check_decision(self, theta: Any) -> Array:
        return self.problem.check_decision(theta)

    def reset(self) -> None:
        with self._lock:
            self.calls = 0
