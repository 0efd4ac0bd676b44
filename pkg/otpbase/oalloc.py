from __future__ import annotations

import math
from typing import Literal, Optional

from pydantic import Field

from .oconst import AllocationRule, Setting, Split, Technique
from .oschemas import _Base
from .osmooth import BasisSpec, SmootherSpec
from .outils import InfeasibleBudgetError, InvalidInputError, get_logger

logger = get_logger(__name__)

MIN_BUDGET = 16


class AllocationOverrides(_Base):
    """Pins any part of a plan; the rest follows the technique's rule."""

    T: Optional[int] = Field(default=None, ge=1)
    n: Optional[int] = Field(default=None, ge=1)
    exponent: Optional[float] = Field(default=None, gt=0.0, le=1.0)
    k: Optional[int] = Field(default=None, ge=1)
    h: Optional[float] = Field(default=None, gt=0.0)
    lam: Optional[float] = Field(default=None, gt=0.0)


class AllocationPlan(_Base):
    technique: Technique
    Gamma: int = Field(..., ge=1, description="Total simulation budget")
    n: int = Field(..., ge=1, description="Design points")
    T: int = Field(..., ge=1, description="PR-SGD iterations per design point")
    hyper: Optional[float] = Field(default=None, description="k, h or lambda")
    exponent_used: float = Field(..., description="log T / log Gamma")
    d: int = Field(..., ge=1)
    m: Optional[float] = Field(default=None, description="Smoothness; None is infinite")
    basis_size: Optional[int] = Field(default=None, description="LR feature count s")
    rule: AllocationRule = "optimal"
    split: Split = Field(default="midpoint", description="kNN/KS T convention")

    @property
    def used_budget(self) -> int:
        return self.n * self.T

    def summary(self) -> str:
        hyper = "-" if self.hyper is None else f"{self.hyper:.6g}"
        return (
            f"{self.technique} rule={self.rule} Gamma={self.Gamma} n={self.n} "
            f"T={self.T} hyper={hyper} exponent={self.exponent_used:.4f} "
            f"used={self.used_budget}"
        )

    def smoother_spec(self, base: SmootherSpec | None = None) -> SmootherSpec:
        """The smoother this plan prescribes, keeping any other settings of `base`."""
        update: dict[str, object] = {"kind": self.technique}
        if self.technique == "knn":
            update["k"] = int(round(self.hyper or 1))
        elif self.technique == "ks":
            update["h"] = self.hyper
        elif self.technique == "krr":
            update["lam"] = self.hyper
        if base is None:
            return SmootherSpec.model_validate(update)
        return SmootherSpec.model_validate({**base.model_dump(), **update})


class Finding(_Base):
    level: Literal["info", "warning"]
    code: str
    message: str


def _exponent(T: int, gamma: int) -> float:
    return math.log(T) / math.log(gamma) if gamma > 1 else 0.0


def _below(bound: float) -> int:
    """Largest integer strictly below `bound`, at least 1."""
    return max(1, math.ceil(bound) - 1)


def _lr_basis_size(d: int, basis: BasisSpec | None) -> int:
    return (basis or BasisSpec()).size(d)


def _hyper(
    technique: Technique,
    gamma: int,
    d: int,
    T: int,
    domain_scale: float,
    overrides: AllocationOverrides,
) -> Optional[float]:
    if technique == "knn":
        if overrides.k is not None:
            return float(overrides.k)
        return float(max(2, round(gamma ** (2.0 / (d + 2)) / T)))
    if technique == "ks":
        if overrides.h is not None:
            return overrides.h
        return gamma ** (-1.0 / (d + 2)) * domain_scale
    if technique == "krr":
        return overrides.lam if overrides.lam is not None else 1.0 / gamma
    return None


def allocate(
    technique: Technique,
    Gamma: int,
    d: int,
    m: float | None = None,
    overrides: AllocationOverrides | None = None,
    domain_scale: float = 1.0,
    basis: BasisSpec | None = None,
    split: Split = "midpoint",
) -> AllocationPlan:
    """
    Splits the budget Gamma = n*T following the midpoint-exponent convention.

    T's exponent sits at the middle of the technique's optimal interval
    (knn/ks 1.5/(d+2), lr 3/4, krr 3/4 - 3d/(8m)); n takes the floor of
    Gamma/T. `m=None` means an infinitely smooth solution function.

    With `split="upper"` kNN and KS take the largest integer T strictly
    below Gamma^(2/(d+2)): T and n are comparable at d=2 and T grows slowly
    for larger d. LR and KRR ignore `split`.

    LR keeps n >= s+1: when Gamma//T is smaller, n = s+1 and T = Gamma//n.
    """
    overrides = overrides or AllocationOverrides()
    if Gamma < MIN_BUDGET:
        raise InvalidInputError(f"Gamma={Gamma} is below the minimum budget {MIN_BUDGET}")
    if d < 1:
        raise InvalidInputError("d must be positive")
    if m is not None and math.isinf(m):
        m = None
    if technique == "krr" and m is not None and m <= d / 2:
        raise InvalidInputError(f"krr needs smoothness m > d/2, got m={m}, d={d}")
    if technique in ("knn", "ks"):
        exponent = 1.5 / (d + 2)
    elif technique == "lr":
        exponent = 0.75
    else:
        exponent = 0.75 - (3.0 * d / (8.0 * m) if m is not None else 0.0)
    if overrides.exponent is not None:
        exponent = overrides.exponent
    T = max(1, round(Gamma**exponent))
    if technique in ("knn", "ks") and split == "upper" and overrides.exponent is None:
        T = _below(Gamma ** (2.0 / (d + 2)))
    if overrides.T is not None:
        T = overrides.T
    s = _lr_basis_size(d, basis) if technique == "lr" else None
    n = overrides.n if overrides.n is not None else Gamma // T
    if technique == "lr" and overrides.T is None and overrides.n is None:
        assert s is not None
        if n < s + 1:
            T = max(1, Gamma // (s + 1))
            n = max(s + 1, Gamma // T)
    if n * T > Gamma:
        raise InfeasibleBudgetError(
            f"n*T={n * T} exceeds Gamma={Gamma}", constraint="budget"
        )
    hyper = _hyper(technique, Gamma, d, T, domain_scale, overrides)
    _check_minimum(technique, n, hyper, s)
    plan = AllocationPlan(
        technique=technique,
        Gamma=Gamma,
        n=n,
        T=T,
        hyper=hyper,
        exponent_used=_exponent(T, Gamma),
        d=d,
        m=m,
        basis_size=s,
        split=split,
    )
    logger.debug("allocated %s", plan.summary())
    return plan


def _check_minimum(
    technique: Technique, n: int, hyper: Optional[float], s: Optional[int]
) -> None:
    if n < 2:
        raise InfeasibleBudgetError(f"n={n} design points; at least 2 are needed", "n >= 2")
    if technique == "lr" and s is not None and n < s:
        raise InfeasibleBudgetError(
            f"n={n} design points cannot identify s={s} basis coefficients", "n >= s"
        )
    if technique == "knn" and hyper is not None and n <= hyper:
        raise InfeasibleBudgetError(
            f"n={n} design points leave no choice among k={int(hyper)} neighbours",
            "n > k",
        )


def fixed_T_plan(
    technique: Technique,
    Gamma: int,
    T_bar: int,
    d: int,
    m: float | None = None,
    domain_scale: float = 1.0,
    basis: BasisSpec | None = None,
) -> AllocationPlan:
    """Benchmark rule: every design point gets T_bar iterations."""
    if T_bar < 1:
        raise InvalidInputError("T_bar must be positive")
    n = Gamma // T_bar
    if n == 0:
        raise InfeasibleBudgetError(
            f"Gamma={Gamma} cannot fund a single solve of T={T_bar}", "n >= 1"
        )
    hyper = _hyper(technique, Gamma, d, T_bar, domain_scale, AllocationOverrides())
    if technique == "knn" and hyper is not None:
        hyper = float(min(hyper, n))
    return AllocationPlan(
        technique=technique,
        Gamma=Gamma,
        n=n,
        T=T_bar,
        hyper=hyper,
        exponent_used=_exponent(T_bar, Gamma),
        d=d,
        m=None if m is None or math.isinf(m) else m,
        basis_size=_lr_basis_size(d, basis) if technique == "lr" else None,
        rule="fixed_T",
    )


def technique_interval(
    technique: Technique,
    Gamma: int,
    d: int,
    m: float | None = None,
    setting: Setting = "otp",
) -> tuple[float, float, bool]:
    """(lower, upper, upper_is_closed) bounds on T from the optimal-rate theory."""
    if technique in ("knn", "ks"):
        lo = 1.0 / (d + 2) if setting == "otp" else 0.0
        return Gamma**lo, Gamma ** (2.0 / (d + 2)), False
    if technique == "lr":
        lo = 0.5 if setting == "otp" else 0.0
        return Gamma**lo, float(Gamma), True
    ratio = 0.0 if m is None or math.isinf(m) else d / m
    lo = 0.5 - ratio / 4.0 if setting == "otp" else 0.0
    return Gamma**lo, Gamma ** (1.0 - ratio / 2.0), False


def in_interval(T: int, lower: float, upper: float, closed: bool) -> bool:
    """
    Integer membership. The lower end rounds down, and an interval holding
    no integer admits its floor.
    """
    floor = math.floor(lower + 1e-9)
    top = max(upper, floor + 1.0)
    return floor <= T and (T <= top if closed else T < top)


def validate_plan(plan: AllocationPlan, setting: Setting = "otp") -> list[Finding]:
    """Checks a plan against the theoretical T interval and its budget use."""
    findings: list[Finding] = []
    lower, upper, closed = technique_interval(
        plan.technique, plan.Gamma, plan.d, plan.m, setting
    )
    bracket = "]" if closed else ")"
    span = f"[{lower:.4g}, {upper:.4g}{bracket}"
    if in_interval(plan.T, lower, upper, closed):
        findings.append(
            Finding(level="info", code="in_interval", message=f"T={plan.T} lies in {span}")
        )
    else:
        findings.append(
            Finding(
                level="warning",
                code="out_of_interval",
                message=f"T={plan.T} lies outside the {setting} interval {span}",
            )
        )
    remainder = plan.Gamma - plan.used_budget
    if remainder >= plan.T:
        findings.append(
            Finding(
                level="warning",
                code="budget_unused",
                message=f"{remainder} of Gamma={plan.Gamma} unused (T={plan.T})",
            )
        )
    if plan.n < plan.d + 1:
        findings.append(
            Finding(
                level="warning",
                code="coverage",
                message=f"n={plan.n} is below recommended coverage of d+1={plan.d + 1} points",
            )
        )
    if plan.technique == "lr" and plan.basis_size is not None and plan.n < plan.basis_size + 1:
        findings.append(
            Finding(
                level="warning",
                code="identifiability",
                message=f"n={plan.n} < s+1={plan.basis_size + 1}: coefficients not identifiable",
            )
        )
    if plan.technique == "knn" and plan.hyper is not None and plan.n <= plan.hyper:
        findings.append(
            Finding(
                level="warning",
                code="neighbourhood",
                message=f"n={plan.n} does not exceed k={int(plan.hyper)}",
            )
        )
    for finding in findings:
        if finding.level == "warning":
            logger.warning("%s: %s", plan.summary(), finding.message)
    return findings


def is_fittable(plan: AllocationPlan) -> bool:
    """Whether the plan's design can carry its smoother at all."""
    if plan.technique == "lr" and plan.basis_size is not None:
        return plan.n >= plan.basis_size + 1
    return plan.n >= 1
