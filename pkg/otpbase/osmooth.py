"""
Smoothers for the optimal-solution function.

Every technique here predicts through a weight vector over the design,
theta_hat(x) = sum_i w(x_i, x) * theta_bar(x_i), and the same weights are
shared by all q output columns:

* ``knn``  -- average of the k nearest design solutions
* ``ks``   -- Nadaraya-Watson with the sphere (indicator) kernel of radius h
* ``lr``   -- least squares on a fixed basis phi(x)
* ``krr``  -- kernel ridge regression, weights (R + n*lambda*I)^-1 r(x), fitted
  to the labels minus their mean, which is added back
"""

from __future__ import annotations

import itertools
import math
from typing import Any, Literal, Optional, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import ConfigDict, Field, PrivateAttr, model_validator
from scipy import linalg
from scipy.spatial.distance import cdist

from .oconst import KRR_LENGTHSCALE_FRACTION, Technique
from .odesign import CovariateDesign, distances
from .oschemas import Matrix, Vector, _Base
from .osgd import InexactSolutionSet
from .outils import (
    EmptyNeighborhoodError,
    IllConditionedError,
    InvalidInputError,
    UnderdeterminedError,
    get_logger,
    handle,
)

logger = get_logger(__name__)

Array = NDArray[np.float64]

FeatureDescriptor = Union[Literal["norm"], list[int]]


class BasisSpec(_Base):
    kind: Literal["linear_plus_norm", "polynomial", "custom"] = "linear_plus_norm"
    degree: int = Field(default=1, ge=0, description="Total degree for `polynomial`")
    features: Optional[list[FeatureDescriptor]] = Field(
        default=None,
        description="For `custom`: monomial exponent lists of length d, or 'norm'",
    )
    include_intercept: bool = True

    @model_validator(mode="after")
    def _check(self) -> BasisSpec:
        if self.kind == "custom" and not self.features:
            raise ValueError("a custom basis needs at least one feature")
        if self.kind == "polynomial" and self.degree == 0 and not self.include_intercept:
            raise ValueError("a degree-0 polynomial basis needs the intercept")
        return self

    def size(self, d: int) -> int:
        return basis_matrix(self, np.zeros((1, d))).shape[1]


class KernelSpec(_Base):
    family: Literal["matern", "squared_exponential"] = "squared_exponential"
    nu: Optional[Literal[0.5, 1.5, 2.5]] = Field(
        default=None, description="Matern smoothness"
    )
    lengthscale: float = Field(..., gt=0.0)

    @model_validator(mode="after")
    def _check(self) -> KernelSpec:
        if self.family == "matern" and self.nu is None:
            raise ValueError("a Matern kernel needs nu in {0.5, 1.5, 2.5}")
        return self


class SmootherSpec(_Base):
    """Technique plus hyperparameters; unused hyperparameters stay None."""

    model_config = ConfigDict(populate_by_name=True)

    kind: Technique
    k: Optional[int] = Field(default=None, ge=1, description="kNN neighbours")
    h: Optional[float] = Field(default=None, gt=0.0, description="KS bandwidth")
    basis: BasisSpec = Field(default_factory=BasisSpec, description="LR basis")
    kernel: Optional[KernelSpec] = Field(
        default=None, description="KRR kernel; default squared exponential"
    )
    lam: Optional[float] = Field(
        default=None, gt=0.0, alias="lambda", description="KRR regularization"
    )
    center: bool = Field(
        default=True, description="KRR: fit the kernel part to labels minus their mean"
    )
    project: bool = Field(default=True, description="Clamp predictions onto the box")
    empty_fallback: Literal["error", "nearest"] = Field(
        default="error", description="KS behaviour when no design point lies within h"
    )

    @model_validator(mode="after")
    def _check(self) -> SmootherSpec:
        required = {"knn": "k", "ks": "h", "krr": "lam"}
        field = required.get(self.kind)
        if field is not None and getattr(self, field) is None:
            raise ValueError(f"{self.kind} needs `{field}`")
        return self

    @property
    def hyper(self) -> float | None:
        return {"knn": self.k, "ks": self.h, "lr": None, "krr": self.lam}[self.kind]


def kernel_matrix(kernel: KernelSpec, a: Any, b: Any) -> Array:
    r = cdist(np.atleast_2d(a), np.atleast_2d(b)) / kernel.lengthscale
    if kernel.family == "squared_exponential":
        return np.exp(-0.5 * r**2)
    if kernel.nu == 0.5:
        return np.exp(-r)
    if kernel.nu == 1.5:
        s = math.sqrt(3.0) * r
        return (1.0 + s) * np.exp(-s)
    s = math.sqrt(5.0) * r
    return (1.0 + s + 5.0 * r**2 / 3.0) * np.exp(-s)


def kernel_eval(kernel: KernelSpec, x: Any, y: Any) -> float:
    return float(kernel_matrix(kernel, x, y)[0, 0])


def _exponents(basis: BasisSpec, d: int) -> list[FeatureDescriptor]:
    if basis.kind == "linear_plus_norm":
        unit: list[FeatureDescriptor] = [[int(i == j) for j in range(d)] for i in range(d)]
        # |x| repeats x on a one-sided line
        return unit if d == 1 else [*unit, "norm"]
    if basis.kind == "polynomial":
        feats: list[FeatureDescriptor] = []
        for degree in range(1, basis.degree + 1):
            for combo in itertools.combinations_with_replacement(range(d), degree):
                feats.append([combo.count(j) for j in range(d)])
        return feats
    assert basis.features is not None
    for feat in basis.features:
        if feat != "norm" and (len(feat) != d or min(feat) < 0):
            raise InvalidInputError(f"feature {feat} is not a length-{d} exponent list")
    return list(basis.features)


def basis_matrix(basis: BasisSpec, xs: Any) -> Array:
    """Rows phi(x) for each covariate row of `xs`."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    cols = [np.ones(xs.shape[0])] if basis.include_intercept else []
    for feat in _exponents(basis, xs.shape[1]):
        if feat == "norm":
            cols.append(np.linalg.norm(xs, axis=1))
        else:
            cols.append(np.prod(xs ** np.asarray(feat), axis=1))
    return np.column_stack(cols)


def basis_eval(basis: BasisSpec, x: Any) -> Array:
    return basis_matrix(basis, x)[0]


def _smallest_pivot(a: Array) -> float:
    _, diag, _ = linalg.ldl(a)
    return float(np.min(np.diag(diag)))


def _cholesky(a: Array, what: str) -> tuple[Array, bool]:
    try:
        return linalg.cho_factor(a, lower=True)
    except linalg.LinAlgError as e:
        pivot = _smallest_pivot(a)
        raise IllConditionedError(
            f"{what} is not numerically positive definite (smallest pivot {pivot:.3e})",
            smallest_pivot=pivot,
        ) from e


class FittedSolutionMap(_Base):
    """
    A fitted smoother. Factorizations are rebuilt on construction, so a map
    loaded from JSON predicts exactly like the one that was saved.
    """

    spec: SmootherSpec
    design: CovariateDesign
    train_solutions: Matrix = Field(..., description="n x q reported solutions")
    decision_lo: Optional[Vector] = None
    decision_hi: Optional[Vector] = None
    coefficients: Optional[Matrix] = Field(
        default=None, description="LR only: s x q coefficients in the original basis"
    )

    _factor: Any = PrivateAttr(default=None)
    _alpha: Optional[Array] = PrivateAttr(default=None)
    _offset: Optional[Array] = PrivateAttr(default=None)
    _shift: Optional[Array] = PrivateAttr(default=None)
    _scale: Optional[Array] = PrivateAttr(default=None)

    @model_validator(mode="after")
    def _check(self) -> FittedSolutionMap:
        n = self.design.n
        if self.train_solutions.shape[0] != n:
            raise ValueError("train_solutions must have one row per design point")
        if self.spec.kind == "knn" and self.spec.k is not None and self.spec.k > n:
            raise ValueError(f"k={self.spec.k} exceeds n={n}")
        return self

    def model_post_init(self, __context: Any) -> None:
        if self.spec.kind == "lr":
            self._fit_lr()
        elif self.spec.kind == "krr":
            self._fit_krr()

    @property
    def n(self) -> int:
        return self.design.n

    @property
    def q(self) -> int:
        return int(self.train_solutions.shape[1])

    def _fit_lr(self) -> None:
        phi = basis_matrix(self.spec.basis, self.design.points)
        n, s = phi.shape
        if n < s:
            raise UnderdeterminedError(f"linear regression needs n >= s, got n={n}, s={s}")
        shift = np.zeros(s)
        scale = np.ones(s)
        free = np.ones(s, dtype=bool)
        if self.spec.basis.include_intercept:
            free[0] = False
            shift[free] = phi[:, free].mean(axis=0)
            spread = phi[:, free].std(axis=0)
        else:
            spread = np.sqrt(np.mean(phi**2, axis=0))
        scale[free] = np.where(spread > 0.0, spread, 1.0)
        self._shift, self._scale = shift, scale
        std = (phi - shift) / scale
        self._factor = _cholesky(std.T @ std, "normal-equations matrix")
        coef_std = linalg.cho_solve(self._factor, std.T @ self.train_solutions)
        coef = coef_std / scale[:, None]
        if self.spec.basis.include_intercept:
            coef[0] -= shift[free] @ coef[free]
        object.__setattr__(self, "coefficients", coef)

    def _fit_krr(self) -> None:
        assert self.spec.lam is not None
        if self.spec.kernel is None:
            kernel = KernelSpec(lengthscale=KRR_LENGTHSCALE_FRACTION * self.design.diameter)
            object.__setattr__(self, "spec", self.spec.model_copy(update={"kernel": kernel}))
        assert self.spec.kernel is not None
        gram = kernel_matrix(self.spec.kernel, self.design.points, self.design.points)
        gram[np.diag_indices_from(gram)] += self.n * self.spec.lam
        self._factor = _cholesky(gram, "kernel system R + n*lambda*I")
        q = self.train_solutions.shape[1]
        self._offset = self.train_solutions.mean(axis=0) if self.spec.center else np.zeros(q)
        self._alpha = linalg.cho_solve(self._factor, self.train_solutions - self._offset)

    def weights_many(self, xs: Any) -> Array:
        """m x n weight matrix for an m x d block of covariates."""
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        dist = distances(self.design, xs)
        kind = self.spec.kind
        if kind == "knn":
            assert self.spec.k is not None
            k = self.spec.k
            idx = np.argsort(dist, axis=1, kind="stable")[:, :k]
            w = np.zeros_like(dist)
            np.put_along_axis(w, idx, 1.0 / k, axis=1)
            return w
        if kind == "ks":
            inside = (dist <= self.spec.h).astype(np.float64)
            counts = inside.sum(axis=1)
            empty = np.flatnonzero(counts == 0)
            if empty.size:
                if self.spec.empty_fallback == "error":
                    raise EmptyNeighborhoodError(
                        f"no design point within h={self.spec.h} of "
                        f"{xs[empty[0]].tolist()}"
                    )
                nearest = np.argmin(dist[empty], axis=1)
                inside[empty, nearest] = 1.0
                counts[empty] = 1.0
            return inside / counts[:, None]
        if kind == "lr":
            assert self._shift is not None and self._scale is not None
            std_train = (basis_matrix(self.spec.basis, self.design.points) - self._shift) / self._scale
            std_query = (basis_matrix(self.spec.basis, xs) - self._shift) / self._scale
            return linalg.cho_solve(self._factor, std_query.T).T @ std_train.T
        assert self.spec.kernel is not None
        cross = kernel_matrix(self.spec.kernel, xs, self.design.points)
        w = linalg.cho_solve(self._factor, cross.T).T
        if self.spec.center:
            w += (1.0 - w.sum(axis=1, keepdims=True)) / self.n
        return w

    def predict_many(self, xs: Any) -> Array:
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        if self.spec.kind == "krr":
            assert self.spec.kernel is not None and self._alpha is not None
            out = self._offset + kernel_matrix(self.spec.kernel, xs, self.design.points) @ self._alpha
        elif self.spec.kind == "lr":
            assert self.coefficients is not None
            out = basis_matrix(self.spec.basis, xs) @ self.coefficients
        else:
            out = self.weights_many(xs) @ self.train_solutions
        if self.spec.project and self.decision_lo is not None and self.decision_hi is not None:
            out = np.clip(out, self.decision_lo, self.decision_hi)
        return out


@handle
def fit(
    spec: SmootherSpec,
    data: InexactSolutionSet,
    decision_bounds: tuple[Any, Any] | None = None,
) -> FittedSolutionMap:
    """Fits `spec` to the covariate-solution pairs in `data`."""
    if data.design.n < 1:
        raise InvalidInputError("cannot fit on an empty design")
    lo, hi = decision_bounds if decision_bounds is not None else (None, None)
    return FittedSolutionMap(
        spec=spec,
        design=data.design,
        train_solutions=data.theta_bars,
        decision_lo=lo,
        decision_hi=hi,
    )


def predict(fitted: FittedSolutionMap, x: Any) -> Array:
    return fitted.predict_many(_single(fitted, x))[0]


def weights(fitted: FittedSolutionMap, x: Any) -> Array:
    return fitted.weights_many(_single(fitted, x))[0]


def _single(fitted: FittedSolutionMap, x: Any) -> Array:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != (fitted.design.d,):
        raise InvalidInputError(
            f"covariate has shape {arr.shape}, expected ({fitted.design.d},)"
        )
    return arr
