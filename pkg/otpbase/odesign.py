from __future__ import annotations

import math
from typing import Any, Optional

import numpy as np
from numpy.typing import NDArray
from pydantic import Field, field_serializer, field_validator
from scipy.spatial.distance import cdist, pdist

from .oconst import DEFAULT_POOL_FACTOR, DEFAULT_TEST_MARGIN, MAX_GRID_POINTS, DesignKind
from .oschemas import Matrix, RngStream, Vector, _Base
from .outils import CapacityError, InvalidInputError, get_logger

logger = get_logger(__name__)

Array = NDArray[np.float64]


class CovariateDesign(_Base):
    """An immutable set of design covariates and its space-filling diagnostics."""

    points: Matrix = Field(..., description="n x d design covariates, row-major")
    domain_lo: Vector = Field(..., description="Per-axis lower bounds")
    domain_hi: Vector = Field(..., description="Per-axis upper bounds")
    kind: DesignKind = Field(..., description="How the design was built")
    fill_distance_estimate: float = Field(..., ge=0.0)
    separation_distance: float = Field(..., gt=0.0, description="+inf for a single point")
    seed: Optional[int] = Field(default=None)
    stream_id: Optional[int] = Field(default=None)
    pool_size: Optional[int] = Field(default=None)

    @field_validator("separation_distance", mode="before")
    @classmethod
    def _none_is_infinite(cls, value: Any) -> Any:
        return math.inf if value is None else value

    @field_serializer("separation_distance")
    def _infinite_is_none(self, value: float) -> float | None:
        return None if math.isinf(value) else value

    @property
    def n(self) -> int:
        return int(self.points.shape[0])

    @property
    def d(self) -> int:
        return int(self.points.shape[1])

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.domain_hi - self.domain_lo))

    @property
    def quasi_uniformity(self) -> float:
        """Fill distance over separation distance; 0 for a singleton."""
        if math.isinf(self.separation_distance):
            return 0.0
        return self.fill_distance_estimate / self.separation_distance


def _bounds(lo: Any, hi: Any, d: int) -> tuple[Array, Array]:
    lo_ = np.broadcast_to(np.asarray(lo, dtype=np.float64), (d,)).copy()
    hi_ = np.broadcast_to(np.asarray(hi, dtype=np.float64), (d,)).copy()
    if np.any(lo_ >= hi_):
        raise InvalidInputError("domain bounds must satisfy lo < hi on every axis")
    return lo_, hi_


def grid_design(lo: Any, hi: Any, points_per_axis: int, d: int) -> CovariateDesign:
    """Full Cartesian grid with `points_per_axis` equally spaced nodes per axis."""
    if points_per_axis < 2:
        raise InvalidInputError("a grid needs at least 2 points per axis")
    if d < 1:
        raise InvalidInputError("dimension must be positive")
    if d * math.log(points_per_axis) > math.log(MAX_GRID_POINTS):
        raise CapacityError(
            f"grid of {points_per_axis}^{d} points exceeds {MAX_GRID_POINTS}"
        )
    lo_, hi_ = _bounds(lo, hi, d)
    axes = [np.linspace(lo_[j], hi_[j], points_per_axis) for j in range(d)]
    points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    spacing = (hi_ - lo_) / (points_per_axis - 1)
    return CovariateDesign(
        points=points,
        domain_lo=lo_,
        domain_hi=hi_,
        kind="grid",
        fill_distance_estimate=0.5 * float(np.linalg.norm(spacing)),
        separation_distance=0.5 * float(spacing.min()),
    )


def farthest_point_design(
    lo: Any,
    hi: Any,
    n: int,
    pool_size: int | None,
    rng: RngStream,
    d: int | None = None,
) -> CovariateDesign:
    """
    Greedy max-min selection from a uniform candidate pool.

    Starts at the pool point nearest the domain center and repeatedly adds
    the candidate farthest from everything selected so far. The fill
    distance is estimated over the pool.
    """
    if d is None:
        d = int(np.size(lo))
    if n < 1:
        raise InvalidInputError("design size must be positive")
    if pool_size is None:
        pool_size = DEFAULT_POOL_FACTOR * n
    if n > pool_size:
        raise InvalidInputError(f"n={n} exceeds pool_size={pool_size}")
    if pool_size < DEFAULT_POOL_FACTOR * n:
        logger.warning(
            "pool_size=%s is below %s x n=%s; designs will be coarse",
            pool_size,
            DEFAULT_POOL_FACTOR,
            n,
        )
    lo_, hi_ = _bounds(lo, hi, d)
    pool = lo_ + (hi_ - lo_) * rng.generator.random((pool_size, d))
    center = 0.5 * (lo_ + hi_)
    first = int(np.argmin(np.linalg.norm(pool - center, axis=1)))
    chosen = [first]
    nearest = np.linalg.norm(pool - pool[first], axis=1)
    for _ in range(n - 1):
        nxt = int(np.argmax(nearest))
        if nearest[nxt] <= 0.0:
            raise InvalidInputError("candidate pool has too few distinct points")
        chosen.append(nxt)
        np.minimum(nearest, np.linalg.norm(pool - pool[nxt], axis=1), out=nearest)
    points = pool[chosen]
    separation = 0.5 * float(pdist(points).min()) if n > 1 else math.inf
    return CovariateDesign(
        points=points,
        domain_lo=lo_,
        domain_hi=hi_,
        kind="farthest_point",
        fill_distance_estimate=float(nearest.max()),
        separation_distance=separation,
        seed=rng.seed,
        stream_id=rng.stream_id,
        pool_size=pool_size,
    )


def build_design(
    kind: DesignKind, lo: Any, hi: Any, n: int, rng: RngStream, d: int
) -> CovariateDesign:
    """A design of (at most) `n` points; grids round down to a full lattice."""
    if kind == "grid":
        per_axis = max(2, int(math.floor(n ** (1.0 / d) + 1e-9)))
        return grid_design(lo, hi, per_axis, d)
    return farthest_point_design(lo, hi, n, DEFAULT_POOL_FACTOR * n, rng, d=d)


def distances(design: CovariateDesign, x: Any) -> Array:
    """Euclidean distances from the design points to one or many covariates.

    Returns shape (n,) for a single covariate and (m, n) for an m x d block.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape[-1] != design.d:
        raise InvalidInputError(
            f"covariate dimension {arr.shape[-1]} does not match design dimension {design.d}"
        )
    if arr.ndim == 1:
        return np.linalg.norm(design.points - arr, axis=1)
    return cdist(arr, design.points)


def count_within(design: CovariateDesign, x: Any, r: float) -> int:
    return int(np.count_nonzero(distances(design, x) <= r))


def k_nearest(design: CovariateDesign, x: Any, k: int) -> Array:
    """Indices of the k closest design points; ties go to the lower index."""
    if not 1 <= k <= design.n:
        raise InvalidInputError(f"k={k} must lie in [1, n={design.n}]")
    return np.argsort(distances(design, x), kind="stable")[:k]


def inset_box(lo: Any, hi: Any, margin: float = DEFAULT_TEST_MARGIN) -> tuple[Array, Array]:
    """The box shrunk by `margin` of each axis range on both sides."""
    lo_ = np.asarray(lo, dtype=np.float64)
    hi_ = np.asarray(hi, dtype=np.float64)
    if not 0.0 <= margin < 0.5:
        raise InvalidInputError(f"margin must lie in [0, 0.5), got {margin}")
    span = hi_ - lo_
    return lo_ + margin * span, hi_ - margin * span


def sample_interior(
    lo: Any, hi: Any, size: int, rng: RngStream, margin: float = DEFAULT_TEST_MARGIN
) -> Array:
    """Uniform covariates from the inset box."""
    ilo, ihi = inset_box(lo, hi, margin)
    return ilo + (ihi - ilo) * rng.generator.random((size, ilo.shape[0]))
