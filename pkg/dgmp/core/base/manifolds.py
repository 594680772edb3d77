"""Abstract manifold interface and the immutable values that live on it."""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from dgmp.utils.exceptions import ManifoldError

FloatArray = NDArray[np.float64]


def frozen_array(values: ArrayLike) -> FloatArray:
    """Return a read-only float copy of ``values``."""
    array = np.array(values, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Metric:
    """A constant positive-definite form in trivialized coordinates.

    ``gram`` is ``None`` for the identity form.
    """

    gram: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self) -> None:
        if self.gram is None:
            return
        G = np.asarray(self.gram, dtype=float)
        if G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise ManifoldError("metric gram matrix must be square")
        if not np.allclose(G, G.T, atol=1e-12):
            raise ManifoldError("metric gram matrix must be symmetric")
        if np.linalg.eigvalsh(G).min() <= 0.0:
            raise ManifoldError("metric gram matrix must be positive definite")

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> Metric:
        """Build a metric from a square array."""
        G = np.asarray(matrix, dtype=float)
        return cls(gram=tuple(tuple(float(x) for x in row) for row in G))

    @property
    def is_identity(self) -> bool:
        return self.gram is None

    def matrix(self, dim: int) -> FloatArray:
        if self.gram is None:
            return np.eye(dim)
        G = np.asarray(self.gram, dtype=float)
        if G.shape != (dim, dim):
            raise ManifoldError(f"metric is {G.shape}, manifold dimension is {dim}")
        return G


class Manifold(ABC):
    """A finite-dimensional manifold handled through a retraction and a chart.

    Tangent vectors and covectors are plain coordinate vectors of length ``dim``;
    on matrix groups they are left-trivialized body coordinates.
    """

    @property
    @abstractmethod
    def dim(self) -> int:
        pass

    @property
    def is_group(self) -> bool:
        return False

    @abstractmethod
    def point(self, coords: Any) -> Point:
        """Validate ``coords`` and wrap them as a point of this manifold."""

    @abstractmethod
    def retract(self, base: Point, vec: ArrayLike) -> Point:
        pass

    @abstractmethod
    def inverse_retract(self, base: Point, other: Point) -> FloatArray:
        pass

    @abstractmethod
    def flatten(self, point: Point) -> FloatArray:
        """Coordinates of ``point`` as one flat vector (used for residuals and CSV)."""

    @abstractmethod
    def metric_matrix(self) -> FloatArray:
        pass

    def identity(self) -> Point:
        raise ManifoldError(f"{self!r} is not a group")

    def compose(self, g: Point, h: Point) -> Point:
        raise ManifoldError(f"{self!r} is not a group")

    def inverse(self, g: Point) -> Point:
        raise ManifoldError(f"{self!r} is not a group")

    def adjoint_matrix(self, g: Point) -> FloatArray:
        raise ManifoldError(f"{self!r} is not a group")

    def owns(self, point: Point) -> None:
        """Raise unless ``point`` belongs to this manifold."""
        if point.manifold != self:
            raise ManifoldError(
                f"point on {point.manifold!r} used with {self!r}",
            )

    def check_vector(self, vec: ArrayLike) -> FloatArray:
        array = np.asarray(vec, dtype=float)
        if array.shape != (self.dim,):
            raise ManifoldError(
                f"expected a vector of length {self.dim}, got shape {array.shape}",
            )
        return array

    def zero_vector(self) -> FloatArray:
        return np.zeros(self.dim)


@dataclass(frozen=True, eq=False)
class Point:
    """A point of ``manifold``; build it through ``manifold.point``."""

    manifold: Manifold
    coords: Any

    @property
    def flat(self) -> FloatArray:
        return self.manifold.flatten(self)


@dataclass(frozen=True, eq=False)
class Tangent:
    manifold: Manifold
    base: Point
    vec: FloatArray

    def __post_init__(self) -> None:
        self.manifold.owns(self.base)
        object.__setattr__(self, "vec", frozen_array(self.manifold.check_vector(self.vec)))


@dataclass(frozen=True, eq=False)
class Cotangent:
    manifold: Manifold
    base: Point
    covec: FloatArray

    def __post_init__(self) -> None:
        self.manifold.owns(self.base)
        object.__setattr__(
            self,
            "covec",
            frozen_array(self.manifold.check_vector(self.covec)),
        )

    def pair(self, tangent: Tangent) -> float:
        """Evaluate this covector on a tangent vector at the same base point."""
        if tangent.manifold != self.manifold:
            raise ManifoldError("cannot pair values from different manifolds")
        return float(self.covec @ tangent.vec)
