"""Euclidean spaces, SO(3) and products, plus the group operations on them."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from numpy.typing import ArrayLike
from scipy.linalg import block_diag, polar

from dgmp.core.base.manifolds import (
    Cotangent,
    FloatArray,
    Manifold,
    Metric,
    Point,
    Tangent,
    frozen_array,
)
from dgmp.utils.exceptions import ManifoldError
from dgmp.utils.settings import settings

logger = logging.getLogger("dgmp")


def hat(a: ArrayLike) -> FloatArray:
    """Skew matrix with ``hat(a) @ b == cross(a, b)``."""
    x, y, z = np.asarray(a, dtype=float).reshape(3)
    return np.array(
        [
            [0.0, -z, y],
            [z, 0.0, -x],
            [-y, x, 0.0],
        ],
    )


def vee(A: ArrayLike) -> FloatArray:
    """Inverse of ``hat``.

    Raises:
        ManifoldError: If ``A`` is not 3x3 skew-symmetric to 1e-10.
    """
    A = np.asarray(A, dtype=float)
    if A.shape != (3, 3):
        raise ManifoldError(f"vee expects a 3x3 matrix, got {A.shape}")
    if np.linalg.norm(A + A.T) > 1e-10:
        raise ManifoldError("vee expects a skew-symmetric matrix")
    return np.array([A[2, 1], A[0, 2], A[1, 0]])


def skew_part_vee(A: ArrayLike) -> FloatArray:
    """``vee(A - Aᵀ)`` for an arbitrary 3x3 matrix."""
    A = np.asarray(A, dtype=float)
    return np.array([A[2, 1] - A[1, 2], A[0, 2] - A[2, 0], A[1, 0] - A[0, 1]])


def exp_so3(a: ArrayLike) -> FloatArray:
    """Rodrigues formula for ``expm(hat(a))``."""
    a = np.asarray(a, dtype=float).reshape(3)
    theta = float(np.linalg.norm(a))
    K = hat(a)
    # sin(θ)/θ and (1 - cos θ)/θ², both smooth at θ = 0
    A = np.sinc(theta / np.pi)
    B = 0.5 * np.sinc(theta / (2.0 * np.pi)) ** 2
    return np.eye(3) + A * K + B * (K @ K)


def log_so3(R: ArrayLike) -> FloatArray:
    """Principal logarithm of a rotation, returned as a rotation vector."""
    R = np.asarray(R, dtype=float)
    w = 0.5 * skew_part_vee(R)
    sin_theta = float(np.linalg.norm(w))
    cos_theta = 0.5 * (float(np.trace(R)) - 1.0)
    theta = float(np.arctan2(sin_theta, cos_theta))

    if sin_theta > 1e-6 or cos_theta > 0.0:
        return w / np.sinc(theta / np.pi)

    # θ close to π: read the axis from the symmetric part
    sym = 0.5 * (R + R.T)
    outer = (sym - cos_theta * np.eye(3)) / (1.0 - cos_theta)
    k = int(np.argmax(np.diag(outer)))
    axis = outer[:, k] / np.sqrt(max(outer[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ w < 0.0:
        axis = -axis
    return theta * axis


def right_jacobian(a: ArrayLike) -> FloatArray:
    """Body-frame derivative of ``exp`` at ``a``.

    ``exp(hat(a + δ)) ≈ exp(hat(a)) exp(hat(Jr(a) δ))``.
    """
    a = np.asarray(a, dtype=float).reshape(3)
    theta = float(np.linalg.norm(a))
    K = hat(a)
    if theta < 1e-4:
        c1 = 0.5 - theta**2 / 24.0
        c2 = 1.0 / 6.0 - theta**2 / 120.0
    else:
        c1 = (1.0 - np.cos(theta)) / theta**2
        c2 = (theta - np.sin(theta)) / theta**3
    return np.eye(3) - c1 * K + c2 * (K @ K)


def right_jacobian_inverse(a: ArrayLike) -> FloatArray:
    """Inverse of ``right_jacobian``; the derivative of ``log`` in body coordinates."""
    a = np.asarray(a, dtype=float).reshape(3)
    theta = float(np.linalg.norm(a))
    K = hat(a)
    if theta < 1e-4:
        coeff = 1.0 / 12.0 + theta**2 / 720.0
    else:
        coeff = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + coeff * (K @ K)


@dataclass(frozen=True)
class Euclidean(Manifold):
    """ℝ^d, an additive group."""

    dimension: int
    metric: Metric = field(default_factory=Metric)

    def __post_init__(self) -> None:
        if self.dimension < 0:
            raise ManifoldError("Euclidean dimension must be nonnegative")
        self.metric.matrix(self.dimension)

    def __repr__(self) -> str:
        return f"Euclidean({self.dimension})"

    @property
    def dim(self) -> int:
        return self.dimension

    @property
    def is_group(self) -> bool:
        return True

    def point(self, coords: Any) -> Point:
        if isinstance(coords, Point):
            self.owns(coords)
            return coords
        x = np.asarray(coords, dtype=float).reshape(-1)
        if x.shape != (self.dimension,):
            raise ManifoldError(
                f"{self!r} expects {self.dimension} coordinates, got {x.size}",
            )
        if not np.all(np.isfinite(x)):
            raise ManifoldError("coordinates must be finite")
        return Point(self, frozen_array(x))

    def retract(self, base: Point, vec: ArrayLike) -> Point:
        self.owns(base)
        return Point(self, frozen_array(base.coords + self.check_vector(vec)))

    def inverse_retract(self, base: Point, other: Point) -> FloatArray:
        self.owns(base)
        self.owns(other)
        return np.asarray(other.coords - base.coords)

    def flatten(self, point: Point) -> FloatArray:
        return np.array(point.coords, dtype=float)

    def metric_matrix(self) -> FloatArray:
        return self.metric.matrix(self.dimension)

    def identity(self) -> Point:
        return self.point(np.zeros(self.dimension))

    def compose(self, g: Point, h: Point) -> Point:
        self.owns(g)
        self.owns(h)
        return Point(self, frozen_array(g.coords + h.coords))

    def inverse(self, g: Point) -> Point:
        self.owns(g)
        return Point(self, frozen_array(-g.coords))

    def adjoint_matrix(self, g: Point) -> FloatArray:
        self.owns(g)
        return np.eye(self.dimension)


@dataclass(frozen=True)
class SO3(Manifold):
    """The rotation group, with body-frame (left-trivialized) tangent coordinates."""

    metric: Metric = field(default_factory=Metric)

    def __post_init__(self) -> None:
        self.metric.matrix(3)

    def __repr__(self) -> str:
        return "SO3()"

    @property
    def dim(self) -> int:
        return 3

    @property
    def is_group(self) -> bool:
        return True

    def point(self, coords: Any) -> Point:
        if isinstance(coords, Point):
            self.owns(coords)
            return coords
        R = np.asarray(coords, dtype=float)
        if R.shape == (9,):
            R = R.reshape(3, 3)
        if R.shape != (3, 3):
            raise ManifoldError(f"SO3 expects a 3x3 matrix, got shape {R.shape}")
        if not np.all(np.isfinite(R)):
            raise ManifoldError("rotation entries must be finite")

        error = float(np.linalg.norm(R.T @ R - np.eye(3)))
        determinant = float(np.linalg.det(R))
        if determinant <= 0.0:
            raise ManifoldError("rotation matrix must have positive determinant")
        if error > settings.SO3_REPAIR_TOLERANCE:
            raise ManifoldError(
                f"matrix is {error:.3e} away from orthogonal, beyond repair",
            )
        if error > settings.SO3_TOLERANCE:
            logger.debug("Re-orthonormalizing rotation with drift %.3e", error)
            R, _ = polar(R)
        return Point(self, frozen_array(R))

    def retract(self, base: Point, vec: ArrayLike) -> Point:
        self.owns(base)
        return self.point(base.coords @ exp_so3(self.check_vector(vec)))

    def inverse_retract(self, base: Point, other: Point) -> FloatArray:
        self.owns(base)
        self.owns(other)
        return log_so3(base.coords.T @ other.coords)

    def flatten(self, point: Point) -> FloatArray:
        return np.array(point.coords, dtype=float).reshape(9)

    def metric_matrix(self) -> FloatArray:
        return self.metric.matrix(3)

    def identity(self) -> Point:
        return self.point(np.eye(3))

    def compose(self, g: Point, h: Point) -> Point:
        self.owns(g)
        self.owns(h)
        return self.point(g.coords @ h.coords)

    def inverse(self, g: Point) -> Point:
        self.owns(g)
        return self.point(g.coords.T)

    def adjoint_matrix(self, g: Point) -> FloatArray:
        # R hat(a) Rᵀ = hat(R a)
        self.owns(g)
        return np.array(g.coords, dtype=float)


@dataclass(frozen=True)
class Product(Manifold):
    """Cartesian product; tangent coordinates are concatenated factor coordinates."""

    factors: tuple[Manifold, ...]

    def __repr__(self) -> str:
        return "Product(" + ", ".join(repr(f) for f in self.factors) + ")"

    @property
    def dim(self) -> int:
        return sum(f.dim for f in self.factors)

    @property
    def is_group(self) -> bool:
        return all(f.is_group for f in self.factors)

    def _slices(self) -> list[slice]:
        slices, start = [], 0
        for factor in self.factors:
            slices.append(slice(start, start + factor.dim))
            start += factor.dim
        return slices

    def split(self, vec: ArrayLike) -> list[FloatArray]:
        """Split a product tangent vector into factor vectors."""
        vec = self.check_vector(vec)
        return [vec[s] for s in self._slices()]

    def point(self, coords: Any) -> Point:
        if isinstance(coords, Point):
            self.owns(coords)
            return coords
        if len(coords) != len(self.factors):
            raise ManifoldError(
                f"{self!r} expects {len(self.factors)} factor points",
            )
        parts = tuple(f.point(c) for f, c in zip(self.factors, coords))
        return Point(self, parts)

    def retract(self, base: Point, vec: ArrayLike) -> Point:
        self.owns(base)
        parts = tuple(
            f.retract(p, v)
            for f, p, v in zip(self.factors, base.coords, self.split(vec))
        )
        return Point(self, parts)

    def inverse_retract(self, base: Point, other: Point) -> FloatArray:
        self.owns(base)
        self.owns(other)
        pieces = [
            f.inverse_retract(p, q)
            for f, p, q in zip(self.factors, base.coords, other.coords)
        ]
        return np.concatenate(pieces) if pieces else np.zeros(0)

    def flatten(self, point: Point) -> FloatArray:
        pieces = [f.flatten(p) for f, p in zip(self.factors, point.coords)]
        return np.concatenate(pieces) if pieces else np.zeros(0)

    def metric_matrix(self) -> FloatArray:
        if not self.factors:
            return np.zeros((0, 0))
        return block_diag(*(f.metric_matrix() for f in self.factors))

    def identity(self) -> Point:
        if not self.is_group:
            raise ManifoldError(f"{self!r} is not a group")
        return Point(self, tuple(f.identity() for f in self.factors))

    def compose(self, g: Point, h: Point) -> Point:
        self.owns(g)
        self.owns(h)
        return Point(
            self,
            tuple(f.compose(a, b) for f, a, b in zip(self.factors, g.coords, h.coords)),
        )

    def inverse(self, g: Point) -> Point:
        self.owns(g)
        return Point(self, tuple(f.inverse(a) for f, a in zip(self.factors, g.coords)))

    def adjoint_matrix(self, g: Point) -> FloatArray:
        self.owns(g)
        return block_diag(
            *(f.adjoint_matrix(a) for f, a in zip(self.factors, g.coords)),
        )


class ManifoldService:
    """Service class for tangent, cotangent and group operations."""

    @staticmethod
    def retract(base: Point, v: Tangent) -> Point:
        """
        Move from ``base`` along the tangent vector ``v``.

        Args:
            base (Point): The base point.
            v (Tangent): A tangent vector based at ``base``.

        Returns:
            Point: ``base + v`` on ℝ^d, ``R·exp(hat(v))`` on SO(3).

        Raises:
            ManifoldError: If ``v`` lives on another manifold.
        """
        if v.manifold != base.manifold:
            raise ManifoldError("tangent vector and base point differ in manifold")
        return base.manifold.retract(base, v.vec)

    @staticmethod
    def group_mul(g: Point, h: Point) -> Point:
        if g.manifold != h.manifold:
            raise ManifoldError("group elements live on different manifolds")
        ManifoldService._require_group(g.manifold)
        return g.manifold.compose(g, h)

    @staticmethod
    def group_inv(g: Point) -> Point:
        ManifoldService._require_group(g.manifold)
        return g.manifold.inverse(g)

    @staticmethod
    def adjoint(g: Point, a: Tangent) -> Tangent:
        """
        Apply ``Ad(g)`` to a Lie-algebra element.

        Args:
            g (Point): A group element.
            a (Tangent): A tangent vector at the identity.

        Returns:
            Tangent: ``Ad(g) a`` at the identity.

        Raises:
            ManifoldError: On a non-group manifold or mismatched manifolds.
        """
        group = g.manifold
        ManifoldService._require_group(group)
        if a.manifold != group:
            raise ManifoldError("Lie-algebra element lives on another manifold")
        return Tangent(group, group.identity(), group.adjoint_matrix(g) @ a.vec)

    @staticmethod
    def coadjoint(g: Point, p: Cotangent) -> Cotangent:
        """
        Apply ``Ad*(g) = Ad(g⁻¹)ᵀ`` to a covector at the identity.

        Args:
            g (Point): A group element.
            p (Cotangent): A covector at the identity.

        Returns:
            Cotangent: ``Ad*(g) p`` at the identity.

        Raises:
            ManifoldError: On a non-group manifold or mismatched manifolds.
        """
        group = g.manifold
        ManifoldService._require_group(group)
        if p.manifold != group:
            raise ManifoldError("Lie-coalgebra element lives on another manifold")
        return Cotangent(group, group.identity(), coadjoint_matrix(group, g) @ p.covec)

    @staticmethod
    def hat(a: ArrayLike) -> FloatArray:
        return hat(a)

    @staticmethod
    def vee(A: ArrayLike) -> FloatArray:
        return vee(A)

    @staticmethod
    def _require_group(manifold: Manifold) -> None:
        if not manifold.is_group:
            raise ManifoldError(f"{manifold!r} is not a Lie group")


def coadjoint_matrix(group: Manifold, g: Point) -> FloatArray:
    """Matrix of ``Ad*(g)`` acting on body covector coordinates."""
    return group.adjoint_matrix(group.inverse(g)).T


def product_of(manifolds: Sequence[Manifold]) -> Product:
    return Product(tuple(manifolds))
