"""Discrete-time control systems on manifolds: stage maps, control sets, rollout."""

from __future__ import annotations

import itertools
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike
from scipy.optimize import linprog, nnls
from scipy.stats import qmc

from dgmp.core.base.manifolds import (
    Cotangent,
    FloatArray,
    Manifold,
    Point,
    Tangent,
    frozen_array,
)
from dgmp.utils.exceptions import (
    InfeasibleControlError,
    InvalidTrajectoryError,
    ManifoldError,
)
from dgmp.utils.settings import settings
from dgmp.v1.services.manifold import Euclidean, Product
from dgmp.v1.services.oracle import OracleService

logger = logging.getLogger("dgmp")

SAMPLE_ROUNDS = 8

StageFunction = Callable[[Point, Point], Point]
StageJacobian = Callable[[Point, Point], FloatArray]


class StageMap:
    """An update map ``F_i : Q × U_i → Q``.

    Jacobians are in trivialized coordinates; missing ones are computed by central
    differences through retractions.
    """

    def __init__(
        self,
        index: int,
        state_manifold: Manifold,
        control_manifold: Manifold,
        fn: StageFunction,
        jac_q: StageJacobian | None = None,
        jac_u: StageJacobian | None = None,
    ) -> None:
        self.index = index
        self.state_manifold = state_manifold
        self.control_manifold = control_manifold
        self._fn = fn
        self._jac_q = jac_q
        self._jac_u = jac_u

    @property
    def analytic_jacobians(self) -> bool:
        return self._jac_q is not None and self._jac_u is not None

    @property
    def is_factored(self) -> bool:
        return False

    def _check(self, q: Point, u: Point) -> None:
        self.state_manifold.owns(q)
        self.control_manifold.owns(u)

    def evaluate(self, q: Point, u: Point) -> Point:
        self._check(q, u)
        result = self._fn(q, u)
        self.state_manifold.owns(result)
        return result

    def pushforward_q(self, q: Point, u: Point) -> FloatArray:
        self._check(q, u)
        if self._jac_q is not None:
            return np.asarray(self._jac_q(q, u), dtype=float)
        return self.fd_pushforward_q(q, u)

    def pushforward_u(self, q: Point, u: Point) -> FloatArray:
        self._check(q, u)
        if self._jac_u is not None:
            return np.asarray(self._jac_u(q, u), dtype=float)
        return self.fd_pushforward_u(q, u)

    def fd_pushforward_q(self, q: Point, u: Point) -> FloatArray:
        return OracleService.fd_jacobian(
            lambda x: self._fn(x, u),
            self.state_manifold,
            self.state_manifold,
            q,
        )

    def fd_pushforward_u(self, q: Point, u: Point) -> FloatArray:
        return OracleService.fd_jacobian(
            lambda v: self._fn(q, v),
            self.control_manifold,
            self.state_manifold,
            u,
        )

    def with_index(self, index: int) -> StageMap:
        return StageMap(
            index,
            self.state_manifold,
            self.control_manifold,
            self._fn,
            self._jac_q,
            self._jac_u,
        )


class FactoredStageMap(StageMap):
    """A stage map ``F_i(q, u) = E(q, f_i(q, u))`` through a fibre of dimension ``fibre_dim``."""

    def __init__(
        self,
        index: int,
        state_manifold: Manifold,
        control_manifold: Manifold,
        fibre_dim: int,
        fibre_map: Callable[[Point, Point], FloatArray],
        exp_map: Callable[[Point, FloatArray], Point],
        fibre_jacobian: Callable[[Point, FloatArray], FloatArray] | None = None,
        affine_in_u: bool = False,
        jac_q: StageJacobian | None = None,
        jac_u: StageJacobian | None = None,
    ) -> None:
        self.fibre_dim = fibre_dim
        self.fibre_map = fibre_map
        self.exp_map = exp_map
        self._fibre_jacobian = fibre_jacobian
        self.affine_in_u = affine_in_u
        super().__init__(
            index,
            state_manifold,
            control_manifold,
            lambda q, u: exp_map(q, np.asarray(fibre_map(q, u), dtype=float)),
            jac_q,
            jac_u,
        )

    @property
    def is_factored(self) -> bool:
        return True

    def fibre(self, q: Point, u: Point) -> FloatArray:
        self._check(q, u)
        x = np.asarray(self.fibre_map(q, u), dtype=float)
        if x.shape != (self.fibre_dim,):
            raise ManifoldError(
                f"fibre map returned shape {x.shape}, expected ({self.fibre_dim},)",
            )
        return x

    def fibre_derivative(self, q: Point, x: ArrayLike) -> FloatArray:
        """``𝔽E`` at the fibre vector ``x`` over ``q``, as a ``dim(Q) × fibre_dim`` matrix."""
        x = np.asarray(x, dtype=float)
        if self._fibre_jacobian is not None:
            return np.asarray(self._fibre_jacobian(q, x), dtype=float)
        return self.fd_fibre_derivative(q, x)

    def fd_fibre_derivative(self, q: Point, x: ArrayLike) -> FloatArray:
        x = np.asarray(x, dtype=float)
        h = settings.FD_STEP
        Q = self.state_manifold
        base = self.exp_map(q, x)
        columns = []
        for k in range(self.fibre_dim):
            e = np.zeros(self.fibre_dim)
            e[k] = h
            plus = Q.inverse_retract(base, self.exp_map(q, x + e))
            minus = Q.inverse_retract(base, self.exp_map(q, x - e))
            columns.append((plus - minus) / (2.0 * h))
        return np.column_stack(columns)

    def with_index(self, index: int) -> FactoredStageMap:
        return FactoredStageMap(
            index,
            self.state_manifold,
            self.control_manifold,
            self.fibre_dim,
            self.fibre_map,
            self.exp_map,
            self._fibre_jacobian,
            self.affine_in_u,
            self._jac_q,
            self._jac_u,
        )


class ControlSet(ABC):
    """A closed convex control set with a verified feasible witness."""

    @property
    @abstractmethod
    def witness(self) -> FloatArray | None:
        pass

    def supports(self, manifold: Manifold) -> bool:
        return isinstance(manifold, Euclidean) and manifold.dim == self.dim

    @property
    def dim(self) -> int | None:
        return None

    @abstractmethod
    def contains(self, u: Point, tol: float | None = None) -> bool:
        pass

    @abstractmethod
    def project(self, u: Point) -> Point:
        pass

    @abstractmethod
    def cone_rows(self, u: Point) -> FloatArray:
        """Outward normals of the constraints active at ``u``.

        The tangent cone at ``u`` is ``{v : rows @ v <= 0}``.
        """

    def vertices(self) -> FloatArray | None:
        return None

    @abstractmethod
    def sample(self, count: int, seed: int, around: FloatArray | None = None) -> FloatArray:
        pass

    def tangent_cone_project(self, u: Point, w: ArrayLike) -> FloatArray:
        """
        Euclidean projection of ``w`` onto the tangent cone at ``u``.

        Uses the Moreau decomposition ``w = P_T(w) + P_N(w)`` with the normal-cone
        part computed by nonnegative least squares.

        Raises:
            InfeasibleControlError: If ``u`` is outside the set.
        """
        w = np.asarray(w, dtype=float)
        if not self.contains(u):
            raise InfeasibleControlError("control lies outside its control set")
        rows = self.cone_rows(u)
        if rows.shape[0] == 0:
            return w.copy()
        lam, _ = nnls(rows.T, w)
        return w - rows.T @ lam


@dataclass(frozen=True, eq=False)
class WholeManifold(ControlSet):
    """No restriction; the only control set allowed on SO(3)."""

    @property
    def witness(self) -> FloatArray | None:
        return None

    def supports(self, manifold: Manifold) -> bool:
        return True

    def contains(self, u: Point, tol: float | None = None) -> bool:
        return True

    def project(self, u: Point) -> Point:
        return u

    def cone_rows(self, u: Point) -> FloatArray:
        return np.zeros((0, u.manifold.dim))

    def sample(self, count: int, seed: int, around: FloatArray | None = None) -> FloatArray:
        if around is None:
            raise ValueError("sampling the whole manifold needs a center")
        sampler = qmc.Halton(d=around.size, seed=seed)
        return around + 2.0 * sampler.random(count) - 1.0


@dataclass(frozen=True, eq=False)
class Box(ControlSet):
    lower: FloatArray
    upper: FloatArray

    def __post_init__(self) -> None:
        lower = frozen_array(np.asarray(self.lower, dtype=float).reshape(-1))
        upper = frozen_array(np.asarray(self.upper, dtype=float).reshape(-1))
        if lower.shape != upper.shape:
            raise ValueError("box bounds differ in length")
        if np.any(lower > upper):
            raise ValueError("box is empty: some lower bound exceeds its upper bound")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def witness(self) -> FloatArray:
        return np.clip(np.zeros(self.dim), self.lower, self.upper)

    def contains(self, u: Point, tol: float | None = None) -> bool:
        tol = settings.FEASIBILITY_TOLERANCE if tol is None else tol
        x = np.asarray(u.coords)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def project(self, u: Point) -> Point:
        return u.manifold.point(np.clip(u.coords, self.lower, self.upper))

    def cone_rows(self, u: Point) -> FloatArray:
        tol = settings.FEASIBILITY_TOLERANCE
        x = np.asarray(u.coords)
        eye = np.eye(self.dim)
        rows = [-eye[k] for k in range(self.dim) if x[k] <= self.lower[k] + tol]
        rows += [eye[k] for k in range(self.dim) if x[k] >= self.upper[k] - tol]
        return np.array(rows).reshape(-1, self.dim)

    def vertices(self) -> FloatArray | None:
        if self.dim > 10 or not np.all(np.isfinite(self.lower + self.upper)):
            return None
        return np.array(list(itertools.product(*zip(self.lower, self.upper))))

    def sample(self, count: int, seed: int, around: FloatArray | None = None) -> FloatArray:
        lo = np.where(np.isfinite(self.lower), self.lower, self.witness - 1.0)
        hi = np.where(np.isfinite(self.upper), self.upper, self.witness + 1.0)
        points = qmc.Halton(d=self.dim, seed=seed).random(count)
        return lo + points * (hi - lo)


@dataclass(frozen=True, eq=False)
class ConvexPolytope(ControlSet):
    """``{u : A u <= b}``; must be nonempty."""

    A: FloatArray
    b: FloatArray
    _witness: FloatArray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        A = frozen_array(np.atleast_2d(np.asarray(self.A, dtype=float)))
        b = frozen_array(np.asarray(self.b, dtype=float).reshape(-1))
        if A.shape[0] != b.size:
            raise ValueError("polytope A and b differ in row count")
        result = linprog(
            np.zeros(A.shape[1]),
            A_ub=A,
            b_ub=b,
            bounds=[(None, None)] * A.shape[1],
            method="highs",
        )
        if result.status != 0:
            raise ValueError("polytope is empty")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "_witness", frozen_array(result.x))

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def witness(self) -> FloatArray:
        return self._witness

    def contains(self, u: Point, tol: float | None = None) -> bool:
        tol = settings.FEASIBILITY_TOLERANCE if tol is None else tol
        return bool(np.all(self.A @ np.asarray(u.coords) <= self.b + tol))

    def project(self, u: Point) -> Point:
        if self.contains(u, 0.0):
            return u
        x, _ = OracleService.project_polyhedron(u.coords, self.A, self.b)
        return u.manifold.point(x)

    def cone_rows(self, u: Point) -> FloatArray:
        active = self.A @ np.asarray(u.coords) >= self.b - settings.FEASIBILITY_TOLERANCE
        return np.array(self.A[active]).reshape(-1, self.dim)

    def vertices(self) -> FloatArray | None:
        m, k = self.A.shape
        found: list[FloatArray] = []
        for rows in itertools.combinations(range(m), k):
            sub = self.A[list(rows)]
            if abs(np.linalg.det(sub)) < 1e-12:
                continue
            x = np.linalg.solve(sub, self.b[list(rows)])
            if np.all(self.A @ x <= self.b + 1e-9) and not any(
                np.allclose(x, y) for y in found
            ):
                found.append(x)
        return np.array(found) if found else None

    def bounding_box(self) -> tuple[FloatArray, FloatArray]:
        lo, hi = np.zeros(self.dim), np.zeros(self.dim)
        for k in range(self.dim):
            c = np.zeros(self.dim)
            c[k] = 1.0
            bounds = [(None, None)] * self.dim
            low = linprog(c, A_ub=self.A, b_ub=self.b, bounds=bounds, method="highs")
            high = linprog(-c, A_ub=self.A, b_ub=self.b, bounds=bounds, method="highs")
            lo[k] = low.x[k] if low.status == 0 else self._witness[k] - 1.0
            hi[k] = high.x[k] if high.status == 0 else self._witness[k] + 1.0
        return lo, hi

    def sample(self, count: int, seed: int, around: FloatArray | None = None) -> FloatArray:
        """
        Halton points of the bounding box that land in the polytope.

        Flat polytopes (equalities written as inequality pairs) accept almost no box
        points, so after ``SAMPLE_ROUNDS`` batches the shortfall is filled with the
        vertices and then with projections of the remaining box points.
        """
        lo, hi = self.bounding_box()
        tol = settings.FEASIBILITY_TOLERANCE
        sampler = qmc.Halton(d=self.dim, seed=seed)
        accepted: list[FloatArray] = []
        batch = np.zeros((0, self.dim))
        for _ in range(SAMPLE_ROUNDS):
            batch = lo + sampler.random(4 * count) * (hi - lo)
            inside = batch[np.all(batch @ self.A.T <= self.b + tol, axis=1)]
            accepted.extend(inside[: count - len(accepted)])
            if len(accepted) >= count:
                return np.array(accepted)

        logger.debug("polytope sample short by %d points", count - len(accepted))
        corners = self.vertices()
        if corners is not None:
            accepted.extend(corners[: count - len(accepted)])
        for x in batch[: count - len(accepted)]:
            projected, _ = OracleService.project_polyhedron(x, self.A, self.b)
            accepted.append(projected)
        return np.array(accepted)


@dataclass(frozen=True, eq=False)
class Ball(ControlSet):
    center: FloatArray
    radius: float

    def __post_init__(self) -> None:
        if not self.radius >= 0.0:
            raise ValueError("ball radius must be nonnegative")
        center = frozen_array(np.asarray(self.center, dtype=float).reshape(-1))
        object.__setattr__(self, "center", center)

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def witness(self) -> FloatArray:
        return np.array(self.center)

    def contains(self, u: Point, tol: float | None = None) -> bool:
        tol = settings.FEASIBILITY_TOLERANCE if tol is None else tol
        return bool(np.linalg.norm(np.asarray(u.coords) - self.center) <= self.radius + tol)

    def project(self, u: Point) -> Point:
        offset = np.asarray(u.coords) - self.center
        norm = float(np.linalg.norm(offset))
        if norm <= self.radius:
            return u
        return u.manifold.point(self.center + offset * (self.radius / norm))

    def cone_rows(self, u: Point) -> FloatArray:
        if self.radius <= settings.FEASIBILITY_TOLERANCE:
            # degenerate ball: the cone at the center is {0}
            return np.vstack([np.eye(self.dim), -np.eye(self.dim)])
        offset = np.asarray(u.coords) - self.center
        norm = float(np.linalg.norm(offset))
        if norm < self.radius - settings.FEASIBILITY_TOLERANCE:
            return np.zeros((0, self.dim))
        return (offset / norm).reshape(1, -1)

    def sample(self, count: int, seed: int, around: FloatArray | None = None) -> FloatArray:
        sampler = qmc.Halton(d=self.dim, seed=seed)
        accepted: list[FloatArray] = []
        while len(accepted) < count:
            cube = 2.0 * sampler.random(4 * count) - 1.0
            inside = cube[np.linalg.norm(cube, axis=1) <= 1.0]
            accepted.extend(self.center + self.radius * inside[: count - len(accepted)])
        return np.array(accepted)


@dataclass(frozen=True, eq=False)
class ControlSystem:
    state_manifold: Manifold
    stages: tuple[StageMap, ...]
    control_sets: tuple[ControlSet, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "control_sets", tuple(self.control_sets))
        if len(self.stages) != len(self.control_sets):
            raise ValueError("one control set is required per stage")
        for i, (stage, cset) in enumerate(zip(self.stages, self.control_sets)):
            if stage.state_manifold != self.state_manifold:
                raise ManifoldError(f"stage {i} acts on another state manifold")
            if not cset.supports(stage.control_manifold):
                raise ManifoldError(
                    f"control set of stage {i} does not live on "
                    f"{stage.control_manifold!r}",
                )

    @property
    def horizon(self) -> int:
        return len(self.stages)

    @property
    def control_space(self) -> Product:
        """All controls as one point of ``U_0 × ... × U_{n-1}``."""
        return Product(tuple(stage.control_manifold for stage in self.stages))

    def pack_controls(self, controls: Sequence[Point]) -> Point:
        return self.control_space.point(tuple(controls))

    def unpack_controls(self, packed: Point) -> tuple[Point, ...]:
        return tuple(packed.coords)


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: tuple[Point, ...]
    controls: tuple[Point, ...]

    @property
    def horizon(self) -> int:
        return len(self.controls)

    def state_matrix(self) -> FloatArray:
        return np.array([q.flat for q in self.states])

    def control_matrix(self) -> FloatArray:
        return np.array([u.flat for u in self.controls])


@dataclass(frozen=True)
class Linearization:
    """Stage Jacobians ``A_i = D_qF_i`` and ``B_i = D_uF_i`` along a trajectory."""

    state_jacobians: tuple[FloatArray, ...]
    control_jacobians: tuple[FloatArray, ...]


class SystemService:
    """Service class for rollouts and first-order analysis of control systems."""

    @staticmethod
    def rollout(
        sys: ControlSystem,
        q0: Point,
        controls: Sequence[Point],
    ) -> Trajectory:
        """
        Generate the state sequence ``q_{i+1} = F_i(q_i, u_i)``.

        Args:
            sys (ControlSystem): The control system.
            q0 (Point): Initial state.
            controls (Sequence[Point]): One control per stage.

        Returns:
            Trajectory: States ``q_0..q_n`` with the given controls.

        Raises:
            ValueError: If the control sequence has the wrong length.
            ManifoldError: If a point lives on the wrong manifold.
        """
        if len(controls) != sys.horizon:
            raise ValueError(
                f"expected {sys.horizon} controls, got {len(controls)}",
            )
        sys.state_manifold.owns(q0)
        states = [q0]
        for stage, u in zip(sys.stages, controls):
            states.append(stage.evaluate(states[-1], u))
        return Trajectory(states=tuple(states), controls=tuple(controls))

    @staticmethod
    def dynamics_residuals(sys: ControlSystem, traj: Trajectory) -> FloatArray:
        Q = sys.state_manifold
        return np.array(
            [
                float(
                    np.linalg.norm(
                        Q.flatten(traj.states[i + 1])
                        - Q.flatten(stage.evaluate(traj.states[i], traj.controls[i])),
                    ),
                )
                for i, stage in enumerate(sys.stages)
            ],
        )

    @staticmethod
    def validate_trajectory(
        sys: ControlSystem,
        traj: Trajectory,
        tol: float = 1e-10,
    ) -> None:
        """
        Check that ``traj`` satisfies the dynamics of ``sys``.

        Raises:
            InvalidTrajectoryError: If lengths disagree or some residual exceeds ``tol``.
        """
        if traj.horizon != sys.horizon or len(traj.states) != sys.horizon + 1:
            raise InvalidTrajectoryError("trajectory length does not match the horizon")
        try:
            residuals = SystemService.dynamics_residuals(sys, traj)
        except ManifoldError as exc:
            raise InvalidTrajectoryError(str(exc)) from exc
        if residuals.size and residuals.max() > tol:
            stage = int(np.argmax(residuals))
            raise InvalidTrajectoryError(
                f"dynamics residual {residuals[stage]:.3e} at stage {stage}",
            )

    @staticmethod
    def check_controls(sys: ControlSystem, traj: Trajectory) -> None:
        for i, (cset, u) in enumerate(zip(sys.control_sets, traj.controls)):
            if not cset.contains(u):
                raise InfeasibleControlError(f"control {i} lies outside its control set")

    @staticmethod
    def linearize(sys: ControlSystem, traj: Trajectory) -> Linearization:
        A, B = [], []
        for stage, q, u in zip(sys.stages, traj.states, traj.controls):
            A.append(stage.pushforward_q(q, u))
            B.append(stage.pushforward_u(q, u))
        return Linearization(tuple(A), tuple(B))

    @staticmethod
    def transition_jacobian(
        sys: ControlSystem,
        traj: Trajectory,
        i: int,
        j: int,
        linearization: Linearization | None = None,
    ) -> FloatArray:
        """
        Transition map ``ℱ_{i,j} = A_{j-1} ⋯ A_i`` from ``T_{q_i}Q`` to ``T_{q_j}Q``.

        Raises:
            IndexError: Unless ``0 <= i <= j <= n``.
        """
        if not 0 <= i <= j <= sys.horizon:
            raise IndexError(f"transition indices ({i}, {j}) out of range")
        lin = linearization or SystemService.linearize(sys, traj)
        result = np.eye(sys.state_manifold.dim)
        for k in range(i, j):
            result = lin.state_jacobians[k] @ result
        return result

    @staticmethod
    def forward_variation(
        sys: ControlSystem,
        traj: Trajectory,
        v: Sequence[Tangent | ArrayLike],
        linearization: Linearization | None = None,
    ) -> tuple[Tangent, ...]:
        """
        State variations ``q'_j = Σ_{i<j} ℱ_{i+1,j} D_uF_i v_i`` for ``j = 1..n``.

        Computed by the equivalent recursion ``q'_j = A_{j-1} q'_{j-1} + B_{j-1} v_{j-1}``.

        Raises:
            ValueError: If ``v`` does not have one direction per stage.
        """
        if len(v) != sys.horizon:
            raise ValueError(f"expected {sys.horizon} control directions, got {len(v)}")
        lin = linearization or SystemService.linearize(sys, traj)
        Q = sys.state_manifold
        current = np.zeros(Q.dim)
        out = []
        for i, direction in enumerate(v):
            if isinstance(direction, Tangent):
                sys.stages[i].control_manifold.owns(direction.base)
                vec = direction.vec
            else:
                vec = sys.stages[i].control_manifold.check_vector(direction)
            current = lin.state_jacobians[i] @ current + lin.control_jacobians[i] @ vec
            out.append(Tangent(Q, traj.states[i + 1], current))
        return tuple(out)

    @staticmethod
    def fibre_derivative_pullback(
        stage: StageMap,
        q: Point,
        u: Point,
        p: Cotangent,
    ) -> FloatArray:
        """
        Pull a covector at ``F_i(q, u)`` back to the fibre: ``𝔽E*p``.

        Raises:
            TypeError: If ``stage`` is not factored.
        """
        if not isinstance(stage, FactoredStageMap):
            raise TypeError("fibre derivative needs a factored stage map")
        stage.state_manifold.owns(p.base)
        x = stage.fibre(q, u)
        return stage.fibre_derivative(q, x).T @ p.covec

    @staticmethod
    def tangent_cone_project(cset: ControlSet, u: Point, w: Tangent | ArrayLike) -> FloatArray:
        vec = w.vec if isinstance(w, Tangent) else np.asarray(w, dtype=float)
        return cset.tangent_cone_project(u, vec)

    @staticmethod
    def stationarity_measure(
        cset: ControlSet,
        u: Point,
        residual: ArrayLike,
    ) -> float:
        """
        ``‖P_T(−G⁻¹r)‖_G``, the least Δ for which ``⟨r, v⟩ >= −Δ‖v‖_G`` on the cone.

        With ``G = LLᵀ`` the substitution ``v = L⁻ᵀy`` turns the metric problem into a
        Euclidean one with cone rows ``C L⁻ᵀ`` and residual ``L⁻¹r``.
        """
        r = np.asarray(residual, dtype=float)
        if not cset.contains(u):
            raise InfeasibleControlError("control lies outside its control set")
        rows = cset.cone_rows(u)
        G = u.manifold.metric_matrix()
        if np.array_equal(G, np.eye(G.shape[0])):
            if rows.shape[0] == 0:
                return float(np.linalg.norm(r))
            lam, _ = nnls(rows.T, -r)
            return float(np.linalg.norm(-r - rows.T @ lam))
        L = np.linalg.cholesky(G)
        ry = np.linalg.solve(L, r)
        if rows.shape[0] == 0:
            return float(np.linalg.norm(ry))
        rows_y = np.linalg.solve(L, rows.T).T
        lam, _ = nnls(rows_y.T, -ry)
        return float(np.linalg.norm(-ry - rows_y.T @ lam))

    @staticmethod
    def apply_step(
        sys: ControlSystem,
        controls: Sequence[Point],
        step: ArrayLike,
    ) -> tuple[Point, ...]:
        """Retract every control along its slice of ``step`` and project onto its set."""
        pieces = sys.control_space.split(step)
        return tuple(
            cset.project(stage.control_manifold.retract(u, d))
            for stage, cset, u, d in zip(sys.stages, sys.control_sets, controls, pieces)
        )

    @staticmethod
    def project_controls(sys: ControlSystem, controls: Sequence[Point]) -> tuple[Point, ...]:
        return tuple(cset.project(u) for cset, u in zip(sys.control_sets, controls))
