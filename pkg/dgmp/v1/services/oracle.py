"""Independent reference computations used to verify the analytic machinery."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike
from scipy.linalg import LinAlgError, solve

from dgmp.core.base.manifolds import FloatArray, Manifold, Point
from dgmp.utils.exceptions import OracleError
from dgmp.utils.numerics import bounded_qp
from dgmp.utils.settings import settings

logger = logging.getLogger("dgmp")

DINI_STEPS = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)


@dataclass(frozen=True)
class FDGradient:
    covec: FloatArray
    error_estimate: float


@dataclass(frozen=True)
class DiniEstimate:
    value: float
    quotients: tuple[float, ...]
    monotone: bool


@dataclass(frozen=True)
class DistanceBracket:
    lower: float
    upper: float
    status: str
    witness: FloatArray | None = None


@dataclass(frozen=True)
class LQRSolution:
    controls: FloatArray
    states: FloatArray
    gains: tuple[FloatArray, ...]
    value: float


@dataclass(frozen=True)
class AuditSample:
    """A scalar function, a point and the analytic covector claimed at that point."""

    manifold: Manifold
    function: Callable[[Point], float]
    point: Point
    analytic: FloatArray


@dataclass(frozen=True)
class AuditCase:
    name: str
    build: Callable[[np.random.Generator], AuditSample]


# Every analytic derivative shipped by the library registers a case here.
DERIVATIVE_AUDITS: dict[str, AuditCase] = {}


def register_audit(
    name: str,
) -> Callable[[Callable[[np.random.Generator], AuditSample]], AuditCase]:
    """Decorator registering a derivative audit under ``name``."""

    def decorator(build: Callable[[np.random.Generator], AuditSample]) -> AuditCase:
        if name in DERIVATIVE_AUDITS:
            raise ValueError(f"derivative audit {name!r} registered twice")
        case = AuditCase(name=name, build=build)
        DERIVATIVE_AUDITS[name] = case
        return case

    return decorator


def _finite(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise OracleError(f"non-finite {what}: {value}")
    return float(value)


def _central_gradient(
    f: Callable[[Point], float],
    manifold: Manifold,
    x: Point,
    step: float,
) -> FloatArray:
    grad = np.zeros(manifold.dim)
    for k in range(manifold.dim):
        e = np.zeros(manifold.dim)
        e[k] = step
        plus = _finite(f(manifold.retract(x, e)), "function value")
        minus = _finite(f(manifold.retract(x, -e)), "function value")
        grad[k] = (plus - minus) / (2.0 * step)
    return grad


class OracleService:
    """Service class for finite-difference and brute-force reference oracles."""

    @staticmethod
    def fd_gradient(
        f: Callable[[Point], float],
        manifold: Manifold,
        x: Point,
        step: float | None = None,
    ) -> FDGradient:
        """
        Central-difference covector of ``f`` along retractions of basis tangents.

        Args:
            f (Callable[[Point], float]): Scalar function on ``manifold``.
            manifold (Manifold): The manifold ``x`` lives on.
            x (Point): Evaluation point.
            step (float | None): Difference step; ``settings.FD_STEP`` by default.

        Returns:
            FDGradient: The estimate and a Richardson error estimate obtained by
            comparing with the doubled step.

        Raises:
            OracleError: If ``f`` returns a non-finite value.
        """
        h = settings.FD_STEP if step is None else step
        fine = _central_gradient(f, manifold, x, h)
        coarse = _central_gradient(f, manifold, x, 2.0 * h)
        # central differences are second order: error(h) ≈ (g_2h - g_h) / 3
        error = float(np.max(np.abs(coarse - fine), initial=0.0)) / 3.0
        logger.debug("fd_gradient step=%.1e richardson error=%.3e", h, error)
        return FDGradient(covec=fine, error_estimate=error)

    @staticmethod
    def fd_jacobian(
        F: Callable[[Point], Point],
        source: Manifold,
        target: Manifold,
        x: Point,
        step: float | None = None,
    ) -> FloatArray:
        """
        Central-difference Jacobian of a manifold map in trivialized coordinates.

        Column ``k`` compares ``F(retract(x, ±h e_k))`` with ``F(x)`` through the
        target's inverse retraction.
        """
        h = settings.FD_STEP if step is None else step
        base = F(x)
        columns = []
        for k in range(source.dim):
            e = np.zeros(source.dim)
            e[k] = h
            plus = target.inverse_retract(base, F(source.retract(x, e)))
            minus = target.inverse_retract(base, F(source.retract(x, -e)))
            columns.append((plus - minus) / (2.0 * h))
        if not columns:
            return np.zeros((target.dim, 0))
        jac = np.column_stack(columns)
        if not np.all(np.isfinite(jac)):
            raise OracleError("non-finite finite-difference Jacobian")
        return jac

    @staticmethod
    def fd_vector_jacobian(
        F: Callable[[Point], FloatArray],
        manifold: Manifold,
        x: Point,
        step: float | None = None,
    ) -> FloatArray:
        """Central-difference Jacobian of a vector-valued function on a manifold."""
        h = settings.FD_STEP if step is None else step
        columns = []
        for k in range(manifold.dim):
            e = np.zeros(manifold.dim)
            e[k] = h
            plus = np.asarray(F(manifold.retract(x, e)), dtype=float)
            minus = np.asarray(F(manifold.retract(x, -e)), dtype=float)
            columns.append((plus - minus) / (2.0 * h))
        jac = np.column_stack(columns)
        if not np.all(np.isfinite(jac)):
            raise OracleError("non-finite finite-difference Jacobian")
        return jac

    @staticmethod
    def dini_estimate(
        f: Callable[[Point], float],
        manifold: Manifold,
        x: Point,
        v: ArrayLike,
    ) -> DiniEstimate:
        """
        Lower Dini derivative surrogate of ``f`` at ``x`` along ``v``.

        Forward quotients are taken at λ ∈ {1e-2, ..., 1e-6} along ``retract(x, λv)``
        and their minimum is returned.

        Raises:
            OracleError: If ``f`` returns a non-finite value.
        """
        v = manifold.check_vector(v)
        f0 = _finite(f(x), "function value")
        quotients = tuple(
            (_finite(f(manifold.retract(x, lam * v)), "function value") - f0) / lam
            for lam in DINI_STEPS
        )
        diffs = np.diff(quotients)
        monotone = bool(np.all(diffs >= -1e-12) or np.all(diffs <= 1e-12))
        return DiniEstimate(value=min(quotients), quotients=quotients, monotone=monotone)

    @staticmethod
    def riccati_lqr(
        A: ArrayLike,
        B: ArrayLike,
        Qc: ArrayLike,
        Rc: ArrayLike,
        Qf: ArrayLike,
        n: int,
        q0: ArrayLike,
    ) -> LQRSolution:
        """
        Solve ``min ½Σ(qᵀQq + uᵀRu) + ½q_nᵀQ_f q_n`` for ``q⁺ = Aq + Bu``.

        Args:
            A (ArrayLike): State matrix.
            B (ArrayLike): Input matrix.
            Qc (ArrayLike): Stage state weight (PSD).
            Rc (ArrayLike): Stage control weight (SPD).
            Qf (ArrayLike): Terminal weight (PSD).
            n (int): Horizon.
            q0 (ArrayLike): Initial state.

        Returns:
            LQRSolution: Feedback rollout controls (``n x m``), states, gains and the
            optimal value ``½ q0ᵀP_0q0``.

        Raises:
            OracleError: If ``R + BᵀPB`` is singular.
        """
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        Q = np.atleast_2d(np.asarray(Qc, dtype=float))
        R = np.atleast_2d(np.asarray(Rc, dtype=float))
        P = np.atleast_2d(np.asarray(Qf, dtype=float))
        x = np.asarray(q0, dtype=float).reshape(-1)

        gains: list[FloatArray] = []
        for _ in range(n):
            S = R + B.T @ P @ B
            if np.linalg.cond(S) > 1e14:
                raise OracleError("R + BᵀPB is singular")
            try:
                K = solve(S, B.T @ P @ A, assume_a="sym")
            except LinAlgError as exc:
                raise OracleError("R + BᵀPB is singular") from exc
            gains.append(K)
            P = Q + A.T @ P @ (A - B @ K)
            P = 0.5 * (P + P.T)
        gains.reverse()

        states = [x]
        controls = []
        for K in gains:
            u = -K @ states[-1]
            controls.append(u)
            states.append(A @ states[-1] + B @ u)
        return LQRSolution(
            controls=np.array(controls).reshape(n, B.shape[1]),
            states=np.array(states),
            gains=tuple(gains),
            value=float(0.5 * x @ P @ x),
        )

    @staticmethod
    def project_polyhedron(
        u: ArrayLike,
        ineq_matrix: ArrayLike | None = None,
        ineq_rhs: ArrayLike | None = None,
        eq_matrix: ArrayLike | None = None,
        eq_rhs: ArrayLike | None = None,
    ) -> tuple[FloatArray, float]:
        """
        Exact Euclidean projection of ``u`` onto ``{x : Mx <= b, Nx = c}``.

        The dual of the projection problem is a bound-constrained QP in the
        multipliers (``λ >= 0``, ``μ`` free).

        Returns:
            tuple[FloatArray, float]: The projection and the distance to it.
        """
        u = np.asarray(u, dtype=float).reshape(-1)
        dim = u.size
        M = np.zeros((0, dim)) if ineq_matrix is None else np.atleast_2d(ineq_matrix)
        b = np.zeros(0) if ineq_rhs is None else np.asarray(ineq_rhs, dtype=float)
        N = np.zeros((0, dim)) if eq_matrix is None else np.atleast_2d(eq_matrix)
        c = np.zeros(0) if eq_rhs is None else np.asarray(eq_rhs, dtype=float)

        W = np.vstack([M, N]).astype(float)
        if W.shape[0] == 0:
            return u.copy(), 0.0
        rhs = np.concatenate([b, c])
        # x = u - Wᵀy, dual: min ½ yᵀWWᵀy + (rhs - Wu)ᵀy
        y = bounded_qp(
            W @ W.T,
            rhs - W @ u,
            np.concatenate([np.zeros(M.shape[0]), np.full(N.shape[0], -np.inf)]),
            np.full(W.shape[0], np.inf),
        )
        x = u - W.T @ y
        return x, float(np.linalg.norm(x - u))

    @staticmethod
    def feasible_distance(
        penalty: Callable[[FloatArray], float],
        u: ArrayLike,
        lower: ArrayLike,
        upper: ArrayLike,
        grid_depth: int = 4,
        points_per_axis: int = 11,
        tol: float | None = None,
    ) -> DistanceBracket:
        """
        Bracket the distance from ``u`` to ``{x : penalty(x) <= tol}`` by nested grids.

        Args:
            penalty (Callable[[FloatArray], float]): Nonnegative violation measure.
            u (ArrayLike): Query point (flat control coordinates).
            lower (ArrayLike): Lower corner of the compact search box.
            upper (ArrayLike): Upper corner of the compact search box.
            grid_depth (int): Number of refinement levels.
            points_per_axis (int): Grid points per coordinate and level.
            tol (float | None): Feasibility threshold.

        Returns:
            DistanceBracket: ``[lower, upper]`` with status ``"Bracketed"``, or status
            ``"Unknown"`` when no feasible grid point was found.
        """
        tol = settings.PENALTY_TOLERANCE if tol is None else tol
        u = np.asarray(u, dtype=float).reshape(-1)
        box_lo = np.asarray(lower, dtype=float).reshape(-1)
        box_hi = np.asarray(upper, dtype=float).reshape(-1)
        lo, hi = box_lo.copy(), box_hi.copy()

        best, witness = np.inf, None
        coarse_diagonal = None
        for depth in range(grid_depth):
            axes = [np.linspace(a, b, points_per_axis) for a, b in zip(lo, hi)]
            cell = (hi - lo) / (points_per_axis - 1)
            if coarse_diagonal is None:
                coarse_diagonal = float(np.linalg.norm(cell))
            for candidate in itertools.product(*axes):
                x = np.asarray(candidate)
                if penalty(x) <= tol:
                    d = float(np.linalg.norm(x - u))
                    if d < best:
                        best, witness = d, x
            if witness is None:
                logger.debug("feasible_distance: no feasible point at depth %d", depth)
                break
            lo = np.maximum(witness - cell, box_lo)
            hi = np.minimum(witness + cell, box_hi)

        if witness is None:
            return DistanceBracket(lower=0.0, upper=np.inf, status="Unknown")
        if penalty(u) <= tol:
            return DistanceBracket(lower=0.0, upper=0.0, status="Bracketed", witness=u)
        return DistanceBracket(
            lower=max(0.0, best - float(coarse_diagonal)),
            upper=best,
            status="Bracketed",
            witness=witness,
        )

    @staticmethod
    def audit(name: str, seed: int = 0) -> float:
        """
        Run a registered derivative audit.

        Args:
            name (str): Registry key.
            seed (int): Seed of the sample-point generator.

        Returns:
            float: Relative error ``‖analytic − fd‖ / max(1, ‖fd‖)``.
        """
        case = DERIVATIVE_AUDITS[name]
        sample = case.build(np.random.default_rng(seed))
        estimate = OracleService.fd_gradient(
            sample.function,
            sample.manifold,
            sample.point,
        )
        error = float(
            np.linalg.norm(np.asarray(sample.analytic) - estimate.covec)
            / max(1.0, np.linalg.norm(estimate.covec)),
        )
        logger.info("derivative audit %s: relative error %.3e", name, error)
        return error
