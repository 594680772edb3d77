"""Multiplicative systems on Lie groups and the Hamiltonian variational integrator.

Momenta and potential differentials are body covectors in 𝔤*. The coadjoint matrix
``coadjoint_matrix(G, g)`` is ``Ad(g⁻¹)ᵀ``; on SO(3) it is ``g`` itself.

Step equations, with ``m_i = dφ(g_i)``::

    p_i     = h·Ad(u_i⁻¹)ᵀ dK(u_i) + (h/2) m_i
    g_{i+1} = g_i u_i
    p_{i+1} = Ad(u_i)ᵀ (p_i − (h/2) m_i) − (h/2) m_{i+1}

These are exactly the conditions under which the controls are critical for the
action sum ``Σ hK(u_i) − (h/2)φ(g_i) − (h/2)φ(g_i u_i)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike

from dgmp.core.base.manifolds import FloatArray, Manifold, Point
from dgmp.utils.exceptions import ManifoldError, NewtonDivergence
from dgmp.utils.settings import settings
from dgmp.v1.services.adjoint import CostSpec
from dgmp.v1.services.manifold import (
    SO3,
    coadjoint_matrix,
    right_jacobian_inverse,
    skew_part_vee,
)
from dgmp.v1.services.oracle import OracleService
from dgmp.v1.services.system import ControlSystem, StageMap, WholeManifold

logger = logging.getLogger("dgmp")


@dataclass(frozen=True, eq=False)
class KineticEnergy:
    value: Callable[[Point], float]
    differential: Callable[[Point], ArrayLike] | None = None

    def dK(self, group: Manifold, u: Point) -> FloatArray:
        if self.differential is not None:
            return np.asarray(self.differential(u), dtype=float)
        return OracleService.fd_gradient(self.value, group, u).covec


@dataclass(frozen=True, eq=False)
class Potential:
    value: Callable[[Point], float]
    differential: Callable[[Point], ArrayLike] | None = None

    def d(self, group: Manifold, g: Point) -> FloatArray:
        if self.differential is not None:
            return np.asarray(self.differential(g), dtype=float)
        return OracleService.fd_gradient(self.value, group, g).covec


def zero_potential() -> Potential:
    return Potential(
        value=lambda g: 0.0,
        differential=lambda g: np.zeros(g.manifold.dim),
    )


def check_inertia(J_d: ArrayLike) -> FloatArray:
    J = np.asarray(J_d, dtype=float)
    if J.shape != (3, 3):
        raise ValueError(f"J_d must be 3x3, got {J.shape}")
    if not np.allclose(J, J.T, atol=1e-12):
        raise ValueError("J_d must be symmetric")
    if np.linalg.eigvalsh(J).min() <= 0.0:
        raise ValueError("J_d must be positive definite")
    return J


def so3_kinetic(J_d: ArrayLike, h: float) -> KineticEnergy:
    """
    Discrete rigid-body kinetic energy ``K(u) = tr((I − u) J_d) / h``.

    Args:
        J_d (ArrayLike): Symmetric positive-definite 3x3 inertia-like matrix.
        h (float): Step size.

    Returns:
        KineticEnergy: ``K`` with ``dK(u) = vee(J_d u − uᵀJ_d) / h``.

    Raises:
        ValueError: If ``J_d`` is not SPD or ``h <= 0``.
    """
    J = check_inertia(J_d)
    if h <= 0.0:
        raise ValueError("step size must be positive")
    return KineticEnergy(
        value=lambda u: float(np.trace((np.eye(3) - u.coords) @ J)) / h,
        differential=lambda u: skew_part_vee(J @ u.coords) / h,
    )


def heavy_top_potential(gamma: float, rho: ArrayLike) -> Potential:
    """``φ(R) = γ e₃ᵀRρ`` with body differential ``γ ρ × (Rᵀe₃)``."""
    rho = np.asarray(rho, dtype=float).reshape(3)
    e3 = np.array([0.0, 0.0, 1.0])
    return Potential(
        value=lambda g: float(gamma * e3 @ g.coords @ rho),
        differential=lambda g: gamma * np.cross(rho, g.coords.T @ e3),
    )


@dataclass(frozen=True, eq=False)
class LieGroupProblem:
    group: Manifold
    kinetic: KineticEnergy
    step: float
    potential: Potential = field(default_factory=zero_potential)
    inertia: FloatArray | None = None
    horizon: int | None = None

    def __post_init__(self) -> None:
        if not self.group.is_group:
            raise ManifoldError(f"{self.group!r} is not a Lie group")
        if self.step <= 0.0:
            raise ValueError("step size must be positive")
        if self.inertia is not None:
            object.__setattr__(self, "inertia", check_inertia(self.inertia))

        e = self.group.identity()
        at_identity = float(np.linalg.norm(self.kinetic.dK(self.group, e)))
        if at_identity > 1e-10:
            raise ValueError(f"dK(e) = {at_identity:.3e}, expected 0")
        jac = OracleService.fd_vector_jacobian(
            lambda u: self.kinetic.dK(self.group, u),
            self.group,
            e,
        )
        sigma_min = float(np.linalg.svd(jac, compute_uv=False).min())
        if sigma_min < 1e-8:
            raise ValueError(
                f"dK is singular at the identity (smallest singular value {sigma_min:.3e})",
            )

    @classmethod
    def rigid_body(
        cls,
        J_d: ArrayLike,
        h: float,
        potential: Potential | None = None,
        horizon: int | None = None,
    ) -> LieGroupProblem:
        return cls(
            group=SO3(),
            kinetic=so3_kinetic(J_d, h),
            step=h,
            potential=potential or zero_potential(),
            inertia=np.asarray(J_d, dtype=float),
            horizon=horizon,
        )

    def stage_lagrangian(self, g: Point, u: Point) -> float:
        h = self.step
        return (
            h * self.kinetic.value(u)
            - 0.5 * h * self.potential.value(g)
            - 0.5 * h * self.potential.value(self.group.compose(g, u))
        )


@dataclass(frozen=True)
class StepResult:
    control: Point
    next_state: Point
    next_momentum: FloatArray
    next_potential_differential: FloatArray
    residual: float
    iterations: int
    residual_history: tuple[float, ...]


@dataclass(frozen=True)
class MomentumSequence:
    """Momenta ``p_1..p_n``, differentials ``m_1..m_n`` and the controls that produced them."""

    p: tuple[FloatArray, ...]
    m: tuple[FloatArray, ...]
    controls: tuple[Point, ...]
    residuals: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.p)


class LieGroupService:
    """Service class for Lie-group costates and variational stepping."""

    @staticmethod
    def lie_costate_step(
        group: Manifold,
        p: ArrayLike,
        dgL: ArrayLike,
        u: Point,
    ) -> FloatArray:
        """``p_{i+1} = Ad(u)ᵀ (p_i + d_gL_i)``."""
        p = group.check_vector(p)
        dgL = group.check_vector(dgL)
        return coadjoint_matrix(group, group.inverse(u)) @ (p + dgL)

    @staticmethod
    def lie_costate_step_back(
        group: Manifold,
        p_next: ArrayLike,
        dgL: ArrayLike,
        u: Point,
    ) -> FloatArray:
        """Inverse of ``lie_costate_step``: ``p_i = −d_gL_i + Ad(u⁻¹)ᵀ p_{i+1}``."""
        p_next = group.check_vector(p_next)
        dgL = group.check_vector(dgL)
        return -dgL + coadjoint_matrix(group, u) @ p_next

    @staticmethod
    def legendre_plus(
        group: Manifold,
        lagrangian: Callable[[Point, Point], float],
        g: Point,
        u: Point,
        grad_u: Callable[[Point, Point], ArrayLike] | None = None,
    ) -> FloatArray:
        """Discrete Legendre transform ``d_uL(g, u)`` in body coordinates."""
        if grad_u is not None:
            return np.asarray(grad_u(g, u), dtype=float)
        return OracleService.fd_gradient(lambda v: lagrangian(g, v), group, u).covec

    @staticmethod
    def momentum_residual(
        prob: LieGroupProblem,
        u: Point,
        p: ArrayLike,
        m: ArrayLike,
    ) -> FloatArray:
        """``h·Ad(u⁻¹)ᵀdK(u) + (h/2)m − p``."""
        G, h = prob.group, prob.step
        return (
            h * coadjoint_matrix(G, u) @ prob.kinetic.dK(G, u)
            + 0.5 * h * np.asarray(m, dtype=float)
            - np.asarray(p, dtype=float)
        )

    @staticmethod
    def variational_step(prob: LieGroupProblem, g: Point, p: ArrayLike) -> StepResult:
        """
        Advance one step of the variational integrator.

        Solves the momentum equation for ``u = exp(x)`` by Newton's method with a
        central-difference Jacobian, then updates the state and the momentum.

        Args:
            prob (LieGroupProblem): The integrator data.
            g (Point): Current group element ``g_i``.
            p (ArrayLike): Current momentum ``p_i``.

        Returns:
            StepResult: ``u_i``, ``g_{i+1}``, ``p_{i+1}`` and Newton diagnostics.

        Raises:
            NewtonDivergence: If the residual does not reach tolerance within
                ``settings.NEWTON_MAX_ITERS`` iterations.
        """
        G, h = prob.group, prob.step
        p = G.check_vector(p)
        e = G.identity()
        m = prob.potential.d(G, g)
        target = p - 0.5 * h * m
        tol = settings.NEWTON_TOLERANCE * max(1.0, float(np.linalg.norm(p)))

        def residual(x: FloatArray) -> FloatArray:
            return LieGroupService.momentum_residual(prob, G.retract(e, x), p, m)

        if prob.inertia is not None and isinstance(G, SO3):
            J = prob.inertia
            x = np.linalg.solve(np.trace(J) * np.eye(3) - J, target)
        else:
            x = np.zeros(G.dim)

        history: list[float] = []
        fd = settings.FD_STEP
        for iteration in range(settings.NEWTON_MAX_ITERS + 1):
            r = residual(x)
            norm = float(np.linalg.norm(r))
            history.append(norm)
            if not np.isfinite(norm):
                break
            if norm <= tol:
                break
            if iteration == settings.NEWTON_MAX_ITERS:
                break
            jac = np.column_stack(
                [
                    (residual(x + fd * basis) - residual(x - fd * basis)) / (2.0 * fd)
                    for basis in np.eye(G.dim)
                ],
            )
            try:
                x = x - np.linalg.solve(jac, r)
            except np.linalg.LinAlgError:
                break

        if not history[-1] <= tol:
            logger.warning("Newton residual history: %s", history)
            raise NewtonDivergence(
                f"momentum equation not solved (residual {history[-1]:.3e})",
                residual=history[-1],
            )
        logger.debug("Newton residual history: %s", history)

        u = G.retract(e, x)
        g_next = G.compose(g, u)
        m_next = prob.potential.d(G, g_next)
        p_next = LieGroupService.lie_costate_step(G, p - 0.5 * h * m, np.zeros(G.dim), u)
        p_next = p_next - 0.5 * h * m_next
        return StepResult(
            control=u,
            next_state=g_next,
            next_momentum=p_next,
            next_potential_differential=m_next,
            residual=history[-1],
            iterations=len(history) - 1,
            residual_history=tuple(history),
        )

    @staticmethod
    def integrate(
        prob: LieGroupProblem,
        g0: Point,
        p0: ArrayLike,
        steps: int,
    ) -> tuple[tuple[Point, ...], MomentumSequence]:
        """
        Iterate ``variational_step`` from ``(g_0, p_0)``.

        Returns:
            tuple: The states ``g_0..g_steps`` and the momenta ``p_1..p_steps``.

        Raises:
            NewtonDivergence: Tagged with the index of the failing step.
        """
        if steps < 0:
            raise ValueError("steps must be nonnegative")
        prob.group.owns(g0)
        states = [g0]
        momenta, diffs, controls, residuals = [], [], [], []
        p = prob.group.check_vector(p0)
        for i in range(steps):
            try:
                result = LieGroupService.variational_step(prob, states[-1], p)
            except NewtonDivergence as exc:
                raise exc.at_step(i) from exc
            states.append(result.next_state)
            p = result.next_momentum
            momenta.append(p)
            diffs.append(result.next_potential_differential)
            controls.append(result.control)
            residuals.append(result.residual)
        logger.info("integrated %d variational steps", steps)
        return tuple(states), MomentumSequence(
            p=tuple(momenta),
            m=tuple(diffs),
            controls=tuple(controls),
            residuals=tuple(residuals),
        )

    @staticmethod
    def action_sum_problem(
        prob: LieGroupProblem,
        states: Sequence[Point],
        terminal_momentum: ArrayLike,
    ) -> tuple[ControlSystem, CostSpec]:
        """
        Control system and cost whose critical controls are the integrator's controls.

        Dynamics ``g_{i+1} = g_i u_i`` with the stage Lagrangian of ``prob``; the
        terminal cost ``−⟨p_n, Log(g_nᵀg)⟩`` fixes the final momentum to
        ``terminal_momentum``.
        """
        G, h = prob.group, prob.step
        n = len(states) - 1
        g_end = states[-1]
        p_end = G.check_vector(terminal_momentum)
        identity_dim = np.eye(G.dim)

        stages = tuple(
            StageMap(
                i,
                G,
                G,
                G.compose,
                jac_q=lambda g, u: G.adjoint_matrix(G.inverse(u)),
                jac_u=lambda g, u: identity_dim,
            )
            for i in range(n)
        )
        system = ControlSystem(G, stages, tuple(WholeManifold() for _ in range(n)))

        def grad_q(i: int, g: Point, u: Point) -> FloatArray:
            gu = G.compose(g, u)
            return -0.5 * h * prob.potential.d(G, g) - 0.5 * h * (
                coadjoint_matrix(G, u) @ prob.potential.d(G, gu)
            )

        def grad_u(i: int, g: Point, u: Point) -> FloatArray:
            gu = G.compose(g, u)
            return h * prob.kinetic.dK(G, u) - 0.5 * h * prob.potential.d(G, gu)

        terminal_grad = None
        if isinstance(G, SO3):

            def terminal_grad(g: Point) -> FloatArray:
                xi = G.inverse_retract(g_end, g)
                return -right_jacobian_inverse(xi).T @ p_end

        cost = CostSpec(
            terminal=lambda g: -float(p_end @ G.inverse_retract(g_end, g)),
            running=lambda i, g, u: prob.stage_lagrangian(g, u),
            terminal_grad=terminal_grad,
            running_grad_q=grad_q,
            running_grad_u=grad_u,
        )
        return system, cost
