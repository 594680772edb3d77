"""Costate sweep, stationarity residuals and Δ-criticality certificates."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike

from dgmp.core.base.manifolds import Cotangent, FloatArray, Manifold, Point
from dgmp.v1.services.oracle import OracleService
from dgmp.v1.services.system import (
    ControlSet,
    ControlSystem,
    Linearization,
    StageMap,
    SystemService,
    Trajectory,
)

logger = logging.getLogger("dgmp")

RunningCost = Callable[[int, Point, Point], float]
RunningGradient = Callable[[int, Point, Point], ArrayLike]


@dataclass(frozen=True, eq=False)
class CostSpec:
    """``J = ℓ(q_n) + Σ L_i(q_i, u_i)`` with optional initial cost ``κ(q_0)``.

    Missing gradients fall back to central differences through retractions.
    """

    terminal: Callable[[Point], float]
    running: RunningCost
    terminal_grad: Callable[[Point], ArrayLike] | None = None
    running_grad_q: RunningGradient | None = None
    running_grad_u: RunningGradient | None = None
    initial: Callable[[Point], float] | None = None
    initial_grad: Callable[[Point], ArrayLike] | None = None

    def terminal_gradient(self, Q: Manifold, q: Point) -> FloatArray:
        if self.terminal_grad is not None:
            return np.asarray(self.terminal_grad(q), dtype=float)
        return OracleService.fd_gradient(self.terminal, Q, q).covec

    def running_gradients(
        self,
        i: int,
        Q: Manifold,
        U: Manifold,
        q: Point,
        u: Point,
    ) -> tuple[FloatArray, FloatArray]:
        if self.running_grad_q is not None:
            a = np.asarray(self.running_grad_q(i, q, u), dtype=float)
        else:
            a = OracleService.fd_gradient(lambda x: self.running(i, x, u), Q, q).covec
        if self.running_grad_u is not None:
            b = np.asarray(self.running_grad_u(i, q, u), dtype=float)
        else:
            b = OracleService.fd_gradient(lambda v: self.running(i, q, v), U, u).covec
        return a, b

    def initial_gradient(self, Q: Manifold, q: Point) -> FloatArray:
        if self.initial is None:
            raise ValueError("cost has no initial term")
        if self.initial_grad is not None:
            return np.asarray(self.initial_grad(q), dtype=float)
        return OracleService.fd_gradient(self.initial, Q, q).covec

    def scaled(self, s: float) -> CostSpec:
        """The same cost multiplied by ``s``."""

        def times(fn):  # type: ignore[no-untyped-def]
            if fn is None:
                return None
            return lambda *args: s * np.asarray(fn(*args), dtype=float)

        return CostSpec(
            terminal=lambda q: s * self.terminal(q),
            running=lambda i, q, u: s * self.running(i, q, u),
            terminal_grad=times(self.terminal_grad),
            running_grad_q=times(self.running_grad_q),
            running_grad_u=times(self.running_grad_u),
            initial=None if self.initial is None else (lambda q: s * self.initial(q)),
            initial_grad=times(self.initial_grad),
        )


@dataclass(frozen=True)
class StageGradients:
    """``a_0..a_n`` (``a_n`` is the terminal gradient) and ``b_0..b_{n-1}``."""

    a: tuple[FloatArray, ...]
    b: tuple[FloatArray, ...]


@dataclass(frozen=True)
class CostateSequence:
    p: tuple[Cotangent, ...]
    p0: Cotangent | None
    a: tuple[FloatArray, ...]
    b: tuple[FloatArray, ...]

    def recursion_residuals(self, lin: Linearization) -> FloatArray:
        """``‖p_{i-1} − (−a_{i-1} + A_{i-1}ᵀp_i)‖`` for ``i = n..1`` plus the endpoint."""
        p = [None if self.p0 is None else self.p0.covec] + [c.covec for c in self.p]
        n = len(self.p)
        out = [float(np.linalg.norm(p[n] + self.a[n]))]
        for i in range(n, 0, -1):
            if p[i - 1] is None:
                continue
            expected = -self.a[i - 1] + lin.state_jacobians[i - 1].T @ p[i]
            out.append(float(np.linalg.norm(p[i - 1] - expected)))
        return np.array(out)


@dataclass(frozen=True)
class CriticalityReport:
    residuals: tuple[FloatArray, ...]
    per_stage_delta: tuple[float, ...]
    certified_delta: float


class AdjointService:
    """Service class for the backward costate sweep and its certificates."""

    @staticmethod
    def total_cost(sys: ControlSystem, traj: Trajectory, cost: CostSpec) -> float:
        terms = [cost.running(i, traj.states[i], traj.controls[i]) for i in range(sys.horizon)]
        terms.append(cost.terminal(traj.states[-1]))
        return math.fsum(terms)

    @staticmethod
    def stage_gradients(
        sys: ControlSystem,
        traj: Trajectory,
        cost: CostSpec,
    ) -> StageGradients:
        Q = sys.state_manifold
        a, b = [], []
        for i, stage in enumerate(sys.stages):
            ai, bi = cost.running_gradients(
                i,
                Q,
                stage.control_manifold,
                traj.states[i],
                traj.controls[i],
            )
            a.append(ai)
            b.append(bi)
        a.append(cost.terminal_gradient(Q, traj.states[-1]))
        return StageGradients(tuple(a), tuple(b))

    @staticmethod
    def sweep(lin: Linearization, a: Sequence[FloatArray]) -> list[FloatArray]:
        """
        Costates ``p_0..p_n`` from ``p_n = −a_n`` and ``p_{i-1} = −a_{i-1} + A_{i-1}ᵀp_i``.

        This is the single code path shared by the unconstrained certificate and the
        multiplier residuals.
        """
        n = len(lin.state_jacobians)
        p: list[FloatArray] = [np.zeros(0)] * (n + 1)
        p[n] = -np.asarray(a[n], dtype=float)
        for i in range(n, 0, -1):
            p[i - 1] = -a[i - 1] + lin.state_jacobians[i - 1].T @ p[i]
        return p

    @staticmethod
    def stationarity(
        lin: Linearization,
        b: Sequence[FloatArray],
        p: Sequence[FloatArray],
    ) -> list[FloatArray]:
        """Residuals ``r_i = b_i − B_iᵀp_{i+1}``."""
        return [
            np.asarray(b[i], dtype=float) - lin.control_jacobians[i].T @ p[i + 1]
            for i in range(len(lin.control_jacobians))
        ]

    @staticmethod
    def certify(
        sys: ControlSystem,
        traj: Trajectory,
        residuals: Sequence[FloatArray],
    ) -> CriticalityReport:
        per_stage = tuple(
            SystemService.stationarity_measure(cset, u, r)
            for cset, u, r in zip(sys.control_sets, traj.controls, residuals)
        )
        return CriticalityReport(
            residuals=tuple(residuals),
            per_stage_delta=per_stage,
            certified_delta=max(per_stage, default=0.0),
        )

    @staticmethod
    def backward_sweep(
        sys: ControlSystem,
        traj: Trajectory,
        cost: CostSpec,
        linearization: Linearization | None = None,
        validate: bool = True,
    ) -> CostateSequence:
        """
        Compute the costates of ``traj`` for ``cost``.

        Args:
            sys (ControlSystem): The control system.
            traj (Trajectory): A trajectory of ``sys``.
            cost (CostSpec): The cost.
            linearization (Linearization | None): Stage Jacobians, when already known.
            validate (bool): Whether to check the dynamics residuals first.

        Returns:
            CostateSequence: ``p_1..p_n``, ``p_0`` and the gradients used.

        Raises:
            InvalidTrajectoryError: If ``traj`` does not satisfy the dynamics.
        """
        if validate:
            SystemService.validate_trajectory(sys, traj)
        lin = linearization or SystemService.linearize(sys, traj)
        grads = AdjointService.stage_gradients(sys, traj, cost)
        p = AdjointService.sweep(lin, grads.a)
        Q = sys.state_manifold
        return CostateSequence(
            p=tuple(Cotangent(Q, traj.states[i], p[i]) for i in range(1, sys.horizon + 1)),
            p0=Cotangent(Q, traj.states[0], p[0]),
            a=grads.a,
            b=grads.b,
        )

    @staticmethod
    def cost_gradient(
        sys: ControlSystem,
        traj: Trajectory,
        cost: CostSpec,
        linearization: Linearization | None = None,
        validate: bool = True,
    ) -> tuple[Cotangent, ...]:
        """
        Reduced differential of ``J`` with respect to each control.

        Returns:
            tuple[Cotangent, ...]: ``r_i = b_i − B_iᵀp_{i+1}`` at ``u_i``.
        """
        if validate:
            SystemService.validate_trajectory(sys, traj)
        lin = linearization or SystemService.linearize(sys, traj)
        grads = AdjointService.stage_gradients(sys, traj, cost)
        p = AdjointService.sweep(lin, grads.a)
        residuals = AdjointService.stationarity(lin, grads.b, p)
        return tuple(
            Cotangent(stage.control_manifold, u, r)
            for stage, u, r in zip(sys.stages, traj.controls, residuals)
        )

    @staticmethod
    def criticality_certificate(
        sys: ControlSystem,
        traj: Trajectory,
        cost: CostSpec,
        linearization: Linearization | None = None,
        validate: bool = True,
    ) -> CriticalityReport:
        """
        Certify the least Δ for which ``traj`` is Δ-critical.

        Raises:
            InvalidTrajectoryError: If ``traj`` does not satisfy the dynamics.
            InfeasibleControlError: If some control lies outside its set.
        """
        if validate:
            SystemService.validate_trajectory(sys, traj)
        SystemService.check_controls(sys, traj)
        lin = linearization or SystemService.linearize(sys, traj)
        grads = AdjointService.stage_gradients(sys, traj, cost)
        p = AdjointService.sweep(lin, grads.a)
        residuals = AdjointService.stationarity(lin, grads.b, p)
        report = AdjointService.certify(sys, traj, residuals)
        logger.debug("certified delta %.3e", report.certified_delta)
        return report

    @staticmethod
    def extend_with_initial_state(
        sys: ControlSystem,
        cost: CostSpec,
        initial_set: ControlSet,
    ) -> tuple[ControlSystem, CostSpec]:
        """
        Turn the initial state into the control of a new leading stage.

        The new stage maps ``(q, q̃) ↦ q̃`` and carries the running cost ``κ(q̃)``,
        so stage 0 of the extended certificate is the initial-state condition.

        Raises:
            ValueError: If ``cost`` has no initial term.
        """
        if cost.initial is None:
            raise ValueError("extending with the initial state needs an initial cost κ")
        Q = sys.state_manifold
        initial = cost.initial
        lead = StageMap(
            0,
            Q,
            Q,
            lambda q, q_tilde: q_tilde,
            jac_q=lambda q, q_tilde: np.zeros((Q.dim, Q.dim)),
            jac_u=lambda q, q_tilde: np.eye(Q.dim),
        )
        stages = (lead,) + tuple(s.with_index(s.index + 1) for s in sys.stages)
        extended = ControlSystem(Q, stages, (initial_set,) + sys.control_sets)

        def running(k: int, q: Point, u: Point) -> float:
            return initial(u) if k == 0 else cost.running(k - 1, q, u)

        def grad_q(k: int, q: Point, u: Point) -> ArrayLike:
            if k == 0:
                return np.zeros(Q.dim)
            return cost.running_gradients(
                k - 1, Q, sys.stages[k - 1].control_manifold, q, u
            )[0]

        def grad_u(k: int, q: Point, u: Point) -> ArrayLike:
            if k == 0:
                return cost.initial_gradient(Q, u)
            return cost.running_gradients(
                k - 1, Q, sys.stages[k - 1].control_manifold, q, u
            )[1]

        extended_cost = replace(
            cost,
            running=running,
            running_grad_q=grad_q,
            running_grad_u=grad_u,
            initial=None,
            initial_grad=None,
        )
        return extended, extended_cost

    @staticmethod
    def extended_trajectory(traj: Trajectory) -> Trajectory:
        """The trajectory of the extended system whose leading control is ``q_0``."""
        q0 = traj.states[0]
        return Trajectory(states=(q0,) + traj.states, controls=(q0,) + traj.controls)
