"""Projected-gradient and exact-penalty drivers over control sequences."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike
from scipy.linalg import cho_factor, cho_solve

from dgmp.core.base.manifolds import Cotangent, FloatArray, Point
from dgmp.utils.exceptions import ManifoldError, NoCertificate, OracleError
from dgmp.utils.numerics import bounded_qp
from dgmp.utils.settings import settings
from dgmp.v1.schemas.solver import SolveOptions
from dgmp.v1.services.adjoint import AdjointService, CostSpec
from dgmp.v1.services.constraints import (
    ConstraintService,
    ConstraintSet,
    MultiplierSequence,
    NormalityResult,
)
from dgmp.v1.services.system import (
    ControlSystem,
    FactoredStageMap,
    SystemService,
    Trajectory,
)

logger = logging.getLogger("dgmp")

# Decreases below this many ulps of the merit value are indistinguishable from noise.
ROUNDOFF_ULPS = 1e3
MAX_STEP = 1e10
MIN_STEP = 1e-10
STALL_RATIO = 1e-3
MAXIMIZATION_GAP = 1e-7


class SolveStatus(str, Enum):
    CONVERGED = "Converged"
    ITER_LIMIT = "IterLimit"
    PENALTY_STALLED = "PenaltyStalled"


@dataclass(frozen=True)
class PenaltyRound:
    kappa: float
    penalty: float
    iterations: int
    delta: float


@dataclass(frozen=True)
class SolveReport:
    trajectory: Trajectory
    iterations: int
    certified_delta: float
    cost: float
    status: SolveStatus
    penalty: float = 0.0
    rounds: tuple[PenaltyRound, ...] = ()
    multipliers: MultiplierSequence | None = None
    normality: NormalityResult | None = None
    message: str = ""
    history: tuple[float, ...] = field(default=(), repr=False)


@dataclass(frozen=True)
class MaximizationResult:
    passed: bool
    gap: float
    value: float
    best: float
    best_control: FloatArray
    samples: int


@dataclass(frozen=True)
class _Iterate:
    traj: Trajectory
    cost: float
    merit: float
    gradient: FloatArray
    values: FloatArray
    jacobian: FloatArray


class _PenalizedProblem:
    """``J + κ·Σψ(v_j)`` with ``ψ = max(0, ·)`` for inequalities and ``|·|`` for equalities.

    Without constraints this is ``J`` itself, so both drivers share one code path.
    """

    def __init__(
        self,
        sys: ControlSystem,
        cost: CostSpec,
        q0: Point,
        cons: ConstraintSet | None = None,
        e: ArrayLike | None = None,
    ) -> None:
        self.sys = sys
        self.cost = cost
        self.q0 = q0
        self.cons = cons
        self.rhs = np.zeros(0) if cons is None else cons.check_rhs(e)
        entries = () if cons is None else cons.entries
        self.is_ineq = np.array([x.is_inequality for x in entries], dtype=bool)
        self.lower = np.where(self.is_ineq, 0.0, -1.0)
        self.space = sys.control_space
        metric = self.space.metric_matrix()
        identity = np.array_equal(metric, np.eye(metric.shape[0]))
        self._metric = None if identity else metric
        self._factor = None if identity else cho_factor(metric)

    @property
    def size(self) -> int:
        return int(self.is_ineq.size)

    def sharp(self, covec: FloatArray) -> FloatArray:
        if self._factor is None:
            return covec
        return cho_solve(self._factor, covec)

    def norm_sq(self, vec: FloatArray) -> float:
        if self._metric is None:
            return float(vec @ vec)
        return float(vec @ self._metric @ vec)

    def violation(self, values: FloatArray) -> float:
        return float(np.sum(np.where(self.is_ineq, np.maximum(values, 0.0), np.abs(values))))

    def _values(self, traj: Trajectory) -> FloatArray:
        if self.cons is None:
            return np.zeros(0)
        return ConstraintService.term_values(self.cons, self.rhs, traj)

    def merit(self, controls: Sequence[Point], kappa: float) -> tuple[float, Trajectory]:
        traj = SystemService.rollout(self.sys, self.q0, controls)
        cost = AdjointService.total_cost(self.sys, traj, self.cost)
        return cost + kappa * self.violation(self._values(traj)), traj

    def iterate(self, controls: Sequence[Point], kappa: float) -> _Iterate:
        traj = SystemService.rollout(self.sys, self.q0, controls)
        cost = AdjointService.total_cost(self.sys, traj, self.cost)
        values = self._values(traj)
        lin = SystemService.linearize(self.sys, traj)
        gradient = np.concatenate(
            [
                c.covec
                for c in AdjointService.cost_gradient(
                    self.sys, traj, self.cost, lin, validate=False
                )
            ],
        )
        if self.cons is None:
            jacobian = np.zeros((gradient.size, 0))
        else:
            jacobian, _ = ConstraintService.unit_responses(
                self.sys, traj, self.cons, self.cons.entries, lin
            )
        return _Iterate(
            traj=traj,
            cost=cost,
            merit=cost + kappa * self.violation(values),
            gradient=gradient,
            values=values,
            jacobian=jacobian,
        )

    def direction(
        self,
        it: _Iterate,
        alpha: float,
        kappa: float,
    ) -> tuple[FloatArray, FloatArray]:
        """Prox-linear step ``d = −αG⁻¹(c + Gt)`` and the covector ``w = c + Gt``.

        ``t`` solves the dual of ``min ⟨c,d⟩ + κΣψ(v + Gᵀd) + ‖d‖²/2α``, a QP with
        ``t ∈ [0, κ]`` for inequalities and ``[−κ, κ]`` for equalities.
        """
        G, c = it.jacobian, it.gradient
        if self.size and kappa > 0.0:
            scaled = np.column_stack([self.sharp(col) for col in G.T])
            t = bounded_qp(
                alpha * G.T @ scaled,
                alpha * scaled.T @ c - it.values,
                kappa * self.lower,
                np.full(self.size, kappa),
            )
        else:
            t = np.zeros(self.size)
        w = c + G @ t
        return -alpha * self.sharp(w), w

    def predicted(self, it: _Iterate, displacement: FloatArray, kappa: float) -> float:
        linear = it.values + it.jacobian.T @ displacement
        model = kappa * (self.violation(it.values) - self.violation(linear))
        return model - float(it.gradient @ displacement)

    def measure(self, it: _Iterate, w: FloatArray) -> float:
        pieces = self.space.split(w)
        return AdjointService.certify(self.sys, it.traj, pieces).certified_delta


@dataclass(frozen=True)
class _RunResult:
    iterate: _Iterate
    iterations: int
    delta: float
    status: SolveStatus
    history: tuple[float, ...]
    message: str = ""


def _descend(
    problem: _PenalizedProblem,
    controls: Sequence[Point],
    opts: SolveOptions,
    kappa: float,
) -> _RunResult:
    """
    Projected descent ``u ← P_U(retract(u, d))`` with Armijo backtracking.

    The first trial step is ``opts.initial_step``; later ones are Barzilai–Borwein
    quotients of successive displacements and gradients.
    """
    sys = problem.sys
    it = problem.iterate(controls, kappa)
    alpha = opts.initial_step
    history = [it.merit]

    for iteration in range(opts.max_iters + 1):
        step, w = problem.direction(it, alpha, kappa)
        delta = problem.measure(it, w)
        if delta <= opts.gradient_tolerance:
            logger.info("converged after %d iterations, delta %.3e", iteration, delta)
            return _RunResult(it, iteration, delta, SolveStatus.CONVERGED, tuple(history))
        if iteration == opts.max_iters:
            break

        base = sys.pack_controls(it.traj.controls)
        slack = ROUNDOFF_ULPS * np.finfo(float).eps * max(1.0, abs(it.merit))
        trial_alpha = alpha
        accepted = None
        for backtrack in range(opts.max_backtracks + 1):
            if backtrack:
                step, _ = problem.direction(it, trial_alpha, kappa)
            candidate = SystemService.apply_step(sys, it.traj.controls, step)
            displacement = problem.space.inverse_retract(base, sys.pack_controls(candidate))
            try:
                value, _ = problem.merit(candidate, kappa)
            except (ManifoldError, OracleError):
                value = math.inf
            pred = problem.predicted(it, displacement, kappa)
            if pred > slack:
                ok = value <= it.merit - opts.armijo_c1 * pred
            else:
                ok = pred >= -slack and value <= it.merit + slack
            if ok:
                accepted = candidate
                break
            logger.debug("backtrack %d: alpha %.3e, merit %.17g", backtrack + 1, trial_alpha, value)
            trial_alpha *= opts.backtrack

        if accepted is None:
            message = f"line search failed after {opts.max_backtracks} backtracks"
            logger.warning("%s at iteration %d (delta %.3e)", message, iteration, delta)
            return _RunResult(
                it, iteration, delta, SolveStatus.ITER_LIMIT, tuple(history), message
            )

        new = problem.iterate(accepted, kappa)
        logger.debug(
            "iteration %d: merit %.17g -> %.17g, alpha %.3e, delta %.3e",
            iteration,
            it.merit,
            new.merit,
            trial_alpha,
            delta,
        )
        s, y = displacement, new.gradient - it.gradient
        sy = float(s @ y)
        if sy > 0.0:
            alpha = float(np.clip(problem.norm_sq(s) / sy, MIN_STEP, MAX_STEP))
        else:
            alpha = min(2.0 * trial_alpha, MAX_STEP)
        it = new
        history.append(it.merit)

    message = f"no convergence within {opts.max_iters} iterations"
    logger.warning("%s (delta %.3e)", message, delta)
    return _RunResult(it, opts.max_iters, delta, SolveStatus.ITER_LIMIT, tuple(history), message)


class SolverService:
    """Service class for the optimization drivers."""

    @staticmethod
    def minimize(
        sys: ControlSystem,
        cost: CostSpec,
        q0: Point,
        u_init: Sequence[Point],
        opts: SolveOptions | None = None,
    ) -> SolveReport:
        """
        Minimize ``J`` over feasible control sequences by projected gradient descent.

        Args:
            sys (ControlSystem): The control system.
            cost (CostSpec): The cost.
            q0 (Point): Initial state.
            u_init (Sequence[Point]): Starting controls; projected onto the control sets.
            opts (SolveOptions | None): Solver options.

        Returns:
            SolveReport: The final trajectory with ``Converged`` when the stationarity
            measure reached ``opts.gradient_tolerance``, otherwise ``IterLimit``.
        """
        opts = opts or SolveOptions()
        problem = _PenalizedProblem(sys, cost, q0)
        controls = SystemService.project_controls(sys, u_init)
        result = _descend(problem, controls, opts, 0.0)
        return SolveReport(
            trajectory=result.iterate.traj,
            iterations=result.iterations,
            certified_delta=result.delta,
            cost=result.iterate.cost,
            status=result.status,
            message=result.message,
            history=result.history,
        )

    @staticmethod
    def penalty_solve(
        sys: ControlSystem,
        cost: CostSpec,
        cons: ConstraintSet,
        q0: Point,
        u_init: Sequence[Point],
        opts: SolveOptions | None = None,
        e: ArrayLike | None = None,
    ) -> SolveReport:
        """
        Solve the constrained problem through the exact penalty ``J + κP``.

        Each round descends on the penalized merit from the previous round's controls
        and multiplies ``κ`` by ``opts.kappa_growth`` while the trajectory stays
        infeasible. Two consecutive rounds without a relative decrease of ``P`` stop the
        run as ``PenaltyStalled``, with the strict-normality verdict at the feasible
        shift of ``e`` attached. Converged runs carry assembled multipliers.

        Returns:
            SolveReport: The final trajectory, the ``(κ, P)`` history and multipliers.
        """
        opts = opts or SolveOptions()
        problem = _PenalizedProblem(sys, cost, q0, cons, e)
        rhs = problem.rhs
        controls: Sequence[Point] = SystemService.project_controls(sys, u_init)
        kappa = opts.kappa0
        rounds: list[PenaltyRound] = []
        history: list[float] = []
        iterations = 0
        stalls = 0
        status = SolveStatus.PENALTY_STALLED
        message = ""
        result = None

        for round_index in range(opts.max_outer_rounds):
            result = _descend(problem, controls, opts, kappa)
            controls = result.iterate.traj.controls
            iterations += result.iterations
            history.extend(result.history)
            penalty = ConstraintService.penalty_eval(cons, rhs, result.iterate.traj).total
            rounds.append(PenaltyRound(kappa, penalty, result.iterations, result.delta))
            logger.info(
                "penalty round %d: kappa %.3e, P %.3e, delta %.3e",
                round_index,
                kappa,
                penalty,
                result.delta,
            )
            if penalty <= settings.PENALTY_TOLERANCE:
                status = result.status
                message = result.message
                break
            if len(rounds) > 1 and penalty > rounds[-2].penalty * (1.0 - STALL_RATIO):
                stalls += 1
            else:
                stalls = 0
            if stalls >= 2:
                message = "penalty stopped decreasing"
                break
            kappa *= opts.kappa_growth
        else:
            message = f"still infeasible after {opts.max_outer_rounds} penalty rounds"

        if result is None:
            raise ValueError("max_outer_rounds must be positive")
        traj = result.iterate.traj
        multipliers = None
        normality = None
        if status is SolveStatus.CONVERGED:
            try:
                multipliers = ConstraintService.assemble_multipliers(sys, traj, cost, cons, rhs)
            except NoCertificate as exc:
                logger.warning("multiplier assembly failed: %s", exc)
                multipliers = exc.best_attempt
                message = str(exc)
        elif status is SolveStatus.PENALTY_STALLED:
            logger.warning("%s; checking strict normality", message)
            shifted = ConstraintService.feasible_shift(cons, rhs, traj)
            normality = ConstraintService.strict_normality_check(
                sys, traj, cons, shifted, seed=opts.seed
            )

        return SolveReport(
            trajectory=traj,
            iterations=iterations,
            certified_delta=result.delta,
            cost=result.iterate.cost,
            status=status,
            penalty=rounds[-1].penalty,
            rounds=tuple(rounds),
            multipliers=multipliers,
            normality=normality,
            message=message,
            history=tuple(history),
        )

    @staticmethod
    def maximization_check(
        sys: ControlSystem,
        traj: Trajectory,
        costates: Sequence[ArrayLike],
        stage: int,
        samples: int = 1000,
        cost: CostSpec | None = None,
        lambda0: float = 1.0,
        seed: int = 0,
    ) -> MaximizationResult:
        """
        Compare ``H_i(u_i)`` with ``H_i`` over sampled controls of stage ``i``.

        ``H_i(u) = ⟨𝔽E*p_{i+1}, f_i(q_i, u)⟩ − λ_0 L_i(q_i, u)``, with ``𝔽E`` taken at
        the fibre point of the trajectory. Samples are low-discrepancy points of the
        control set plus its vertices when they can be enumerated.

        Args:
            sys (ControlSystem): The control system.
            traj (Trajectory): The trajectory.
            costates (Sequence[ArrayLike]): Costates ``p_0..p_n``.
            stage (int): Stage index ``i``.
            samples (int): Number of sampled controls.
            cost (CostSpec | None): Running cost; ``None`` means ``L = 0``.
            lambda0 (float): Cost multiplier, 0 for abnormal multipliers.
            seed (int): Sampler seed.

        Returns:
            MaximizationResult: ``passed`` iff ``H_i(u_i) >= max − 1e-7``.

        Raises:
            ValueError: If the stage is not factored with a fibre map affine in ``u``.
        """
        if not 0 <= stage < sys.horizon:
            raise IndexError(f"stage {stage} outside 0..{sys.horizon - 1}")
        stage_map = sys.stages[stage]
        if not isinstance(stage_map, FactoredStageMap) or not stage_map.affine_in_u:
            raise ValueError(
                f"stage {stage} is not affine in the control; only stationarity applies",
            )
        if len(costates) != sys.horizon + 1:
            raise ValueError(f"expected {sys.horizon + 1} costates, got {len(costates)}")

        q, u = traj.states[stage], traj.controls[stage]
        Q = sys.state_manifold
        U = stage_map.control_manifold
        p_next = Cotangent(Q, traj.states[stage + 1], np.asarray(costates[stage + 1], dtype=float))
        pulled = SystemService.fibre_derivative_pullback(stage_map, q, u, p_next)

        def hamiltonian(v: Point) -> float:
            value = float(pulled @ stage_map.fibre(q, v))
            if cost is not None and lambda0 != 0.0:
                value -= lambda0 * cost.running(stage, q, v)
            return value

        cset = sys.control_sets[stage]
        points = cset.sample(samples, seed, around=np.asarray(u.coords, dtype=float))
        vertices = cset.vertices()
        if vertices is not None:
            points = np.vstack([points, vertices])

        current = hamiltonian(u)
        best, best_control = current, np.asarray(u.coords, dtype=float)
        for x in points:
            value = hamiltonian(U.point(x))
            if value > best:
                best, best_control = value, np.asarray(x, dtype=float)
        gap = best - current
        logger.info("maximization check at stage %d: gap %.3e", stage, gap)
        return MaximizationResult(
            passed=gap <= MAXIMIZATION_GAP,
            gap=gap,
            value=current,
            best=best,
            best_control=best_control,
            samples=len(points),
        )
