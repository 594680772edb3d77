"""Problem files: building them into library objects and running commands on them."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike
from pydantic import ValidationError

from dgmp.core.base.manifolds import FloatArray, Manifold, Metric, Point
from dgmp.utils.exceptions import NoCertificate, ProblemFileError
from dgmp.utils.numerics import format_number
from dgmp.v1.schemas.problem import ControlSetSpec, ProblemFile
from dgmp.v1.schemas.reports import (
    CheckResponse,
    ConstrainedResponse,
    IntegrateResponse,
    IntegrationStepResponse,
    MaximizationResponse,
    MultiplierResponse,
    NormalityResponse,
    PenaltyRoundResponse,
    SolveResponse,
    SweepResponse,
    SweepRowResponse,
    TrajectoryResponse,
)
from dgmp.v1.schemas.solver import SolveOptions
from dgmp.v1.services import builtins
from dgmp.v1.services.adjoint import AdjointService, CostSpec
from dgmp.v1.services.constraints import (
    Constraint,
    ConstraintService,
    ConstraintSet,
    MultiplierSequence,
    SensitivityTable,
)
from dgmp.v1.services.liegroup import LieGroupProblem, LieGroupService
from dgmp.v1.services.manifold import SO3, Euclidean
from dgmp.v1.services.solver import SolveReport, SolverService
from dgmp.v1.services.system import (
    Ball,
    Box,
    ControlSet,
    ControlSystem,
    ConvexPolytope,
    FactoredStageMap,
    SystemService,
    Trajectory,
    WholeManifold,
)

logger = logging.getLogger("dgmp")

MAXIMIZATION_SAMPLES = 1000


@dataclass(frozen=True, eq=False)
class BuiltProblem:
    spec: ProblemFile
    system: ControlSystem
    cost: CostSpec
    constraints: ConstraintSet | None
    rhs: FloatArray
    q0: Point
    initial_controls: tuple[Point, ...]
    lie_problem: LieGroupProblem | None = None


def _metric(gram: list[list[float]] | None) -> Metric:
    return Metric() if gram is None else Metric.from_matrix(gram)


def _control_set(spec: ControlSetSpec) -> ControlSet:
    if spec.kind == "box":
        return Box(np.asarray(spec.lower), np.asarray(spec.upper))
    if spec.kind == "polytope":
        return ConvexPolytope(np.asarray(spec.A), np.asarray(spec.b))
    if spec.kind == "ball":
        return Ball(np.asarray(spec.center), float(spec.radius or 0.0))
    return WholeManifold()


def _default_control(U: Manifold, cset: ControlSet) -> Point:
    if isinstance(U, Euclidean):
        witness = cset.witness
        return cset.project(U.point(np.zeros(U.dim) if witness is None else witness))
    return U.identity()


def parse_grid(spec: str) -> FloatArray:
    """Parse ``a:b:k`` into ``k`` evenly spaced scalars from ``a`` to ``b``."""
    try:
        start, stop, count = spec.split(":")
        points = np.linspace(float(start), float(stop), int(count))
    except ValueError as exc:
        raise ProblemFileError(f"grid {spec!r} is not of the form a:b:k") from exc
    if points.size == 0:
        raise ProblemFileError("grid must have at least one point")
    return points


def _finite(value: float) -> float | None:
    return float(value) if np.isfinite(value) else None


def _write_csv(header: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_number(x) if isinstance(x, float) else x for x in row])
    return buffer.getvalue()


def states_csv(traj: Trajectory) -> str:
    width = traj.states[0].flat.size
    rows = [[i, *map(float, q.flat)] for i, q in enumerate(traj.states)]
    return _write_csv(["step", *(f"q{k}" for k in range(width))], rows)


def controls_csv(traj: Trajectory) -> str:
    width = traj.controls[0].flat.size if traj.controls else 0
    rows = [[i, *map(float, u.flat)] for i, u in enumerate(traj.controls)]
    return _write_csv(["step", *(f"u{k}" for k in range(width))], rows)


def read_controls_csv(text: str) -> list[list[float]]:
    """Rows of a controls CSV (header and step column dropped)."""
    reader = csv.reader(io.StringIO(text))
    rows = list(reader)
    try:
        return [[float(x) for x in row[1:]] for row in rows[1:] if row]
    except ValueError as exc:
        raise ProblemFileError(f"controls CSV has a non-numeric entry: {exc}") from exc


def integrate_csv(response: IntegrateResponse) -> str:
    header = ["step", *(f"g{k}" for k in range(9)), "p0", "p1", "p2", "norm", "residual"]
    rows = [[s.step, *s.g, *s.p, s.norm, s.residual] for s in response.steps]
    return _write_csv(header, rows)


def sweep_csv(scalars: Sequence[float], response: SweepResponse) -> str:
    width = len(response.rows[0].rhs) if response.rows else 0
    header = ["s", *(f"e{k}" for k in range(width)), "value", "status"]
    rows = [
        [float(s), *row.rhs, row.value, row.status]
        for s, row in zip(scalars, response.rows)
    ]
    text = _write_csv(header, rows)
    calmness = "none" if response.calmness is None else format_number(response.calmness)
    return text + f"# calmness={calmness} calm={str(response.calm).lower()}\n"


class ProblemService:
    """Service class behind the ``dgmp`` commands and the HTTP routes."""

    @staticmethod
    def load(path: str | Path) -> ProblemFile:
        """
        Read and validate a problem file.

        Raises:
            OSError: If the file cannot be read.
            ProblemFileError: If it is not a valid problem definition.
        """
        text = Path(path).read_text(encoding="utf-8")
        try:
            return ProblemFile.model_validate_json(text)
        except ValidationError as exc:
            raise ProblemFileError(str(exc)) from exc

    @staticmethod
    def build(spec: ProblemFile) -> BuiltProblem:
        """
        Turn a validated problem file into a system, a cost and constraints.

        Raises:
            ProblemFileError: If a builtin is unknown or a matrix has the wrong shape.
            ManifoldError: If the initial state is not a point of the state manifold.
        """
        if spec.manifold.kind == "so3":
            Q: Manifold = SO3(_metric(spec.manifold.metric))
        else:
            Q = Euclidean(int(spec.manifold.dim or 0), _metric(spec.manifold.metric))
        q0 = Q.point(spec.initial_state)
        U = builtins.control_manifold_for(
            spec.dynamics.name,
            Q,
            spec.control_dim,
            _metric(spec.control_metric),
        )
        n = spec.horizon
        dynamics = builtins.lookup(builtins.DYNAMICS, "dynamics", spec.dynamics.name)
        stages = dynamics.factory(Q, U, spec.dynamics.params, n)
        sets = [_control_set(s) for s in spec.control_sets]
        if len(sets) == 1:
            sets = sets * n
        system = ControlSystem(Q, stages, tuple(sets))

        lie_problem = None
        momentum = None
        if spec.integrator is not None:
            if not isinstance(Q, SO3):
                raise ProblemFileError("the integrator section needs an so3 manifold")
            potential = builtins.lookup(
                builtins.POTENTIALS, "potential", spec.integrator.potential.name
            ).factory(spec.integrator.potential.params)
            lie_problem = LieGroupProblem.rigid_body(
                spec.integrator.J_d,
                spec.integrator.h,
                potential,
                horizon=n,
            )
            momentum = np.asarray(spec.integrator.initial_momentum, dtype=float)

        ctx = builtins.BuildContext(Q, U, n, q0, lie_problem, momentum)
        cost = builtins.lookup(builtins.COSTS, "cost", spec.cost.name).factory(
            spec.cost.params, ctx
        )

        constraints = None
        rhs = np.zeros(0)
        if spec.constraints:
            stage_map: dict[int, list[Constraint]] = {}
            endpoint: list[Constraint] = []
            rhs_of: dict[int, float] = {}
            for item in spec.constraints:
                factory = builtins.lookup(builtins.CONSTRAINTS, "constraint", item.name).factory
                if item.stage == "endpoint":
                    constraint = factory(item.kind, Q, None, item.params)
                    endpoint.append(constraint)
                else:
                    constraint = factory(item.kind, Q, U, item.params)
                    stage_map.setdefault(int(item.stage), []).append(constraint)
                rhs_of[id(constraint)] = item.rhs
            constraints = ConstraintSet(n, stage_map, endpoint, pure_state=spec.pure_state)
            rhs = np.array([rhs_of[id(x.constraint)] for x in constraints.entries])

        if spec.initial_controls is not None:
            controls = ProblemService.parse_controls(system, spec.initial_controls)
        elif spec.cost.name == "action_sum":
            controls = ctx.integration[1].controls
        else:
            controls = tuple(_default_control(U, cset) for cset in system.control_sets)

        return BuiltProblem(
            spec=spec,
            system=system,
            cost=cost,
            constraints=constraints,
            rhs=rhs,
            q0=q0,
            initial_controls=tuple(controls),
            lie_problem=lie_problem,
        )

    @staticmethod
    def parse_controls(sys: ControlSystem, rows: Sequence[ArrayLike]) -> tuple[Point, ...]:
        if len(rows) != sys.horizon:
            raise ProblemFileError(f"expected {sys.horizon} control rows, got {len(rows)}")
        return tuple(stage.control_manifold.point(row) for stage, row in zip(sys.stages, rows))

    @staticmethod
    def options(built: BuiltProblem, **overrides: object) -> SolveOptions:
        """Problem-file solver options with non-``None`` overrides applied."""
        updates = {key: value for key, value in overrides.items() if value is not None}
        data = built.spec.solver.model_dump()
        data.update(updates)
        return SolveOptions.model_validate(data)

    @staticmethod
    def rollout(built: BuiltProblem, controls: Sequence[Point] | None = None) -> Trajectory:
        return SystemService.rollout(
            built.system,
            built.q0,
            built.initial_controls if controls is None else controls,
        )

    @staticmethod
    def solve(built: BuiltProblem, opts: SolveOptions | None = None) -> SolveReport:
        opts = opts or built.spec.solver
        if built.constraints is None:
            return SolverService.minimize(
                built.system, built.cost, built.q0, built.initial_controls, opts
            )
        return SolverService.penalty_solve(
            built.system,
            built.cost,
            built.constraints,
            built.q0,
            built.initial_controls,
            opts,
            e=built.rhs,
        )

    @staticmethod
    def check(
        built: BuiltProblem,
        controls: Sequence[Point] | None = None,
        opts: SolveOptions | None = None,
    ) -> CheckResponse:
        """
        Necessary-condition residuals of a control sequence.

        Unconstrained problems get the criticality certificate; constrained ones get
        assembled multipliers and their residuals. The maximization condition is
        checked on every stage that is affine in the control and carries no stage
        constraint.

        Raises:
            InfeasibleControlError: If a control lies outside its set.
        """
        opts = opts or built.spec.solver
        sys, cost = built.system, built.cost
        traj = ProblemService.rollout(built, controls)
        SystemService.check_controls(sys, traj)
        total = AdjointService.total_cost(sys, traj, cost)
        message = ""
        constrained = None
        lambda0 = 1.0

        if built.constraints is None:
            lin = SystemService.linearize(sys, traj)
            grads = AdjointService.stage_gradients(sys, traj, cost)
            p = AdjointService.sweep(lin, grads.a)
            residuals = AdjointService.stationarity(lin, grads.b, p)
            report = AdjointService.certify(sys, traj, residuals)
            costates = [np.asarray(x) for x in p]
            per_stage = list(report.per_stage_delta)
            residual_rows = [list(map(float, r)) for r in residuals]
            constrained_stages: set[int] = set()
        else:
            cons = built.constraints
            try:
                mult = ConstraintService.assemble_multipliers(sys, traj, cost, cons, built.rhs)
            except NoCertificate as exc:
                message = str(exc)
                mult = exc.best_attempt or MultiplierSequence.zeros(cons)
            result = ConstraintService.constrained_conditions_residual(
                sys, traj, cost, cons, mult, built.rhs if mult.rhs is None else mult.rhs
            )
            lambda0 = mult.lambda0
            costates = list(result.costates)
            per_stage = list(result.stationarity)
            residual_rows = [[x] for x in result.stationarity]
            constrained_stages = {x.block for x in cons.entries}
            constrained = ConstrainedResponse(
                lambda0=mult.lambda0,
                degenerate=result.degenerate,
                multipliers=list(map(float, mult.values)),
                complementary=list(result.complementary),
                penalty=result.penalty,
            )

        maximization = []
        for i, stage in enumerate(sys.stages):
            if i in constrained_stages:
                continue
            if not isinstance(stage, FactoredStageMap) or not stage.affine_in_u:
                continue
            verdict = SolverService.maximization_check(
                sys,
                traj,
                costates,
                i,
                samples=MAXIMIZATION_SAMPLES,
                cost=cost,
                lambda0=lambda0,
                seed=opts.seed,
            )
            maximization.append(
                MaximizationResponse(stage=i, passed=verdict.passed, gap=verdict.gap),
            )

        return CheckResponse(
            cost=total,
            certified_delta=max(per_stage, default=0.0),
            per_stage_delta=per_stage,
            costates=[list(map(float, c)) for c in costates],
            residuals=residual_rows,
            maximization=maximization or None,
            constrained=constrained,
            message=message,
        )

    @staticmethod
    def integrate(built: BuiltProblem, steps: int | None = None) -> IntegrateResponse:
        """
        Run the variational integrator of the problem's integrator section.

        Row ``i`` holds ``g_i``, ``p_i`` and the momentum-equation residual of the
        solve that produced them (0 for the initial row).

        Raises:
            ProblemFileError: If the problem has no integrator section.
            NewtonDivergence: Tagged with the failing step.
        """
        if built.lie_problem is None or built.spec.integrator is None:
            raise ProblemFileError("problem has no integrator section")
        count = built.spec.horizon if steps is None else steps
        p0 = np.asarray(built.spec.integrator.initial_momentum, dtype=float)
        states, momenta = LieGroupService.integrate(built.lie_problem, built.q0, p0, count)
        rows = [(states[0], p0, 0.0)]
        rows += [
            (g, p, r) for g, p, r in zip(states[1:], momenta.p, momenta.residuals)
        ]
        return IntegrateResponse(
            steps=[
                IntegrationStepResponse(
                    step=i,
                    g=list(map(float, g.flat)),
                    p=list(map(float, p)),
                    norm=float(np.linalg.norm(p)),
                    residual=float(r),
                )
                for i, (g, p, r) in enumerate(rows)
            ],
        )

    @staticmethod
    def sweep(
        built: BuiltProblem,
        scalars: Sequence[float],
        direction: ArrayLike | None = None,
        opts: SolveOptions | None = None,
    ) -> SweepResponse:
        """
        Value function along ``e = rhs + s·direction`` for the given scalars ``s``.

        Raises:
            ProblemFileError: If the problem has no constraints.
        """
        if built.constraints is None:
            raise ProblemFileError("sweep needs a constrained problem")
        cons = built.constraints
        d = np.ones(cons.size) if direction is None else cons.check_rhs(direction)
        table = ConstraintService.value_sensitivity(
            built.system,
            built.cost,
            cons,
            built.q0,
            built.initial_controls,
            [float(s) * d for s in scalars],
            opts or built.spec.solver,
            base_rhs=built.rhs,
        )
        return ProblemService.sweep_response(table)

    @staticmethod
    def trajectory_response(traj: Trajectory) -> TrajectoryResponse:
        return TrajectoryResponse(
            states=[list(map(float, q.flat)) for q in traj.states],
            controls=[list(map(float, u.flat)) for u in traj.controls],
        )

    @staticmethod
    def solve_response(report: SolveReport) -> SolveResponse:
        multipliers = None
        if report.multipliers is not None:
            rhs = report.multipliers.rhs
            multipliers = MultiplierResponse(
                lambda0=report.multipliers.lambda0,
                values=list(map(float, report.multipliers.values)),
                rhs=None if rhs is None else list(map(float, rhs)),
            )
        normality = None
        if report.normality is not None:
            certificate = report.normality.certificate
            rhs = report.normality.rhs
            normality = NormalityResponse(
                strictly_normal=report.normality.strictly_normal,
                multipliers=None
                if certificate is None
                else list(map(float, certificate.multipliers)),
                costates=None
                if certificate is None
                else [list(map(float, p)) for p in certificate.p],
                max_residual=None if certificate is None else certificate.max_residual,
                rhs=None if rhs is None else list(map(float, rhs)),
            )
        return SolveResponse(
            status=report.status.value,
            cost=report.cost,
            certified_delta=report.certified_delta,
            iterations=report.iterations,
            penalty=report.penalty,
            message=report.message,
            rounds=[
                PenaltyRoundResponse(
                    kappa=r.kappa,
                    penalty=r.penalty,
                    iterations=r.iterations,
                    delta=r.delta,
                )
                for r in report.rounds
            ],
            multipliers=multipliers,
            normality=normality,
            trajectory=ProblemService.trajectory_response(report.trajectory),
        )

    @staticmethod
    def sweep_response(table: SensitivityTable) -> SweepResponse:
        return SweepResponse(
            rows=[
                SweepRowResponse(
                    rhs=list(map(float, r.rhs)), value=_finite(r.value), status=r.status
                )
                for r in table.rows
            ],
            base_value=_finite(table.base_value),
            calmness=table.calmness,
            calm=table.calm,
        )
