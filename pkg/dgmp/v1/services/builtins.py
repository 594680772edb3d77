"""Named dynamics, costs, constraints and potentials usable from problem files.

Every analytic derivative defined here registers a finite-difference audit with
``dgmp.v1.services.oracle.register_audit``; each registry entry lists the audits that
cover it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Mapping

import numpy as np
from numpy.typing import ArrayLike

from dgmp.core.base.manifolds import FloatArray, Manifold, Metric, Point
from dgmp.utils.exceptions import ProblemFileError
from dgmp.v1.services.adjoint import CostSpec
from dgmp.v1.services.constraints import Constraint
from dgmp.v1.services.liegroup import (
    LieGroupProblem,
    LieGroupService,
    MomentumSequence,
    Potential,
    heavy_top_potential,
    so3_kinetic,
    zero_potential,
)
from dgmp.v1.services.manifold import (
    SO3,
    Euclidean,
    exp_so3,
    right_jacobian,
    skew_part_vee,
)
from dgmp.v1.services.oracle import AuditSample, register_audit
from dgmp.v1.services.system import FactoredStageMap, StageMap

logger = logging.getLogger("dgmp")

Params = Mapping[str, Any]


@dataclass
class BuildContext:
    """What a builtin may need besides its own parameters."""

    state_manifold: Manifold
    control_manifold: Manifold
    horizon: int
    q0: Point
    lie_problem: LieGroupProblem | None = None
    initial_momentum: FloatArray | None = None

    @cached_property
    def integration(self) -> tuple[tuple[Point, ...], MomentumSequence]:
        if self.lie_problem is None or self.initial_momentum is None:
            raise ProblemFileError("this builtin needs an integrator section")
        return LieGroupService.integrate(
            self.lie_problem,
            self.q0,
            self.initial_momentum,
            self.horizon,
        )


@dataclass(frozen=True)
class Builtin:
    name: str
    factory: Callable[..., Any]
    audits: tuple[str, ...] = field(default=())


DYNAMICS: dict[str, Builtin] = {}
COSTS: dict[str, Builtin] = {}
CONSTRAINTS: dict[str, Builtin] = {}
POTENTIALS: dict[str, Builtin] = {}
FIELDS: dict[str, Builtin] = {}


def _register(
    registry: dict[str, Builtin],
    name: str,
    audits: tuple[str, ...] = (),
) -> Callable[[Callable[..., Any]], Callable[..., Any]]:
    def decorator(factory: Callable[..., Any]) -> Callable[..., Any]:
        registry[name] = Builtin(name=name, factory=factory, audits=audits)
        return factory

    return decorator


def lookup(registry: dict[str, Builtin], kind: str, name: str) -> Builtin:
    try:
        return registry[name]
    except KeyError:
        known = ", ".join(sorted(registry))
        raise ProblemFileError(f"unknown {kind} {name!r} (known: {known})") from None


def matrix_param(
    params: Params,
    key: str,
    shape: tuple[int, ...],
    default: ArrayLike | None = None,
) -> FloatArray:
    """Read ``params[key]`` as an array of exactly ``shape``."""
    if key not in params:
        if default is None:
            raise ProblemFileError(f"missing parameter {key!r}")
        value = np.asarray(default, dtype=float)
    else:
        try:
            value = np.asarray(params[key], dtype=float)
        except (TypeError, ValueError) as exc:
            raise ProblemFileError(f"parameter {key!r} is not numeric") from exc
    if value.ndim == 0 and len(shape) == 2 and shape[0] == shape[1]:
        value = float(value) * np.eye(shape[0])
    if value.shape != shape:
        raise ProblemFileError(f"parameter {key!r} has shape {value.shape}, expected {shape}")
    if not np.all(np.isfinite(value)):
        raise ProblemFileError(f"parameter {key!r} must be finite")
    return value


def scalar_param(params: Params, key: str, default: float | None = None) -> float:
    if key not in params:
        if default is None:
            raise ProblemFileError(f"missing parameter {key!r}")
        return default
    try:
        return float(params[key])
    except (TypeError, ValueError) as exc:
        raise ProblemFileError(f"parameter {key!r} is not a number") from exc


def _require(manifold: Manifold, kind: type, what: str) -> None:
    if not isinstance(manifold, kind):
        raise ProblemFileError(f"{what} needs a {kind.__name__} manifold, got {manifold!r}")


def _random_rotation(rng: np.random.Generator) -> Point:
    return SO3().point(exp_so3(rng.uniform(-1.0, 1.0, 3)))


# Dynamics


@_register(DYNAMICS, "linear", audits=("linear_jacobians",))
def linear_dynamics(Q: Manifold, U: Manifold, params: Params, horizon: int) -> tuple[StageMap, ...]:
    """``q⁺ = Aq + Bu``."""
    _require(Q, Euclidean, "linear dynamics")
    _require(U, Euclidean, "linear dynamics")
    A = matrix_param(params, "A", (Q.dim, Q.dim))
    B = matrix_param(params, "B", (Q.dim, U.dim))
    return tuple(
        StageMap(
            i,
            Q,
            U,
            lambda q, u: Q.point(A @ q.coords + B @ u.coords),
            jac_q=lambda q, u: A,
            jac_u=lambda q, u: B,
        )
        for i in range(horizon)
    )


@_register(DYNAMICS, "lie_multiplicative", audits=("multiplicative_jacobian",))
def lie_multiplicative(
    Q: Manifold,
    U: Manifold,
    params: Params,
    horizon: int,
) -> tuple[StageMap, ...]:
    """``g⁺ = g u`` with controls in the group itself."""
    if not Q.is_group or U != Q:
        raise ProblemFileError("multiplicative dynamics need the group as control manifold")
    identity = np.eye(Q.dim)
    return tuple(
        StageMap(
            i,
            Q,
            Q,
            Q.compose,
            jac_q=lambda g, u: Q.adjoint_matrix(Q.inverse(u)),
            jac_u=lambda g, u: identity,
        )
        for i in range(horizon)
    )


@_register(DYNAMICS, "factored_retraction")
def factored_retraction(
    Q: Manifold,
    U: Manifold,
    params: Params,
    horizon: int,
) -> tuple[StageMap, ...]:
    """``F(q, u) = E(q, f(q, u))`` for a named fibre field ``f``."""
    name = params.get("field")
    if not isinstance(name, str):
        raise ProblemFileError("factored_retraction needs a 'field' name")
    builtin = lookup(FIELDS, "fibre field", name)
    return tuple(builtin.factory(Q, U, params, i) for i in range(horizon))


@_register(FIELDS, "linear_field", audits=("linear_field_jacobians",))
def linear_field(Q: Manifold, U: Manifold, params: Params, index: int) -> FactoredStageMap:
    """``q⁺ = q + h(Aq + Bu)``: Euclidean retraction of an affine field."""
    _require(Q, Euclidean, "linear_field")
    _require(U, Euclidean, "linear_field")
    A = matrix_param(params, "A", (Q.dim, Q.dim))
    B = matrix_param(params, "B", (Q.dim, U.dim))
    h = scalar_param(params, "h", 1.0)
    eye = np.eye(Q.dim)
    return FactoredStageMap(
        index,
        Q,
        U,
        Q.dim,
        fibre_map=lambda q, u: h * (A @ q.coords + B @ u.coords),
        exp_map=lambda q, x: Q.point(q.coords + x),
        fibre_jacobian=lambda q, x: eye,
        affine_in_u=True,
        jac_q=lambda q, u: eye + h * A,
        jac_u=lambda q, u: h * B,
    )


@_register(FIELDS, "body_rate", audits=("body_rate_jacobians", "body_rate_fibre"))
def body_rate(Q: Manifold, U: Manifold, params: Params, index: int) -> FactoredStageMap:
    """``g⁺ = g exp(h B u)``: body angular velocity commanded through ``B``."""
    _require(Q, SO3, "body_rate")
    _require(U, Euclidean, "body_rate")
    B = matrix_param(params, "B", (3, U.dim), default=np.eye(3) if U.dim == 3 else None)
    h = scalar_param(params, "h", 1.0)
    return FactoredStageMap(
        index,
        Q,
        U,
        3,
        fibre_map=lambda g, u: h * (B @ u.coords),
        exp_map=lambda g, x: Q.retract(g, x),
        fibre_jacobian=lambda g, x: right_jacobian(x),
        affine_in_u=True,
        jac_q=lambda g, u: exp_so3(h * (B @ u.coords)).T,
        jac_u=lambda g, u: right_jacobian(h * (B @ u.coords)) @ (h * B),
    )


# Costs


@_register(COSTS, "quadratic", audits=("quadratic_running", "quadratic_terminal"))
def quadratic_cost(params: Params, ctx: BuildContext) -> CostSpec:
    """``½(q−r)ᵀQ(q−r) + ½uᵀRu`` per stage and ``½(q−r)ᵀQ_f(q−r)`` at the end."""
    Q, U = ctx.state_manifold, ctx.control_manifold
    _require(Q, Euclidean, "quadratic cost")
    _require(U, Euclidean, "quadratic cost")
    Qc = matrix_param(params, "Q", (Q.dim, Q.dim), default=np.zeros((Q.dim, Q.dim)))
    Rc = matrix_param(params, "R", (U.dim, U.dim), default=np.eye(U.dim))
    Qf = matrix_param(params, "Qf", (Q.dim, Q.dim), default=Qc)
    ref = matrix_param(params, "target", (Q.dim,), default=np.zeros(Q.dim))

    return CostSpec(
        terminal=lambda q: 0.5 * float((q.coords - ref) @ Qf @ (q.coords - ref)),
        running=lambda i, q, u: 0.5 * float((q.coords - ref) @ Qc @ (q.coords - ref))
        + 0.5 * float(u.coords @ Rc @ u.coords),
        terminal_grad=lambda q: Qf @ (q.coords - ref),
        running_grad_q=lambda i, q, u: Qc @ (q.coords - ref),
        running_grad_u=lambda i, q, u: Rc @ u.coords,
    )


@_register(COSTS, "attitude", audits=("attitude_terminal", "attitude_effort", "rotation_effort"))
def attitude_cost(params: Params, ctx: BuildContext) -> CostSpec:
    """
    Slew cost on SO(3): ``w(3 − tr(R*ᵀg))`` at the end plus control effort.

    Effort is ``½ r‖u‖²`` for Euclidean controls and ``r(3 − tr u)`` when the control is
    itself a rotation.
    """
    Q, U = ctx.state_manifold, ctx.control_manifold
    _require(Q, SO3, "attitude cost")
    target = SO3().point(matrix_param(params, "target", (3, 3), default=np.eye(3))).coords
    weight = scalar_param(params, "weight", 1.0)
    effort = scalar_param(params, "effort", 1.0)
    zeros = np.zeros(3)

    if isinstance(U, SO3):

        def running(i: int, g: Point, u: Point) -> float:
            return effort * (3.0 - float(np.trace(u.coords)))

        def running_grad_u(i: int, g: Point, u: Point) -> FloatArray:
            return effort * skew_part_vee(u.coords)

    else:

        def running(i: int, g: Point, u: Point) -> float:
            return 0.5 * effort * float(u.coords @ u.coords)

        def running_grad_u(i: int, g: Point, u: Point) -> FloatArray:
            return effort * np.asarray(u.coords)

    return CostSpec(
        terminal=lambda g: weight * (3.0 - float(np.trace(target.T @ g.coords))),
        running=running,
        terminal_grad=lambda g: weight * skew_part_vee(target.T @ g.coords),
        running_grad_q=lambda i, g, u: zeros,
        running_grad_u=running_grad_u,
    )


@_register(COSTS, "action_sum")
def action_sum_cost(params: Params, ctx: BuildContext) -> CostSpec:
    """The discrete action of the integrator section, pinned to its final momentum."""
    if ctx.lie_problem is None:
        raise ProblemFileError("action_sum cost needs an integrator section")
    states, momenta = ctx.integration
    terminal = momenta.p[-1] if len(momenta) else ctx.initial_momentum
    _, cost = LieGroupService.action_sum_problem(ctx.lie_problem, states, terminal)
    return cost


# Constraints


@_register(CONSTRAINTS, "linear", audits=("linear_constraint",))
def linear_constraint(
    kind: str,
    Q: Manifold,
    U: Manifold | None,
    params: Params,
) -> Constraint:
    """``c_qᵀq + c_uᵀu + offset``; endpoint constraints take ``c_q`` only."""
    _require(Q, Euclidean, "linear constraint")
    c_q = matrix_param(params, "c_q", (Q.dim,), default=np.zeros(Q.dim))
    offset = scalar_param(params, "offset", 0.0)
    if U is None:
        if "c_u" in params:
            raise ProblemFileError("endpoint constraints cannot depend on a control")
        return Constraint(
            kind=kind,
            fn=lambda q, u: float(c_q @ q.coords) + offset,
            grad_q=lambda q, u: c_q,
            name="linear",
        )
    _require(U, Euclidean, "linear constraint")
    c_u = matrix_param(params, "c_u", (U.dim,), default=np.zeros(U.dim))
    return Constraint(
        kind=kind,
        fn=lambda q, u: float(c_q @ q.coords) + float(c_u @ u.coords) + offset,
        grad_q=lambda q, u: c_q,
        grad_u=lambda q, u: c_u,
        name="linear",
    )


@_register(CONSTRAINTS, "ball", audits=("ball_constraint",))
def ball_constraint(
    kind: str,
    Q: Manifold,
    U: Manifold | None,
    params: Params,
) -> Constraint:
    """``‖x − center‖² − radius²`` for ``x`` the state (default) or the control."""
    on = params.get("on", "state")
    if on not in ("state", "control"):
        raise ProblemFileError("ball constraint 'on' must be 'state' or 'control'")
    target = Q if on == "state" else U
    if target is None:
        raise ProblemFileError("endpoint ball constraints act on the state")
    _require(target, Euclidean, "ball constraint")
    center = matrix_param(params, "center", (target.dim,), default=np.zeros(target.dim))
    radius = scalar_param(params, "radius")

    def value(x: Point) -> float:
        d = x.coords - center
        return float(d @ d) - radius**2

    def gradient(x: Point) -> FloatArray:
        return 2.0 * (x.coords - center)

    if on == "state":
        zeros_u = None if U is None else np.zeros(U.dim)
        return Constraint(
            kind=kind,
            fn=lambda q, u: value(q),
            grad_q=lambda q, u: gradient(q),
            grad_u=None if zeros_u is None else (lambda q, u: zeros_u),
            name="ball",
        )
    zeros_q = np.zeros(Q.dim)
    return Constraint(
        kind=kind,
        fn=lambda q, u: value(u),
        grad_q=lambda q, u: zeros_q,
        grad_u=lambda q, u: gradient(u),
        name="ball",
    )


# Potentials


@_register(POTENTIALS, "none")
def no_potential(params: Params) -> Potential:
    return zero_potential()


@_register(POTENTIALS, "heavy_top", audits=("heavy_top",))
def heavy_top(params: Params) -> Potential:
    gamma = scalar_param(params, "gamma")
    rho = matrix_param(params, "rho", (3,))
    return heavy_top_potential(gamma, rho)


# Derivative audits


def _jacobian_audit(
    rng: np.random.Generator,
    Q: Manifold,
    U: Manifold,
    stage: StageMap,
    q: Point,
    u: Point,
    wrt: str,
) -> AuditSample:
    """Pair a stage Jacobian with a random covector at ``F(q, u)``."""
    base = stage.evaluate(q, u)
    w = rng.standard_normal(Q.dim)
    if wrt == "q":
        return AuditSample(
            manifold=Q,
            function=lambda x: float(w @ Q.inverse_retract(base, stage.evaluate(x, u))),
            point=q,
            analytic=stage.pushforward_q(q, u).T @ w,
        )
    return AuditSample(
        manifold=U,
        function=lambda v: float(w @ Q.inverse_retract(base, stage.evaluate(q, v))),
        point=u,
        analytic=stage.pushforward_u(q, u).T @ w,
    )


@register_audit("linear_jacobians")
def _audit_linear(rng: np.random.Generator) -> AuditSample:
    Q, U = Euclidean(3), Euclidean(2)
    params = {"A": rng.standard_normal((3, 3)), "B": rng.standard_normal((3, 2))}
    stage = linear_dynamics(Q, U, params, 1)[0]
    q, u = Q.point(rng.standard_normal(3)), U.point(rng.standard_normal(2))
    return _jacobian_audit(rng, Q, U, stage, q, u, "u" if rng.uniform() < 0.5 else "q")


@register_audit("multiplicative_jacobian")
def _audit_multiplicative(rng: np.random.Generator) -> AuditSample:
    G = SO3()
    stage = lie_multiplicative(G, G, {}, 1)[0]
    return _jacobian_audit(rng, G, G, stage, _random_rotation(rng), _random_rotation(rng), "q")


@register_audit("linear_field_jacobians")
def _audit_linear_field(rng: np.random.Generator) -> AuditSample:
    Q, U = Euclidean(2), Euclidean(2)
    params = {"A": rng.standard_normal((2, 2)), "B": rng.standard_normal((2, 2)), "h": 0.1}
    stage = linear_field(Q, U, params, 0)
    q, u = Q.point(rng.standard_normal(2)), U.point(rng.standard_normal(2))
    return _jacobian_audit(rng, Q, U, stage, q, u, "q")


@register_audit("body_rate_jacobians")
def _audit_body_rate(rng: np.random.Generator) -> AuditSample:
    G, U = SO3(), Euclidean(3)
    stage = body_rate(G, U, {"B": rng.standard_normal((3, 3)), "h": 0.2}, 0)
    u = U.point(rng.uniform(-1.0, 1.0, 3))
    return _jacobian_audit(rng, G, U, stage, _random_rotation(rng), u, "u")


@register_audit("body_rate_fibre")
def _audit_body_rate_fibre(rng: np.random.Generator) -> AuditSample:
    G, U = SO3(), Euclidean(3)
    stage = body_rate(G, U, {"h": 0.3}, 0)
    g = _random_rotation(rng)
    x = rng.uniform(-1.0, 1.0, 3)
    base = stage.exp_map(g, x)
    w = rng.standard_normal(3)
    X = Euclidean(3)
    return AuditSample(
        manifold=X,
        function=lambda y: float(w @ G.inverse_retract(base, stage.exp_map(g, y.coords))),
        point=X.point(x),
        analytic=stage.fibre_derivative(g, x).T @ w,
    )


@register_audit("quadratic_running")
def _audit_quadratic_running(rng: np.random.Generator) -> AuditSample:
    Q, U = Euclidean(3), Euclidean(2)
    M = rng.standard_normal((3, 3))
    ctx = BuildContext(Q, U, 1, Q.point(np.zeros(3)))
    cost = quadratic_cost({"Q": M @ M.T, "target": rng.standard_normal(3)}, ctx)
    q, u = Q.point(rng.standard_normal(3)), U.point(rng.standard_normal(2))
    return AuditSample(
        manifold=Q,
        function=lambda x: cost.running(0, x, u),
        point=q,
        analytic=np.asarray(cost.running_grad_q(0, q, u)),  # type: ignore[misc]
    )


@register_audit("quadratic_terminal")
def _audit_quadratic_terminal(rng: np.random.Generator) -> AuditSample:
    Q, U = Euclidean(3), Euclidean(1)
    M = rng.standard_normal((3, 3))
    cost = quadratic_cost({"Qf": M @ M.T}, BuildContext(Q, U, 1, Q.point(np.zeros(3))))
    q = Q.point(rng.standard_normal(3))
    return AuditSample(
        manifold=Q,
        function=cost.terminal,
        point=q,
        analytic=np.asarray(cost.terminal_grad(q)),  # type: ignore[misc]
    )


@register_audit("attitude_terminal")
def _audit_attitude_terminal(rng: np.random.Generator) -> AuditSample:
    G = SO3()
    target = _random_rotation(rng).coords
    ctx = BuildContext(G, Euclidean(3), 1, G.identity())
    cost = attitude_cost({"target": target, "weight": 2.0}, ctx)
    g = _random_rotation(rng)
    return AuditSample(
        manifold=G,
        function=cost.terminal,
        point=g,
        analytic=np.asarray(cost.terminal_grad(g)),  # type: ignore[misc]
    )


@register_audit("attitude_effort")
def _audit_attitude_effort(rng: np.random.Generator) -> AuditSample:
    G, U = SO3(), Euclidean(3)
    cost = attitude_cost({"effort": 0.5}, BuildContext(G, U, 1, G.identity()))
    g, u = G.identity(), U.point(rng.standard_normal(3))
    return AuditSample(
        manifold=U,
        function=lambda v: cost.running(0, g, v),
        point=u,
        analytic=np.asarray(cost.running_grad_u(0, g, u)),  # type: ignore[misc]
    )


@register_audit("rotation_effort")
def _audit_rotation_effort(rng: np.random.Generator) -> AuditSample:
    G = SO3()
    cost = attitude_cost({"effort": 1.5}, BuildContext(G, G, 1, G.identity()))
    g, u = G.identity(), _random_rotation(rng)
    return AuditSample(
        manifold=G,
        function=lambda v: cost.running(0, g, v),
        point=u,
        analytic=np.asarray(cost.running_grad_u(0, g, u)),  # type: ignore[misc]
    )


@register_audit("linear_constraint")
def _audit_linear_constraint(rng: np.random.Generator) -> AuditSample:
    Q, U = Euclidean(2), Euclidean(2)
    params = {"c_q": rng.standard_normal(2), "c_u": rng.standard_normal(2), "offset": 0.3}
    constraint = linear_constraint("ineq", Q, U, params)
    q, u = Q.point(rng.standard_normal(2)), U.point(rng.standard_normal(2))
    return AuditSample(
        manifold=U,
        function=lambda v: constraint.fn(q, v),
        point=u,
        analytic=constraint.gradients(Q, U, q, u)[1],
    )


@register_audit("ball_constraint")
def _audit_ball_constraint(rng: np.random.Generator) -> AuditSample:
    Q = Euclidean(3)
    params = {"center": rng.standard_normal(3), "radius": 1.0}
    constraint = ball_constraint("ineq", Q, None, params)
    q = Q.point(rng.standard_normal(3))
    return AuditSample(
        manifold=Q,
        function=lambda x: constraint.fn(x, None),
        point=q,
        analytic=constraint.gradients(Q, None, q, None)[0],
    )


@register_audit("heavy_top")
def _audit_heavy_top(rng: np.random.Generator) -> AuditSample:
    G = SO3()
    potential = heavy_top({"gamma": 9.81, "rho": rng.standard_normal(3)})
    g = _random_rotation(rng)
    return AuditSample(manifold=G, function=potential.value, point=g, analytic=potential.d(G, g))


@register_audit("so3_kinetic")
def _audit_kinetic(rng: np.random.Generator) -> AuditSample:
    G = SO3()
    kinetic = so3_kinetic(np.diag([1.0, 2.0, 3.0]), 0.1)
    u = _random_rotation(rng)
    return AuditSample(manifold=G, function=kinetic.value, point=u, analytic=kinetic.dK(G, u))


def control_manifold_for(
    dynamics: str,
    state_manifold: Manifold,
    control_dim: int | None,
    metric: Metric,
) -> Manifold:
    """The control manifold a dynamics builtin expects."""
    if dynamics == "lie_multiplicative":
        return state_manifold
    if control_dim is None:
        raise ProblemFileError(f"dynamics {dynamics!r} needs control_dim")
    return Euclidean(control_dim, metric)
