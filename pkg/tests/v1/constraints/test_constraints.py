import itertools

import numpy as np
import pytest

from dgmp.utils.exceptions import ConstraintViolationError
from dgmp.v1.schemas.solver import SolveOptions
from dgmp.v1.services.adjoint import AdjointService
from dgmp.v1.services.builtins import (
    BuildContext,
    ball_constraint,
    linear_constraint,
    linear_dynamics,
    quadratic_cost,
)
from dgmp.v1.services.constraints import (
    ConstraintService,
    ConstraintSet,
    MultiplierSequence,
)
from dgmp.v1.services.manifold import Euclidean
from dgmp.v1.services.oracle import OracleService
from dgmp.v1.services.solver import SolverService
from dgmp.v1.services.system import ControlSystem, SystemService, WholeManifold


def linear_setup(A, B, horizon=1):
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    Q, U = Euclidean(A.shape[0]), Euclidean(B.shape[1])
    stages = linear_dynamics(Q, U, {"A": A, "B": B}, horizon)
    return ControlSystem(Q, stages, (WholeManifold(),) * horizon), Q, U


def rollout(sys, q0, controls):
    Q = sys.state_manifold
    U = sys.stages[0].control_manifold
    return SystemService.rollout(sys, Q.point(q0), [U.point(u) for u in controls])


def on_control(kind, Q, U, c_u, c_q=None):
    params = {"c_u": c_u}
    if c_q is not None:
        params["c_q"] = c_q
    return linear_constraint(kind, Q, U, params)


def on_endpoint(kind, Q, c_q):
    return linear_constraint(kind, Q, None, {"c_q": c_q})


@pytest.fixture
def bound_1d():
    """min (u − 1)² subject to u <= e, solved by u = e with multiplier 2(1 − e)."""
    sys, Q, U = linear_setup(1.0, 1.0)
    cost = quadratic_cost(
        {"R": 0.0, "Qf": 2.0, "target": [1.0]}, BuildContext(Q, U, 1, Q.identity())
    )
    cons = ConstraintSet(1, {0: [on_control("ineq", Q, U, [1.0])]})
    return sys, cost, cons


@pytest.fixture
def abnormal_toy():
    """q⁺ = q with q₀ = 1 and endpoint equality q₁ = 0: infeasible, degenerate."""
    sys, Q, U = linear_setup(1.0, 0.0)
    cost = quadratic_cost({}, BuildContext(Q, U, 1, Q.identity()))
    cons = ConstraintSet(1, endpoint=[on_endpoint("eq", Q, [1.0])])
    return sys, cost, cons, rollout(sys, [1.0], [[0.0]])


def test_penalty_is_the_sum_of_block_maxima():
    sys, Q, U = linear_setup(1.0, 1.0)
    cons = ConstraintSet(
        1,
        {0: [on_control("ineq", Q, U, [1.0])]},
        endpoint=[on_endpoint("eq", Q, [1.0])],
    )
    traj = rollout(sys, [0.0], [[0.5]])
    penalty = ConstraintService.penalty_eval(cons, None, traj)
    assert penalty.per_block == (0.5, 0.5)
    assert penalty.total == 1.0
    assert ConstraintService.penalty_eval(cons, [0.5, 0.5], traj).total == 0.0

    assert np.allclose(ConstraintService.feasible_shift(cons, None, traj), [0.5, 0.5])
    below = rollout(sys, [0.0], [[-0.5]])
    assert np.allclose(ConstraintService.feasible_shift(cons, None, below), [0.0, -0.5])


def test_penalty_rejects_wrong_rhs_length(bound_1d):
    sys, _, cons = bound_1d
    with pytest.raises(ValueError):
        ConstraintService.penalty_eval(cons, [0.0, 0.0], rollout(sys, [0.0], [[0.0]]))


def test_stage_index_must_be_in_range():
    _, Q, U = linear_setup(1.0, 1.0)
    with pytest.raises(ValueError):
        ConstraintSet(1, {1: [on_control("ineq", Q, U, [1.0])]})


def test_subgradient_of_a_single_active_constraint():
    sys, Q, U = linear_setup(1.0, 1.0)
    cons = ConstraintSet(1, {0: [on_control("ineq", Q, U, [3.0])]})
    traj = rollout(sys, [0.0], [[1.0]])
    (generator,) = ConstraintService.penalty_subgradient(cons, None, traj, 0)
    assert np.allclose(generator.b, [3.0])
    assert generator.source == 0


def test_subgradient_of_an_equality_at_its_rhs_has_both_signs():
    sys, Q, U = linear_setup(1.0, 1.0)
    cons = ConstraintSet(1, {0: [on_control("eq", Q, U, [1.0])]})
    generators = ConstraintService.penalty_subgradient(
        cons, None, rollout(sys, [0.0], [[0.0]]), 0
    )
    assert len(generators) == 3
    assert sorted(g.sign for g in generators if g.source is not None) == [-1.0, 1.0]
    assert any(g.source is None for g in generators)


def test_dini_derivative_of_a_tie_is_the_max_over_generators():
    sys, Q, U = linear_setup(1.0, [[1.0, 1.0]])
    cons = ConstraintSet(
        1,
        {0: [on_control("ineq", Q, U, [1.0, 0.0]), on_control("ineq", Q, U, [0.0, 1.0])]},
    )
    traj = rollout(sys, [0.0], [[1.0, 1.0]])
    generators = ConstraintService.penalty_subgradient(cons, None, traj, 0)
    assert len(generators) == 2

    space = sys.control_space
    packed = sys.pack_controls(traj.controls)

    def penalty(x):
        moved = SystemService.rollout(sys, traj.states[0], sys.unpack_controls(x))
        return ConstraintService.penalty_eval(cons, None, moved).total

    rng = np.random.default_rng(8)
    for _ in range(20):
        v = rng.standard_normal(2)
        dini = OracleService.dini_estimate(penalty, space, packed, v).value
        assert np.isclose(dini, max(float(g.b @ v) for g in generators), atol=1e-6)


@pytest.fixture
def two_controls():
    return linear_setup(1.0, [[1.0, 1.0]])


def test_licq_single_constraint_is_regular(two_controls):
    sys, Q, U = two_controls
    cons = ConstraintSet(1, {0: [on_control("ineq", Q, U, [1.0, 0.0])]})
    result = ConstraintService.licq_check(cons, rollout(sys, [0.0], [[0.0, 0.0]]), 0)
    assert result.regular
    assert result.active == (0,)


def test_licq_duplicated_inequality_is_regular(two_controls):
    """g, g with λ >= 0 only admits the zero combination."""
    sys, Q, U = two_controls
    g = on_control("ineq", Q, U, [1.0, 0.0])
    cons = ConstraintSet(1, {0: [g, g]})
    assert ConstraintService.licq_check(cons, rollout(sys, [0.0], [[0.0, 0.0]]), 0).regular


@pytest.mark.parametrize("scale", [1.0, 3.0, 1e-4])
def test_licq_opposite_inequalities_are_degenerate(two_controls, scale):
    sys, Q, U = two_controls
    c1, c2 = np.array([1.0, 0.0]), np.array([-scale, 0.0])
    cons = ConstraintSet(
        1, {0: [on_control("ineq", Q, U, c1), on_control("ineq", Q, U, c2)]}
    )
    result = ConstraintService.licq_check(cons, rollout(sys, [0.0], [[0.0, 0.0]]), 0)
    assert not result.regular
    assert np.all(result.witness >= 0.0)
    assert np.isclose(np.abs(result.witness).sum(), 1.0)
    assert np.allclose(result.witness[0] * c1 + result.witness[1] * c2, 0.0, atol=1e-9)


def test_licq_duplicated_equality_is_degenerate(two_controls):
    sys, Q, U = two_controls
    h = on_control("eq", Q, U, [1.0, 2.0])
    cons = ConstraintSet(1, {0: [h, h]})
    result = ConstraintService.licq_check(cons, rollout(sys, [0.0], [[0.0, 0.0]]), 0)
    assert not result.regular
    assert np.isclose(result.witness.sum(), 0.0, atol=1e-12)
    assert np.isclose(np.abs(result.witness).sum(), 1.0)


def test_licq_zero_gradient_is_degenerate(two_controls):
    sys, Q, U = two_controls
    cons = ConstraintSet(1, {0: [on_control("ineq", Q, U, [0.0, 0.0])]})
    result = ConstraintService.licq_check(cons, rollout(sys, [0.0], [[0.0, 0.0]]), 0)
    assert not result.regular
    assert np.allclose(result.witness, [1.0])


def test_licq_inactive_constraints_are_ignored(two_controls):
    sys, Q, U = two_controls
    g = on_control("ineq", Q, U, [1.0, 0.0])
    cons = ConstraintSet(1, {0: [g, g]})
    result = ConstraintService.licq_check(cons, rollout(sys, [0.0], [[-1.0, 0.0]]), 0)
    assert result.regular
    assert result.active == ()


@pytest.mark.parametrize("seed", range(20))
def test_licq_random_full_rank_is_regular(seed):
    rng = np.random.default_rng(seed)
    sys, Q, U = linear_setup(1.0, rng.standard_normal((1, 4)))
    kinds = ("eq", "ineq", "eq")
    cons = ConstraintSet(1, {0: [on_control(kind, Q, U, rng.standard_normal(4)) for kind in kinds]})
    result = ConstraintService.licq_check(cons, rollout(sys, [0.0], [np.zeros(4)]), 0)
    assert result.regular


def test_abnormal_toy_has_a_certificate(abnormal_toy):
    sys, _, cons, traj = abnormal_toy
    with pytest.raises(ConstraintViolationError):
        ConstraintService.strict_normality_check(sys, traj, cons)

    shifted = ConstraintService.feasible_shift(cons, None, traj)
    assert np.allclose(shifted, [1.0])
    result = ConstraintService.strict_normality_check(sys, traj, cons, shifted)
    assert not result.strictly_normal
    assert np.isclose(abs(result.certificate.multipliers[0]), 1.0)
    assert result.certificate.max_residual <= 1e-12


def test_controllable_double_integrator_is_strictly_normal():
    sys, Q, _ = linear_setup([[1.0, 1.0], [0.0, 1.0]], [[0.0], [1.0]], horizon=3)
    cons = ConstraintSet(
        3, endpoint=[on_endpoint("eq", Q, [1.0, 0.0]), on_endpoint("eq", Q, [0.0, 1.0])]
    )
    traj = rollout(sys, [0.0, 0.0], [[0.3], [-0.2], [0.1]])
    e = ConstraintService.feasible_shift(cons, None, traj)
    result = ConstraintService.strict_normality_check(sys, traj, cons, e)
    assert result.strictly_normal
    assert result.certificate is None


def test_multipliers_of_the_active_bound(bound_1d):
    sys, cost, cons = bound_1d
    traj = rollout(sys, [0.0], [[0.0]])
    mult = ConstraintService.assemble_multipliers(sys, traj, cost, cons)
    assert mult.lambda0 == 1.0
    assert np.allclose(mult.values, [2.0], atol=1e-9)

    report = ConstraintService.constrained_conditions_residual(sys, traj, cost, cons, mult)
    assert report.max_residual <= 1e-9
    assert not report.degenerate


def test_multipliers_of_the_abnormal_toy(abnormal_toy):
    sys, cost, cons, traj = abnormal_toy
    mult = ConstraintService.assemble_multipliers(sys, traj, cost, cons)
    assert mult.lambda0 == 0.0
    assert np.isclose(abs(mult.values[0]), 1.0)
    assert np.allclose(mult.rhs, [1.0])

    report = ConstraintService.constrained_conditions_residual(
        sys, traj, cost, cons, mult, mult.rhs
    )
    assert report.degenerate
    assert report.certified_delta <= 1e-12


def test_negative_inequality_multiplier_is_rejected(bound_1d):
    sys, cost, cons = bound_1d
    traj = rollout(sys, [0.0], [[0.0]])
    with pytest.raises(ConstraintViolationError):
        ConstraintService.constrained_conditions_residual(
            sys, traj, cost, cons, MultiplierSequence(lambda0=1.0, values=[-1.0])
        )


def test_lambda0_must_be_zero_or_one():
    with pytest.raises(ValueError):
        MultiplierSequence(lambda0=0.5, values=[0.0])


def test_zero_multipliers_reproduce_the_adjoint_certificate():
    rng = np.random.default_rng(13)
    A = np.eye(2) + 0.2 * rng.standard_normal((2, 2))
    sys, Q, U = linear_setup(A, rng.standard_normal((2, 1)), horizon=4)
    cost = quadratic_cost({"Q": np.eye(2)}, BuildContext(Q, U, 4, Q.identity()))
    cons = ConstraintSet(
        4,
        {1: [on_control("ineq", Q, U, [1.0], c_q=[0.5, 0.0])]},
        endpoint=[on_endpoint("eq", Q, [1.0, 1.0])],
    )
    traj = rollout(sys, [1.0, -1.0], rng.standard_normal((4, 1)))
    report = ConstraintService.constrained_conditions_residual(
        sys, traj, cost, cons, MultiplierSequence.zeros(cons)
    )
    lin = SystemService.linearize(sys, traj)
    grads = AdjointService.stage_gradients(sys, traj, cost)
    expected = AdjointService.sweep(lin, grads.a)
    for got, want in zip(report.costates, expected):
        assert np.array_equal(got, want)
    certificate = AdjointService.criticality_certificate(sys, traj, cost)
    assert report.stationarity == certificate.per_stage_delta


def test_bounded_slope_check():
    sys, Q, U = linear_setup(1.0, 1.0)
    traj = rollout(sys, [0.0], [[0.0]])
    mixed = ConstraintSet(1, {0: [on_control("ineq", Q, U, [2.0], c_q=[1.0])]})
    assert ConstraintService.bounded_slope_check(mixed, traj, kappa=3.0).passed
    failing = ConstraintService.bounded_slope_check(mixed, traj, kappa=1.0)
    assert not failing.passed
    assert np.isclose(failing.worst_ratio, 2.0)
    assert failing.worst_block == 0

    control_only = ConstraintSet(1, {0: [on_control("ineq", Q, U, [1.0])]})
    result = ConstraintService.bounded_slope_check(control_only, traj, kappa=1e6)
    assert not result.passed
    assert result.worst_ratio == np.inf

    pure = ConstraintSet(1, {0: [on_control("ineq", Q, U, [0.0], c_q=[1.0])]}, pure_state=True)
    assert ConstraintService.bounded_slope_check(pure, traj, kappa=0.0).passed


def test_decrease_certificate_passes_for_a_linear_bound(bound_1d):
    sys, _, cons = bound_1d
    Q, U = sys.state_manifold, sys.stages[0].control_manifold
    report = ConstraintService.decrease_certificate(
        sys, cons, Q.point([0.0]), [0.0], [U.point([0.0])], radius=0.5, delta=1.0, seed=3
    )
    assert report.passed
    assert report.checked > 0
    assert report.worst_rate <= -1.0 + 1e-6
    assert report.distance_violations == 0


def test_decrease_certificate_fails_for_a_flat_constraint():
    """``u² <= e`` has vanishing slope at the origin, so no uniform decrease rate."""
    sys, Q, U = linear_setup(1.0, 1.0)
    cons = ConstraintSet(1, {0: [ball_constraint("ineq", Q, U, {"on": "control", "radius": 0.0})]})
    report = ConstraintService.decrease_certificate(
        sys, cons, Q.point([0.0]), [0.0], [U.point([0.0])], radius=0.5, delta=1.0, seed=3
    )
    assert not report.passed
    assert report.counterexample is not None


def test_decrease_certificate_needs_a_feasible_base(bound_1d):
    sys, _, cons = bound_1d
    Q, U = sys.state_manifold, sys.stages[0].control_manifold
    with pytest.raises(ConstraintViolationError):
        ConstraintService.decrease_certificate(
            sys, cons, Q.point([0.0]), [0.0], [U.point([1.0])], radius=0.5, delta=1.0
        )


def test_distance_to_the_feasible_set_is_bounded_by_the_penalty():
    """For u₁ + u₂ <= 1 and u₁ − u₂ <= 1 the distance never exceeds P."""
    sys, Q, U = linear_setup(np.eye(2), np.eye(2))
    cons = ConstraintSet(
        1, {0: [on_control("ineq", Q, U, [1.0, 1.0]), on_control("ineq", Q, U, [1.0, -1.0])]}
    )
    rhs = np.ones(2)
    M = np.array([[1.0, 1.0], [1.0, -1.0]])
    for u1, u2 in itertools.product(np.linspace(-2.0, 3.0, 50), repeat=2):
        traj = rollout(sys, [0.0, 0.0], [[u1, u2]])
        penalty = ConstraintService.penalty_eval(cons, rhs, traj).total
        _, distance = OracleService.project_polyhedron([u1, u2], M, rhs)
        assert distance <= penalty + 1e-9


def test_value_sensitivity_of_the_active_bound(bound_1d):
    sys, cost, cons = bound_1d
    Q, U = sys.state_manifold, sys.stages[0].control_manifold
    table = ConstraintService.value_sensitivity(
        sys,
        cost,
        cons,
        Q.point([0.0]),
        [U.point([0.0])],
        [[-1e-3], [0.0], [1e-3]],
        SolveOptions(kappa0=10.0),
    )
    assert [row.status for row in table.rows] == ["Converged"] * 3
    assert np.isclose(table.base_value, 1.0)
    assert np.isclose(table.rows[0].value, (1.0 + 1e-3) ** 2)
    assert np.isclose(table.calmness, -2.0, atol=1e-2)
    assert table.calm
    assert np.allclose(table.rows[2].rhs, [1e-3])


def test_value_sensitivity_of_an_inactive_bound(bound_1d):
    sys, cost, cons = bound_1d
    Q, U = sys.state_manifold, sys.stages[0].control_manifold
    table = ConstraintService.value_sensitivity(
        sys,
        cost,
        cons,
        Q.point([0.0]),
        [U.point([0.0])],
        [[-0.1], [0.1]],
        SolveOptions(kappa0=10.0),
        base_rhs=[5.0],
    )
    assert abs(table.base_value) <= 1e-12
    assert abs(table.calmness) <= 1e-9
    assert table.calm


def test_value_sensitivity_keeps_going_past_a_failed_point(bound_1d, mocker):
    sys, cost, cons = bound_1d
    Q, U = sys.state_manifold, sys.stages[0].control_manifold
    solve = SolverService.penalty_solve

    def flaky(*args, e, **kwargs):
        if e[0] < 0.0:
            raise np.linalg.LinAlgError("singular subproblem")
        return solve(*args, e=e, **kwargs)

    mocker.patch.object(SolverService, "penalty_solve", side_effect=flaky)
    table = ConstraintService.value_sensitivity(
        sys,
        cost,
        cons,
        Q.point([0.0]),
        [U.point([0.0])],
        [[-1e-3], [0.0], [1e-3]],
        SolveOptions(kappa0=10.0),
    )
    assert [row.status for row in table.rows] == ["Failed", "Converged", "Converged"]
    assert np.isnan(table.rows[0].value)
    assert np.isclose(table.calmness, -2.0, atol=1e-2)
    assert table.calm
