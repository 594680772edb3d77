import numpy as np
import pytest

from dgmp.utils.exceptions import (
    InfeasibleControlError,
    InvalidTrajectoryError,
    ManifoldError,
)
from dgmp.v1.services.builtins import body_rate, lie_multiplicative, linear_dynamics
from dgmp.v1.services.manifold import SO3, Euclidean, exp_so3
from dgmp.v1.services.system import (
    Ball,
    Box,
    ControlSystem,
    ConvexPolytope,
    SystemService,
    Trajectory,
    WholeManifold,
)


def linear_system(rng, n=5, d=3, m=2, sets=None):
    Q, U = Euclidean(d), Euclidean(m)
    params = {"A": np.eye(d) + 0.2 * rng.standard_normal((d, d)), "B": rng.standard_normal((d, m))}
    stages = linear_dynamics(Q, U, params, n)
    sys = ControlSystem(Q, stages, tuple(sets or [WholeManifold()] * n))
    return sys, params


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def test_rollout_applies_the_stage_maps(rng):
    sys, params = linear_system(rng)
    Q, U = sys.state_manifold, sys.stages[0].control_manifold
    q0 = Q.point(rng.standard_normal(3))
    controls = [U.point(rng.standard_normal(2)) for _ in range(5)]
    traj = SystemService.rollout(sys, q0, controls)

    q = np.array(q0.coords)
    for i, u in enumerate(controls):
        q = params["A"] @ q + params["B"] @ u.coords
        assert np.allclose(traj.states[i + 1].coords, q, atol=1e-14)
    assert traj.horizon == 5


def test_rollout_rejects_wrong_length(rng):
    sys, _ = linear_system(rng)
    with pytest.raises(ValueError):
        SystemService.rollout(sys, sys.state_manifold.point(np.zeros(3)), [])


def test_validate_trajectory_detects_tampering(rng):
    sys, _ = linear_system(rng)
    U = sys.stages[0].control_manifold
    traj = SystemService.rollout(
        sys,
        sys.state_manifold.point(np.ones(3)),
        [U.point(np.zeros(2))] * 5,
    )
    SystemService.validate_trajectory(sys, traj)
    states = list(traj.states)
    states[3] = sys.state_manifold.point(states[3].coords + 1e-3)
    with pytest.raises(InvalidTrajectoryError):
        SystemService.validate_trajectory(sys, Trajectory(tuple(states), traj.controls))


def test_transition_semigroup_on_so3(rng):
    G = SO3()
    stages = lie_multiplicative(G, G, {}, 6)
    sys = ControlSystem(G, stages, (WholeManifold(),) * 6)
    controls = [G.point(exp_so3(rng.uniform(-1, 1, 3))) for _ in range(6)]
    traj = SystemService.rollout(sys, G.identity(), controls)
    lin = SystemService.linearize(sys, traj)
    for i in range(7):
        for j in range(i, 7):
            for k in range(j, 7):
                left = SystemService.transition_jacobian(sys, traj, j, k, lin)
                right = SystemService.transition_jacobian(sys, traj, i, j, lin)
                full = SystemService.transition_jacobian(sys, traj, i, k, lin)
                assert np.linalg.norm(left @ right - full) <= 1e-10
    with pytest.raises(IndexError):
        SystemService.transition_jacobian(sys, traj, 3, 2, lin)


def test_forward_variation_matches_finite_differences(rng):
    G, U = SO3(), Euclidean(3)
    stages = tuple(body_rate(G, U, {"h": 0.2}, i) for i in range(4))
    sys = ControlSystem(G, stages, (WholeManifold(),) * 4)
    controls = [U.point(rng.uniform(-1, 1, 3)) for _ in range(4)]
    traj = SystemService.rollout(sys, G.identity(), controls)
    v = [rng.standard_normal(3) for _ in range(4)]
    variations = SystemService.forward_variation(sys, traj, v)

    eps = 1e-6
    plus = SystemService.rollout(
        sys, G.identity(), [U.retract(u, eps * d) for u, d in zip(controls, v)]
    )
    minus = SystemService.rollout(
        sys, G.identity(), [U.retract(u, -eps * d) for u, d in zip(controls, v)]
    )
    fd = (
        G.inverse_retract(traj.states[-1], plus.states[-1])
        - G.inverse_retract(traj.states[-1], minus.states[-1])
    ) / (2 * eps)
    assert np.allclose(variations[-1].vec, fd, atol=1e-7)


def test_box_tangent_cone_projection():
    box = Box(np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
    U = Euclidean(2)
    corner = U.point([1.0, -1.0])
    projected = box.tangent_cone_project(corner, [2.0, 3.0])
    assert np.allclose(projected, [0.0, 3.0])
    with pytest.raises(InfeasibleControlError):
        box.tangent_cone_project(U.point([2.0, 0.0]), [1.0, 0.0])


def test_stationarity_measure_respects_bounds():
    box = Box(np.array([-1.0]), np.array([1.0]))
    U = Euclidean(1)
    # the gradient asks to increase u, which the bound forbids
    assert SystemService.stationarity_measure(box, U.point([1.0]), [-2.0]) == 0.0
    assert np.isclose(SystemService.stationarity_measure(box, U.point([1.0]), [2.0]), 2.0)
    assert np.isclose(
        SystemService.stationarity_measure(WholeManifold(), U.point([0.0]), [-3.0]), 3.0
    )


def test_check_controls_flags_infeasible(rng):
    box = Box(np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
    sys, _ = linear_system(rng, n=2, sets=[box, box])
    U = sys.stages[0].control_manifold
    traj = SystemService.rollout(
        sys, sys.state_manifold.point(np.zeros(3)), [U.point([0.0, 0.0]), U.point([3.0, 0.0])]
    )
    with pytest.raises(InfeasibleControlError):
        SystemService.check_controls(sys, traj)


def test_polytope_vertices_and_emptiness():
    square = ConvexPolytope(
        np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]),
        np.ones(4),
    )
    assert len(square.vertices()) == 4
    assert square.contains(Euclidean(2).point(square.witness))
    with pytest.raises(ValueError):
        ConvexPolytope(np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0]))


def test_polytope_projection_lands_inside():
    triangle = ConvexPolytope(np.array([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]), [1.0, 0.0, 0.0])
    u = triangle.project(Euclidean(2).point([2.0, 2.0]))
    assert np.allclose(u.coords, [0.5, 0.5], atol=1e-9)


def test_ball_projection():
    ball = Ball(np.zeros(2), 1.0)
    u = ball.project(Euclidean(2).point([3.0, 4.0]))
    assert np.allclose(u.coords, [0.6, 0.8])
    assert ball.cone_rows(u).shape == (1, 2)


def test_flat_polytope_sample_lands_on_the_line():
    # x + y = 1 written as a pair of inequalities has no interior
    line = ConvexPolytope(np.array([[1.0, 1.0], [-1.0, -1.0]]), np.array([1.0, -1.0]))
    points = line.sample(10, 0)
    assert points.shape == (10, 2)
    assert np.allclose(points.sum(axis=1), 1.0, atol=1e-6)


def test_polytope_sample_stays_inside():
    triangle = ConvexPolytope(np.array([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]), [1.0, 0.0, 0.0])
    points = triangle.sample(50, 3)
    assert points.shape == (50, 2)
    assert np.all(points @ triangle.A.T <= triangle.b + 1e-6)


def test_zero_radius_ball_admits_no_direction():
    ball = Ball([0.0], 0.0)
    U = Euclidean(1)
    assert np.allclose(ball.tangent_cone_project(U.point([0.0]), [1.0]), 0.0)
    assert SystemService.stationarity_measure(ball, U.point([0.0]), [-1.0]) <= 1e-12


def test_control_sets_must_fit_the_control_manifold():
    G = SO3()
    stages = lie_multiplicative(G, G, {}, 1)
    with pytest.raises(ManifoldError):
        ControlSystem(G, stages, (Box(np.zeros(3), np.ones(3)),))


def test_apply_step_projects(rng):
    box = Box(np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
    sys, _ = linear_system(rng, n=1, sets=[box])
    U = sys.stages[0].control_manifold
    (moved,) = SystemService.apply_step(sys, [U.point([0.5, 0.0])], np.array([2.0, 0.25]))
    assert np.allclose(moved.coords, [1.0, 0.25])
