import numpy as np
import pytest

from dgmp.utils.exceptions import InvalidTrajectoryError
from dgmp.v1.services.adjoint import AdjointService, CostSpec
from dgmp.v1.services.builtins import (
    BuildContext,
    attitude_cost,
    body_rate,
    linear_dynamics,
    quadratic_cost,
)
from dgmp.v1.services.manifold import SO3, Euclidean, exp_so3
from dgmp.v1.services.oracle import OracleService
from dgmp.v1.services.system import (
    Box,
    ControlSystem,
    SystemService,
    Trajectory,
    WholeManifold,
)


def random_linear_problem(rng, n, d, m):
    Q, U = Euclidean(d), Euclidean(m)
    params = {"A": np.eye(d) + 0.3 * rng.standard_normal((d, d)), "B": rng.standard_normal((d, m))}
    sys = ControlSystem(Q, linear_dynamics(Q, U, params, n), (WholeManifold(),) * n)
    M = rng.standard_normal((d, d))
    cost = quadratic_cost(
        {"Q": M @ M.T, "R": np.eye(m), "target": rng.standard_normal(d)},
        BuildContext(Q, U, n, Q.point(np.zeros(d))),
    )
    q0 = Q.point(rng.standard_normal(d))
    controls = [U.point(rng.standard_normal(m)) for _ in range(n)]
    return sys, cost, SystemService.rollout(sys, q0, controls)


def random_attitude_problem(rng, n):
    G, U = SO3(), Euclidean(3)
    stages = tuple(
        body_rate(G, U, {"h": 0.1, "B": rng.standard_normal((3, 3))}, i) for i in range(n)
    )
    sys = ControlSystem(G, stages, (WholeManifold(),) * n)
    target = exp_so3(rng.uniform(-1, 1, 3))
    cost = attitude_cost({"target": target, "weight": 3.0}, BuildContext(G, U, n, G.identity()))
    controls = [U.point(rng.uniform(-1, 1, 3)) for _ in range(n)]
    return sys, cost, SystemService.rollout(sys, G.point(exp_so3(rng.uniform(-1, 1, 3))), controls)


def problems(count=20):
    rng = np.random.default_rng(2024)
    for k in range(count):
        n = int(rng.integers(1, 11))
        if k % 2:
            yield random_attitude_problem(rng, n)
        else:
            yield random_linear_problem(rng, n, int(rng.integers(1, 7)), int(rng.integers(1, 4)))


def total_cost_of(sys, cost, q0):
    def J(packed):
        traj = SystemService.rollout(sys, q0, sys.unpack_controls(packed))
        return AdjointService.total_cost(sys, traj, cost)

    return J


@pytest.mark.parametrize("sys,cost,traj", list(problems()))
def test_reduced_gradient_matches_finite_differences(sys, cost, traj):
    gradient = np.concatenate(
        [c.covec for c in AdjointService.cost_gradient(sys, traj, cost)],
    )
    fd = OracleService.fd_gradient(
        total_cost_of(sys, cost, traj.states[0]),
        sys.control_space,
        sys.pack_controls(traj.controls),
    ).covec
    error = np.linalg.norm(gradient - fd) / max(1.0, np.linalg.norm(fd))
    assert error <= 1e-5


@pytest.mark.parametrize("sys,cost,traj", list(problems()))
def test_costate_recursion_is_exact(sys, cost, traj):
    lin = SystemService.linearize(sys, traj)
    costates = AdjointService.backward_sweep(sys, traj, cost, lin)
    assert costates.recursion_residuals(lin).max() <= 1e-12


@pytest.mark.parametrize("sys,cost,traj", list(problems()))
def test_adjoint_and_forward_variation_agree(sys, cost, traj):
    """Σ⟨r_i, v_i⟩ equals the first-order cost change along the forward variation."""
    rng = np.random.default_rng(5)
    v = [rng.standard_normal(s.control_manifold.dim) for s in sys.stages]
    lin = SystemService.linearize(sys, traj)
    grads = AdjointService.stage_gradients(sys, traj, cost)
    residuals = AdjointService.stationarity(lin, grads.b, AdjointService.sweep(lin, grads.a))
    adjoint_pairing = sum(float(r @ vi) for r, vi in zip(residuals, v))

    variations = SystemService.forward_variation(sys, traj, v, lin)
    forward_pairing = sum(float(grads.b[i] @ v[i]) for i in range(sys.horizon))
    forward_pairing += sum(
        float(grads.a[j] @ variations[j - 1].vec) for j in range(1, sys.horizon + 1)
    )
    assert abs(adjoint_pairing - forward_pairing) <= 1e-10 * max(1.0, abs(forward_pairing))


def test_certificate_is_zero_at_the_riccati_solution():
    rng = np.random.default_rng(3)
    A = np.eye(3) + 0.1 * rng.standard_normal((3, 3))
    B = rng.standard_normal((3, 2))
    n = 8
    Q, U = Euclidean(3), Euclidean(2)
    sys = ControlSystem(Q, linear_dynamics(Q, U, {"A": A, "B": B}, n), (WholeManifold(),) * n)
    cost = quadratic_cost({"Q": np.eye(3), "R": np.eye(2)}, BuildContext(Q, U, n, Q.identity()))
    q0 = np.array([1.0, -1.0, 0.5])
    oracle = OracleService.riccati_lqr(A, B, np.eye(3), np.eye(2), np.eye(3), n, q0)
    traj = SystemService.rollout(sys, Q.point(q0), [U.point(u) for u in oracle.controls])
    report = AdjointService.criticality_certificate(sys, traj, cost)
    assert report.certified_delta <= 1e-9
    assert np.isclose(AdjointService.total_cost(sys, traj, cost), oracle.value, rtol=1e-10)


def test_certificate_accounts_for_active_bounds():
    """A bound that stops the descent direction leaves the certificate at zero."""
    Q = U = Euclidean(1)
    sys = ControlSystem(Q, linear_dynamics(Q, U, {"A": 1.0, "B": 1.0}, 1), (Box([-1.0], [0.0]),))
    cost = quadratic_cost(
        {"R": 0.0, "Qf": 2.0, "target": [1.0]}, BuildContext(Q, U, 1, Q.identity())
    )
    traj = SystemService.rollout(sys, Q.point([0.0]), [U.point([0.0])])
    report = AdjointService.criticality_certificate(sys, traj, cost)
    assert report.certified_delta == 0.0
    inside = SystemService.rollout(sys, Q.point([0.0]), [U.point([-0.5])])
    report = AdjointService.criticality_certificate(sys, inside, cost)
    assert np.isclose(report.certified_delta, 3.0)


def test_invalid_trajectory_is_rejected():
    rng = np.random.default_rng(0)
    sys, cost, traj = random_linear_problem(rng, 3, 2, 1)
    broken = Trajectory(traj.states[:1] + traj.states[:-1], traj.controls)
    with pytest.raises(InvalidTrajectoryError):
        AdjointService.backward_sweep(sys, broken, cost)


def test_initial_state_extension_gives_the_initial_gradient():
    rng = np.random.default_rng(9)
    sys, cost, traj = random_linear_problem(rng, 4, 2, 2)
    Q = sys.state_manifold
    anchor = rng.standard_normal(2)
    with_initial = CostSpec(
        terminal=cost.terminal,
        running=cost.running,
        terminal_grad=cost.terminal_grad,
        running_grad_q=cost.running_grad_q,
        running_grad_u=cost.running_grad_u,
        initial=lambda q: float((q.coords - anchor) @ (q.coords - anchor)),
        initial_grad=lambda q: 2.0 * (q.coords - anchor),
    )
    extended, extended_cost = AdjointService.extend_with_initial_state(
        sys, with_initial, WholeManifold()
    )
    assert extended.horizon == sys.horizon + 1

    extended_traj = AdjointService.extended_trajectory(traj)
    gradient = AdjointService.cost_gradient(extended, extended_traj, extended_cost)[0].covec

    def J(q0):
        rolled = SystemService.rollout(sys, q0, traj.controls)
        return AdjointService.total_cost(sys, rolled, cost) + with_initial.initial(q0)

    fd = OracleService.fd_gradient(J, Q, traj.states[0]).covec
    assert np.allclose(gradient, fd, atol=1e-6)


def test_extension_needs_an_initial_cost():
    rng = np.random.default_rng(1)
    sys, cost, _ = random_linear_problem(rng, 2, 2, 1)
    with pytest.raises(ValueError):
        AdjointService.extend_with_initial_state(sys, cost, WholeManifold())


def test_scaled_cost():
    rng = np.random.default_rng(4)
    sys, cost, traj = random_linear_problem(rng, 3, 2, 1)
    doubled = cost.scaled(2.0)
    assert np.isclose(
        AdjointService.total_cost(sys, traj, doubled),
        2.0 * AdjointService.total_cost(sys, traj, cost),
    )
