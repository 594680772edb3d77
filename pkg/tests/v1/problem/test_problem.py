import numpy as np
import pytest

from dgmp.utils.exceptions import ProblemFileError
from dgmp.v1.schemas.problem import ProblemFile
from dgmp.v1.services.constraints import SensitivityRow, SensitivityTable
from dgmp.v1.services.oracle import OracleService
from dgmp.v1.services.problem import (
    ProblemService,
    controls_csv,
    integrate_csv,
    parse_grid,
    read_controls_csv,
    states_csv,
    sweep_csv,
)
from dgmp.v1.services.solver import SolveStatus

SHIPPED = ["lqr", "free_rigid_body", "heavy_top", "abnormal_toy", "bound_1d", "attitude"]


def build(load_problem, name, **changes):
    data = load_problem(name)
    data.update(changes)
    return ProblemService.build(ProblemFile.model_validate(data))


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_problems_build(problems_dir, name):
    spec = ProblemService.load(problems_dir / f"{name}.json")
    built = ProblemService.build(spec)
    assert built.system.horizon == spec.horizon
    assert len(built.initial_controls) == spec.horizon
    traj = ProblemService.rollout(built)
    assert len(traj.states) == spec.horizon + 1


def test_load_rejects_unknown_keys(load_problem, write_problem):
    data = load_problem("lqr")
    data["solver"]["step_rule"] = "newton"
    with pytest.raises(ProblemFileError):
        ProblemService.load(write_problem(data))


def test_load_missing_file(tmp_path):
    with pytest.raises(OSError):
        ProblemService.load(tmp_path / "absent.json")


def test_build_rejects_unknown_builtins(load_problem):
    with pytest.raises(ProblemFileError, match="unknown cost"):
        build(load_problem, "lqr", cost={"name": "fuel"})


def test_integrator_needs_so3(load_problem):
    integrator = {"J_d": np.eye(3).tolist(), "h": 0.1, "initial_momentum": [0.0, 0.0, 1.0]}
    with pytest.raises(ProblemFileError):
        build(load_problem, "lqr", integrator=integrator)


def test_parse_grid():
    assert np.allclose(parse_grid("0:1:3"), [0.0, 0.5, 1.0])
    assert np.allclose(parse_grid("-2:-2:1"), [-2.0])
    for bad in ("0:1", "a:b:c", "0:1:0"):
        with pytest.raises(ProblemFileError):
            parse_grid(bad)


def test_parse_controls_checks_the_row_count(load_problem):
    built = build(load_problem, "bound_1d")
    with pytest.raises(ProblemFileError):
        ProblemService.parse_controls(built.system, [[0.0], [0.0]])


def test_options_ignore_unset_overrides(load_problem):
    built = build(load_problem, "lqr")
    opts = ProblemService.options(built, max_iters=3, seed=None)
    assert opts.max_iters == 3
    assert opts.seed == 0
    assert opts.gradient_tolerance == 1e-9


def test_trajectory_csv(load_problem):
    built = build(load_problem, "lqr", initial_controls=[[0.1]] * 20)
    traj = ProblemService.rollout(built)
    states = states_csv(traj).splitlines()
    assert states[0] == "step,q0,q1"
    assert len(states) == 22
    controls = controls_csv(traj)
    assert controls.splitlines()[1] == "0,0.10000000000000001"
    assert read_controls_csv(controls) == [[0.1]] * 20


def test_read_controls_csv_rejects_text():
    with pytest.raises(ProblemFileError):
        read_controls_csv("step,u0\n0,fast\n")


def test_lqr_solve_matches_riccati(load_problem):
    built = build(load_problem, "lqr")
    report = ProblemService.solve(built)
    params = built.spec.dynamics.params
    oracle = OracleService.riccati_lqr(
        params["A"], params["B"], np.eye(2), [[0.1]], 10.0 * np.eye(2), 20, [1.0, 0.0]
    )
    assert report.status is SolveStatus.CONVERGED
    assert np.max(np.abs(report.trajectory.control_matrix() - oracle.controls)) <= 1e-6

    response = ProblemService.solve_response(report)
    assert response.status == report.status.value
    assert len(response.trajectory.controls) == 20


def test_check_assembles_multipliers(load_problem):
    built = build(load_problem, "bound_1d")
    response = ProblemService.check(built, ProblemService.parse_controls(built.system, [[0.0]]))
    assert response.constrained.lambda0 == 1.0
    assert np.allclose(response.constrained.multipliers, [2.0])
    assert response.certified_delta <= 1e-9
    assert response.maximization is None


def test_check_runs_the_maximization_condition(load_problem):
    built = build(load_problem, "attitude")
    response = ProblemService.check(built)
    assert response.constrained is None
    assert [m.stage for m in response.maximization] == list(range(10))
    assert len(response.costates) == 11


def test_integrate_rows(load_problem):
    built = build(load_problem, "free_rigid_body")
    response = ProblemService.integrate(built, steps=5)
    assert [s.step for s in response.steps] == list(range(6))
    assert response.steps[0].residual == 0.0
    assert np.allclose(response.steps[0].g, np.eye(3).ravel())
    assert np.allclose([s.norm for s in response.steps], response.steps[0].norm, atol=1e-12)

    lines = integrate_csv(response).splitlines()
    assert lines[0] == "step,g0,g1,g2,g3,g4,g5,g6,g7,g8,p0,p1,p2,norm,residual"
    assert len(lines) == 7


def test_integrate_needs_an_integrator(load_problem):
    with pytest.raises(ProblemFileError):
        ProblemService.integrate(build(load_problem, "lqr"))


def test_sweep_reports_calmness(load_problem):
    built = build(load_problem, "bound_1d")
    scalars = parse_grid("-0.001:0.001:3")
    response = ProblemService.sweep(built, scalars)
    assert np.isclose(response.base_value, 1.0)
    assert np.isclose(response.calmness, -2.0, atol=1e-2)
    assert response.calm

    text = sweep_csv(scalars, response)
    assert text.splitlines()[0] == "s,e0,value,status"
    assert text.endswith("calm=true\n")
    assert "# calmness=" in text


def test_sweep_needs_constraints(load_problem):
    with pytest.raises(ProblemFileError):
        ProblemService.sweep(build(load_problem, "lqr"), [0.0])


def test_failed_sweep_points_have_no_value():
    table = SensitivityTable(
        rows=(
            SensitivityRow(np.array([-0.1]), float("nan"), "Failed"),
            SensitivityRow(np.array([0.0]), 1.0, "Converged"),
        ),
        base_value=1.0,
        calmness=None,
        calm=False,
    )
    response = ProblemService.sweep_response(table)
    assert response.rows[0].value is None
    assert response.rows[1].value == 1.0
    line = sweep_csv([-0.1, 0.0], response).splitlines()[1]
    assert line == "-0.10000000000000001,-0.10000000000000001,,Failed"
