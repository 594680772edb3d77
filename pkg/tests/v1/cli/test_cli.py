import json

import pytest

from dgmp.cli import EXIT_INTEGRATOR, EXIT_INVALID, EXIT_IO, EXIT_OK, EXIT_SOLVER, main
from dgmp.utils.exceptions import NewtonDivergence
from dgmp.utils.logging_config import build_logging_config
from dgmp.v1.services.problem import (
    ProblemService,
    controls_csv,
    integrate_csv,
    states_csv,
)


def run(problems_dir, name, out, *extra):
    return main([extra[0], str(problems_dir / f"{name}.json"), "--out", str(out), *extra[1:]])


def test_rollout_matches_the_library(problems_dir, tmp_path):
    assert run(problems_dir, "lqr", tmp_path, "rollout") == EXIT_OK
    built = ProblemService.build(ProblemService.load(problems_dir / "lqr.json"))
    expected = states_csv(ProblemService.rollout(built))
    assert (tmp_path / "states.csv").read_text(encoding="utf-8") == expected


def test_rollout_with_a_controls_file(problems_dir, tmp_path):
    controls = tmp_path / "u.csv"
    controls.write_text("step,u0\n0,-0.5\n", encoding="utf-8")
    code = run(problems_dir, "bound_1d", tmp_path, "rollout", "--controls", str(controls))
    assert code == EXIT_OK
    assert (tmp_path / "states.csv").read_text(encoding="utf-8").splitlines() == [
        "step,q0",
        "0,0",
        "1,-0.5",
    ]


def test_solve_writes_deterministic_outputs(problems_dir, tmp_path, capsys):
    first, second = tmp_path / "a", tmp_path / "b"
    assert run(problems_dir, "lqr", first, "solve") == EXIT_OK
    assert run(problems_dir, "lqr", second, "solve") == EXIT_OK
    for name in ("states.csv", "controls.csv", "report.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes()

    assert "status=Converged" in capsys.readouterr().out
    report = json.loads((first / "report.json").read_text(encoding="utf-8"))
    built = ProblemService.build(ProblemService.load(problems_dir / "lqr.json"))
    solved = ProblemService.solve(built)
    assert report["cost"] == solved.cost
    assert (first / "controls.csv").read_text(encoding="utf-8") == controls_csv(
        solved.trajectory
    )


def test_stalled_solve_exits_with_solver_failure(problems_dir, tmp_path):
    assert run(problems_dir, "abnormal_toy", tmp_path, "solve") == EXIT_SOLVER
    report = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
    assert report["status"] == "PenaltyStalled"
    assert report["normality"]["strictly_normal"] is False


def test_check_writes_json(problems_dir, tmp_path):
    assert run(problems_dir, "bound_1d", tmp_path, "check") == EXIT_OK
    check = json.loads((tmp_path / "check.json").read_text(encoding="utf-8"))
    assert check["constrained"]["lambda0"] == 1.0


def test_integrate_matches_the_library(problems_dir, tmp_path):
    assert run(problems_dir, "free_rigid_body", tmp_path, "integrate", "--steps", "10") == EXIT_OK
    built = ProblemService.build(ProblemService.load(problems_dir / "free_rigid_body.json"))
    expected = integrate_csv(ProblemService.integrate(built, 10))
    assert (tmp_path / "integrate.csv").read_text(encoding="utf-8") == expected


def test_sweep_writes_the_calmness_footer(problems_dir, tmp_path):
    code = run(problems_dir, "bound_1d", tmp_path, "sweep", "--grid", "-0.001:0.001:3")
    assert code == EXIT_OK
    lines = (tmp_path / "sweep.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "s,e0,value,status"
    assert len(lines) == 5
    assert lines[-1].startswith("# calmness=")


def test_missing_problem_file(tmp_path):
    assert main(["rollout", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == EXIT_IO


def test_invalid_problem_file(load_problem, write_problem, tmp_path):
    data = load_problem("lqr")
    data["horizon"] = -1
    assert main(["rollout", str(write_problem(data)), "--out", str(tmp_path)]) == EXIT_INVALID


def test_bad_sweep_grid(problems_dir, tmp_path):
    code = run(problems_dir, "bound_1d", tmp_path, "sweep", "--grid", "0:1")
    assert code == EXIT_INVALID


def test_integrator_failure_exit_code(problems_dir, tmp_path, mocker, capsys):
    mocker.patch.object(
        ProblemService,
        "integrate",
        side_effect=NewtonDivergence("step 7: residual stalled", step=7, residual=1.0),
    )
    assert run(problems_dir, "free_rigid_body", tmp_path, "integrate") == EXIT_INTEGRATOR
    assert "step 7" in capsys.readouterr().err


def test_unknown_command_is_a_usage_error(problems_dir):
    with pytest.raises(SystemExit) as info:
        main(["optimize", str(problems_dir / "lqr.json")])
    assert info.value.code == 2


def test_logging_config_levels(tmp_path):
    config = build_logging_config("debug", str(tmp_path / "dgmp.log"))
    assert config["loggers"]["dgmp"]["level"] == "DEBUG"
    assert config["loggers"]["dgmp"]["handlers"] == ["console", "file"]
    assert build_logging_config("warning")["loggers"]["dgmp"]["handlers"] == ["console"]
