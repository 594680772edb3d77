"""``dgmp`` command-line entry point.

Commands read a problem file and write CSV/JSON results into ``--out``. Exit codes:
0 ok, 1 I/O error, 2 invalid input, 3 solver failure, 4 integrator failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

from dgmp.core.base.manifolds import Point
from dgmp.utils.exceptions import NewtonDivergence, NoCertificate, OracleError
from dgmp.utils.logging_config import setup_logging
from dgmp.v1.schemas.solver import SolveOptions
from dgmp.v1.services import problem as problem_module
from dgmp.v1.services.problem import BuiltProblem, ProblemService
from dgmp.v1.services.solver import SolveStatus

logger = logging.getLogger("dgmp")

EXIT_OK = 0
EXIT_IO = 1
EXIT_INVALID = 2
EXIT_SOLVER = 3
EXIT_INTEGRATOR = 4


def _write(out: Path, name: str, text: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / name, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(text)


def _controls(args: argparse.Namespace, built: BuiltProblem) -> tuple[Point, ...] | None:
    if args.controls is None:
        return None
    text = Path(args.controls).read_text(encoding="utf-8")
    rows = problem_module.read_controls_csv(text)
    return ProblemService.parse_controls(built.system, rows)


def _options(args: argparse.Namespace, built: BuiltProblem) -> SolveOptions:
    return ProblemService.options(
        built,
        seed=args.seed,
        gradient_tolerance=args.tol,
        max_iters=args.max_iters,
        kappa0=args.kappa0,
    )


def cmd_rollout(args: argparse.Namespace, built: BuiltProblem) -> int:
    traj = ProblemService.rollout(built, _controls(args, built))
    _write(args.out, "states.csv", problem_module.states_csv(traj))
    return EXIT_OK


def cmd_solve(args: argparse.Namespace, built: BuiltProblem) -> int:
    report = ProblemService.solve(built, _options(args, built))
    response = ProblemService.solve_response(report)
    _write(args.out, "states.csv", problem_module.states_csv(report.trajectory))
    _write(args.out, "controls.csv", problem_module.controls_csv(report.trajectory))
    _write(args.out, "report.json", response.model_dump_json(indent=2) + "\n")
    print(f"status={response.status} cost={response.cost!r} delta={response.certified_delta!r}")
    if report.status is not SolveStatus.CONVERGED:
        logger.warning("solve ended with status %s: %s", report.status.value, report.message)
        return EXIT_SOLVER
    return EXIT_OK


def cmd_check(args: argparse.Namespace, built: BuiltProblem) -> int:
    response = ProblemService.check(built, _controls(args, built), _options(args, built))
    _write(args.out, "check.json", response.model_dump_json(indent=2) + "\n")
    print(f"certified_delta={response.certified_delta!r}")
    return EXIT_OK


def cmd_integrate(args: argparse.Namespace, built: BuiltProblem) -> int:
    response = ProblemService.integrate(built, args.steps)
    _write(args.out, "integrate.csv", problem_module.integrate_csv(response))
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, built: BuiltProblem) -> int:
    scalars = problem_module.parse_grid(args.grid)
    direction = None
    if args.direction is not None:
        direction = [float(x) for x in args.direction.split(",")]
    response = ProblemService.sweep(built, scalars, direction, _options(args, built))
    _write(args.out, "sweep.csv", problem_module.sweep_csv(list(scalars), response))
    return EXIT_OK


COMMANDS: dict[str, Callable[[argparse.Namespace, BuiltProblem], int]] = {
    "rollout": cmd_rollout,
    "solve": cmd_solve,
    "check": cmd_check,
    "integrate": cmd_integrate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dgmp",
        description="Discrete geometric optimal control on manifolds.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS), help="Command to run.")
    parser.add_argument("problem", type=Path, help="Problem definition (JSON).")
    parser.add_argument("--out", type=Path, default=Path("."), help="Output directory.")
    parser.add_argument("--seed", type=int, default=None, help="Seed for randomized checks.")
    parser.add_argument("--tol", type=float, default=None, help="Stationarity tolerance.")
    parser.add_argument("--max-iters", type=int, default=None, help="Iteration cap.")
    parser.add_argument("--kappa0", type=float, default=None, help="Initial penalty weight.")
    parser.add_argument("--controls", type=Path, default=None, help="Controls CSV.")
    parser.add_argument("--steps", type=int, default=None, help="Integrator steps.")
    parser.add_argument("--grid", default="-0.1:0.1:5", help="Sweep grid a:b:k.")
    parser.add_argument(
        "--direction",
        default=None,
        help="Comma-separated perturbation direction for sweep (all ones by default).",
    )
    parser.add_argument("--log-level", default=None, help="Logging level.")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(level=args.log_level)
    try:
        built = ProblemService.build(ProblemService.load(args.problem))
        return COMMANDS[args.command](args, built)
    except OSError as exc:
        print(f"[error] {exc}", file=sys.stderr)
        return EXIT_IO
    except NewtonDivergence as exc:
        print(f"[error] integrator failed: {exc}", file=sys.stderr)
        return EXIT_INTEGRATOR
    except (NoCertificate, OracleError) as exc:
        print(f"[error] {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"[error] {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
