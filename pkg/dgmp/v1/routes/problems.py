"""API routes running commands on posted problem definitions."""

import logging
from typing import Callable, TypeVar

from fastapi import APIRouter, HTTPException, status

from dgmp.utils.exceptions import NewtonDivergence
from dgmp.v1.schemas.reports import (
    CheckRequest,
    CheckResponse,
    IntegrateRequest,
    IntegrateResponse,
    RolloutRequest,
    SolveRequest,
    SolveResponse,
    SweepRequest,
    SweepResponse,
    TrajectoryResponse,
)
from dgmp.v1.services.problem import ProblemService

problems = APIRouter(prefix="/problems", tags=["Problems"])

logger = logging.getLogger("dgmp")

T = TypeVar("T")


def _run(action: Callable[[], T]) -> T:
    """Run a service call, translating library errors to HTTP errors.

    Raises:
        HTTPException: 422 for invalid input or a failed integration, 500 otherwise.
    """
    try:
        return action()
    except NewtonDivergence as e:
        logger.warning("Integrator failed: %s", str(e))
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail={"message": str(e), "step": e.step},
        ) from e
    except ValueError as e:
        logger.warning("Value error occurred: %s", str(e))
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail=str(e),
        ) from e
    except Exception as e:
        logger.exception("Internal server error", exc_info=e)
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail="Internal server error.",
        ) from e


@problems.post(
    "/rollout",
    response_model=TrajectoryResponse,
    status_code=status.HTTP_200_OK,
)
def rollout(request: RolloutRequest) -> TrajectoryResponse:
    """Roll out a control sequence from the problem's initial state.

    Args:
        request (RolloutRequest): The problem and, optionally, the controls.

    Returns:
        TrajectoryResponse: States q_0..q_n and the controls used.

    Raises:
        HTTPException: If the problem or the controls are invalid.
    """

    def action() -> TrajectoryResponse:
        built = ProblemService.build(request.problem)
        controls = None
        if request.controls is not None:
            controls = ProblemService.parse_controls(built.system, request.controls)
        return ProblemService.trajectory_response(ProblemService.rollout(built, controls))

    return _run(action)


@problems.post(
    "/solve",
    response_model=SolveResponse,
    status_code=status.HTTP_200_OK,
)
def solve(request: SolveRequest) -> SolveResponse:
    """Solve the problem with its own solver options.

    A solve that stops short of convergence is still a 200; its ``status`` field
    says why it stopped.
    """
    return _run(
        lambda: ProblemService.solve_response(
            ProblemService.solve(ProblemService.build(request.problem))
        ),
    )


@problems.post(
    "/check",
    response_model=CheckResponse,
    status_code=status.HTTP_200_OK,
)
def check(request: CheckRequest) -> CheckResponse:
    """Report necessary-condition residuals of a control sequence.

    Args:
        request (CheckRequest): The problem and, optionally, the controls.

    Returns:
        CheckResponse: Costates, residuals and the maximization verdicts.

    Raises:
        HTTPException: If a control is outside its set or the input is invalid.
    """

    def action() -> CheckResponse:
        built = ProblemService.build(request.problem)
        controls = None
        if request.controls is not None:
            controls = ProblemService.parse_controls(built.system, request.controls)
        return ProblemService.check(built, controls)

    return _run(action)


@problems.post(
    "/integrate",
    response_model=IntegrateResponse,
    status_code=status.HTTP_200_OK,
)
def integrate(request: IntegrateRequest) -> IntegrateResponse:
    """Run the problem's variational integrator."""
    return _run(
        lambda: ProblemService.integrate(
            ProblemService.build(request.problem), request.steps
        ),
    )


@problems.post(
    "/sweep",
    response_model=SweepResponse,
    status_code=status.HTTP_200_OK,
)
def sweep(request: SweepRequest) -> SweepResponse:
    """Tabulate the optimal value along perturbed constraint right-hand sides."""
    return _run(
        lambda: ProblemService.sweep(
            ProblemService.build(request.problem),
            request.scalars,
            request.direction,
        ),
    )
