"""Report schemas shared by the CLI and the HTTP routes."""

from pydantic import BaseModel, Field

from dgmp.v1.schemas.problem import ProblemFile

Rows = list[list[float]]


class TrajectoryResponse(BaseModel):
    """Flattened states and controls of a trajectory."""

    states: Rows = Field(
        ...,
        description="q_0..q_n, one flattened row per state.",
    )
    controls: Rows = Field(
        ...,
        description="u_0..u_{n-1}, one flattened row per control.",
    )


class PenaltyRoundResponse(BaseModel):
    kappa: float
    penalty: float
    iterations: int
    delta: float


class MultiplierResponse(BaseModel):
    lambda0: float = Field(
        ...,
        description="Cost multiplier; 0 marks an abnormal certificate.",
    )
    values: list[float] = Field(
        ...,
        description="One multiplier per constraint, in right-hand-side layout.",
    )
    rhs: list[float] | None = Field(
        None,
        description="Right-hand sides the multipliers certify.",
    )


class NormalityResponse(BaseModel):
    strictly_normal: bool
    multipliers: list[float] | None = None
    costates: Rows | None = None
    max_residual: float | None = None
    rhs: list[float] | None = None


class SolveResponse(BaseModel):
    """Outcome of a solve command."""

    status: str
    cost: float
    certified_delta: float
    iterations: int
    penalty: float
    message: str
    rounds: list[PenaltyRoundResponse] = Field(default_factory=list)
    multipliers: MultiplierResponse | None = None
    normality: NormalityResponse | None = None
    trajectory: TrajectoryResponse


class MaximizationResponse(BaseModel):
    stage: int
    passed: bool
    gap: float


class ConstrainedResponse(BaseModel):
    lambda0: float
    degenerate: bool
    multipliers: list[float]
    complementary: list[float]
    penalty: float


class CheckResponse(BaseModel):
    """Necessary-condition residuals of a control sequence."""

    cost: float
    certified_delta: float
    per_stage_delta: list[float]
    costates: Rows
    residuals: Rows
    maximization: list[MaximizationResponse] | None = None
    constrained: ConstrainedResponse | None = None
    message: str = ""


class IntegrationStepResponse(BaseModel):
    step: int
    g: list[float]
    p: list[float]
    norm: float
    residual: float


class IntegrateResponse(BaseModel):
    steps: list[IntegrationStepResponse]


class SweepRowResponse(BaseModel):
    rhs: list[float]
    value: float | None = Field(None, description="Optimal value; null when the solve failed.")
    status: str


class SweepResponse(BaseModel):
    rows: list[SweepRowResponse]
    base_value: float | None
    calmness: float | None
    calm: bool


class RolloutRequest(BaseModel):
    problem: ProblemFile
    controls: Rows | None = Field(
        None,
        description="Controls to roll out; the problem's initial controls by default.",
    )


class CheckRequest(RolloutRequest):
    """Same body as a rollout."""


class SolveRequest(BaseModel):
    problem: ProblemFile


class IntegrateRequest(BaseModel):
    problem: ProblemFile
    steps: int | None = Field(
        None,
        ge=0,
        description="Number of steps; the problem horizon by default.",
    )


class SweepRequest(BaseModel):
    problem: ProblemFile
    scalars: list[float] = Field(
        ...,
        min_length=1,
        description="Scalars s of the perturbed right-hand sides rhs + s·direction.",
    )
    direction: list[float] | None = Field(
        None,
        description="Perturbation direction; all ones by default.",
    )
