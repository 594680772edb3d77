"""Solver option schema."""

from pydantic import BaseModel, ConfigDict, Field


class SolveOptions(BaseModel):
    """Options shared by the projected-gradient and penalty solvers."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    max_iters: int = Field(
        default=5000,
        ge=1,
        description="Iteration cap of one descent run.",
    )
    gradient_tolerance: float = Field(
        default=1e-8,
        gt=0,
        description="Stop when the per-stage stationarity measure is below this.",
    )
    armijo_c1: float = Field(
        default=1e-4,
        gt=0,
        lt=1,
        description="Sufficient-decrease constant of the line search.",
    )
    backtrack: float = Field(
        default=0.5,
        gt=0,
        lt=1,
        description="Step shrink factor of the line search.",
    )
    initial_step: float = Field(
        default=1.0,
        gt=0,
        description="First trial step length.",
    )
    max_backtracks: int = Field(
        default=60,
        ge=1,
        description="Backtracks allowed before the run stops.",
    )
    kappa0: float = Field(
        default=1.0,
        gt=0,
        description="Initial penalty weight.",
    )
    kappa_growth: float = Field(
        default=10.0,
        gt=1,
        description="Factor applied to the penalty weight after each round.",
    )
    max_outer_rounds: int = Field(
        default=8,
        ge=1,
        description="Penalty rounds before giving up.",
    )
    seed: int = Field(
        default=0,
        ge=0,
        description="Seed for every randomized check.",
    )
