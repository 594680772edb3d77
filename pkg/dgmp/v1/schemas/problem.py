"""Problem file schema."""

from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from dgmp.v1.schemas.solver import SolveOptions

Matrix = list[list[float]]


class StrictModel(BaseModel):
    """Base for problem file sections; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")


class ManifoldSpec(StrictModel):
    kind: Literal["euclidean", "so3"] = Field(
        ...,
        description="State manifold family.",
    )
    dim: int | None = Field(
        None,
        ge=0,
        description="Dimension of a Euclidean state space.",
    )
    metric: Matrix | None = Field(
        None,
        description="Constant metric gram matrix; identity when omitted.",
    )

    @model_validator(mode="after")
    def check_dimension(self) -> "ManifoldSpec":
        if self.kind == "euclidean" and self.dim is None:
            raise ValueError("a euclidean manifold needs 'dim'")
        if self.kind == "so3" and self.dim not in (None, 3):
            raise ValueError("so3 has dimension 3")
        return self


class BuiltinSpec(StrictModel):
    name: str = Field(
        ...,
        description="Registry name of the builtin.",
    )
    params: dict[str, Any] = Field(
        default_factory=dict,
        description="Builtin parameters.",
    )


class ControlSetSpec(StrictModel):
    kind: Literal["whole", "box", "polytope", "ball"] = Field(
        "whole",
        description="Control set family.",
    )
    lower: list[float] | None = None
    upper: list[float] | None = None
    A: Matrix | None = None
    b: list[float] | None = None
    center: list[float] | None = None
    radius: float | None = Field(None, ge=0)

    @model_validator(mode="after")
    def check_fields(self) -> "ControlSetSpec":
        required = {
            "whole": (),
            "box": ("lower", "upper"),
            "polytope": ("A", "b"),
            "ball": ("center", "radius"),
        }[self.kind]
        missing = [name for name in required if getattr(self, name) is None]
        if missing:
            raise ValueError(f"{self.kind} control set needs {', '.join(missing)}")
        return self


class ConstraintSpec(StrictModel):
    stage: int | Literal["endpoint"] = Field(
        ...,
        description="Stage index or 'endpoint'.",
    )
    kind: Literal["ineq", "eq"] = Field(
        ...,
        description="Inequality g <= rhs or equality h = rhs.",
    )
    name: str = Field(
        ...,
        description="Registry name of the constraint builtin.",
    )
    params: dict[str, Any] = Field(default_factory=dict)
    rhs: float = Field(
        0.0,
        description="Right-hand side e of this constraint.",
    )


class IntegratorSpec(StrictModel):
    J_d: Matrix = Field(
        ...,
        description="Symmetric positive-definite inertia-like matrix.",
    )
    h: float = Field(
        ...,
        gt=0,
        description="Step size.",
    )
    potential: BuiltinSpec = Field(
        default_factory=lambda: BuiltinSpec(name="none"),
        description="Potential builtin.",
    )
    initial_momentum: list[float] = Field(
        ...,
        min_length=3,
        max_length=3,
        description="Momentum p_0 in body coordinates.",
    )


class ProblemFile(StrictModel):
    """A complete problem definition."""

    manifold: ManifoldSpec
    horizon: int = Field(
        ...,
        ge=0,
        description="Number of stages n.",
    )
    initial_state: list[float] | Matrix = Field(
        ...,
        description="q_0: a vector, or a 3x3 rotation on so3.",
    )
    control_dim: int | None = Field(
        None,
        ge=0,
        description="Dimension of Euclidean controls.",
    )
    control_metric: Matrix | None = None
    dynamics: BuiltinSpec
    cost: BuiltinSpec
    control_sets: list[ControlSetSpec] = Field(
        default_factory=lambda: [ControlSetSpec()],
        min_length=1,
        description="One set for every stage, or a single set shared by all.",
    )
    constraints: list[ConstraintSpec] = Field(default_factory=list)
    pure_state: bool = False
    initial_controls: list[list[float]] | None = None
    integrator: IntegratorSpec | None = None
    solver: SolveOptions = Field(default_factory=SolveOptions)

    @model_validator(mode="after")
    def check_layout(self) -> "ProblemFile":
        if len(self.control_sets) not in (1, self.horizon):
            raise ValueError("control_sets must have one entry or one per stage")
        for constraint in self.constraints:
            stage = constraint.stage
            if stage != "endpoint" and not 0 <= stage < self.horizon:
                raise ValueError(f"constraint stage {stage} outside 0..{self.horizon - 1}")
        if self.initial_controls is not None and len(self.initial_controls) != self.horizon:
            raise ValueError("initial_controls must have one row per stage")
        return self
