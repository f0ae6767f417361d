"""Pydantic schemas for manifold spec files, scenario configuration and reports."""

from enum import Enum
from typing import Literal

from pydantic import BaseModel, Field, field_validator, model_validator


# ============================================
# Manifold spec files
# ============================================


class DomainSpec(BaseModel):
    """Chart domain: ball or half-ball (x_m <= 0)."""

    kind: Literal["ball", "half_ball"] = Field(..., description="Domain shape")
    center: list[float] | None = Field(None, description="Ball center (defaults to the origin)")
    radius: float = Field(..., gt=0, description="Ball radius in coordinate units")
    open: bool = Field(False, description="Exclude the round part of the boundary")


class BoxSpec(BaseModel):
    """Axis-aligned coordinate box."""

    lower: list[float] = Field(..., description="Lower corner")
    upper: list[float] = Field(..., description="Upper corner")

    @model_validator(mode="after")
    def _check(self) -> "BoxSpec":
        if len(self.lower) != len(self.upper):
            raise ValueError("box corners must have the same dimension")
        return self


class ChartSpec(BaseModel):
    """One chart of an atlas."""

    id: str = Field(..., description="Chart identifier")
    domain: DomainSpec
    metric: list[list[str]] = Field(..., description="Metric coefficients as expression strings")
    window: BoxSpec | None = Field(None, description="Sampling window in chart coordinates")


class TransitionSpec(BaseModel):
    """Transition map between two charts (or a chart and itself for periodic directions)."""

    source: str
    target: str
    forward: list[str] = Field(..., description="Target coordinates as expressions in source coordinates")
    overlap: BoxSpec = Field(..., description="Overlap box in source coordinates")


class BoundarySpec(BaseModel):
    """Boundary component parametrized by the tangential coordinates of a half-ball chart."""

    id: str
    chart: str
    period: float | None = Field(None, gt=0, description="Period for circle components")


class ManifoldSpec(BaseModel):
    """Chart atlas of a manifold with (possibly empty) boundary."""

    name: str = "manifold"
    dimension: int = Field(2, ge=1)
    charts: list[ChartSpec] = Field(..., min_length=1)
    transitions: list[TransitionSpec] = Field(default_factory=list)
    boundary: list[BoundarySpec] = Field(default_factory=list)
    window: BoxSpec | None = None
    resolution: float | None = Field(None, gt=0)


class EtaSpec(BaseModel):
    """Boundary diffeomorphism for one component, in the boundary parameter ``x1``."""

    component: str
    forward: str = "x1"
    inverse: str = "x1"


class GlueSpec(BaseModel):
    """Glue scenario block: M, Q and one eta per boundary component."""

    M: ManifoldSpec
    Q: ManifoldSpec
    eta: list[EtaSpec] = Field(default_factory=list)


# ============================================
# Scenario configuration
# ============================================


class Stage(str, Enum):
    """Pipeline stages in execution order."""

    GLUE = "glue"
    EXTEND = "extend"
    COMPLETE = "complete"
    CERTIFY = "certify"
    GEODESY = "geodesy"


ALL_STAGES = [Stage.GLUE, Stage.EXTEND, Stage.COMPLETE, Stage.CERTIFY, Stage.GEODESY]


class ExhaustionSpec(BaseModel):
    """How the exhaustion N_0 c N_1 c ... is built."""

    metric: str = Field("tilde", description="Metric tag used for the balls")
    base: Literal["origin", "interface"] = Field("origin", description="Base vertex or vertex set")
    origin: list[float] | None = Field(None, description="Base point when base='origin'")
    step: float = Field(1.0, gt=0)
    levels: int = Field(6, ge=1)


class CurvatureSpec(BaseModel):
    """Curvature-collar request."""

    bound: float
    sense: Literal["<", ">"] = "<"
    preserve_convexity: bool = False
    mean: bool = False
    constant: float | None = Field(None, description="Expected constant curvature, checked to 1e-8")


class GeodesicSpec(BaseModel):
    """One geodesic to shoot in the geodesy stage."""

    id: str
    chart: str
    position: list[float]
    direction: list[float]
    length: float = Field(..., gt=0)
    tag: str = Field("tilde", description="Metric tag (glue scenarios use the extended metric)")
    expected_end: list[float] | None = Field(None, description="Endpoint in the final chart, checked to 1e-4")
    expect_hit: bool | None = Field(None, description="Whether the geodesic must leave the atlas")
    closed: bool = Field(False, description="Must return to its start")
    reversible: bool = Field(False, description="Shooting back from the end must return to the start")


class ScenarioConfig(BaseModel):
    """Everything one pipeline run needs."""

    name: str
    description: str = ""
    kind: Literal["glue", "manifold", "geodesy"] = "glue"
    glue: GlueSpec | None = None
    manifold: ManifoldSpec | None = None
    stages: list[Stage] = Field(default_factory=lambda: list(ALL_STAGES))
    resolution: float = Field(0.05, gt=0)
    window: BoxSpec | None = None
    windows: list[float] = Field(default_factory=list, description="Growing window radii for diagnostics")
    epsilon: float = Field(1.0, gt=0)
    exhaustion: ExhaustionSpec = Field(default_factory=ExhaustionSpec)
    curvature: CurvatureSpec | None = None
    geodesics: list[GeodesicSpec] = Field(default_factory=list)
    support_q: float | None = Field(None, gt=0, description="Override for the Q-side partition support")
    test_radii: list[float] = Field(default_factory=lambda: [1.0])
    walks: int = Field(32, ge=0)
    min_growth: float | None = Field(
        None, gt=0, description="Required rise of the shortest divergent g_N-length per annulus (audited when set)"
    )
    audit_trials: int = Field(50, ge=1)
    seed: int = 0
    output_dir: str | None = None

    @field_validator("windows")
    @classmethod
    def _increasing(cls, value: list[float]) -> list[float]:
        if any(b <= a for a, b in zip(value, value[1:], strict=False)):
            raise ValueError("windows must be strictly increasing")
        return value

    @model_validator(mode="after")
    def _payload(self) -> "ScenarioConfig":
        if self.kind == "glue" and self.glue is None:
            raise ValueError("glue scenarios need a 'glue' block")
        if self.kind != "glue" and self.manifold is None:
            raise ValueError(f"{self.kind} scenarios need a 'manifold' block")
        return self


class ScenarioInfo(BaseModel):
    """Catalog entry."""

    name: str
    description: str
    kind: str


# ============================================
# Length-space reports
# ============================================


class Verdict(str, Enum):
    """Completeness verdicts."""

    COMPLETE = "complete-up-to-budget"
    INCOMPLETE = "incomplete-witness-found"


class BallRow(BaseModel):
    radius: float
    stabilized: bool
    level: int | None = Field(None, description="First window level where the ball is stable")


class PathLengthRow(BaseModel):
    level: int
    path_id: str
    length: float


class WitnessPath(BaseModel):
    path_id: str
    vertices: list[int]
    length: float = Field(..., description="Length of the tail after leaving the first window")
    total_length: float
    exits_all_windows: bool


class CompletenessReport(BaseModel):
    verdict: Verdict
    witness: WitnessPath | None = None
    balls: list[BallRow]
    divergent_lengths: list[PathLengthRow]
    growth_ok: bool
    paths_sampled: int
    walks_discarded: int
    diagnostics: list[str] = Field(default_factory=list)


# ============================================
# Extension reports
# ============================================


class CollarSampleRow(BaseModel):
    sample: int
    u: float
    s0: float
    max_dr: float


class LipschitzAudit(BaseModel):
    max_ratio: float
    bound: float
    passed: bool
    ratios: list[float]


# ============================================
# Completion reports
# ============================================


class CertificateRow(BaseModel):
    j: int
    component: int
    kind: Literal["q1", "q2"]
    value: float | None = Field(None, description="None encodes +inf-no-crossing")
    sampling: str


class CrossingCheck(BaseModel):
    j: int
    kind: Literal["a", "b"]
    component: int
    source: int
    target: int
    length: float
    bound: float
    passed: bool


class CrossingAudit(BaseModel):
    passed: bool
    checks: int
    failures: list[CrossingCheck]
    min_a: float | None = None
    min_b_ratio: float | None = None


class PathCase(BaseModel):
    path_id: str
    case: Literal[1, 2, 3]
    length: float
    bound: float
    holds: bool
    excursions: int = 0
    excursions_per_annulus: dict[int, int] = Field(default_factory=dict)


class ThreeCaseReport(BaseModel):
    passed: bool
    paths: list[PathCase]
    inconclusive: list[str] = Field(default_factory=list)


# ============================================
# Geodesy reports
# ============================================


class LambdaRow(BaseModel):
    sample: int
    t: float
    riccati: float
    measured: float


class CurvatureCollarReport(BaseModel):
    bound: float
    sense: Literal["<", ">"]
    depth: float
    collar_depth: float
    k_min: float
    k_max: float
    margin: float
    sign_preserved: bool
    mean_convexity: bool
    note: str = ""
    lambda_samples: list[LambdaRow] = Field(default_factory=list)


# ============================================
# Pipeline summary
# ============================================


class StageRecord(BaseModel):
    stage: str
    status: str
    result: dict | None = None


class RunSummary(BaseModel):
    scenario: str
    exit_code: int
    stages: list[StageRecord]
    audits: dict[str, bool]
    error: str | None = None
