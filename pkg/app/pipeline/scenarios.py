"""
Built-in scenario catalog.

Every scenario is a :class:`ScenarioConfig` built from plain chart specs. Collar
coordinates are (u, s): u runs along the boundary and s <= 0 is the manifold
side, so half-ball charts use x2 <= 0 throughout.
"""

import math
from collections.abc import Callable

from app.errors import SpecError
from app.schemas import (
    BoundarySpec,
    BoxSpec,
    ChartSpec,
    CurvatureSpec,
    DomainSpec,
    EtaSpec,
    ExhaustionSpec,
    GeodesicSpec,
    GlueSpec,
    ManifoldSpec,
    ScenarioConfig,
    ScenarioInfo,
    Stage,
    TransitionSpec,
)

TWO_PI = 2.0 * math.pi


def _diag(a: str, b: str | None = None) -> list[list[str]]:
    return [[a, "0"], ["0", a if b is None else b]]


def _strip_chart(chart_id: str, metric: list[list[str]], u_lo: float, u_hi: float, depth: float) -> ChartSpec:
    """Half-ball chart whose sampling window is [u_lo, u_hi] x [-depth, 0]."""
    half = 0.5 * (u_hi - u_lo)
    return ChartSpec(
        id=chart_id,
        domain=DomainSpec(kind="half_ball", center=[u_lo + half, 0.0], radius=math.hypot(half, depth) + 1.0),
        metric=metric,
        window=BoxSpec(lower=[u_lo, -depth], upper=[u_hi, 0.0]),
    )


def _strip(
    name: str,
    chart_id: str,
    component: str,
    metric: list[list[str]],
    depth: float,
    width: tuple[float, float],
    period: float | None = None,
) -> ManifoldSpec:
    """One boundary strip; with ``period`` the u-direction closes up into a circle."""
    chart = _strip_chart(chart_id, metric, width[0], width[1], depth)
    transitions = []
    if period is not None:
        transitions.append(
            TransitionSpec(
                source=chart_id,
                target=chart_id,
                forward=[f"x1 - {period!r}", "x2"],
                overlap=BoxSpec(lower=[width[0] + period, -depth], upper=[width[1], 0.0]),
            )
        )
    return ManifoldSpec(
        name=name,
        charts=[chart],
        transitions=transitions,
        boundary=[BoundarySpec(id=component, chart=chart_id, period=period)],
    )


def _cusp_metric(rate: int) -> list[list[str]]:
    # in Q coordinates y = -s, so the collar carries exp(2 - rate * s)
    return _diag(f"exp(2 + {rate}*x2)")


# ============================================
# Glue scenarios
# ============================================


def flat_double() -> ScenarioConfig:
    width = (-2.0, 2.0)
    m = _strip("half-plane-M", "m", "edge", _diag("1"), 4.0, width)
    q = _strip("half-plane-Q", "q", "edge", _diag("1"), 4.0, width)
    return ScenarioConfig(
        name="flat-double",
        description="Two flat closed half-planes glued by the identity; extension is exact and factor is 1",
        glue=GlueSpec(M=m, Q=q, eta=[EtaSpec(component="edge")]),
        resolution=0.05,
        exhaustion=ExhaustionSpec(metric="ref", base="interface", origin=[0.0, 0.0], step=1.0, levels=6),
        test_radii=[0.5],
        geodesics=[
            GeodesicSpec(
                id="crossing",
                chart="collar:edge",
                position=[-0.6, -0.8],
                direction=[3.0, 4.0],
                length=2.0,
                expected_end=[0.6, 0.8],
                reversible=True,
            )
        ],
    )


def circle_boundary() -> ScenarioConfig:
    width = (0.0, TWO_PI + 0.2)
    # exterior of the unit disk in polar coordinates (theta, s), radius 1 - s
    m = _strip("disk-exterior", "outer", "circle", _diag("(1 - x2)^2", "1"), 2.0, width, TWO_PI)
    # the unit disk, radius 1 + y with y = -s
    q = _strip("disk", "inner", "circle", _diag("(1 + x2)^2", "1"), 0.9, width, TWO_PI)
    return ScenarioConfig(
        name="circle-boundary",
        description="Plane minus the open unit disk, filled back in; reflection stretch (1+s)/(1-s)",
        glue=GlueSpec(M=m, Q=q, eta=[EtaSpec(component="circle")]),
        resolution=0.05,
        epsilon=1.0,
        exhaustion=ExhaustionSpec(metric="ref", base="interface", origin=[1.0, 0.0], step=0.5, levels=6),
        test_radii=[0.25],
        geodesics=[
            GeodesicSpec(
                id="radial",
                chart="collar:circle",
                position=[1.0, -1.0],
                direction=[0.0, 1.0],
                length=1.5,
                expected_end=[1.0, 0.5],
            )
        ],
    )


def disk_patch() -> ScenarioConfig:
    width = (0.0, TWO_PI + 0.2)
    m = _strip("disk", "disk", "circle", _diag("(1 + x2)^2", "1"), 0.9, width, TWO_PI)
    q = _strip("disk-exterior", "plane", "circle", _diag("(1 - x2)^2", "1"), 1.0, width, TWO_PI)
    return ScenarioConfig(
        name="disk-patch",
        description="Closed flat unit disk extended by an outer annulus; convex boundary keeps its sign",
        glue=GlueSpec(M=m, Q=q, eta=[EtaSpec(component="circle")]),
        resolution=0.05,
        exhaustion=ExhaustionSpec(metric="ref", base="interface", origin=[1.0, 0.0], step=0.25, levels=8),
        test_radii=[0.2],
        curvature=CurvatureSpec(bound=1.0, sense="<", preserve_convexity=True),
        geodesics=[
            GeodesicSpec(
                id="radial",
                chart="collar:circle",
                position=[2.0, -0.5],
                direction=[0.0, 1.0],
                length=1.0,
                expected_end=[2.0, 0.5],
            )
        ],
    )


def disk_double() -> ScenarioConfig:
    width = (0.0, TWO_PI + 0.2)
    m = _strip("disk", "disk", "circle", _diag("(1 + x2)^2", "1"), 0.9, width, TWO_PI)
    q = m.model_copy(update={"name": "disk-copy"})
    return ScenarioConfig(
        name="disk-double",
        description="Self-double of the closed unit disk along the identity; compact, no deformation needed",
        glue=GlueSpec(M=m, Q=q),
        resolution=0.05,
        exhaustion=ExhaustionSpec(metric="ref", base="interface", origin=[1.0, 0.0], step=0.25, levels=8),
        test_radii=[0.2],
    )


def cusp_tail() -> ScenarioConfig:
    width = (0.0, 0.25)
    m = _strip("cylinder", "base", "end", _diag("exp(2)"), 1.0, width, 0.2)
    q = _strip("cusp", "tail", "end", _cusp_metric(2), 8.0, width, 0.2)
    return ScenarioConfig(
        name="cusp-tail",
        description="Cylinder capped by a cusp of finite length; the conformal factor makes it complete",
        glue=GlueSpec(M=m, Q=q, eta=[EtaSpec(component="end")]),
        resolution=0.02,
        exhaustion=ExhaustionSpec(metric="ref", base="interface", step=1.0, levels=7),
        test_radii=[3.0],
        min_growth=0.95,
        geodesics=[
            GeodesicSpec(
                id="into-cusp",
                chart="collar:end",
                position=[0.1, -0.5],
                direction=[0.0, 1.0],
                length=1.0,
                expected_end=[0.1, -0.5 + math.exp(-1.0)],
            )
        ],
    )


def two_tail() -> ScenarioConfig:
    width = (0.0, 0.25)
    left = _strip_chart("left", _diag("exp(2)"), *width, 1.0)
    right = _strip_chart("right", _diag("exp(2)"), *width, 1.0)
    slow = _strip_chart("slow", _cusp_metric(2), *width, 7.0)
    fast = _strip_chart("fast", _cusp_metric(4), *width, 7.0)

    def periodic(chart_id: str, depth: float) -> TransitionSpec:
        return TransitionSpec(
            source=chart_id,
            target=chart_id,
            forward=["x1 - 0.2", "x2"],
            overlap=BoxSpec(lower=[0.2, -depth], upper=[0.25, 0.0]),
        )

    m = ManifoldSpec(
        name="two-cylinders",
        charts=[left, right],
        transitions=[periodic("left", 1.0), periodic("right", 1.0)],
        boundary=[
            BoundarySpec(id="a", chart="left", period=0.2),
            BoundarySpec(id="b", chart="right", period=0.2),
        ],
    )
    q = ManifoldSpec(
        name="two-cusps",
        charts=[slow, fast],
        transitions=[periodic("slow", 7.0), periodic("fast", 7.0)],
        boundary=[
            BoundarySpec(id="a", chart="slow", period=0.2),
            BoundarySpec(id="b", chart="fast", period=0.2),
        ],
    )
    return ScenarioConfig(
        name="two-tail",
        description="Two cylinders capped by cusps with different decay rates (two annulus components per level)",
        glue=GlueSpec(M=m, Q=q),
        resolution=0.025,
        exhaustion=ExhaustionSpec(metric="ref", base="interface", step=1.0, levels=6),
        test_radii=[3.0],
    )


def hyperbolic_collar() -> ScenarioConfig:
    width = (-1.0, 1.0)
    # upper half-plane at height y = 2 - s, curvature -1
    m = _strip("hyperbolic-slab", "upper", "horocycle", _diag("1/(2 - x2)^2"), 1.0, width)
    q = _strip("flat-slab", "flat", "horocycle", _diag("0.25"), 1.0, width)
    return ScenarioConfig(
        name="hyperbolic-collar",
        description="Hyperbolic slab (K = -1) extended by a flat slab; K < -0.5 persists on a collar",
        glue=GlueSpec(M=m, Q=q),
        resolution=0.05,
        exhaustion=ExhaustionSpec(metric="ref", base="interface", origin=[0.0, 0.0], step=0.5, levels=4),
        test_radii=[0.2],
        curvature=CurvatureSpec(bound=-0.5, sense="<"),
    )


# ============================================
# Manifold and geodesy scenarios
# ============================================


def open_disk() -> ScenarioConfig:
    manifold = ManifoldSpec(
        name="open-unit-disk",
        charts=[
            ChartSpec(id="disk", domain=DomainSpec(kind="ball", radius=1.0, open=True), metric=_diag("1")),
        ],
    )
    return ScenarioConfig(
        name="open-disk",
        description="Flat open unit disk: incomplete, with a divergent path of length about 1",
        kind="manifold",
        manifold=manifold,
        stages=[Stage.CERTIFY, Stage.GEODESY],
        resolution=0.02,
        windows=[0.5, 0.8, 0.9],
        exhaustion=ExhaustionSpec(metric="base", base="origin", origin=[0.0, 0.0]),
        test_radii=[1.5],
        geodesics=[
            GeodesicSpec(
                id="outward", chart="disk", position=[0.0, 0.0], direction=[1.0, 0.0], length=2.0,
                tag="base", expect_hit=True,
            )
        ],
    )


def half_plane() -> ScenarioConfig:
    manifold = ManifoldSpec(
        name="closed-half-plane",
        charts=[
            ChartSpec(
                id="half",
                domain=DomainSpec(kind="half_ball", radius=10.0),
                metric=_diag("1"),
                window=BoxSpec(lower=[-4.0, -4.0], upper=[4.0, 0.0]),
            )
        ],
        boundary=[BoundarySpec(id="edge", chart="half")],
    )
    return ScenarioConfig(
        name="half-plane",
        description="Flat closed half-plane: complete up to budget, divergent paths outgrow every window",
        kind="manifold",
        manifold=manifold,
        stages=[Stage.CERTIFY, Stage.GEODESY],
        resolution=0.05,
        windows=[1.0, 2.0, 3.0],
        exhaustion=ExhaustionSpec(metric="base", base="origin", origin=[0.0, 0.0]),
        test_radii=[1.5],
        geodesics=[
            GeodesicSpec(
                id="along-edge", chart="half", position=[-1.0, -1.0], direction=[1.0, 0.0], length=2.0,
                tag="base", expected_end=[1.0, -1.0], expect_hit=False, reversible=True,
            )
        ],
    )


def sphere_suite() -> ScenarioConfig:
    conformal = "4/(1 + x1^2 + x2^2)^2"
    manifold = ManifoldSpec(
        name="stereographic-sphere",
        charts=[ChartSpec(id="stereo", domain=DomainSpec(kind="ball", radius=3.0), metric=_diag(conformal))],
    )
    return ScenarioConfig(
        name="sphere-suite",
        description="Round unit sphere in a stereographic chart: K = 1, closed great circle, Riccati checks",
        kind="geodesy",
        manifold=manifold,
        stages=[Stage.GEODESY],
        resolution=0.1,
        curvature=CurvatureSpec(bound=0.5, sense=">", constant=1.0),
        geodesics=[
            GeodesicSpec(
                id="great-circle", chart="stereo", position=[1.0, 0.0], direction=[0.0, 1.0], length=TWO_PI,
                tag="base", closed=True, reversible=True,
            )
        ],
    )


CATALOG: dict[str, Callable[[], ScenarioConfig]] = {
    "flat-double": flat_double,
    "circle-boundary": circle_boundary,
    "disk-patch": disk_patch,
    "disk-double": disk_double,
    "cusp-tail": cusp_tail,
    "two-tail": two_tail,
    "hyperbolic-collar": hyperbolic_collar,
    "open-disk": open_disk,
    "half-plane": half_plane,
    "sphere-suite": sphere_suite,
}


def list_scenarios(name_filter: str | None = None) -> list[ScenarioInfo]:
    """Catalog entries whose name contains ``name_filter`` (all when None)."""
    infos = []
    for name, build in CATALOG.items():
        if name_filter and name_filter.lower() not in name:
            continue
        cfg = build()
        infos.append(ScenarioInfo(name=name, description=cfg.description, kind=cfg.kind))
    return infos


def get_scenario(name: str) -> ScenarioConfig:
    try:
        return CATALOG[name]()
    except KeyError as exc:
        raise SpecError(f"unknown scenario {name!r}; known: {sorted(CATALOG)}") from exc
