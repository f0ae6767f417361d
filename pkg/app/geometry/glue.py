"""Gluing two manifolds along diffeomorphic boundaries through product collars.

Every boundary component of M is paired (in declaration order) with one of Q.
The two half-ball charts carrying the pair are replaced by a single collar chart
with coordinates ``(u, s)``: ``s <= 0`` is M's chart unchanged, ``s >= 0`` is Q's
chart pulled back through ``(u, s) -> (eta(u), -s)``. Interface points therefore
get exactly one mesh vertex.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np

from app.errors import SpecError
from app.geometry.atlas import (
    Box,
    BoundaryComponent,
    Chart,
    ChartSide,
    DomainKind,
    ManifoldWithBoundary,
    MetricField,
    TransitionMap,
)
from app.geometry.expr import ExprAST, parse_expr, where
from app.schemas import EtaSpec

logger = logging.getLogger(__name__)

COLLAR_PREFIX = "collar:"
ETA_SAMPLES = 256
ETA_TOL = 1e-9


# ============================================
# Boundary diffeomorphisms
# ============================================


@dataclass(frozen=True, eq=False)
class BoundaryDiffeo:
    """eta and its inverse for one boundary component, in the boundary parameter."""

    component: str
    forward: tuple[ExprAST, ...]
    inverse: tuple[ExprAST, ...]
    orientation: int = 1

    @classmethod
    def identity(cls, component: str, dim: int) -> "BoundaryDiffeo":
        coords = tuple(ExprAST.variable(i, dim - 1) for i in range(dim - 1))
        return cls(component, coords, coords, 1)

    def apply(self, u: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(u)
        return np.stack([f.evaluate(pts) for f in self.forward], axis=1)

    def apply_inverse(self, v: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(v)
        return np.stack([f.evaluate(pts) for f in self.inverse], axis=1)


def _parameter_samples(box: Box, count: int) -> np.ndarray:
    k = len(box.lower)
    per_axis = max(2, math.ceil(count ** (1.0 / k)))
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(box.lower, box.upper, strict=True)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, k)
    return grid[:count] if k == 1 else grid


def _wrapped(diff: np.ndarray, period: float | None) -> np.ndarray:
    if period is None:
        return diff
    return (diff + 0.5 * period) % period - 0.5 * period


def make_boundary_diffeo(
    spec: EtaSpec, dim: int, parameter_box: Box, period: float | None = None
) -> BoundaryDiffeo:
    """
    Parse eta and check it against its inverse on a parameter grid.

    For m > 2 the forward and inverse strings hold one expression per tangential
    coordinate separated by ``;``.

    Raises:
        SpecError: Wrong component count, round trip off by more than 1e-9, or a
            Jacobian that vanishes or changes sign
    """
    k = dim - 1
    fwd_text = [t for t in spec.forward.split(";") if t.strip()]
    inv_text = [t for t in spec.inverse.split(";") if t.strip()]
    if len(fwd_text) != k or len(inv_text) != k:
        raise SpecError(f"eta for {spec.component!r} needs {k} component(s)")
    eta = BoundaryDiffeo(
        spec.component,
        tuple(parse_expr(t, k) for t in fwd_text),
        tuple(parse_expr(t, k) for t in inv_text),
    )
    u = _parameter_samples(parameter_box, ETA_SAMPLES)
    v = eta.apply(u)
    for label, err in (
        ("eta^-1(eta(u))", _wrapped(eta.apply_inverse(v) - u, period)),
        ("eta(eta^-1(v))", _wrapped(eta.apply(eta.apply_inverse(v)) - v, period)),
    ):
        worst = float(np.max(np.abs(err)))
        if worst > ETA_TOL:
            raise SpecError(f"eta for {spec.component!r} is not invertible: {label} off by {worst:.3g}")
    jac = np.stack([np.stack([f.diff(j).evaluate(u) for j in range(k)], axis=-1) for f in eta.forward], axis=1)
    det = np.linalg.det(jac.reshape(len(u), k, k))
    if np.any(np.abs(det) < 1e-12) or (np.any(det > 0) and np.any(det < 0)):
        raise SpecError(f"eta for {spec.component!r} is not a diffeomorphism on the sampled boundary")
    return replace(eta, orientation=1 if det[0] > 0 else -1)


# ============================================
# Glued manifold
# ============================================


@dataclass(frozen=True, eq=False)
class CollarChart:
    """One interface collar: coordinates (u, s), M for s <= 0 and Q for s >= 0."""

    component: str
    chart_id: str
    m_chart: str
    q_chart: str
    eta: BoundaryDiffeo
    phi: tuple[ExprAST, ...]
    phi_inverse: tuple[ExprAST, ...]
    g_m: MetricField
    g_q: MetricField
    period: float | None
    depth_m: float
    depth_q: float


@dataclass(frozen=True, eq=False)
class GluedManifold:
    """N = M glued to Q along eta, as a single atlas with collar charts."""

    name: str
    m: ManifoldWithBoundary
    q: ManifoldWithBoundary
    atlas: ManifoldWithBoundary
    collars: tuple[CollarChart, ...]

    @property
    def dim(self) -> int:
        return self.atlas.dim

    def collar(self, key: str) -> CollarChart:
        for c in self.collars:
            if key in (c.component, c.chart_id):
                return c
        raise SpecError(f"{self.name}: no collar for {key!r}")

    def orientations(self) -> dict[str, int]:
        return {c.component: c.eta.orientation for c in self.collars}


def _lift(exprs: Sequence[ExprAST], dim: int) -> list[ExprAST]:
    coords = [ExprAST.variable(i, dim) for i in range(dim - 1)]
    return [e.substitute(coords) for e in exprs]


def _collar_maps(eta: BoundaryDiffeo, dim: int) -> tuple[tuple[ExprAST, ...], tuple[ExprAST, ...]]:
    s = ExprAST.variable(dim - 1, dim)
    phi = (*_lift(eta.forward, dim), -s)
    phi_inv = (*_lift(eta.inverse, dim), -s)
    return phi, phi_inv


def _box_through(box: Box, maps: Sequence[ExprAST]) -> Box:
    corners = np.array(np.meshgrid(*zip(box.lower, box.upper, strict=True), indexing="ij")).reshape(len(box.lower), -1).T
    images = np.stack([f.evaluate(corners) for f in maps], axis=1)
    return Box(tuple(images.min(axis=0)), tuple(images.max(axis=0)))


def _collar_chart(cid: str, cm: Chart, cq: Chart, g: MetricField, depth_m: float, depth_q: float) -> Chart:
    m_box = cm.bounding_box()
    window = Box((*m_box.lower[:-1], -depth_m), (*m_box.upper[:-1], depth_q))
    return Chart(
        id=cid,
        dim=cm.dim,
        kind=DomainKind.BALL,
        center=cm.center,
        radius=max(cm.radius, cq.radius),
        metrics={"base": g},
        window=window,
        open=cm.open,
        side=ChartSide.COLLAR,
    )


def _extend_overlap(box: Box, depth_q: float) -> Box:
    if box.upper[-1] < -1e-9:
        return box
    return Box(box.lower, (*box.upper[:-1], depth_q))


def glue(
    m: ManifoldWithBoundary, q: ManifoldWithBoundary, etas: Sequence[BoundaryDiffeo], name: str | None = None
) -> GluedManifold:
    """
    Glue ``q`` to ``m`` along the boundary maps ``etas`` (one per M component).

    Components are paired in declaration order; a component without an entry in
    ``etas`` is glued by the identity.

    Raises:
        SpecError: Mismatched dimensions or boundary component counts, or a
            boundary component whose chart is not a half-ball
    """
    if m.dim != q.dim:
        raise SpecError(f"cannot glue dimension {m.dim} to dimension {q.dim}")
    if len(m.boundary) != len(q.boundary):
        raise SpecError(
            f"mismatched boundary components: M has {len(m.boundary)}, Q has {len(q.boundary)}"
        )
    if not m.boundary:
        raise SpecError("gluing needs at least one boundary component")
    dim = m.dim
    by_component = {e.component: e for e in etas}
    unknown = set(by_component) - {b.id for b in m.boundary}
    if unknown:
        raise SpecError(f"eta given for unknown boundary components {sorted(unknown)}")

    q_ids = {cid: f"Q:{cid}" for cid in q.charts}
    charts: dict[str, Chart] = {}
    collars: list[CollarChart] = []
    renamed_m: dict[str, str] = {}
    renamed_q: dict[str, str] = {}
    for bm, bq in zip(m.boundary, q.boundary, strict=True):
        cm, cq = m.chart(bm.chart), q.chart(bq.chart)
        eta = by_component.get(bm.id) or BoundaryDiffeo.identity(bm.id, dim)
        phi, phi_inv = _collar_maps(eta, dim)
        g_m = cm.metric("base")
        g_q = cq.metric("base").pullback(phi)
        s = ExprAST.variable(dim - 1, dim)
        g = MetricField(dim, tuple(where(s, a, b) for a, b in zip(g_m.entries, g_q.entries, strict=True)))
        depth_m = -cm.bounding_box().lower[-1]
        depth_q = -cq.bounding_box().lower[-1]
        cid = f"{COLLAR_PREFIX}{bm.id}"
        charts[cid] = _collar_chart(cid, cm, cq, g, depth_m, depth_q)
        renamed_m[cm.id] = cid
        renamed_q[cq.id] = cid
        collars.append(
            CollarChart(bm.id, cid, cm.id, cq.id, eta, phi, phi_inv, g_m, g_q, bm.period, depth_m, depth_q)
        )
        logger.debug(f"collar {cid}: M chart {cm.id}, Q chart {cq.id}, orientation {eta.orientation:+d}")

    for cid, chart in m.charts.items():
        if cid not in renamed_m:
            charts[cid] = replace(chart, side=ChartSide.M)
    for cid, chart in q.charts.items():
        if cid not in renamed_q:
            charts[q_ids[cid]] = replace(chart, id=q_ids[cid], side=ChartSide.Q)

    collar_of = {c.chart_id: c for c in collars}
    transitions: list[TransitionMap] = []
    for tr in m.transitions:
        src = renamed_m.get(tr.source, tr.source)
        tgt = renamed_m.get(tr.target, tr.target)
        overlap = tr.overlap
        if src in collar_of:
            overlap = _extend_overlap(overlap, collar_of[src].depth_q)
        transitions.append(TransitionMap(src, tgt, tr.forward, overlap))
    for tr in q.transitions:
        src = renamed_q.get(tr.source) or q_ids[tr.source]
        tgt = renamed_q.get(tr.target) or q_ids[tr.target]
        forward = tr.forward
        overlap = tr.overlap
        if src in collar_of:
            phi = collar_of[src].phi
            forward = tuple(f.substitute(phi) for f in forward)
            overlap = _box_through(overlap, collar_of[src].phi_inverse)
        if tgt in collar_of:
            forward = tuple(f.substitute(forward) for f in collar_of[tgt].phi_inverse)
        transitions.append(TransitionMap(src, tgt, forward, overlap))

    interface = tuple(BoundaryComponent(c.component, c.chart_id, c.period) for c in collars)
    title = name or f"{m.name}+{q.name}"
    atlas = ManifoldWithBoundary(title, dim, charts, tuple(transitions), interface)
    logger.info(f"🔗 Glued {title}: {len(charts)} charts, {len(collars)} collar(s)")
    return GluedManifold(title, m, q, atlas, tuple(collars))


def glue_from_spec(m: ManifoldWithBoundary, q: ManifoldWithBoundary, specs: Sequence[EtaSpec], name: str | None = None) -> GluedManifold:
    """Validate the eta specs against M's boundary parametrization, then glue."""
    etas = []
    for spec in specs:
        comp = next((b for b in m.boundary if b.id == spec.component), None)
        if comp is None:
            raise SpecError(f"eta given for unknown boundary component {spec.component!r}")
        box = m.chart(comp.chart).bounding_box()
        parameter_box = Box(box.lower[:-1], box.upper[:-1])
        etas.append(make_boundary_diffeo(spec, m.dim, parameter_box, comp.period))
    return glue(m, q, etas, name)


def collar_coordinates(
    n: GluedManifold, point: Sequence[float], chart: str | None = None
) -> tuple[tuple[float, ...], float]:
    """
    Collar coordinates ``(u, s)`` of a point given in a collar chart or in one of
    the original boundary charts of M or Q.

    Raises:
        SpecError: The point lies outside every collar
    """
    p = np.asarray(point, dtype=float)
    candidates = n.collars if chart is None else tuple(
        c for c in n.collars if chart in (c.chart_id, c.m_chart, c.q_chart, f"Q:{c.q_chart}")
    )
    if not candidates:
        raise SpecError(f"chart {chart!r} carries no collar")
    for c in candidates:
        local = p
        if chart is not None and chart in (c.q_chart, f"Q:{c.q_chart}") and chart != c.m_chart:
            local = np.array([float(f.evaluate(p)) for f in c.phi_inverse])
        if n.atlas.chart(c.chart_id).contains(local)[0]:
            return tuple(float(v) for v in local[:-1]), float(local[-1])
    raise SpecError(f"point {p.tolist()} lies outside the collar")
