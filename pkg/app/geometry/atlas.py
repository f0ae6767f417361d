"""Chart atlases with SPD metric fields and their sampled meshes.

A chart is a ball or half-ball (``x_m <= 0``) in R^m carrying one or more metric
fields under string tags. ``sample_mesh`` lays an h-spaced grid over every chart,
connects 8-neighbours (axes plus diagonals in 2D), measures edges with Gauss-Legendre
quadrature and identifies vertices through transition maps.
"""

import functools
import itertools
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy import sparse
from scipy.cluster.hierarchy import DisjointSet
from scipy.spatial import cKDTree

from app.config import tolerances
from app.errors import NumericGuardError, SPDError, SpecError
from app.geometry.expr import ExprAST, parse_expr
from app.schemas import BoxSpec, ManifoldSpec
from app.utils import gather_threads

logger = logging.getLogger(__name__)

REF_TAG = "ref"


@functools.cache
def _gauss_rule(nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    return 0.5 * (x + 1.0), 0.5 * w


def upper_pairs(dim: int) -> list[tuple[int, int]]:
    """Row-major (i, j) pairs with i <= j."""
    return [(i, j) for i in range(dim) for j in range(i, dim)]


# ============================================
# Metric fields
# ============================================


@dataclass(frozen=True, eq=False)
class MetricField:
    """Symmetric matrix of expressions; only the upper triangle is stored."""

    dim: int
    entries: tuple[ExprAST, ...]

    @classmethod
    def parse(cls, rows: Sequence[Sequence[str]], dim: int) -> "MetricField":
        if len(rows) != dim or any(len(row) != dim for row in rows):
            raise SpecError(f"metric must be a {dim}x{dim} matrix of expressions")
        for i, j in upper_pairs(dim):
            if i != j and rows[j][i].strip() != rows[i][j].strip():
                logger.warning(f"metric entry ({j + 1},{i + 1}) ignored; using the upper triangle")
        return cls(dim, tuple(parse_expr(rows[i][j], dim) for i, j in upper_pairs(dim)))

    @classmethod
    def identity(cls, dim: int, scale: ExprAST | float = 1.0) -> "MetricField":
        diag = scale if isinstance(scale, ExprAST) else ExprAST.constant(scale, dim)
        zero = ExprAST.constant(0.0, dim)
        return cls(dim, tuple(diag if i == j else zero for i, j in upper_pairs(dim)))

    @classmethod
    def from_matrix(cls, matrix: Sequence[Sequence[ExprAST]]) -> "MetricField":
        dim = len(matrix)
        return cls(dim, tuple(matrix[i][j] for i, j in upper_pairs(dim)))

    def component(self, i: int, j: int) -> ExprAST:
        if i > j:
            i, j = j, i
        return self.entries[upper_pairs(self.dim).index((i, j))]

    def rows(self) -> list[list[ExprAST]]:
        return [[self.component(i, j) for j in range(self.dim)] for i in range(self.dim)]

    def to_text(self) -> list[list[str]]:
        return [[entry.to_text() for entry in row] for row in self.rows()]

    def scaled(self, factor: ExprAST | float) -> "MetricField":
        return MetricField(self.dim, tuple(e * factor for e in self.entries))

    def __add__(self, other: "MetricField") -> "MetricField":
        return MetricField(self.dim, tuple(a + b for a, b in zip(self.entries, other.entries, strict=True)))

    def map_entries(self, fn) -> "MetricField":
        return MetricField(self.dim, tuple(fn(e) for e in self.entries))

    def pullback(self, phi: Sequence[ExprAST]) -> "MetricField":
        """Pull back through the coordinate map ``phi``: J^T G(phi) J."""
        composed = [[g.substitute(phi) for g in row] for row in self.rows()]
        jac = [[phi[a].diff(k) for k in range(self.dim)] for a in range(self.dim)]
        out: list[list[ExprAST]] = []
        for i in range(self.dim):
            row = []
            for j in range(self.dim):
                total = ExprAST.constant(0.0, self.dim)
                for a in range(self.dim):
                    for b in range(self.dim):
                        total = total + jac[a][i] * composed[a][b] * jac[b][j]
                row.append(total)
            out.append(row)
        return MetricField.from_matrix(out)

    # Numerical evaluation

    def matrix(self, points: np.ndarray) -> np.ndarray:
        """Metric matrices at points of shape (n, m) -> (n, m, m)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty((pts.shape[0], self.dim, self.dim))
        for (i, j), entry in zip(upper_pairs(self.dim), self.entries, strict=True):
            value = entry.evaluate(pts)
            out[:, i, j] = value
            out[:, j, i] = value
        return out

    @functools.cached_property
    def first(self) -> tuple[tuple[ExprAST, ...], ...]:
        return tuple(tuple(e.diff(k) for e in self.entries) for k in range(self.dim))

    @functools.cached_property
    def second(self) -> tuple[tuple[tuple[ExprAST, ...], ...], ...]:
        return tuple(
            tuple(tuple(e.diff(b) for e in self.first[k]) for b in range(self.dim))
            for k in range(self.dim)
        )

    def _fill(self, entries: Sequence[ExprAST], pts: np.ndarray) -> np.ndarray:
        out = np.empty((pts.shape[0], self.dim, self.dim))
        for (i, j), entry in zip(upper_pairs(self.dim), entries, strict=True):
            value = entry.evaluate(pts)
            out[:, i, j] = value
            out[:, j, i] = value
        return out

    def first_derivatives(self, points: np.ndarray) -> np.ndarray:
        """``d_k g_ij`` with shape (n, k, i, j)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.stack([self._fill(self.first[k], pts) for k in range(self.dim)], axis=1)

    def second_derivatives(self, points: np.ndarray) -> np.ndarray:
        """``d_l d_k g_ij`` with shape (n, k, l, i, j)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.stack(
            [
                np.stack([self._fill(self.second[k][b], pts) for b in range(self.dim)], axis=1)
                for k in range(self.dim)
            ],
            axis=1,
        )


# ============================================
# Charts, transitions, manifolds
# ============================================


class DomainKind(str, Enum):
    """Chart domain shapes."""

    BALL = "ball"
    HALF_BALL = "half_ball"


class ChartSide(str, Enum):
    """Which part of a glued manifold a chart's vertices belong to."""

    M = "M"
    Q = "Q"
    COLLAR = "collar"


@dataclass(frozen=True)
class Box:
    """Axis-aligned coordinate box."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        pts = np.atleast_2d(points)
        return np.all((pts >= np.asarray(self.lower) - tol) & (pts <= np.asarray(self.upper) + tol), axis=1)

    def intersect(self, other: "Box | None") -> "Box":
        if other is None:
            return self
        return Box(
            tuple(max(a, b) for a, b in zip(self.lower, other.lower, strict=True)),
            tuple(min(a, b) for a, b in zip(self.upper, other.upper, strict=True)),
        )

    def is_empty(self) -> bool:
        return any(lo > hi for lo, hi in zip(self.lower, self.upper, strict=True))


@dataclass(frozen=True, eq=False)
class Chart:
    """Coordinate patch: ball or half-ball (x_m <= 0) with tagged metric fields."""

    id: str
    dim: int
    kind: DomainKind
    center: tuple[float, ...]
    radius: float
    metrics: dict[str, MetricField]
    window: Box | None = None
    open: bool = False
    side: ChartSide = ChartSide.M

    @property
    def has_boundary(self) -> bool:
        return self.kind == DomainKind.HALF_BALL

    def metric(self, tag: str) -> MetricField:
        if tag in self.metrics:
            return self.metrics[tag]
        if tag == REF_TAG:
            return MetricField.identity(self.dim)
        raise SpecError(f"chart {self.id!r} carries no metric {tag!r}")

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        pts = np.atleast_2d(points)
        dist = np.linalg.norm(pts - np.asarray(self.center), axis=1)
        inside = dist < self.radius - tol if self.open else dist <= self.radius + tol
        if self.has_boundary:
            inside &= pts[:, -1] <= tol
        if self.window is not None:
            inside &= self.window.contains(pts, tol)
        return inside

    def bounding_box(self) -> Box:
        c = np.asarray(self.center)
        lower = c - self.radius
        upper = c + self.radius
        if self.has_boundary:
            upper[-1] = min(upper[-1], 0.0)
        return Box(tuple(lower), tuple(upper)).intersect(self.window)

    def with_metric(self, tag: str, metric: MetricField) -> "Chart":
        return replace(self, metrics={**self.metrics, tag: metric})


@dataclass(frozen=True, eq=False)
class TransitionMap:
    """Coordinate change from ``source`` to ``target`` on an overlap box of the source."""

    source: str
    target: str
    forward: tuple[ExprAST, ...]
    overlap: Box

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.stack([f.evaluate(pts) for f in self.forward], axis=1)

    @functools.cached_property
    def _jacobian_exprs(self) -> list[list[ExprAST]]:
        return [[f.diff(k) for k in range(len(self.forward))] for f in self.forward]

    def jacobian(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        m = len(self.forward)
        out = np.empty((pts.shape[0], m, m))
        for a in range(m):
            for k in range(m):
                out[:, a, k] = self._jacobian_exprs[a][k].evaluate(pts)
        return out


@dataclass(frozen=True)
class BoundaryComponent:
    """Boundary component parametrized by the tangential coordinates of a half-ball chart."""

    id: str
    chart: str
    period: float | None = None


@dataclass(frozen=True, eq=False)
class ManifoldWithBoundary:
    """A chart atlas; the boundary may be empty."""

    name: str
    dim: int
    charts: dict[str, Chart]
    transitions: tuple[TransitionMap, ...] = ()
    boundary: tuple[BoundaryComponent, ...] = ()

    def chart(self, chart_id: str) -> Chart:
        try:
            return self.charts[chart_id]
        except KeyError as exc:
            raise SpecError(f"{self.name}: unknown chart {chart_id!r}") from exc

    def metric_tags(self) -> set[str]:
        tags = {REF_TAG}
        if self.charts:
            tags |= set.intersection(*(set(c.metrics) for c in self.charts.values()))
        return tags


# ============================================
# SPD check
# ============================================


@dataclass(frozen=True)
class SPDReport:
    chart: str
    min_eigenvalue: float
    argmin: tuple[float, ...]
    points: int

    @property
    def accepted(self) -> bool:
        return self.min_eigenvalue > 0


def grid_points(box: Box, step: float) -> np.ndarray:
    """Grid points k*step inside ``box`` (grid anchored at the coordinate origin)."""
    axes = []
    for lo, hi in zip(box.lower, box.upper, strict=True):
        k_lo = int(np.ceil(lo / step - 1e-9))
        k_hi = int(np.floor(hi / step + 1e-9))
        axes.append(np.arange(k_lo, k_hi + 1) * step)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def check_spd(chart: Chart, grid_step: float, tag: str = "base") -> SPDReport:
    """
    Scan the smallest metric eigenvalue over a grid of the chart domain.

    Raises:
        SpecError: ``grid_step`` not smaller than the chart radius
        NumericGuardError: Non-finite coefficient at a grid point
    """
    if grid_step <= 0 or grid_step >= chart.radius:
        raise SpecError(f"grid step {grid_step} must lie in (0, {chart.radius})")
    pts = grid_points(chart.bounding_box(), grid_step)
    pts = pts[chart.contains(pts)]
    if len(pts) == 0:
        raise SpecError(f"chart {chart.id!r}: grid has no points in the domain")
    mats = chart.metric(tag).matrix(pts)
    if not np.all(np.isfinite(mats)):
        bad = pts[np.argmax(~np.all(np.isfinite(mats), axis=(1, 2)))]
        raise NumericGuardError(f"chart {chart.id!r}: non-finite metric coefficient at {bad.tolist()}")
    eig = np.linalg.eigvalsh(mats)[:, 0]
    idx = int(np.argmin(eig))
    report = SPDReport(chart.id, float(eig[idx]), tuple(float(v) for v in pts[idx]), len(pts))
    logger.debug(f"SPD scan {chart.id}/{tag}: min eigenvalue {report.min_eigenvalue:.6g} over {len(pts)} points")
    return report


# ============================================
# Meshes
# ============================================


@dataclass(frozen=True, eq=False)
class Mesh:
    """Sampled vertex/edge graph with per-tag edge lengths."""

    coords: np.ndarray
    vertex_chart: np.ndarray
    chart_ids: tuple[str, ...]
    edges: np.ndarray
    lengths: dict[str, np.ndarray]
    in_m: np.ndarray
    in_q: np.ndarray
    on_boundary: np.ndarray
    boundary_component: np.ndarray
    h: float
    edge_chart: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def n_vertices(self) -> int:
        return len(self.coords)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def chart_of(self, vertex: int) -> str:
        return self.chart_ids[int(self.vertex_chart[vertex])]

    def edge_lengths(self, tag: str) -> np.ndarray:
        try:
            return self.lengths[tag]
        except KeyError as exc:
            raise SpecError(f"mesh has no metric {tag!r}; registered: {sorted(self.lengths)}") from exc

    def graph(self, tag: str, mask: np.ndarray | None = None) -> sparse.csr_matrix:
        """Symmetric weighted adjacency, optionally restricted to vertices in ``mask``."""
        weights = self.edge_lengths(tag)
        u, v = self.edges[:, 0], self.edges[:, 1]
        keep = np.ones(len(u), dtype=bool) if mask is None else (mask[u] & mask[v])
        rows = np.concatenate([u[keep], v[keep]])
        cols = np.concatenate([v[keep], u[keep]])
        data = np.concatenate([weights[keep], weights[keep]])
        return sparse.csr_matrix((data, (rows, cols)), shape=(self.n_vertices, self.n_vertices))

    @functools.cached_property
    def adjacency(self) -> sparse.csr_matrix:
        u, v = self.edges[:, 0], self.edges[:, 1]
        ones = np.ones(2 * len(u), dtype=np.int8)
        return sparse.csr_matrix(
            (ones, (np.concatenate([u, v]), np.concatenate([v, u]))),
            shape=(self.n_vertices, self.n_vertices),
        )

    def neighbors(self, vertex: int) -> np.ndarray:
        adj = self.adjacency
        return adj.indices[adj.indptr[vertex] : adj.indptr[vertex + 1]]

    def with_lengths(self, tag: str, lengths: np.ndarray) -> "Mesh":
        if lengths.shape != (self.n_edges,) or not np.all(np.isfinite(lengths)) or np.any(lengths <= 0):
            raise NumericGuardError(f"edge lengths for {tag!r} must be positive and finite")
        return replace(self, lengths={**self.lengths, tag: lengths})

    def nearest_vertex(self, point: Sequence[float], chart_id: str | None = None) -> int:
        pts = self.coords
        candidates = np.arange(self.n_vertices)
        if chart_id is not None:
            candidates = candidates[self.vertex_chart == self.chart_ids.index(chart_id)]
        d = np.linalg.norm(pts[candidates] - np.asarray(point, dtype=float), axis=1)
        return int(candidates[np.argmin(d)])


def gauss_segment_lengths(
    metric: MetricField, a: np.ndarray, b: np.ndarray, nodes: int | None = None
) -> np.ndarray:
    """Gauss-Legendre length of coordinate segments a_i -> b_i (``tolerances.gauss_nodes`` points)."""
    t, w = _gauss_rule(tolerances.gauss_nodes if nodes is None else nodes)
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    d = b - a
    pts = (a[:, None, :] + t[None, :, None] * d[:, None, :]).reshape(-1, a.shape[1])
    mats = metric.matrix(pts).reshape(len(a), len(t), a.shape[1], a.shape[1])
    quad = np.einsum("ei,eqij,ej->eq", d, mats, d)
    if np.any(~np.isfinite(quad)) or np.any(quad <= 0):
        raise NumericGuardError("metric is not positive along a sampled segment")
    return np.sqrt(quad) @ w


def _neighbor_offsets(dim: int) -> list[tuple[int, ...]]:
    offsets = []
    for off in itertools.product((-1, 0, 1), repeat=dim):
        nonzero = [o for o in off if o != 0]
        if nonzero and nonzero[0] > 0:
            offsets.append(off)
    return offsets


@dataclass
class _ChartSample:
    coords: np.ndarray
    edges: np.ndarray
    lengths: dict[str, np.ndarray]


def _sample_chart(chart: Chart, h: float, window: Box | None, tags: Sequence[str]) -> _ChartSample:
    box = chart.bounding_box().intersect(window)
    if box.is_empty():
        return _ChartSample(np.zeros((0, chart.dim)), np.zeros((0, 2), dtype=int), {t: np.zeros(0) for t in tags})
    k_lo = [int(np.ceil(lo / h - 1e-9)) for lo in box.lower]
    k_hi = [int(np.floor(hi / h + 1e-9)) for hi in box.upper]
    shape = tuple(max(hi - lo + 1, 0) for lo, hi in zip(k_lo, k_hi, strict=True))
    if 0 in shape:
        return _ChartSample(np.zeros((0, chart.dim)), np.zeros((0, 2), dtype=int), {t: np.zeros(0) for t in tags})
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), axis=-1).reshape(-1, chart.dim)
    pts = (idx + np.asarray(k_lo)) * h
    valid = chart.contains(pts)
    ids = np.full(len(pts), -1, dtype=int)
    ids[valid] = np.arange(int(valid.sum()))
    ids = ids.reshape(shape)

    pairs = []
    for off in _neighbor_offsets(chart.dim):
        src = tuple(slice(max(0, -o), n - max(0, o)) for o, n in zip(off, shape, strict=True))
        dst = tuple(slice(max(0, o), n - max(0, -o)) for o, n in zip(off, shape, strict=True))
        a, b = ids[src].ravel(), ids[dst].ravel()
        ok = (a >= 0) & (b >= 0)
        pairs.append(np.stack([a[ok], b[ok]], axis=1))
    edges = np.concatenate(pairs) if pairs else np.zeros((0, 2), dtype=int)
    coords = pts[valid]
    lengths = {}
    for tag in tags:
        if len(edges) == 0:
            lengths[tag] = np.zeros(0)
        elif tag == REF_TAG:
            lengths[tag] = np.linalg.norm(coords[edges[:, 1]] - coords[edges[:, 0]], axis=1)
        else:
            lengths[tag] = gauss_segment_lengths(chart.metric(tag), coords[edges[:, 0]], coords[edges[:, 1]])
    logger.debug(f"chart {chart.id}: {len(coords)} vertices, {len(edges)} edges")
    return _ChartSample(coords, edges, lengths)


def _chart_flags(chart: Chart, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(coords)
    on_face = np.abs(coords[:, -1]) <= 1e-9 if n else np.zeros(0, dtype=bool)
    match chart.side:
        case ChartSide.COLLAR:
            return coords[:, -1] <= 1e-9, coords[:, -1] >= -1e-9, on_face
        case ChartSide.Q:
            return np.zeros(n, dtype=bool), np.ones(n, dtype=bool), np.zeros(n, dtype=bool)
        case _:
            boundary = on_face if chart.has_boundary else np.zeros(n, dtype=bool)
            return np.ones(n, dtype=bool), np.zeros(n, dtype=bool), boundary


def _representatives(merged: DisjointSet, total: int) -> np.ndarray:
    """Smallest vertex id of each identified set."""
    rep = np.arange(total)
    for subset in merged.subsets():
        if len(subset) > 1:
            members = np.fromiter(subset, dtype=int)
            rep[members] = members.min()
    return rep


def sample_mesh(man: ManifoldWithBoundary, h: float, window: Box | None = None) -> Mesh:
    """
    Sample every chart at spacing ``h`` and identify vertices through transitions.

    Args:
        man: Chart atlas
        h: Grid spacing in coordinate units
        window: Optional box applied in every chart's coordinates

    Returns:
        Mesh with edge lengths for every metric tag shared by all charts

    Raises:
        SpecError: Non-positive ``h`` or a window that meets no chart
    """
    if h <= 0:
        raise SpecError(f"resolution must be positive, got {h}")
    tags = sorted(man.metric_tags())
    chart_list = list(man.charts.values())
    samples = gather_threads(lambda c: _sample_chart(c, h, window, tags), chart_list)

    offsets = np.cumsum([0] + [len(s.coords) for s in samples])
    total = int(offsets[-1])
    if total == 0:
        raise SpecError(f"{man.name}: window intersects no chart")

    coords = np.concatenate([s.coords for s in samples])
    vertex_chart = np.concatenate([np.full(len(s.coords), i) for i, s in enumerate(samples)])
    edges = [s.edges + offsets[i] for i, s in enumerate(samples)]
    edge_chart = [np.full(len(s.edges), i) for i, s in enumerate(samples)]
    lengths = {t: [s.lengths[t] for s in samples] for t in tags}
    flags = [_chart_flags(c, s.coords) for c, s in zip(chart_list, samples, strict=True)]
    in_m = np.concatenate([f[0] for f in flags])
    in_q = np.concatenate([f[1] for f in flags])
    on_boundary = np.concatenate([f[2] for f in flags])

    boundary_component = np.full(total, -1)
    chart_index = {c.id: i for i, c in enumerate(chart_list)}
    for b, comp in enumerate(man.boundary):
        i = chart_index.get(comp.chart)
        if i is None:
            raise SpecError(f"{man.name}: boundary component {comp.id!r} names unknown chart {comp.chart!r}")
        sl = slice(offsets[i], offsets[i + 1])
        boundary_component[sl] = np.where(on_boundary[sl], b, boundary_component[sl])

    merged = DisjointSet(range(total))
    tol = 1e-6 * h
    for tr in man.transitions:
        si, ti = chart_index.get(tr.source), chart_index.get(tr.target)
        if si is None or ti is None:
            raise SpecError(f"{man.name}: transition {tr.source}->{tr.target} names an unknown chart")
        src_ids = np.arange(offsets[si], offsets[si + 1])
        src_ids = src_ids[tr.overlap.contains(coords[src_ids])]
        tgt_ids = np.arange(offsets[ti], offsets[ti + 1])
        if len(src_ids) == 0 or len(tgt_ids) == 0:
            continue
        mapped = tr.apply(coords[src_ids])
        tree = cKDTree(coords[tgt_ids])
        dist, nearest = tree.query(mapped)
        target_chart = chart_list[ti]
        stitch_a, stitch_b = [], []
        for k, (d, j) in enumerate(zip(dist, nearest, strict=True)):
            if d <= tol:
                merged.merge(int(src_ids[k]), int(tgt_ids[j]))
            elif d <= 1.5 * h and target_chart.contains(mapped[k : k + 1])[0]:
                stitch_a.append(k)
                stitch_b.append(int(tgt_ids[j]))
        if stitch_a:
            a_pts = mapped[stitch_a]
            b_pts = coords[stitch_b]
            edges.append(np.stack([src_ids[stitch_a], stitch_b], axis=1))
            edge_chart.append(np.full(len(stitch_a), ti))
            for t in tags:
                if t == REF_TAG:
                    lengths[t].append(np.linalg.norm(b_pts - a_pts, axis=1))
                else:
                    lengths[t].append(gauss_segment_lengths(target_chart.metric(t), a_pts, b_pts))
            logger.debug(f"transition {tr.source}->{tr.target}: stitched {len(stitch_a)} off-grid vertices")

    rep = _representatives(merged, total)
    keep = rep == np.arange(total)
    for i in np.flatnonzero(~keep):
        r = rep[i]
        in_m[r] |= in_m[i]
        in_q[r] |= in_q[i]
        on_boundary[r] |= on_boundary[i]
        if boundary_component[r] < 0:
            boundary_component[r] = boundary_component[i]
    new_id = np.cumsum(keep) - 1

    all_edges = new_id[rep[np.concatenate(edges)]]
    all_chart = np.concatenate(edge_chart)
    all_lengths = {t: np.concatenate(v) for t, v in lengths.items()}
    all_edges.sort(axis=1)
    nonloop = all_edges[:, 0] != all_edges[:, 1]
    all_edges, all_chart = all_edges[nonloop], all_chart[nonloop]
    all_lengths = {t: v[nonloop] for t, v in all_lengths.items()}
    # duplicates after identification: keep the first occurrence (lexicographic order)
    _, first = np.unique(all_edges, axis=0, return_index=True)
    first.sort()
    all_edges = all_edges[first]

    mesh = Mesh(
        coords=coords[keep],
        vertex_chart=vertex_chart[keep],
        chart_ids=tuple(c.id for c in chart_list),
        edges=all_edges,
        lengths={t: v[first] for t, v in all_lengths.items()},
        in_m=in_m[keep],
        in_q=in_q[keep],
        on_boundary=on_boundary[keep],
        boundary_component=boundary_component[keep],
        h=h,
        edge_chart=all_chart[first],
    )
    for t, v in mesh.lengths.items():
        if np.any(~np.isfinite(v)) or np.any(v <= 0):
            raise NumericGuardError(f"{man.name}: non-positive edge length under {t!r}")
    logger.info(f"🧩 Sampled {man.name}: {mesh.n_vertices} vertices, {mesh.n_edges} edges at h={h}")
    return mesh


def boundary_vertices(mesh: Mesh) -> np.ndarray:
    """Vertices on ``x_m = 0`` of half-ball charts (the interface for glued meshes)."""
    return np.flatnonzero(mesh.on_boundary)


def require_spd(chart: Chart, tag: str, points: np.ndarray) -> None:
    """Raise :class:`SPDError` naming the first point where the metric is not SPD."""
    if len(points) == 0:
        return
    eig = np.linalg.eigvalsh(chart.metric(tag).matrix(points))[:, 0]
    bad = np.flatnonzero(~(eig > 0))
    if len(bad):
        raise SPDError(f"metric {tag!r} not SPD in chart {chart.id!r} at {points[bad[0]].tolist()}")


# ============================================
# Spec files
# ============================================


def _box(spec: BoxSpec | None, dim: int, what: str) -> Box | None:
    if spec is None:
        return None
    if len(spec.lower) != dim:
        raise SpecError(f"{what}: box has dimension {len(spec.lower)}, expected {dim}")
    box = Box(tuple(spec.lower), tuple(spec.upper))
    if box.is_empty():
        raise SpecError(f"{what}: empty box")
    return box


def check_transition(tr: TransitionMap, h: float) -> None:
    """Reject transitions whose Jacobian determinant vanishes on the sampled overlap."""
    pts = grid_points(tr.overlap, h)
    if len(pts) == 0:
        return
    det = np.linalg.det(tr.jacobian(pts))
    if np.any(~np.isfinite(det)) or np.any(np.abs(det) < 1e-12):
        bad = pts[int(np.argmin(np.abs(np.nan_to_num(det))))]
        raise SpecError(f"transition {tr.source}->{tr.target} is singular at {bad.tolist()}")


def manifold_from_spec(spec: ManifoldSpec, side: ChartSide = ChartSide.M) -> ManifoldWithBoundary:
    """
    Build an atlas from a validated spec model.

    Raises:
        SpecError: Expression errors, unknown chart references, bad boxes
    """
    m = spec.dimension
    charts: dict[str, Chart] = {}
    for cs in spec.charts:
        if cs.id in charts:
            raise SpecError(f"{spec.name}: duplicate chart id {cs.id!r}")
        center = tuple(cs.domain.center) if cs.domain.center is not None else (0.0,) * m
        if len(center) != m:
            raise SpecError(f"{spec.name}/{cs.id}: center has dimension {len(center)}, expected {m}")
        window = _box(cs.window, m, f"{spec.name}/{cs.id}")
        global_window = _box(spec.window, m, f"{spec.name}")
        if global_window is not None:
            window = global_window.intersect(window)
        charts[cs.id] = Chart(
            id=cs.id,
            dim=m,
            kind=DomainKind(cs.domain.kind),
            center=center,
            radius=cs.domain.radius,
            metrics={"base": MetricField.parse(cs.metric, m)},
            window=window,
            open=cs.domain.open,
            side=side,
        )
    transitions = []
    for ts in spec.transitions:
        for ref in (ts.source, ts.target):
            if ref not in charts:
                raise SpecError(f"{spec.name}: transition names unknown chart {ref!r}")
        if len(ts.forward) != m:
            raise SpecError(f"{spec.name}: transition {ts.source}->{ts.target} needs {m} components")
        overlap = _box(ts.overlap, m, f"{spec.name}: overlap {ts.source}->{ts.target}")
        tr = TransitionMap(ts.source, ts.target, tuple(parse_expr(f, m) for f in ts.forward), overlap)
        if spec.resolution is not None:
            check_transition(tr, spec.resolution)
        transitions.append(tr)
    boundary = []
    for bs in spec.boundary:
        chart = charts.get(bs.chart)
        if chart is None:
            raise SpecError(f"{spec.name}: boundary component {bs.id!r} names unknown chart {bs.chart!r}")
        if not chart.has_boundary:
            raise SpecError(f"{spec.name}: boundary chart {bs.chart!r} is not a half-ball")
        boundary.append(BoundaryComponent(bs.id, bs.chart, bs.period))
    logger.debug(f"atlas {spec.name}: {len(charts)} charts, {len(transitions)} transitions")
    return ManifoldWithBoundary(spec.name, m, charts, tuple(transitions), tuple(boundary))

