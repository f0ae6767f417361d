"""Path lengths, length distance, divergent paths and completeness diagnostics."""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from app.config import tolerances
from app.errors import NumericGuardError, SpecError
from app.geometry.atlas import Chart, Mesh, gauss_segment_lengths
from app.schemas import (
    BallRow,
    CompletenessReport,
    PathLengthRow,
    Verdict,
    WitnessPath,
)
from app.utils import task_rng

logger = logging.getLogger(__name__)

DistanceOracle = Callable[[np.ndarray, np.ndarray], float]


class Reachability(Enum):
    UNREACHABLE = "unreachable"


UNREACHABLE = Reachability.UNREACHABLE


# ============================================
# Paths
# ============================================


@dataclass(frozen=True, eq=False)
class SampledPath:
    """Time-stamped polyline in one chart, or a vertex sequence on a mesh."""

    times: np.ndarray
    points: np.ndarray
    chart: str | None = None
    vertices: np.ndarray | None = None
    tag: str = "base"

    def __post_init__(self) -> None:
        if len(self.times) != len(self.points):
            raise SpecError("path needs one time stamp per sample")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise SpecError("path time stamps must be strictly increasing")

    @classmethod
    def from_points(
        cls, points: np.ndarray, chart: str | None = None, times: np.ndarray | None = None, tag: str = "base"
    ) -> "SampledPath":
        pts = np.asarray(points, dtype=float)
        t = np.linspace(0.0, 1.0, len(pts)) if times is None else np.asarray(times, dtype=float)
        return cls(t, pts, chart, None, tag)

    @classmethod
    def from_vertices(cls, mesh: Mesh, vertices: Sequence[int], tag: str = "tilde") -> "SampledPath":
        v = np.asarray(vertices, dtype=int)
        times = np.arange(len(v)) / max(len(v), 1)
        return cls(times, mesh.coords[v], None, v, tag)

    def __len__(self) -> int:
        return len(self.times)


def euclidean_oracle(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(q) - np.asarray(p)))


def mesh_oracle(mesh: Mesh, tag: str, chart_id: str | None = None) -> DistanceOracle:
    """Distance oracle snapping points to their nearest mesh vertices."""

    def oracle(p: np.ndarray, q: np.ndarray) -> float:
        d = length_distance(mesh.nearest_vertex(p, chart_id), mesh.nearest_vertex(q, chart_id), mesh, tag)
        if d is UNREACHABLE:
            raise NumericGuardError("mesh oracle: points are not connected")
        return float(d)

    return oracle


@dataclass(frozen=True)
class MetricLength:
    length: float
    depth: int
    stabilized: bool


def metric_length(path: SampledPath, d: DistanceOracle) -> MetricLength:
    """
    Supremum over nested dyadic partitions of the summed oracle distances.

    At depth k the partition uses, for every dyadic time j/2^k, the first sample
    at or after it; refinement stops once the relative change drops below
    ``partition_rel_change`` or every sample is used.

    Raises:
        SpecError: Fewer than two samples
        NumericGuardError: The oracle failed on a sample pair
    """
    n = len(path)
    if n < 2:
        raise SpecError("metric length needs at least two samples")
    t = path.times
    span = t[-1] - t[0]
    cache: dict[tuple[int, int], float] = {}

    def dist(i: int, j: int) -> float:
        key = (i, j)
        if key not in cache:
            try:
                cache[key] = float(d(path.points[i], path.points[j]))
            except Exception as exc:
                raise NumericGuardError(f"distance oracle failed between samples {i} and {j}: {exc}") from exc
        return cache[key]

    previous = None
    depth = 0
    while True:
        depth += 1
        marks = t[0] + span * np.arange(2**depth + 1) / 2**depth
        idx = np.unique(np.clip(np.searchsorted(t, marks - 1e-15, side="left"), 0, n - 1))
        idx = np.union1d(idx, [0, n - 1])
        total = sum(dist(int(a), int(b)) for a, b in zip(idx[:-1], idx[1:], strict=True))
        if len(idx) == n:
            return MetricLength(total, depth, True)
        if previous is not None and abs(total - previous) <= tolerances.partition_rel_change * max(total, 1e-300):
            return MetricLength(total, depth, True)
        previous = total
        if depth > 40:
            return MetricLength(total, depth, False)


def _segment_lengths(chart: Chart, tag: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    metric = chart.metric(tag)
    panels = 1
    previous = None
    while True:
        fractions = np.arange(panels + 1) / panels
        starts = a[:, None, :] + fractions[None, :-1, None] * (b - a)[:, None, :]
        ends = a[:, None, :] + fractions[None, 1:, None] * (b - a)[:, None, :]
        lengths = gauss_segment_lengths(
            metric, starts.reshape(-1, a.shape[1]), ends.reshape(-1, a.shape[1])
        ).reshape(len(a), panels).sum(axis=1)
        total = lengths.sum()
        if previous is not None and abs(total - previous) <= tolerances.length_rel_tol * max(total, 1e-300):
            return lengths
        if panels >= tolerances.max_length_panels:
            return lengths
        previous = total
        panels *= 2


def riemannian_length(path: SampledPath, chart: Chart, tag: str | None = None) -> float:
    """
    Sum of per-segment quadrature lengths under a tagged chart metric.

    Raises:
        SpecError: A sample or segment midpoint lies outside the chart
    """
    tag = tag or path.tag
    if len(path) < 2:
        return 0.0
    pts = path.points
    mids = 0.5 * (pts[1:] + pts[:-1])
    if not np.all(chart.contains(pts)) or not np.all(chart.contains(mids)):
        raise SpecError(f"path segment leaves chart {chart.id!r} carrying metric {tag!r}")
    return float(_segment_lengths(chart, tag, pts[:-1], pts[1:]).sum())


def metric_speed(path: SampledPath, chart: Chart, d: DistanceOracle, tag: str | None = None) -> np.ndarray:
    """Per-segment ratio of oracle distance to Riemannian length (tends to 1 on refinement)."""
    tag = tag or path.tag
    pts = path.points
    quad = _segment_lengths(chart, tag, pts[:-1], pts[1:])
    chords = np.array([d(p, q) for p, q in zip(pts[:-1], pts[1:], strict=True)])
    return chords / quad


# ============================================
# Mesh distances
# ============================================


def distances_from(
    mesh: Mesh,
    sources: int | Sequence[int] | np.ndarray,
    tag: str,
    mask: np.ndarray | None = None,
    min_only: bool = False,
    limit: float = np.inf,
) -> np.ndarray:
    """Dijkstra distances from one or several sources, optionally inside ``mask``."""
    graph = mesh.graph(tag, mask)
    return csgraph.dijkstra(graph, directed=False, indices=sources, min_only=min_only, limit=limit)


def length_distance(x: int, y: int, mesh: Mesh, tag: str, mask: np.ndarray | None = None) -> float | Reachability:
    """Shortest-path distance on the weighted mesh graph, or ``UNREACHABLE``."""
    if x == y:
        return 0.0
    d = distances_from(mesh, x, tag, mask)[y]
    return UNREACHABLE if not np.isfinite(d) else float(d)


def shortest_path(mesh: Mesh, source: int, target: int, tag: str, mask: np.ndarray | None = None) -> np.ndarray:
    """Vertex sequence of a shortest path (empty if unreachable)."""
    _, pred = csgraph.dijkstra(
        mesh.graph(tag, mask), directed=False, indices=source, return_predecessors=True
    )
    if source != target and pred[target] < 0:
        return np.zeros(0, dtype=int)
    out = [target]
    while out[-1] != source:
        out.append(int(pred[out[-1]]))
    return np.asarray(out[::-1], dtype=int)


def vertex_path_lengths(mesh: Mesh, vertices: np.ndarray, tag: str) -> np.ndarray:
    """Cumulative length along a vertex path (0 at the first vertex)."""
    if len(vertices) < 2:
        return np.zeros(len(vertices))
    graph = mesh.graph(tag)
    steps = np.asarray(graph[vertices[:-1], vertices[1:]]).ravel()
    if np.any(steps <= 0):
        raise SpecError("vertex path uses a pair that is not a mesh edge")
    return np.concatenate([[0.0], np.cumsum(steps)])


# ============================================
# Windows and divergence
# ============================================


@dataclass(frozen=True)
class PointWindow:
    """Compact coordinate window: a box, optionally cut to an annulus about ``center``."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    r_min: float = 0.0
    r_max: float = np.inf
    center: tuple[float, ...] | None = None

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        inside = np.all((pts >= np.asarray(self.lower)) & (pts <= np.asarray(self.upper)), axis=1)
        c = np.zeros(pts.shape[1]) if self.center is None else np.asarray(self.center)
        r = np.linalg.norm(pts - c, axis=1)
        return inside & (r >= self.r_min) & (r <= self.r_max)


Window = PointWindow | np.ndarray


def _inside(window: Window, path: SampledPath) -> np.ndarray:
    if isinstance(window, np.ndarray):
        if path.vertices is None:
            raise SpecError("vertex-mask windows need a vertex path")
        return window[path.vertices]
    return window.contains(path.points)


def is_divergent(path: SampledPath, windows: Sequence[Window], min_tail: int = 2) -> bool:
    """
    True iff, for every window, the samples after the path's last visit to it
    form a tail of at least ``min_tail`` points, all outside the window.

    A path whose only outside sample is its endpoint has not left the window in
    any sampled sense and does not count.
    """
    if min_tail < 1:
        raise SpecError(f"min_tail must be at least 1, got {min_tail}")
    n = len(path.times)
    for window in windows:
        visits = np.flatnonzero(_inside(window, path))
        tail_start = int(visits[-1]) + 1 if len(visits) else 0
        if n - tail_start < min_tail:
            return False
    return True


def exit_lengths(cumulative: np.ndarray, vertices: np.ndarray, windows: Sequence[np.ndarray]) -> list[float | None]:
    """Length travelled when the path last leaves each window (None if it ends inside)."""
    out: list[float | None] = []
    for window in windows:
        inside = window[vertices]
        if inside[-1]:
            out.append(None)
            continue
        last_inside = np.flatnonzero(inside)
        index = int(last_inside[-1]) + 1 if len(last_inside) else 0
        out.append(float(cumulative[index]))
    return out


def window_rim(mesh: Mesh, window: np.ndarray) -> np.ndarray:
    """Vertices of ``window`` with a neighbour outside it."""
    outside = (~window).astype(np.int8)
    touches = mesh.adjacency @ outside > 0
    return window & touches


# ============================================
# Divergent path sampling
# ============================================


@dataclass(frozen=True)
class DivergentPath:
    path_id: str
    vertices: np.ndarray


def sample_divergent_paths(
    mesh: Mesh,
    tag: str,
    windows: Sequence[np.ndarray],
    start: int,
    walks: int,
    seed: int,
) -> tuple[list[DivergentPath], int]:
    """
    Shortest-path rays toward each end plus seeded outward random walks.

    Ends are the components of the part of the mesh outside the last proper
    window. Walks step to a random neighbour with larger hop distance from
    ``start`` until none is left; walks that finish inside the last proper
    window are discarded.

    Returns:
        The divergent paths and the number of discarded walks
    """
    outer = ~windows[-1]
    paths: list[DivergentPath] = []
    dist, pred = csgraph.dijkstra(mesh.graph(tag), directed=False, indices=start, return_predecessors=True)
    ncomp, labels = csgraph.connected_components(mesh.graph(tag, outer), directed=False)
    for end in range(ncomp):
        members = np.flatnonzero((labels == end) & outer)
        if len(members) == 0:
            continue
        reachable = members[np.isfinite(dist[members])]
        if len(reachable) == 0:
            continue
        target = int(reachable[np.argmin(dist[reachable])])
        route = [target]
        while route[-1] != start:
            route.append(int(pred[route[-1]]))
        paths.append(DivergentPath(f"ray-{len(paths)}", np.asarray(route[::-1], dtype=int)))

    hops = csgraph.shortest_path(mesh.adjacency.astype(float), unweighted=True, directed=False, indices=start)
    discarded = 0
    adj = mesh.adjacency
    for w in range(walks):
        rng = task_rng(seed, f"walk-{w}")
        route = [start]
        while True:
            here = route[-1]
            nbrs = adj.indices[adj.indptr[here] : adj.indptr[here + 1]]
            outward = np.sort(nbrs[hops[nbrs] > hops[here]])
            if len(outward) == 0:
                break
            route.append(int(outward[rng.integers(len(outward))]))
        vertices = np.asarray(route, dtype=int)
        if outer[vertices[-1]]:
            paths.append(DivergentPath(f"walk-{w}", vertices))
        else:
            discarded += 1
    return paths, discarded


# ============================================
# Completeness diagnostics
# ============================================


def _ball_table(
    mesh: Mesh, tag: str, windows: Sequence[np.ndarray], start: int, radii: Sequence[float]
) -> list[BallRow]:
    full = distances_from(mesh, start, tag)
    rows = []
    per_window = [distances_from(mesh, start, tag, w) for w in windows]
    rims = [window_rim(mesh, w) for w in windows]
    for radius in radii:
        ball = full <= radius
        level = None
        for k, (dist_k, rim) in enumerate(zip(per_window, rims, strict=True)):
            ball_k = dist_k <= radius
            if np.array_equal(ball_k, ball) and not np.any(ball_k & rim):
                level = k
                break
        rows.append(BallRow(radius=float(radius), stabilized=level is not None, level=level))
    return rows


def completeness_report(
    mesh: Mesh,
    tag: str,
    windows: Sequence[np.ndarray],
    start: int,
    radii: Sequence[float],
    thresholds: Sequence[float] | None = None,
    walks: int | None = None,
    seed: int = 0,
) -> CompletenessReport:
    """
    Heine-Borel and divergent-path proxies on nested vertex windows.

    A closed ball is "compact" when the ball computed inside some window equals
    the ball in the whole mesh and avoids that window's rim. The incomplete
    verdict requires a radius whose ball never stabilizes together with a sampled
    divergent tail (after leaving the first window) shorter than that radius.

    Args:
        mesh: Mesh carrying metric ``tag``
        tag: Metric tag
        windows: Strictly nested vertex masks (the mesh itself is the last level)
        start: Start vertex for balls, rays and walks
        radii: Test radii for the ball-compactness table
        thresholds: Growth threshold per window (divergent lengths must exceed them)
        walks: Number of random walks (default from tolerances)
        seed: Run seed

    Raises:
        SpecError: Empty budget
    """
    if not windows or not radii:
        raise SpecError("completeness budget needs windows and test radii")
    walks = tolerances.random_walks if walks is None else walks
    balls = _ball_table(mesh, tag, windows, start, radii)
    paths, discarded = sample_divergent_paths(mesh, tag, windows, start, walks, seed)

    rows: list[PathLengthRow] = []
    growth_ok = True
    best: WitnessPath | None = None
    for path in paths:
        cumulative = vertex_path_lengths(mesh, path.vertices, tag)
        exits = exit_lengths(cumulative, path.vertices, windows)
        for level, length in enumerate(exits):
            if length is None:
                continue
            rows.append(PathLengthRow(level=level, path_id=path.path_id, length=length))
            if thresholds is not None and length < thresholds[level]:
                growth_ok = False
        first_exit = exits[0] if exits[0] is not None else 0.0
        tail = float(cumulative[-1] - first_exit)
        if best is None or tail < best.length:
            inside_first = windows[0][path.vertices]
            last_inside = np.flatnonzero(inside_first)
            cut = int(last_inside[-1]) + 1 if len(last_inside) else 0
            best = WitnessPath(
                path_id=path.path_id,
                vertices=[int(v) for v in path.vertices[max(cut - 1, 0) :]],
                length=tail,
                total_length=float(cumulative[-1]),
                exits_all_windows=all(e is not None for e in exits),
            )

    unstable = [row.radius for row in balls if not row.stabilized]
    diagnostics = []
    verdict = Verdict.COMPLETE
    witness = None
    if best is not None and unstable and best.exits_all_windows and best.length <= max(unstable):
        verdict = Verdict.INCOMPLETE
        witness = best
        logger.info(f"⚠️ Incomplete: witness {best.path_id} has tail length {best.length:.4f}")
    else:
        if unstable:
            diagnostics.append(f"balls of radius {unstable} did not stabilize but no short divergent tail was sampled")
        if not paths:
            diagnostics.append("no divergent path sampled")
    return CompletenessReport(
        verdict=verdict,
        witness=witness,
        balls=balls,
        divergent_lengths=rows,
        growth_ok=growth_ok,
        paths_sampled=len(paths),
        walks_discarded=discarded,
        diagnostics=diagnostics,
    )


def radial_windows(mesh: Mesh, tag: str, start: int, radii: Sequence[float]) -> list[np.ndarray]:
    """Nested windows as closed metric balls about ``start``."""
    dist = distances_from(mesh, start, tag)
    return [dist <= r for r in radii]


def coordinate_windows(mesh: Mesh, windows: Sequence[PointWindow]) -> list[np.ndarray]:
    """Vertex masks of coordinate windows."""
    return [w.contains(mesh.coords) for w in windows]


def induced_components(mesh: Mesh, mask: np.ndarray) -> list[np.ndarray]:
    """Connected components (as sorted vertex arrays) of the subgraph induced by ``mask``."""
    if not mask.any():
        return []
    graph = sparse.csr_matrix(mesh.adjacency, dtype=float)
    idx = np.flatnonzero(mask)
    sub = graph[idx][:, idx]
    ncomp, labels = csgraph.connected_components(sub, directed=False)
    comps = [idx[labels == c] for c in range(ncomp)]
    comps.sort(key=lambda c: int(c[0]))
    return comps
