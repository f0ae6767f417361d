"""Conformal deformation that makes the extension complete.

An exhaustion N_0, N_1, ... by distance sublevel sets is cut into annuli; the
parts of each annulus outside the interior of P get crossing certificates (q1,
q2) and a bump whose weight rescales the metric so that crossing an annulus
costs at least 1 and leaving P is never shorter than staying in it.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from app.config import tolerances
from app.errors import NumericGuardError, SpecError
from app.geometry.atlas import Mesh
from app.geometry.lengthspace import DivergentPath, induced_components, vertex_path_lengths
from app.geometry.profiles import smooth_step
from app.schemas import CertificateRow, CrossingAudit, CrossingCheck, PathCase, ThreeCaseReport
from app.utils import gather_threads, task_rng

logger = logging.getLogger(__name__)

NO_CROSSING = math.inf
CONFORMAL_TAG = "N"
FARTHEST_POINTS = 141
# certificates this close to 1 are treated as 1 (rounding in summed edge lengths)
CERTIFICATE_ROUNDING = 1e-9


# ============================================
# Exhaustion
# ============================================


@dataclass(frozen=True, eq=False)
class Exhaustion:
    """Nested vertex sets N_j = {distance to base <= (j + 1) * step}."""

    levels: tuple[np.ndarray, ...]
    distance: np.ndarray
    base: np.ndarray
    step: float
    tag: str

    @property
    def depth(self) -> int:
        return len(self.levels)

    def level(self, j: int) -> np.ndarray:
        """N_j, empty for j < 0 and the last set for j beyond the window."""
        if j < 0:
            return np.zeros_like(self.levels[0])
        return self.levels[min(j, len(self.levels) - 1)]

    def index(self) -> np.ndarray:
        """Smallest j with the vertex in N_j (depth for vertices outside every level)."""
        out = np.full(len(self.distance), self.depth)
        for j in range(self.depth - 1, -1, -1):
            out[self.levels[j]] = j
        return out


def build_exhaustion(
    mesh: Mesh, base: int | Sequence[int], step: float, levels: int = 6, tag: str = "tilde"
) -> Exhaustion:
    """
    Closed mesh balls of radius (j + 1) * step about a vertex or vertex set.

    Levels stop early once the whole reachable mesh is covered.

    Raises:
        SpecError: ``step <= 0``, empty base, or N_1 = N_0
    """
    if step <= 0:
        raise SpecError(f"exhaustion step must be positive, got {step}")
    sources = np.atleast_1d(np.asarray(base, dtype=int))
    if len(sources) == 0:
        raise SpecError("exhaustion base is empty")
    dist = csgraph.dijkstra(mesh.graph(tag), directed=False, indices=sources, min_only=True)
    reachable = np.isfinite(dist)
    sets: list[np.ndarray] = []
    for j in range(levels):
        current = dist <= (j + 1) * step + 1e-9
        if sets and np.array_equal(current, sets[-1]):
            if j == 1:
                raise SpecError(f"exhaustion step {step} too small: N_1 = N_0")
            break
        sets.append(current)
        if np.array_equal(current, reachable):
            break
    logger.debug(f"exhaustion: {len(sets)} levels, sizes {[int(s.sum()) for s in sets]}")
    return Exhaustion(tuple(sets), dist, sources, step, tag)


# ============================================
# Annulus components
# ============================================


@dataclass(frozen=True, eq=False)
class Annulus:
    """A component N_{j,a}: inner vertices lie in N_j, outer ones on the rim of N_{j+1}."""

    j: int
    index: int
    vertices: np.ndarray
    inner: np.ndarray
    outer: np.ndarray

    @property
    def crosses(self) -> bool:
        return len(self.inner) > 0 and len(self.outer) > 0


@dataclass(frozen=True, eq=False)
class Shell:
    """A component H_{j,b} of the wider annulus and its trace on the boundary of P."""

    j: int
    index: int
    vertices: np.ndarray
    trace: np.ndarray


@dataclass(frozen=True, eq=False)
class AnnulusComponents:
    annuli: dict[int, list[Annulus]]
    shells: dict[int, list[Shell]]
    p: np.ndarray
    interior_p: np.ndarray
    boundary_p: np.ndarray


def _touches(mesh: Mesh, mask: np.ndarray) -> np.ndarray:
    return (mesh.adjacency @ mask.astype(np.int8)) > 0


def mesh_closure(mesh: Mesh, mask: np.ndarray) -> np.ndarray:
    """``mask`` together with its neighbours."""
    return mask | _touches(mesh, mask)


def decompose_annuli(mesh: Mesh, exh: Exhaustion, p: np.ndarray) -> AnnulusComponents:
    """
    Components of (N minus int P) intersected with closure(N_{j+1} minus N_j)
    and with closure(N_{j+2} minus N_{j-1}).
    """
    boundary_p = p & _touches(mesh, ~p)
    interior_p = p & ~boundary_p
    outside = ~interior_p
    annuli: dict[int, list[Annulus]] = {}
    shells: dict[int, list[Shell]] = {}
    for j in range(exh.depth - 1):
        n_j, n_next = exh.level(j), exh.level(j + 1)
        ring = n_next & ~n_j
        closed = (ring | (n_j & _touches(mesh, ring))) & outside
        rim = n_next & _touches(mesh, ~n_next)
        annuli[j] = [
            Annulus(j, a, comp, comp[n_j[comp]], comp[rim[comp]])
            for a, comp in enumerate(induced_components(mesh, closed))
        ]
        wide = exh.level(j + 2) & ~exh.level(j - 1)
        wide_closed = (wide | (exh.level(j - 1) & _touches(mesh, wide))) & outside
        shells[j] = [
            Shell(j, b, comp, comp[boundary_p[comp]]) for b, comp in enumerate(induced_components(mesh, wide_closed))
        ]
        if len(shells[j]) > len(annuli[j]) and annuli[j]:
            logger.warning(f"annulus {j}: {len(shells[j])} wide components but only {len(annuli[j])} annulus components")
    counts = {j: len(a) for j, a in annuli.items()}
    logger.info(f"🧱 Annulus components per level: {counts}")
    return AnnulusComponents(annuli, shells, p, interior_p, boundary_p)


# ============================================
# Certificates
# ============================================


def _component_mask(mesh: Mesh, vertices: np.ndarray) -> np.ndarray:
    mask = np.zeros(mesh.n_vertices, dtype=bool)
    mask[vertices] = True
    return mask


def compute_q1(mesh: Mesh, annulus: Annulus, tag: str = "tilde") -> float:
    """Shortest in-component distance from the inner to the outer boundary, or NO_CROSSING."""
    if not annulus.crosses:
        return NO_CROSSING
    mask = _component_mask(mesh, annulus.vertices)
    dist = csgraph.dijkstra(mesh.graph(tag, mask), directed=False, indices=annulus.inner, min_only=True)
    value = float(dist[annulus.outer].min())
    if not math.isfinite(value):
        return NO_CROSSING
    if value <= 0:
        raise NumericGuardError(f"annulus {annulus.j}/{annulus.index}: inner and outer boundaries meet")
    return value


def farthest_points(mesh: Mesh, vertices: np.ndarray, mask: np.ndarray, count: int, tag: str) -> np.ndarray:
    """Deterministic farthest-point sample (start: smallest vertex id)."""
    graph = mesh.graph(tag, mask)
    chosen = [int(vertices.min())]
    nearest = csgraph.dijkstra(graph, directed=False, indices=chosen[0])[vertices]
    while len(chosen) < min(count, len(vertices)):
        nxt = int(vertices[int(np.argmax(np.where(np.isfinite(nearest), nearest, -1.0)))])
        if nxt in chosen:
            break
        chosen.append(nxt)
        nearest = np.minimum(nearest, csgraph.dijkstra(graph, directed=False, indices=nxt)[vertices])
    return np.asarray(sorted(chosen), dtype=int)


@dataclass(frozen=True)
class Q2Result:
    value: float
    sampling: str
    pairs: int


def compute_q2(mesh: Mesh, shell: Shell, p: np.ndarray, tag: str = "tilde") -> Q2Result:
    """
    min over trace pairs of d_H(x, y) / d_P(x, y).

    Raises:
        NumericGuardError: The ratio falls to the guard tolerance
    """
    trace = shell.trace
    if len(trace) < 2:
        return Q2Result(1.0, "vacuous", 0)
    mask = _component_mask(mesh, shell.vertices)
    if len(trace) * (len(trace) - 1) // 2 <= tolerances.q2_pair_cap:
        chosen, sampling = trace, "exhaustive"
    else:
        chosen = farthest_points(mesh, trace, mask, FARTHEST_POINTS, tag)
        sampling = f"farthest-point-{len(chosen)}"
    d_h = csgraph.dijkstra(mesh.graph(tag, mask), directed=False, indices=chosen)[:, chosen]
    d_p = csgraph.dijkstra(mesh.graph(tag, p), directed=False, indices=chosen)[:, chosen]
    iu = np.triu_indices(len(chosen), k=1)
    num, den = d_h[iu], d_p[iu]
    usable = np.isfinite(den) & (den > 0)
    ratios = np.where(usable, num / np.where(usable, den, 1.0), np.inf)
    value = float(ratios.min()) if len(ratios) else 1.0
    if not math.isfinite(value):
        value = 1.0
    if value <= tolerances.q2_guard:
        raise NumericGuardError(f"q2 of shell {shell.j}/{shell.index} is {value:.3g}; mesh too coarse or degenerate")
    return Q2Result(value, sampling, len(ratios))


# ============================================
# Conformal factor
# ============================================


@dataclass(frozen=True, eq=False)
class Bump:
    kind: str
    j: int
    index: int
    weight: float
    values: np.ndarray = field(repr=False)


@dataclass(frozen=True, eq=False)
class ConformalFactorField:
    factor: np.ndarray
    q1: dict[tuple[int, int], float]
    q2: dict[tuple[int, int], Q2Result]
    bumps: tuple[Bump, ...]

    def certificate_rows(self) -> list[CertificateRow]:
        rows = [
            CertificateRow(j=j, component=a, kind="q1", value=None if math.isinf(v) else v, sampling="exhaustive")
            for (j, a), v in sorted(self.q1.items())
        ]
        rows += [
            CertificateRow(j=j, component=b, kind="q2", value=r.value, sampling=r.sampling)
            for (j, b), r in sorted(self.q2.items())
        ]
        return rows

    def active_counts(self) -> np.ndarray:
        if not self.bumps:
            return np.zeros(len(self.factor), dtype=int)
        return np.sum([b.values > 0 for b in self.bumps], axis=0)


def _bump_weight(q: float) -> float:
    """max(0, -ln q); infinite certificates and q within rounding of 1 give 0."""
    if not math.isfinite(q) or q >= 1.0 - CERTIFICATE_ROUNDING:
        return 0.0
    return -math.log(q)


def bump_field(mesh: Mesh, plateau: np.ndarray, forbidden: np.ndarray, tag: str, width: float) -> np.ndarray:
    """S(1 - d / delta): 1 on ``plateau``, 0 from distance delta on, delta below half the gap to ``forbidden``."""
    dist = csgraph.dijkstra(mesh.graph(tag), directed=False, indices=plateau, min_only=True)
    gap = float(dist[forbidden].min()) if forbidden.any() else math.inf
    delta = min(width, 0.5 * gap)
    if not delta > 0:
        raise NumericGuardError("bump support cannot avoid its forbidden set")
    values = smooth_step(1.0 - dist / delta)
    values[~np.isfinite(dist)] = 0.0
    return values


def certify_annuli(
    mesh: Mesh, exh: Exhaustion, ann: AnnulusComponents, tag: str = "tilde"
) -> tuple[dict[tuple[int, int], float], dict[tuple[int, int], Q2Result]]:
    """q1 for every annulus component and q2 for every wide component, computed concurrently."""
    annuli = [a for j in sorted(ann.annuli) for a in ann.annuli[j]]
    shells = [s for j in sorted(ann.shells) for s in ann.shells[j]]
    q1_values = gather_threads(lambda a: compute_q1(mesh, a, tag), annuli)
    q2_values = gather_threads(lambda s: compute_q2(mesh, s, ann.p, tag), shells)
    q1 = {(a.j, a.index): v for a, v in zip(annuli, q1_values, strict=True)}
    q2 = {(s.j, s.index): v for s, v in zip(shells, q2_values, strict=True)}
    return q1, q2


def conformal_metric(
    mesh: Mesh,
    exh: Exhaustion,
    ann: AnnulusComponents,
    q1: dict[tuple[int, int], float],
    q2: dict[tuple[int, int], Q2Result],
    tag: str = "tilde",
) -> tuple[Mesh, ConformalFactorField]:
    """
    factor = exp(2 * sum of max(0, -ln q) times the component's bump); register
    g_N = factor * g~ on the mesh under the ``N`` tag.

    Bumps are 1 on their component and vanish on M, on N_{j-1} (N_{j-2} for wide
    components) and outside N_{j+2}.

    Raises:
        NumericGuardError: Non-positive certificate, a bump that cannot meet its
            support constraints, a factor != 1 on M, or too many active bumps
    """
    log_factor = np.zeros(mesh.n_vertices)
    bumps: list[Bump] = []
    for j, comps in sorted(ann.annuli.items()):
        outer_limit = ~exh.level(j + 2) if j + 2 < exh.depth else np.zeros(mesh.n_vertices, dtype=bool)
        forbidden = mesh.in_m | exh.level(j - 1) | outer_limit
        for a in comps:
            value = q1[(j, a.index)]
            if value <= 0:
                raise NumericGuardError(f"q1 certificate for annulus {j}/{a.index} is not positive")
            weight = _bump_weight(value)
            if weight == 0.0:
                continue
            values = bump_field(mesh, a.vertices, forbidden, tag, exh.step)
            bumps.append(Bump("q1", j, a.index, weight, values))
            log_factor += weight * values
    for j, comps in sorted(ann.shells.items()):
        outer_limit = ~exh.level(j + 2) if j + 2 < exh.depth else np.zeros(mesh.n_vertices, dtype=bool)
        forbidden = mesh.in_m | exh.level(j - 2) | outer_limit
        for s in comps:
            result = q2[(j, s.index)]
            weight = _bump_weight(result.value)
            if weight == 0.0:
                continue
            values = bump_field(mesh, s.vertices, forbidden, tag, exh.step)
            bumps.append(Bump("q2", j, s.index, weight, values))
            log_factor += weight * values
    factor = np.exp(2.0 * log_factor)
    conformal = ConformalFactorField(factor, q1, q2, tuple(bumps))
    if np.any(factor[mesh.in_m] != 1.0):
        raise NumericGuardError("conformal factor differs from 1 on M")
    active = conformal.active_counts()
    if active.max(initial=0) > tolerances.max_active_bumps:
        raise NumericGuardError(f"{int(active.max())} bumps active at one vertex")
    root = np.sqrt(factor)
    u, v = mesh.edges[:, 0], mesh.edges[:, 1]
    lengths = mesh.edge_lengths(tag) * 0.5 * (root[u] + root[v])
    logger.info(f"🌀 Conformal factor: {len(bumps)} bumps, max factor {factor.max():.4g}")
    return mesh.with_lengths(CONFORMAL_TAG, lengths), conformal


def undeformed(mesh: Mesh, tag: str = "tilde") -> tuple[Mesh, ConformalFactorField]:
    """g_N = g~ (the deformation stage skipped)."""
    factor = np.ones(mesh.n_vertices)
    return mesh.with_lengths(CONFORMAL_TAG, mesh.edge_lengths(tag).copy()), ConformalFactorField(factor, {}, {}, ())


# ============================================
# Audits
# ============================================


def verify_crossing_cost(
    mesh: Mesh,
    ann: AnnulusComponents,
    trials: int | None = None,
    seed: int = 0,
    tag: str = CONFORMAL_TAG,
    p_tag: str = "tilde",
) -> CrossingAudit:
    """
    (a) every sampled inner/outer pair of a crossing annulus component is at
    g_N-distance >= 1 - tau inside the component; (b) every sampled pair on the
    trace of a wide component is at in-component g_N-distance >= (1 - tau) d_P.
    """
    trials = tolerances.audit_trials if trials is None else trials
    slack = tolerances.crossing_slack
    failures: list[CrossingCheck] = []
    checks = 0
    min_a: float | None = None
    min_b: float | None = None
    for j, comps in sorted(ann.annuli.items()):
        for a in comps:
            if not a.crosses:
                continue
            rng = task_rng(seed, f"crossing-a-{j}-{a.index}")
            mask = _component_mask(mesh, a.vertices)
            sources = np.unique(rng.choice(a.inner, size=min(trials, len(a.inner)), replace=False))
            dist = csgraph.dijkstra(mesh.graph(tag, mask), directed=False, indices=sources)
            for t in range(trials):
                x = int(sources[t % len(sources)])
                y = int(a.outer[rng.integers(len(a.outer))])
                d = float(dist[np.searchsorted(sources, x), y])
                if not math.isfinite(d):
                    continue
                checks += 1
                min_a = d if min_a is None else min(min_a, d)
                if d < 1.0 - slack:
                    failures.append(
                        CrossingCheck(j=j, kind="a", component=a.index, source=x, target=y, length=d, bound=1.0 - slack, passed=False)
                    )
    for j, comps in sorted(ann.shells.items()):
        for s in comps:
            if len(s.trace) < 2:
                continue
            mask = _component_mask(mesh, s.vertices)
            n_pairs = len(s.trace) * (len(s.trace) - 1) // 2
            if n_pairs <= tolerances.q2_pair_cap:
                chosen = s.trace
            else:
                chosen = farthest_points(mesh, s.trace, mask, FARTHEST_POINTS, tag)
            d_n = csgraph.dijkstra(mesh.graph(tag, mask), directed=False, indices=chosen)[:, chosen]
            d_p = csgraph.dijkstra(mesh.graph(p_tag, ann.p), directed=False, indices=chosen)[:, chosen]
            for x, y in zip(*np.triu_indices(len(chosen), k=1), strict=True):
                if not (math.isfinite(d_n[x, y]) and math.isfinite(d_p[x, y])) or d_p[x, y] <= 0:
                    continue
                checks += 1
                ratio = float(d_n[x, y] / d_p[x, y])
                min_b = ratio if min_b is None else min(min_b, ratio)
                if ratio < 1.0 - slack:
                    failures.append(
                        CrossingCheck(
                            j=j, kind="b", component=s.index, source=int(chosen[x]), target=int(chosen[y]),
                            length=float(d_n[x, y]), bound=float((1.0 - slack) * d_p[x, y]), passed=False,
                        )
                    )
    passed = not failures
    if not passed:
        worst = failures[0]
        logger.warning(f"❌ Crossing audit failed at annulus {worst.j} ({worst.kind}), {len(failures)} violations")
    return CrossingAudit(passed=passed, checks=checks, failures=failures[:50], min_a=min_a, min_b_ratio=min_b)


def _excursions(inside: np.ndarray) -> list[tuple[int, int]]:
    """(exit, re-entry) index pairs: last inside sample before leaving, first inside after."""
    spans = []
    i = 0
    n = len(inside)
    while i < n:
        if inside[i]:
            i += 1
            continue
        start = i - 1
        while i < n and not inside[i]:
            i += 1
        if start >= 0 and i < n:
            spans.append((start, i))
    return spans


def _annuli_crossed(levels: np.ndarray) -> int:
    best, low = 0, levels[0]
    for lv in levels[1:]:
        best = max(best, int(lv - low - 1))
        low = min(low, lv)
    return best


def _check_excursions(
    v: np.ndarray,
    spans: Sequence[tuple[int, int]],
    cum_n: np.ndarray,
    p_graph: sparse.csr_matrix,
    level_of: np.ndarray,
    path_id: str,
    inconclusive: list[str],
) -> tuple[bool, float, dict[int, int]]:
    """d_P(exit, re-entry) <= (2 + tau) * g_N-length for every excursion; worst ratio and counts per annulus."""
    slack = tolerances.crossing_slack
    ok = True
    worst_ratio = 0.0
    per_annulus: dict[int, int] = {}
    for a, b in spans:
        d_p = float(csgraph.dijkstra(p_graph, directed=False, indices=int(v[a]))[int(v[b])])
        seg = float(cum_n[b] - cum_n[a])
        if not math.isfinite(d_p):
            inconclusive.append(f"{path_id}:{a}-{b}")
            continue
        ok &= d_p <= (2.0 + slack) * seg
        worst_ratio = max(worst_ratio, d_p / seg if seg > 0 else math.inf)
        deepest = int(level_of[v[a : b + 1]].max())
        per_annulus[deepest] = per_annulus.get(deepest, 0) + 1
    return bool(ok), worst_ratio, per_annulus


def certify_completeness(
    mesh: Mesh,
    exh: Exhaustion,
    ann: AnnulusComponents,
    paths: Sequence[DivergentPath],
    tag: str = CONFORMAL_TAG,
    p_tag: str = "tilde",
) -> ThreeCaseReport:
    """
    Sort divergent paths into three cases by their tail and check the matching bound.

    Case 1 ends outside P: its length after the last exit is at least (1 - tau)
    per annulus crossed, and any earlier excursions must satisfy the case-3
    bound as well. Case 2 stays in P: g_N-length is at least the g_P-length.
    Case 3 ends in P after excursions: each satisfies d_P(exit, re-entry) <=
    (2 + tau) times the excursion's g_N-length.
    """
    slack = tolerances.crossing_slack
    level_of = exh.index()
    p_graph = mesh.graph(p_tag, ann.p)
    cases: list[PathCase] = []
    inconclusive: list[str] = []
    for path in paths:
        v = path.vertices
        if len(v) < 2:
            inconclusive.append(path.path_id)
            continue
        inside = ann.interior_p[v]
        cum_n = vertex_path_lengths(mesh, v, tag)
        spans = _excursions(inside)
        ok, worst_ratio, per_annulus = _check_excursions(v, spans, cum_n, p_graph, level_of, path.path_id, inconclusive)
        if not inside[-1]:
            last_in = np.flatnonzero(inside)
            start = int(last_in[-1]) if len(last_in) else 0
            crossed = _annuli_crossed(level_of[v[start:]])
            tail = float(cum_n[-1] - cum_n[start])
            bound = crossed * (1.0 - slack)
            cases.append(
                PathCase(
                    path_id=path.path_id, case=1, length=tail, bound=bound, holds=tail >= bound and ok,
                    excursions=len(spans), excursions_per_annulus=per_annulus,
                )
            )
        elif spans:
            cases.append(
                PathCase(
                    path_id=path.path_id, case=3, length=float(cum_n[-1]), bound=worst_ratio, holds=ok,
                    excursions=len(spans), excursions_per_annulus=per_annulus,
                )
            )
        else:
            cum_p = vertex_path_lengths(mesh, v, p_tag)
            cases.append(
                PathCase(
                    path_id=path.path_id, case=2, length=float(cum_n[-1]), bound=float(cum_p[-1]),
                    holds=bool(cum_n[-1] >= cum_p[-1] * (1 - 1e-12)),
                )
            )
    passed = all(c.holds for c in cases)
    logger.info(
        f"🔎 Three-case check: {sum(c.case == 1 for c in cases)} leave P, {sum(c.case == 2 for c in cases)} stay, "
        f"{sum(c.case == 3 for c in cases)} oscillate; passed={passed}"
    )
    return ThreeCaseReport(passed=passed, paths=cases, inconclusive=inconclusive)


def exit_length_growth(exit_rows: Sequence[tuple[int, float]]) -> list[float]:
    """Increments of the minimal exit length between consecutive window levels."""
    minima: dict[int, float] = {}
    for level, length in exit_rows:
        minima[level] = min(length, minima.get(level, math.inf))
    levels = sorted(minima)
    return [minima[b] - minima[a] for a, b in zip(levels, levels[1:], strict=False)]
