"""Differential-geometric kernels on chart metrics.

Christoffel symbols and Gaussian curvature come from symbolic metric
derivatives; geodesics and the Riccati equation are integrated with fixed-step
RK4. The module also builds the Lipschitz exhaustion and cutoff fields on a mesh.
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csgraph

from app.config import tolerances
from app.errors import NumericGuardError, ShootingError, SpecError
from app.geometry.atlas import Chart, ManifoldWithBoundary, Mesh, MetricField
from app.geometry.profiles import smooth_step
from app.schemas import CurvatureCollarReport, LambdaRow

logger = logging.getLogger(__name__)


# ============================================
# Christoffel symbols and curvature
# ============================================


def _inverse(g: np.ndarray) -> np.ndarray:
    det = np.linalg.det(g)
    if np.any(~np.isfinite(det)) or np.any(np.abs(det) < 1e-14):
        raise NumericGuardError("singular metric matrix")
    return np.linalg.inv(g)


def christoffel_batch(metric: MetricField, points: np.ndarray) -> np.ndarray:
    """Gamma^k_ij at each point, shape (n, k, i, j)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    ginv = _inverse(metric.matrix(pts))
    dg = metric.first_derivatives(pts)  # (n, l, i, j) = d_l g_ij
    lowered = 0.5 * (
        np.einsum("nijl->nlij", dg)
        + np.einsum("njil->nlij", dg)
        - dg
    )
    return np.einsum("nkl,nlij->nkij", ginv, lowered)


def christoffel(chart: Chart, point, tag: str = "base") -> np.ndarray:
    """
    Christoffel symbols Gamma^k_ij of a chart metric at one point, shape (m, m, m).

    Raises:
        SpecError: Point outside the chart
        NumericGuardError: Singular metric
    """
    p = np.asarray(point, dtype=float)
    if not chart.contains(p)[0]:
        raise SpecError(f"point {p.tolist()} is outside chart {chart.id!r}")
    return christoffel_batch(chart.metric(tag), p)[0]


def gaussian_curvature_batch(metric: MetricField, points: np.ndarray, plane: tuple[int, int] = (0, 1)) -> np.ndarray:
    """Sectional curvature of the coordinate plane ``plane`` (Gaussian curvature for m = 2)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    g = metric.matrix(pts)
    ginv = _inverse(g)
    dg = metric.first_derivatives(pts)
    ddg = metric.second_derivatives(pts)  # (n, k, l, i, j) = d_l d_k g_ij

    lowered = 0.5 * (np.einsum("nijl->nlij", dg) + np.einsum("njil->nlij", dg) - dg)
    gamma = np.einsum("nkl,nlij->nkij", ginv, lowered)
    # d_a of the lowered symbols: Gamma_{l,ij} = 1/2 (d_i g_jl + d_j g_il - d_l g_ij)
    d_lowered = 0.5 * (
        np.einsum("niajl->nalij", ddg)
        + np.einsum("njail->nalij", ddg)
        - np.einsum("nlaij->nalij", ddg)
    )
    d_ginv = -np.einsum("nkp,napq,nql->nakl", ginv, dg, ginv)
    d_gamma = np.einsum("nakl,nlij->nakij", d_ginv, lowered) + np.einsum("nkl,nalij->nakij", ginv, d_lowered)

    a, b = plane
    # R^k_{bab} = d_a Gamma^k_bb - d_b Gamma^k_ab + Gamma^k_ap Gamma^p_bb - Gamma^k_bp Gamma^p_ab
    riemann = (
        d_gamma[:, a, :, b, b]
        - d_gamma[:, b, :, a, b]
        + np.einsum("nkp,np->nk", gamma[:, :, a, :], gamma[:, :, b, b])
        - np.einsum("nkp,np->nk", gamma[:, :, b, :], gamma[:, :, a, b])
    )
    lowered_r = np.einsum("nk,nk->n", g[:, a, :], riemann)
    area = g[:, a, a] * g[:, b, b] - g[:, a, b] ** 2
    return lowered_r / area


def gaussian_curvature(chart: Chart, point, tag: str = "base") -> float:
    """Gaussian curvature at one chart point."""
    p = np.asarray(point, dtype=float)
    if not chart.contains(p)[0]:
        raise SpecError(f"point {p.tolist()} is outside chart {chart.id!r}")
    return float(gaussian_curvature_batch(chart.metric(tag), p)[0])


# ============================================
# Geodesics
# ============================================


@dataclass(frozen=True)
class GeodesicState:
    chart: str
    position: tuple[float, ...]
    velocity: tuple[float, ...]
    arc_length: float = 0.0


def speeds(metric: MetricField, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    g = metric.matrix(x)
    return np.sqrt(np.einsum("ni,nij,nj->n", v, g, v))


def _acceleration(metric: MetricField, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    gamma = christoffel_batch(metric, x)
    return -np.einsum("nkij,ni,nj->nk", gamma, v, v)


def rk4_geodesic_step(metric: MetricField, x: np.ndarray, v: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """One RK4 step of x' = v, v' = -Gamma(v, v) for a batch of states."""
    k1x, k1v = v, _acceleration(metric, x, v)
    k2x = v + 0.5 * dt * k1v
    k2v = _acceleration(metric, x + 0.5 * dt * k1x, k2x)
    k3x = v + 0.5 * dt * k2v
    k3v = _acceleration(metric, x + 0.5 * dt * k2x, k3x)
    k4x = v + dt * k3v
    k4v = _acceleration(metric, x + dt * k3x, k4x)
    x_new = x + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
    v_new = v + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return x_new, v_new


def integrate_geodesics(
    metric: MetricField, x0: np.ndarray, v0: np.ndarray, length: float, step: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Integrate a batch of geodesics inside one chart.

    Returns:
        Parameter grid (k+1,), positions and velocities of shape (k+1, n, m)

    Raises:
        ShootingError: Non-finite state (metric blow-up)
    """
    n_steps = max(1, math.ceil(length / step - 1e-9))
    dt = length / n_steps
    x = np.atleast_2d(np.asarray(x0, dtype=float))
    v = np.atleast_2d(np.asarray(v0, dtype=float))
    xs = np.empty((n_steps + 1, *x.shape))
    vs = np.empty((n_steps + 1, *v.shape))
    xs[0], vs[0] = x, v
    try:
        for k in range(n_steps):
            x, v = rk4_geodesic_step(metric, x, v, dt)
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
                raise ShootingError(f"geodesic blew up after arc length {(k + 1) * dt:.4g}")
            xs[k + 1], vs[k + 1] = x, v
    except NumericGuardError as exc:
        if isinstance(exc, ShootingError):
            raise
        raise ShootingError(f"geodesic integration failed: {exc.message}") from exc
    return np.linspace(0.0, length, n_steps + 1), xs, vs


@dataclass(frozen=True, eq=False)
class GeodesicTrajectory:
    """Sampled geodesic with the chart of every sample."""

    times: np.ndarray
    points: np.ndarray
    charts: tuple[str, ...]
    speeds: np.ndarray
    boundary_hit: bool
    final: GeodesicState
    hit_length: float | None = None

    def speed_drift(self) -> float:
        return float(np.max(np.abs(self.speeds / self.speeds[0] - 1.0)))


def _hand_off(
    man: ManifoldWithBoundary, chart: Chart, x: np.ndarray, v: np.ndarray, reach: float
) -> tuple[Chart, np.ndarray, np.ndarray] | None:
    for tr in man.transitions:
        if tr.source != chart.id or not tr.overlap.contains(x, tol=reach)[0]:
            continue
        target = man.chart(tr.target)
        y = tr.apply(x)
        if target.id == chart.id and np.allclose(y, x):
            continue
        if target.contains(y)[0]:
            w = np.einsum("nij,nj->ni", tr.jacobian(x), v)
            return target, y, w
    return None


def shoot_geodesic(
    man: ManifoldWithBoundary,
    start: GeodesicState,
    length: float,
    step: float | None = None,
    tag: str = "base",
) -> GeodesicTrajectory:
    """
    Shoot a unit-speed geodesic for arc length ``length``, handing off between charts.

    Integration stops early when the next state lies in no chart reachable through
    a transition; the trajectory is then flagged as a boundary-of-domain hit.

    Raises:
        SpecError: Step larger than length / 10, or start outside its chart
        ShootingError: Metric blow-up
    """
    step = tolerances.rk4_step if step is None else step
    if step <= 0 or step > length / 10:
        raise SpecError(f"step {step} must lie in (0, length/10]")
    chart = man.chart(start.chart)
    x = np.asarray(start.position, dtype=float)[None, :]
    v = np.asarray(start.velocity, dtype=float)[None, :]
    if not chart.contains(x)[0]:
        raise SpecError(f"start {start.position} lies outside chart {chart.id!r}")

    n_steps = math.ceil(length / step - 1e-9)
    dt = length / n_steps
    times, points, charts, speed = [0.0], [x[0].copy()], [chart.id], [float(speeds(chart.metric(tag), x, v)[0])]
    hit = False
    t = 0.0
    for k in range(n_steps):
        try:
            x_new, v_new = rk4_geodesic_step(chart.metric(tag), x, v, dt)
        except NumericGuardError as exc:
            raise ShootingError(f"geodesic integration failed at arc length {t:.4g}: {exc.message}") from exc
        if not np.all(np.isfinite(x_new)):
            raise ShootingError(f"geodesic blew up at arc length {t:.4g}")
        if not chart.contains(x_new)[0]:
            moved = _hand_off(man, chart, x, v, reach=2 * dt * float(np.linalg.norm(v)))
            if moved is None:
                hit = True
                break
            chart, x, v = moved
            x_new, v_new = rk4_geodesic_step(chart.metric(tag), x, v, dt)
            if not chart.contains(x_new)[0]:
                hit = True
                break
        x, v = x_new, v_new
        t = (k + 1) * dt
        times.append(t)
        points.append(x[0].copy())
        charts.append(chart.id)
        speed.append(float(speeds(chart.metric(tag), x, v)[0]))
    final = GeodesicState(chart.id, tuple(float(c) for c in x[0]), tuple(float(c) for c in v[0]), t)
    if hit:
        logger.info(f"🧭 Geodesic left the atlas at arc length {t:.4f}")
    return GeodesicTrajectory(
        times=np.asarray(times),
        points=np.asarray(points),
        charts=tuple(charts),
        speeds=np.asarray(speed),
        boundary_hit=hit,
        final=final,
        hit_length=t if hit else None,
    )


def unit_start(man: ManifoldWithBoundary, chart: str, position, direction, tag: str = "base") -> GeodesicState:
    """Start state with ``direction`` rescaled to unit metric speed."""
    x = np.asarray(position, dtype=float)[None, :]
    d = np.asarray(direction, dtype=float)[None, :]
    norm = speeds(man.chart(chart).metric(tag), x, d)[0]
    if not norm > 0:
        raise SpecError("geodesic direction must be nonzero")
    return GeodesicState(chart, tuple(x[0]), tuple(d[0] / norm))


# ============================================
# Riccati equation
# ============================================


@dataclass(frozen=True, eq=False)
class RiccatiResult:
    value: float
    t_end: float
    blow_up: float | None
    times: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    @property
    def blew_up(self) -> bool:
        return self.blow_up is not None


def riccati_evolve(
    lambda0: float,
    curvature: float | Callable[[float], float],
    length: float,
    step: float | None = None,
) -> RiccatiResult:
    """
    Solve lambda' = lambda^2 + K(t) from lambda(0) = lambda0 with RK4.

    Blow-up is reported (not raised) at the first time |lambda| exceeds 1/step.
    """
    step = tolerances.rk4_step if step is None else step
    k_of = curvature if callable(curvature) else (lambda _t, c=float(curvature): c)
    n_steps = max(1, math.ceil(length / step - 1e-9))
    dt = length / n_steps
    limit = 1.0 / step

    def rhs(t: float, lam: float) -> float:
        return lam * lam + k_of(t)

    lam, t = float(lambda0), 0.0
    times, values = [0.0], [lam]
    for k in range(n_steps):
        k1 = rhs(t, lam)
        k2 = rhs(t + 0.5 * dt, lam + 0.5 * dt * k1)
        k3 = rhs(t + 0.5 * dt, lam + 0.5 * dt * k2)
        k4 = rhs(t + dt, lam + dt * k3)
        lam = lam + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        t = (k + 1) * dt
        if not math.isfinite(lam) or abs(lam) > limit:
            logger.debug(f"Riccati blow-up at t={t:.4g}")
            return RiccatiResult(lam, t, t, np.asarray(times), np.asarray(values))
        times.append(t)
        values.append(lam)
    return RiccatiResult(lam, t, None, np.asarray(times), np.asarray(values))


# ============================================
# Curvature collars
# ============================================


def _satisfies(k: np.ndarray, bound: float, sense: str) -> np.ndarray:
    return k < bound if sense == "<" else k > bound


def check_curvature_bound(charts: list[Chart], points: list[np.ndarray], bound: float, sense: str, tag: str) -> tuple[float, float]:
    """Curvature extrema over sample points; raises if the strict bound fails."""
    values = [gaussian_curvature_batch(c.metric(tag), p) for c, p in zip(charts, points, strict=True) if len(p)]
    if not values:
        raise SpecError("no sample points for the curvature bound")
    k = np.concatenate(values)
    if not np.all(_satisfies(k, bound, sense)):
        raise NumericGuardError(f"curvature bound K {sense} {bound} already violated on M (range [{k.min():.6g}, {k.max():.6g}])")
    return float(k.min()), float(k.max())


def curvature_collar(
    metric: MetricField,
    sigma: np.ndarray,
    tips: np.ndarray,
    lambdas: np.ndarray,
    collar_depth: float,
    bound: float,
    sense: str,
    preserve_convexity: bool = False,
    mean: bool = False,
    step: float | None = None,
) -> CurvatureCollarReport:
    """
    Largest depth (halving search below ``collar_depth``) where the strict curvature
    bound holds on the Fermi samples and, if requested, the Riccati solution keeps
    the sign of the boundary curvature.

    Args:
        metric: Extended metric in collar coordinates
        sigma: Fermi depths of the sample grid, shape (k,)
        tips: Normal-geodesic points, shape (n, k, m)
        lambdas: Measured shape-operator eigenvalue along each normal, shape (n, k)
        collar_depth: Depth of the Fermi collar (upper end of the search)
        bound: Curvature bound C
        sense: ``"<"`` or ``">"``
        preserve_convexity: Also require sign persistence of lambda
        mean: Report the mean-convexity variant (same scalar check on surfaces)
        step: Riccati step

    Raises:
        NumericGuardError: Unsigned boundary curvature when convexity is requested,
            or no positive depth at mesh scale
    """
    n, k_levels, m = tips.shape
    curv = gaussian_curvature_batch(metric, tips.reshape(-1, m)).reshape(n, k_levels)
    lambda0 = lambdas[:, 0]
    if preserve_convexity and np.any(np.abs(lambda0) < 1e-9):
        raise NumericGuardError("boundary curvature is not strictly signed")
    sign = np.sign(lambda0)

    riccati = np.empty((n, k_levels))
    for i in range(n):
        res = riccati_evolve(
            float(lambda0[i]), lambda t, row=curv[i]: float(np.interp(t, sigma, row)), float(sigma[-1]), step
        )
        riccati[i] = np.interp(sigma, res.times, res.values, right=np.inf if res.blew_up else res.values[-1])

    def ok(depth: float) -> bool:
        cols = sigma <= depth + 1e-12
        if not np.all(_satisfies(curv[:, cols], bound, sense)):
            return False
        if preserve_convexity:
            return bool(np.all(np.sign(riccati[:, cols]) == sign[:, None]))
        return True

    lo, hi = 0.0, float(collar_depth)
    if ok(hi):
        lo = hi
    else:
        for _ in range(tolerances.halving_iterations):
            mid = 0.5 * (lo + hi)
            if ok(mid):
                lo = mid
            else:
                hi = mid
    if len(sigma) < 2 or lo < sigma[1]:
        raise NumericGuardError(f"no positive curvature collar depth at mesh scale (K {sense} {bound})")

    cols = sigma <= lo + 1e-12
    inside = curv[:, cols]
    k_min, k_max = float(inside.min()), float(inside.max())
    margin = bound - k_max if sense == "<" else k_min - bound
    kept = bool(np.all(np.sign(riccati[:, cols]) == sign[:, None])) if np.all(sign != 0) else False
    rows = []
    stride = max(1, k_levels // 10)
    for i in sorted({0, n // 2}):
        for j in range(0, k_levels, stride):
            if sigma[j] > lo + 1e-12:
                break
            rows.append(LambdaRow(sample=i, t=float(sigma[j]), riccati=float(riccati[i, j]), measured=float(lambdas[i, j])))
    note = "mean convexity coincides with convexity for surfaces" if mean else ""
    logger.info(f"📐 Curvature collar: depth {lo:.4f} of {collar_depth:.4f}, K in [{k_min:.4g}, {k_max:.4g}]")
    return CurvatureCollarReport(
        bound=bound,
        sense=sense,
        depth=lo,
        collar_depth=float(collar_depth),
        k_min=k_min,
        k_max=k_max,
        margin=margin,
        sign_preserved=kept,
        mean_convexity=mean,
        note=note,
        lambda_samples=rows,
    )


# ============================================
# Exhaustion and cutoffs
# ============================================


@dataclass(frozen=True, eq=False)
class ExhaustionField:
    values: np.ndarray
    base: int
    lipschitz: float
    scale: float


def edge_quotients(mesh: Mesh, values: np.ndarray, tag: str) -> np.ndarray:
    """|f(u) - f(v)| / length(uv) over all edges."""
    u, v = mesh.edges[:, 0], mesh.edges[:, 1]
    return np.abs(values[u] - values[v]) / mesh.edge_lengths(tag)


def exhaustion_function(
    mesh: Mesh, lipschitz: float, radius: float, base: int = 0, tag: str = "base", chunk: int = 512
) -> ExhaustionField:
    """
    Distance to ``base`` averaged over metric balls of ``radius``, rescaled so the
    sampled gradient norm stays below ``lipschitz``.

    Raises:
        SpecError: ``lipschitz <= 1`` or ``radius < 2h``
    """
    if lipschitz <= 1:
        raise SpecError(f"Lipschitz budget must exceed 1, got {lipschitz}")
    if radius < 2 * mesh.h:
        raise SpecError(f"smoothing radius {radius} is below twice the mesh spacing {mesh.h}")
    graph = mesh.graph(tag)
    dist = csgraph.dijkstra(graph, directed=False, indices=base)
    reachable = np.isfinite(dist)
    smooth = np.empty(mesh.n_vertices)
    for lo in range(0, mesh.n_vertices, chunk):
        idx = np.arange(lo, min(lo + chunk, mesh.n_vertices))
        balls = csgraph.dijkstra(graph, directed=False, indices=idx, limit=radius)
        member = np.isfinite(balls) & reachable[None, :]
        smooth[idx] = (member * np.where(reachable, dist, 0.0)[None, :]).sum(axis=1) / np.maximum(member.sum(axis=1), 1)
    quotients = edge_quotients(mesh, smooth, tag)
    worst = float(quotients.max()) if len(quotients) else 0.0
    scale = 1.0 if worst <= lipschitz else lipschitz / worst
    logger.debug(f"exhaustion: max edge quotient {worst:.4f}, scale {scale:.4f}")
    return ExhaustionField(smooth * scale, base, min(worst * scale, lipschitz), scale)


def cutoff_gradient_sups(
    mesh: Mesh, rho: ExhaustionField, ks: Sequence[int], tag: str = "base"
) -> dict[int, float]:
    """Sampled sup of |grad psi_k| (max edge quotient) for each k."""
    return {k: float(edge_quotients(mesh, cutoff_sequence(rho, k), tag).max()) for k in ks}


def cutoff_sequence(rho: ExhaustionField | np.ndarray, k: int) -> np.ndarray:
    """psi(rho / k) with psi = 1 on t <= 1 and 0 on t >= 2."""
    if k < 1:
        raise SpecError(f"cutoff index must be positive, got {k}")
    values = rho.values if isinstance(rho, ExhaustionField) else np.asarray(rho)
    return smooth_step(2.0 - values / k)
