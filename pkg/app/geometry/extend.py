"""Extending the metric across the interface and the Fermi reflection onto M.

Each collar is handled on its own: the M-side metric is continued past ``s = 0``
by a finite-order reflection, blended with the Q-side metric by a partition of
unity, and the blended metric's normal geodesics define a collar region on the Q
side that reflects onto M with a bounded stretch.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import CubicSpline, RegularGridInterpolator
from scipy.spatial import cKDTree

from app.config import tolerances
from app.errors import NumericGuardError, SPDError, SpecError
from app.geometry.atlas import (
    Box,
    Chart,
    ChartSide,
    DomainKind,
    Mesh,
    MetricField,
    check_spd,
    grid_points,
)
from app.geometry.expr import ExprAST, where
from app.geometry.geodesy import integrate_geodesics
from app.geometry.glue import CollarChart, GluedManifold
from app.geometry.lengthspace import SampledPath, riemannian_length
from app.geometry.profiles import smooth_step_expr
from app.schemas import CollarSampleRow, LipschitzAudit
from app.utils import gather_threads, task_rng

logger = logging.getLogger(__name__)

TILDE_TAG = "tilde"


# ============================================
# Local extensions
# ============================================


@dataclass(frozen=True, eq=False)
class LocalExtension:
    """Reflected metric of one half-ball chart and the depth where it stays SPD."""

    chart_id: str
    metric: MetricField
    t_beta: float
    coefficients: tuple[float, ...]


def seeley_coefficients(order: int) -> np.ndarray:
    """c solving sum_k c_k (-1/k)^j = 1 for j = 0..order-1."""
    k = np.arange(1, order + 1, dtype=float)
    system = np.array([(-1.0 / k) ** j for j in range(order)])
    return np.linalg.solve(system, np.ones(order))


def reflect_metric(metric: MetricField, order: int) -> MetricField:
    """Continue every coefficient past x_m = 0 by a weighted sum of reflections."""
    dim = metric.dim
    s = ExprAST.variable(dim - 1, dim)
    tangential = [ExprAST.variable(i, dim) for i in range(dim - 1)]
    c = seeley_coefficients(order)
    maps = [[*tangential, s * (-1.0 / k)] for k in range(1, order + 1)]
    entries = []
    for e in metric.entries:
        reflected = ExprAST.constant(0.0, dim)
        for ck, mapping in zip(c, maps, strict=True):
            reflected = reflected + float(ck) * e.substitute(mapping)
        entries.append(where(s, e, reflected))
    return MetricField(dim, tuple(entries))


def _slab_points(chart: Chart, top: float, step: float) -> np.ndarray:
    box = chart.bounding_box()
    slab = Box((*box.lower[:-1], 0.0), (*box.upper[:-1], top))
    pts = grid_points(slab, step)
    dist = np.linalg.norm(pts - np.asarray(chart.center), axis=1)
    return pts[(dist <= chart.radius + 1e-9) & (pts[:, -1] > 0)]


def extend_chart_metric(
    chart: Chart, tag: str = "base", order: int | None = None, grid: int | None = None
) -> LocalExtension:
    """
    Reflect a half-ball chart metric across x_m = 0 and find its validity depth.

    The depth is the largest grid value t in (0, 1] such that the reflected metric
    is positive definite on {0 < x_m <= t}, halved.

    Raises:
        SpecError: Chart is not a half-ball
        SPDError: Metric not positive definite on the half-ball itself
        NumericGuardError: No grid value works
    """
    if not chart.has_boundary:
        raise SpecError(f"chart {chart.id!r} has no boundary to extend across")
    order = tolerances.seeley_order if order is None else order
    grid = tolerances.t_beta_grid if grid is None else grid
    step = min(1.0 / grid, chart.radius / 4)
    base = check_spd(chart, step, tag)
    if not base.accepted:
        raise SPDError(f"metric {tag!r} of chart {chart.id!r} is not SPD on the half-ball (at {list(base.argmin)})")

    ext = reflect_metric(chart.metric(tag), order)
    pts = _slab_points(chart, 1.0, step)
    levels = np.arange(1, grid + 1) / grid
    best = 0.0
    for t in levels:
        layer = pts[(pts[:, -1] > t - 1.0 / grid + 1e-12) & (pts[:, -1] <= t + 1e-12)]
        if len(layer):
            try:
                eig = np.linalg.eigvalsh(ext.matrix(layer))[:, 0]
            except NumericGuardError:
                break
            if not np.all(eig > 0):
                break
        best = float(t)
    if best <= 0:
        raise NumericGuardError(f"chart {chart.id!r}: reflected metric is not SPD for any positive depth")
    logger.debug(f"extension {chart.id}: valid to depth {best}, t_beta = {best / 2}")
    return LocalExtension(chart.id, ext, best / 2, tuple(float(c) for c in seeley_coefficients(order)))


def collar_half_chart(n: GluedManifold, collar: CollarChart) -> Chart:
    """The M side of a collar as a half-ball chart carrying g_M."""
    chart = n.atlas.chart(collar.chart_id)
    window = chart.window
    if window is not None:
        window = Box(window.lower, (*window.upper[:-1], 0.0))
    return Chart(
        id=collar.chart_id,
        dim=chart.dim,
        kind=DomainKind.HALF_BALL,
        center=chart.center,
        radius=chart.radius,
        metrics={"base": collar.g_m},
        window=window,
        side=ChartSide.M,
    )


def extend_collars(n: GluedManifold, order: int | None = None, grid: int | None = None) -> list[LocalExtension]:
    """Extensions for every collar, computed concurrently."""
    return gather_threads(lambda c: extend_chart_metric(collar_half_chart(n, c), order=order, grid=grid), list(n.collars))


# ============================================
# Partition of unity and global metric
# ============================================


@dataclass(frozen=True, eq=False)
class PartitionOfUnity:
    """Weights of g_M, g_Q and the reflected metric on one collar chart."""

    chart_id: str
    eta_m: ExprAST
    eta_q: ExprAST
    eta_beta: ExprAST
    width_m: float
    support_q: float

    def weights(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        return np.stack([self.eta_m.evaluate(pts), self.eta_q.evaluate(pts), self.eta_beta.evaluate(pts)], axis=1)


def build_partition_of_unity(
    ext: LocalExtension, dim: int, width_m: float | None = None, support_q: float | None = None
) -> PartitionOfUnity:
    """
    eta_Q ramps from 0 at s = 0 to 1 at s = support_q (default t_beta); eta_M is 1
    below s = -width_m and 0 above s = -width_m / 2; eta_beta takes the rest.
    """
    width_m = tolerances.collar_width_m if width_m is None else width_m
    support_q = ext.t_beta if support_q is None else support_q
    if width_m <= 0 or support_q <= 0:
        raise SpecError("partition of unity widths must be positive")
    s = ExprAST.variable(dim - 1, dim)
    eta_q = smooth_step_expr(s / support_q)
    eta_m = smooth_step_expr(s * (-2.0 / width_m) - 1.0)
    eta_beta = 1.0 - eta_m - eta_q
    return PartitionOfUnity(ext.chart_id, eta_m, eta_q, eta_beta, width_m, support_q)


def blended_metric(collar: CollarChart, ext: LocalExtension, pou: PartitionOfUnity) -> MetricField:
    """g~ = eta_M g_M + eta_Q g_Q + eta_beta s~, one expression per coefficient."""
    dim = collar.g_m.dim
    s = ExprAST.variable(dim - 1, dim)
    entries = []
    for gm, gq, sb in zip(collar.g_m.entries, collar.g_q.entries, ext.metric.entries, strict=True):
        reflected = pou.eta_beta * sb
        m_side = pou.eta_m * gm + reflected
        q_side = pou.eta_q * gq + where(s - pou.support_q, reflected, 0.0)
        entries.append(where(s, m_side, q_side))
    return MetricField(dim, tuple(entries))


def assemble_global_metric(
    n: GluedManifold,
    exts: Sequence[LocalExtension],
    pous: Sequence[PartitionOfUnity],
    h: float,
) -> GluedManifold:
    """
    Register the blended metric under ``tilde`` on every chart of N.

    Non-collar charts of M keep g_M and those of Q keep g_Q. Every chart is checked
    on its h-grid (the mesh vertices): weights in [0, 1] summing to 1, g~ = g_M on
    the M side to 1e-12 and g~ SPD.

    Raises:
        NumericGuardError: Weights out of range or restriction mismatch
        SPDError: g~ not SPD at a vertex (message names the vertex and chart)
    """
    by_chart = {e.chart_id: e for e in exts}
    pou_by_chart = {p.chart_id: p for p in pous}
    charts = dict(n.atlas.charts)
    for collar in n.collars:
        ext, pou = by_chart.get(collar.chart_id), pou_by_chart.get(collar.chart_id)
        if ext is None or pou is None:
            raise SpecError(f"collar {collar.chart_id!r} has no extension or partition of unity")
        chart = charts[collar.chart_id].with_metric(TILDE_TAG, blended_metric(collar, ext, pou))
        pts = grid_points(chart.bounding_box(), h)
        pts = pts[chart.contains(pts)]
        weights = pou.weights(pts)
        if np.any(weights < -1e-12) or np.any(weights > 1 + 1e-12) or np.any(np.abs(weights.sum(axis=1) - 1) > 1e-9):
            raise NumericGuardError(f"partition of unity on {collar.chart_id!r} leaves [0, 1] or does not sum to 1")
        m_side = pts[pts[:, -1] <= 0]
        if len(m_side):
            diff = np.abs(chart.metric(TILDE_TAG).matrix(m_side) - collar.g_m.matrix(m_side))
            scale = np.maximum(np.abs(collar.g_m.matrix(m_side)), 1.0)
            if np.any(diff > 1e-12 * scale):
                raise NumericGuardError(f"extended metric differs from g_M on the M side of {collar.chart_id!r}")
        _require_spd_at_vertices(chart, pts)
        charts[collar.chart_id] = chart
    for cid, chart in charts.items():
        if TILDE_TAG not in chart.metrics:
            chart = chart.with_metric(TILDE_TAG, chart.metric("base"))
            pts = grid_points(chart.bounding_box(), h)
            _require_spd_at_vertices(chart, pts[chart.contains(pts)])
            charts[cid] = chart
    logger.info(f"🧵 Assembled extended metric on {len(charts)} charts")
    return replace(n, atlas=replace(n.atlas, charts=charts))


def _require_spd_at_vertices(chart: Chart, pts: np.ndarray) -> None:
    if len(pts) == 0:
        return
    eig = np.linalg.eigvalsh(chart.metric(TILDE_TAG).matrix(pts))[:, 0]
    bad = np.flatnonzero(~(eig > 0))
    if len(bad):
        raise SPDError(
            f"extended metric not SPD at vertex {pts[bad[0]].tolist()} of chart {chart.id!r} "
            f"(min eigenvalue {eig[bad[0]]:.4g})"
        )


def extend_metric(n: GluedManifold, h: float, width_m: float | None = None, support_q: float | None = None) -> tuple[GluedManifold, list[LocalExtension], list[PartitionOfUnity]]:
    """Extensions, partitions of unity and assembly in one call."""
    exts = extend_collars(n)
    pous = [build_partition_of_unity(e, n.dim, width_m, support_q) for e in exts]
    return assemble_global_metric(n, exts, pous, h), exts, pous


# ============================================
# Fermi collar
# ============================================


@dataclass(frozen=True, eq=False)
class FermiCollar:
    """Normal geodesics from the interface of one collar chart and the reflection they define."""

    component: str
    chart_id: str
    eps: float
    u: np.ndarray
    sigma: np.ndarray
    phi_plus: np.ndarray
    phi_minus: np.ndarray
    normals: np.ndarray
    norms: np.ndarray
    s0: np.ndarray
    period: float | None
    cap: float
    spline: CubicSpline = field(repr=False)
    grids: dict = field(repr=False, default_factory=dict)

    @property
    def min_depth(self) -> float:
        return float(self.s0.min())

    def depth(self, u: np.ndarray | float) -> np.ndarray:
        """Smoothed collar depth s_0 along the boundary parameter."""
        return np.clip(self.spline(np.asarray(u, dtype=float)), 0.0, self.cap)

    def stretch_at(self, depth: float) -> np.ndarray:
        """||d rho|| at Fermi depth ``depth`` for every boundary sample."""
        return np.array([np.interp(depth, self.sigma, row) for row in self.norms])

    def shape_eigenvalues(self, metric: MetricField) -> np.ndarray:
        """-J'/J along each normal, J the length of the tangential Fermi field (m = 2)."""
        du = self.grids["dplus"][..., 0]
        g = metric.matrix(self.phi_plus.reshape(-1, 2)).reshape(*self.phi_plus.shape[:2], 2, 2)
        jac = np.sqrt(np.einsum("nki,nkij,nkj->nk", du, g, du))
        return -np.gradient(jac, self.sigma, axis=1) / jac

    def sample_rows(self) -> list[CollarSampleRow]:
        rows = []
        for i, (u, s0) in enumerate(zip(self.u, self.s0, strict=True)):
            inside = self.norms[i, self.sigma <= s0 + 1e-12]
            top = max(float(inside.max()), float(np.interp(s0, self.sigma, self.norms[i])))
            rows.append(CollarSampleRow(sample=i, u=float(u), s0=float(s0), max_dr=top))
        return rows


def _boundary_samples(lo: float, hi: float, h: float, period: float | None) -> np.ndarray:
    k_lo = math.ceil(lo / h - 1e-9)
    k_hi = math.floor(hi / h + 1e-9)
    u = np.arange(k_lo, k_hi + 1) * h
    if period is not None:
        u = u[u < lo + period - 1e-9]
    return u


def _tangential_derivative(phi: np.ndarray, u: np.ndarray, period: float | None) -> np.ndarray:
    if period is None:
        return np.gradient(phi, u, axis=0)
    shift = np.zeros(phi.shape[-1])
    shift[0] = period
    ext = np.concatenate([phi[-1:] - shift, phi, phi[:1] + shift])
    u_ext = np.concatenate([u[-1:] - period, u, u[:1] + period])
    return np.gradient(ext, u_ext, axis=0)[1:-1]


def _operator_norms(d_rho: np.ndarray, g_image: np.ndarray, g_source: np.ndarray) -> np.ndarray:
    """sqrt of the top generalized eigenvalue of (d_rho^T G_image d_rho, G_source)."""
    a = np.einsum("...ia,...ij,...jb->...ab", d_rho, g_image, d_rho)
    chol = np.linalg.cholesky(g_source)
    x = np.linalg.solve(chol, a)
    c = np.linalg.solve(chol, np.swapaxes(x, -1, -2))
    c = 0.5 * (c + np.swapaxes(c, -1, -2))
    return np.sqrt(np.maximum(np.linalg.eigvalsh(c)[..., -1], 0.0))


def _separations(tips: np.ndarray, metric: MetricField) -> np.ndarray:
    n = len(tips)
    if n < 2:
        return np.full(n, np.inf)
    k = min(5, n)
    _, idx = cKDTree(tips).query(tips, k=k)
    others = idx[:, 1:]
    d = tips[others] - tips[:, None, :]
    mid = 0.5 * (tips[others] + tips[:, None, :])
    g = metric.matrix(mid.reshape(-1, tips.shape[1])).reshape(n, k - 1, tips.shape[1], tips.shape[1])
    return np.sqrt(np.einsum("nki,nkij,nkj->nk", d, g, d)).min(axis=1)


def build_fermi_collar(
    n: GluedManifold,
    component: str,
    h: float,
    eps: float | None = None,
    cap: float | None = None,
    step: float | None = None,
) -> FermiCollar:
    """
    Shoot unit-speed normal geodesics of g~ from the interface samples of one
    collar and choose the reflection depth s_0 per sample.

    s_0 is the largest depth up to min(cap, collar window) (halving search) at
    which the stretch ||d rho|| stays within 1 + eps and neither side's normal
    geodesics come closer than half the boundary spacing.

    Raises:
        SpecError: eps <= 0 or a surface is not given
        ShootingError: Metric blow-up along a normal geodesic
        NumericGuardError: Some sample admits no positive depth
    """
    eps = tolerances.epsilon if eps is None else eps
    if eps <= 0:
        raise SpecError(f"epsilon must be positive, got {eps}")
    if n.dim != 2:
        raise SpecError("Fermi collars are built for surfaces (m = 2)")
    cap = tolerances.collar_cap if cap is None else cap
    step = tolerances.fermi_step if step is None else step
    collar = n.collar(component)
    chart = n.atlas.chart(collar.chart_id)
    metric = chart.metric(TILDE_TAG)
    window = chart.bounding_box()
    depth = min(cap, collar.depth_m, collar.depth_q)
    u = _boundary_samples(window.lower[0], window.upper[0], h, collar.period)
    if len(u) < 2:
        raise SpecError(f"collar {collar.chart_id!r} has fewer than two boundary samples at h={h}")

    x0 = np.stack([u, np.zeros_like(u)], axis=1)
    ginv = np.linalg.inv(metric.matrix(x0))
    nu = ginv[:, :, -1] / np.sqrt(ginv[:, -1, -1])[:, None]
    shots = gather_threads(lambda sign: integrate_geodesics(metric, x0, sign * nu, depth, step), [1.0, -1.0])
    sigma = shots[0][0]
    plus = np.swapaxes(shots[0][1], 0, 1)
    minus = np.swapaxes(shots[1][1], 0, 1)

    d_plus = np.stack([_tangential_derivative(plus, u, collar.period), np.gradient(plus, sigma, axis=1)], axis=-1)
    d_minus = np.stack([_tangential_derivative(minus, u, collar.period), np.gradient(minus, sigma, axis=1)], axis=-1)
    d_rho = d_minus @ np.linalg.inv(d_plus)
    shape = plus.shape[:2]
    g_plus = metric.matrix(plus.reshape(-1, 2)).reshape(*shape, 2, 2)
    g_minus = metric.matrix(minus.reshape(-1, 2)).reshape(*shape, 2, 2)
    norms = _operator_norms(d_rho, g_minus, g_plus)

    sep0 = _separations(x0, metric)
    injective = np.ones(shape, dtype=bool)
    for k in range(len(sigma)):
        for tips in (plus[:, k], minus[:, k]):
            injective[:, k] &= _separations(tips, metric) >= 0.5 * sep0 - 1e-12
    ok = np.logical_and.accumulate((norms <= 1.0 + eps) & injective, axis=1)

    s0 = np.empty(len(u))
    for i in range(len(u)):
        def passes(d: float, i: int = i) -> bool:
            level = int(np.searchsorted(sigma, d + 1e-12, side="right")) - 1
            return bool(ok[i, level]) and float(np.interp(d, sigma, norms[i])) <= 1.0 + eps

        lo, hi = 0.0, depth
        if passes(hi):
            lo = hi
        else:
            for _ in range(tolerances.halving_iterations):
                mid = 0.5 * (lo + hi)
                if passes(mid):
                    lo = mid
                else:
                    hi = mid
        s0[i] = lo
    if np.any(s0 < sigma[1]):
        bad = int(np.argmin(s0))
        raise NumericGuardError(f"no positive Fermi depth passes at boundary sample u={u[bad]:.4g} of {collar.chart_id!r}")

    if collar.period is not None:
        spline = CubicSpline(np.append(u, u[0] + collar.period), np.append(s0, s0[0]), bc_type="periodic")
    else:
        spline = CubicSpline(u, s0, bc_type="clamped")

    grids = _interpolators(u, sigma, plus, minus, d_plus, d_minus, collar.period)
    grids["dplus"] = d_plus
    logger.info(
        f"🪞 Fermi collar {collar.chart_id}: {len(u)} samples, s0 in [{s0.min():.4f}, {s0.max():.4f}], "
        f"max stretch {norms[ok].max():.4f}"
    )
    return FermiCollar(
        component=component,
        chart_id=collar.chart_id,
        eps=eps,
        u=u,
        sigma=sigma,
        phi_plus=plus,
        phi_minus=minus,
        normals=nu,
        norms=norms,
        s0=s0,
        period=collar.period,
        cap=depth,
        spline=spline,
        grids=grids,
    )


def build_fermi_collars(n: GluedManifold, h: float, eps: float | None = None) -> list[FermiCollar]:
    return [build_fermi_collar(n, c.component, h, eps) for c in n.collars]


# ============================================
# Reflection
# ============================================


def _interpolators(u, sigma, plus, minus, d_plus, d_minus, period) -> dict:
    if period is not None:
        shift = np.zeros(plus.shape[-1])
        shift[0] = period
        u = np.append(u, u[0] + period)
        plus = np.concatenate([plus, plus[:1] + shift])
        minus = np.concatenate([minus, minus[:1] + shift])
        d_plus = np.concatenate([d_plus, d_plus[:1]])
        d_minus = np.concatenate([d_minus, d_minus[:1]])

    def interp(values: np.ndarray) -> RegularGridInterpolator:
        return RegularGridInterpolator((u, sigma), values, bounds_error=False, fill_value=None)

    return {
        "u": u,
        "plus": interp(plus),
        "minus": interp(minus),
        "jac_plus": interp(d_plus),
        "jac_minus": interp(d_minus),
        "tree_plus": cKDTree(plus.reshape(-1, plus.shape[-1])),
        "tree_minus": cKDTree(minus.reshape(-1, minus.shape[-1])),
        "shape": plus.shape[:2],
    }


def fermi_coordinates(collar: FermiCollar, points: np.ndarray, side: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """
    Invert the normal-geodesic grid: (u, sigma) with Phi(u, sigma) = point.

    Returns:
        Parameters of shape (n, 2) and a mask of points the grid actually covers
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    key = "plus" if side > 0 else "minus"
    grids = collar.grids
    u_grid = grids["u"]
    n_u, n_s = grids["shape"]
    _, flat = grids[f"tree_{key}"].query(pts)
    params = np.stack([u_grid[flat // n_s], collar.sigma[flat % n_s]], axis=1)
    phi, jac = grids[key], grids[f"jac_{key}"]
    lo = np.array([u_grid[0], 0.0])
    hi = np.array([u_grid[-1], collar.sigma[-1]])
    residual = np.full(len(pts), np.inf)
    for _ in range(50):
        r = phi(params) - pts
        residual = np.linalg.norm(r, axis=1)
        if np.all(residual < 1e-13):
            break
        delta = np.linalg.solve(jac(params), r[..., None])[..., 0]
        params = np.clip(params - delta, lo - 1e-9, hi + 1e-9)
    residual = np.linalg.norm(phi(params) - pts, axis=1)
    valid = residual < 1e-8
    return params, valid


def in_collar_region(collar: FermiCollar, points: np.ndarray) -> np.ndarray:
    """Mask of Q-side points (s > 0) inside the reflected region {sigma <= s_0(u)}."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    params, valid = fermi_coordinates(collar, pts, 1)
    return valid & (params[:, 1] <= collar.depth(params[:, 0]) + 1e-9)


def project_rho(collar: FermiCollar, points) -> np.ndarray:
    """
    Identity on M (s <= 0), Fermi reflection (u, sigma) -> (u, -sigma) on the Q
    side of the collar.

    Raises:
        SpecError: A point lies outside P
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = pts.copy()
    q_side = pts[:, -1] > 0
    if q_side.any():
        params, valid = fermi_coordinates(collar, pts[q_side], 1)
        inside = valid & (params[:, 1] <= collar.depth(params[:, 0]) + 1e-9)
        if not np.all(inside):
            bad = pts[q_side][int(np.argmin(inside))]
            raise SpecError(f"point {bad.tolist()} lies outside the reflected collar region")
        out[q_side] = collar.grids["minus"](params)
    return out[0] if np.ndim(points) == 1 else out


def rho_inverse(collar: FermiCollar, points) -> np.ndarray:
    """Inverse of the reflection on the M-side collar region."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    params, valid = fermi_coordinates(collar, pts, -1)
    inside = valid & (params[:, 1] <= collar.depth(params[:, 0]) + 1e-9)
    if not np.all(inside):
        raise SpecError("point lies outside the M-side collar region")
    out = collar.grids["plus"](params)
    return out[0] if np.ndim(points) == 1 else out


def project_path(collar: FermiCollar, path: SampledPath) -> SampledPath:
    """The image of a sampled path in P under the reflection."""
    return SampledPath(path.times, project_rho(collar, path.points), path.chart, path.vertices, path.tag)


def p_mask(mesh: Mesh, collars: Sequence[FermiCollar]) -> np.ndarray:
    """Mesh vertices of P = M together with the reflected collar regions."""
    mask = mesh.in_m.copy()
    for collar in collars:
        idx = np.flatnonzero((mesh.vertex_chart == mesh.chart_ids.index(collar.chart_id)) & ~mesh.in_m)
        if len(idx):
            mask[idx] = in_collar_region(collar, mesh.coords[idx])
    return mask


# ============================================
# Lipschitz audit
# ============================================


def _fermi_points(collar: FermiCollar, params: np.ndarray) -> np.ndarray:
    """Points at signed Fermi depth: sigma >= 0 on the Q side, sigma < 0 on M."""
    pos = params[:, 1] >= 0
    out = np.empty((len(params), 2))
    if pos.any():
        out[pos] = collar.grids["plus"](params[pos])
    if (~pos).any():
        flipped = params[~pos].copy()
        flipped[:, 1] *= -1
        out[~pos] = collar.grids["minus"](flipped)
    return out


def sample_audit_paths(collar: FermiCollar, count: int, seed: int, samples: int = 64) -> list[SampledPath]:
    """Seeded paths in P: straight segments in signed Fermi coordinates."""
    u_lo, u_hi = float(collar.u[0]), float(collar.u[-1])
    depth = 0.9 * collar.min_depth
    paths = []
    for trial in range(count):
        rng = task_rng(seed, f"lipschitz-{collar.component}-{trial}")
        span = rng.uniform(0.05, 0.3) * (u_hi - u_lo)
        ua = rng.uniform(u_lo, u_hi - span)
        a = np.array([ua, rng.uniform(-depth, depth)])
        b = np.array([ua + span, rng.uniform(-depth, depth)])
        t = np.linspace(0.0, 1.0, samples)
        params = a[None, :] + t[:, None] * (b - a)[None, :]
        paths.append(SampledPath(t, _fermi_points(collar, params), collar.chart_id, None, TILDE_TAG))
    return paths


def lipschitz_audit(collar: FermiCollar, chart: Chart, paths: Sequence[SampledPath]) -> LipschitzAudit:
    """Max over paths of L(rho o gamma) / L(gamma); passes iff <= (1 + eps)(1 + tau)."""
    ratios = []
    for path in paths:
        image = project_path(collar, path)
        length = riemannian_length(path, chart, TILDE_TAG)
        ratios.append(riemannian_length(image, chart, TILDE_TAG) / length if length > 0 else 1.0)
    bound = (1.0 + collar.eps) * (1.0 + tolerances.lipschitz_slack)
    worst = max(ratios) if ratios else 1.0
    logger.info(f"📏 Lipschitz audit {collar.chart_id}: max ratio {worst:.4f} (bound {bound:.4f})")
    return LipschitzAudit(max_ratio=worst, bound=bound, passed=worst <= bound, ratios=ratios)
