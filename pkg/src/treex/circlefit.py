"""Outlier-robust circle fitting for 2D point sets."""

__all__ = [
    "CCI_REGIONS",
    "Circle",
    "CircleFitParams",
    "circle_objective",
    "circle_loss",
    "circle_loss_derivatives",
    "circle_from_three_points",
    "least_squares_circle",
    "fit_gradient",
    "fit_ransac",
    "circular_completeness_index",
    "select_best_circle",
    "fit_circle",
]

from dataclasses import dataclass, replace
from typing import List, Literal, Optional, Tuple

import numpy as np
import numpy.typing as npt

from .pointcloud import FloatArray

_SQRT_2PI = np.sqrt(2 * np.pi)
CCI_REGIONS = 73


@dataclass(frozen=True)
class Circle:
    a: float
    b: float
    r: float
    score: float = 0.0
    inlier_count: int = 0

    @property
    def center(self) -> FloatArray:
        return np.array([self.a, self.b])

    @property
    def diameter(self) -> float:
        return 2 * self.r


@dataclass(frozen=True)
class CircleFitParams:
    """
    Args:
        bandwidth: Kernel bandwidth :math:`s` of the goodness-of-fit; also the RANSAC inlier tolerance and the CCI
            error threshold.
        min_score: Minimum goodness-of-fit of a returned circle.
        min_diameter: Lower bound of the circle diameter.
        max_diameter: Upper bound of the circle diameter.
        min_points: Minimum number of input points required for fitting.
        min_cci: Minimum circular completeness index, or :code:`None` to skip the CCI filter.
        rng_seed: Seed of the RANSAC sampler.
        ransac_iterations: Number of RANSAC iterations.
        method: Circle detection method.
        max_iterations: Iteration limit of the gradient-based method.
        tolerance: Update magnitude below which the gradient-based method stops.
    """

    bandwidth: float = 0.01
    min_score: float = 100.0
    min_diameter: float = 0.02
    max_diameter: float = 1.0
    min_points: int = 15
    min_cci: Optional[float] = 0.3
    rng_seed: int = 0
    ransac_iterations: int = 1000
    method: Literal["ransac", "gradient"] = "ransac"
    max_iterations: int = 1000
    tolerance: float = 1e-5

    def __post_init__(self) -> None:
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive.")
        if not 0 < self.min_diameter <= self.max_diameter:
            raise ValueError("Diameter bounds must satisfy 0 < min_diameter <= max_diameter.")
        if self.method not in ("ransac", "gradient"):
            raise ValueError(f"Unknown circle fitting method {self.method!r}.")


def _as_xy(points: npt.ArrayLike) -> FloatArray:
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        return np.empty((0, 2))
    return np.atleast_2d(points)[:, :2]


def circle_objective(points: npt.ArrayLike, circle: Circle, s: float) -> float:
    """Kernel goodness-of-fit :math:`S = \\sum_i \\frac{1}{s} \\rho((||p_i - c|| - r) / s)` with a standard Gaussian
    density :math:`\\rho`."""
    if s <= 0:
        raise ValueError("s must be positive.")
    xy = _as_xy(points)
    if len(xy) == 0:
        return 0.0
    u = (np.hypot(xy[:, 0] - circle.a, xy[:, 1] - circle.b) - circle.r) / s
    return float(np.exp(-0.5 * u * u).sum() / (s * _SQRT_2PI))


def circle_loss(points: npt.ArrayLike, params: npt.ArrayLike, s: float) -> float:
    """Mean negative goodness-of-fit, :math:`-S / N`, for :code:`params = (a, b, r)`."""
    xy = _as_xy(points)
    a, b, r = params
    return -circle_objective(xy, Circle(a, b, r), s) / len(xy)


def circle_loss_derivatives(points: FloatArray, params: FloatArray, s: float) -> Tuple[float, FloatArray, FloatArray]:
    """Loss :math:`-S/N`, its gradient and its Hessian with respect to :code:`(a, b, r)`."""
    a, b, r = params
    dx = points[:, 0] - a
    dy = points[:, 1] - b
    dist = np.maximum(np.hypot(dx, dy), 1e-12)
    u = (dist - r) / s
    kernel = np.exp(-0.5 * u * u) / _SQRT_2PI
    n = len(points)
    scale = 1.0 / (n * s)
    loss = -kernel.sum() * scale

    # d loss / d u_i = scale * u_i * k_i ; d u_i / d(a, b, r) = (-dx/dist, -dy/dist, -1) / s
    du = np.stack((-dx / dist, -dy / dist, -np.ones(n))) / s
    g_u = scale * u * kernel
    gradient = du @ g_u

    h_uu = scale * kernel * (1 - u * u)
    hessian = (du * h_uu) @ du.T
    # second derivatives of u: d²u/da² = dy²/dist³, d²u/db² = dx²/dist³, d²u/dadb = -dx dy/dist³
    inv_d3 = 1.0 / (dist**3 * s)
    hessian[0, 0] += np.sum(g_u * dy * dy * inv_d3)
    hessian[1, 1] += np.sum(g_u * dx * dx * inv_d3)
    off = np.sum(g_u * -dx * dy * inv_d3)
    hessian[0, 1] += off
    hessian[1, 0] += off
    return loss, gradient, hessian


def _expanded_bbox(xy: FloatArray, s: float) -> Tuple[FloatArray, FloatArray]:
    lower = xy.min(axis=0)
    upper = xy.max(axis=0)
    margin = max(s, 0.05 * float(np.linalg.norm(upper - lower)))
    return lower - margin, upper + margin


def circle_from_three_points(p1: npt.ArrayLike, p2: npt.ArrayLike, p3: npt.ArrayLike) -> Optional[Tuple[float, float, float]]:
    """Circumcircle of three points, or :code:`None` for collinear points."""
    centers, radii = _circumcircles(np.array([p1]), np.array([p2]), np.array([p3]))
    if not np.isfinite(radii[0]):
        return None
    return float(centers[0, 0]), float(centers[0, 1]), float(radii[0])


def _circumcircles(p1: FloatArray, p2: FloatArray, p3: FloatArray) -> Tuple[FloatArray, FloatArray]:
    # solved relative to p1 for numerical stability
    bx, by = (p2 - p1).T
    cx, cy = (p3 - p1).T
    det = 2 * (bx * cy - by * cx)
    b2 = bx * bx + by * by
    c2 = cx * cx + cy * cy
    with np.errstate(divide="ignore", invalid="ignore"):
        ux = (cy * b2 - by * c2) / det
        uy = (bx * c2 - cx * b2) / det
    radii = np.hypot(ux, uy)
    radii[det == 0] = np.inf
    return p1 + np.column_stack((ux, uy)), radii


def least_squares_circle(points: npt.ArrayLike) -> Optional[Tuple[float, float, float]]:
    """Algebraic least-squares circle (Kåsa fit) through at least three points; :code:`None` if degenerate."""
    xy = _as_xy(points)
    if len(xy) < 3:
        return None
    mean = xy.mean(axis=0)
    centered = xy - mean
    design = np.column_stack((centered, np.ones(len(xy))))
    target = (centered**2).sum(axis=1)
    solution, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
    if rank < 3:
        return None
    a = solution[0] / 2
    b = solution[1] / 2
    r2 = solution[2] + a * a + b * b
    if r2 <= 0:
        return None
    return float(a + mean[0]), float(b + mean[1]), float(np.sqrt(r2))


def _within_bounds(a: float, b: float, r: float, lower: FloatArray, upper: FloatArray, params: CircleFitParams) -> bool:
    return (
        params.min_diameter <= 2 * r <= params.max_diameter
        and lower[0] <= a <= upper[0]
        and lower[1] <= b <= upper[1]
    )


def _initializations(xy: FloatArray, params: CircleFitParams) -> FloatArray:
    lower = xy.min(axis=0)
    upper = xy.max(axis=0)
    # degenerate extents are widened so that the 3 x 3 grid does not collapse
    for dim in range(2):
        if upper[dim] - lower[dim] < 1e-12:
            lower[dim] -= params.min_diameter
            upper[dim] += params.min_diameter
    xs = np.linspace(lower[0], upper[0], 3)
    ys = np.linspace(lower[1], upper[1], 3)
    d_min, d_max = params.min_diameter, params.max_diameter
    radii = np.array([d_min, d_max, d_min + 0.5 * (d_max - d_min)]) / 2
    return np.array([(x, y, r) for x in xs for y in ys for r in radii])


def _batch_derivatives(xy: FloatArray, theta: FloatArray, s: float) -> Tuple[FloatArray, FloatArray, FloatArray]:
    """Loss, gradient and Hessian of :func:`circle_loss_derivatives` for several parameter vectors at once."""
    dx = xy[None, :, 0] - theta[:, 0, None]
    dy = xy[None, :, 1] - theta[:, 1, None]
    dist = np.maximum(np.hypot(dx, dy), 1e-12)
    u = (dist - theta[:, 2, None]) / s
    kernel = np.exp(-0.5 * u * u) / _SQRT_2PI
    scale = 1.0 / (xy.shape[0] * s)
    loss = -kernel.sum(axis=1) * scale
    du = np.stack((-dx / dist, -dy / dist, -np.ones_like(dist)), axis=1) / s
    g_u = scale * u * kernel
    gradient = np.einsum("mkn,mn->mk", du, g_u)
    hessian = np.einsum("mkn,mn,mln->mkl", du, scale * kernel * (1 - u * u), du)
    inv_d3 = g_u / (dist**3 * s)
    hessian[:, 0, 0] += np.sum(inv_d3 * dy * dy, axis=1)
    hessian[:, 1, 1] += np.sum(inv_d3 * dx * dx, axis=1)
    off = -np.sum(inv_d3 * dx * dy, axis=1)
    hessian[:, 0, 1] += off
    hessian[:, 1, 0] += off
    return loss, gradient, hessian


def _descent_directions(gradient: FloatArray, hessian: FloatArray, s: float) -> FloatArray:
    """
    Newton directions where the Hessian is positive definite. Elsewhere the Hessian is shifted by a multiple of the
    identity until its smallest eigenvalue equals the magnitude of the original most negative one (a
    Levenberg-Marquardt step, which turns towards the negative gradient as the shift grows). Step lengths are capped at
    the bandwidth.
    """
    eigenvalues = np.linalg.eigvalsh(hessian)
    smallest = eigenvalues[:, 0]
    largest = np.maximum(np.abs(eigenvalues).max(axis=1), 1e-300)
    shift = np.where(smallest > 1e-12 * largest, 0.0, 2 * np.abs(smallest) + 1e-6 * largest)
    shifted = hessian + shift[:, None, None] * np.eye(3)
    directions = -np.linalg.solve(shifted, gradient[..., None])[..., 0]
    norms = np.linalg.norm(directions, axis=1)
    too_long = norms > s
    directions[too_long] *= (s / norms[too_long])[:, None]
    return directions


def _optimize(xy: FloatArray, starts: FloatArray, lower: FloatArray, upper: FloatArray, params: CircleFitParams) -> List[Optional[FloatArray]]:
    """Runs the damped Newton / gradient descent iteration from each start; returns the converged parameters, or
    :code:`None` for starts that left the bounds."""
    s = params.bandwidth
    theta = starts.astype(np.float64).copy()
    results: List[Optional[FloatArray]] = [None] * len(theta)
    active = np.arange(len(theta))
    loss, gradient, hessian = _batch_derivatives(xy, theta, s)
    for _ in range(params.max_iterations):
        if len(active) == 0:
            break
        direction = _descent_directions(gradient, hessian, s)
        # backtracking keeps every accepted step a descent step
        step = np.ones(len(active))
        candidate = theta + direction
        candidate_loss, candidate_gradient, candidate_hessian = _batch_derivatives(xy, candidate, s)
        retry = (candidate_loss > loss) & (step >= 1e-4)
        while retry.any():
            step[retry] *= 0.5
            candidate[retry] = theta[retry] + step[retry, None] * direction[retry]
            c_loss, c_gradient, c_hessian = _batch_derivatives(xy, candidate[retry], s)
            candidate_loss[retry], candidate_gradient[retry], candidate_hessian[retry] = c_loss, c_gradient, c_hessian
            retry = (candidate_loss > loss) & (step >= 1e-4)
        update = np.linalg.norm(candidate - theta, axis=1)
        theta, loss, gradient, hessian = candidate, candidate_loss, candidate_gradient, candidate_hessian

        diameter = 2 * theta[:, 2]
        inside = (
            (diameter >= params.min_diameter)
            & (diameter <= params.max_diameter)
            & np.all(theta[:, :2] >= lower, axis=1)
            & np.all(theta[:, :2] <= upper, axis=1)
        )
        converged = inside & (update < params.tolerance)
        for i in np.flatnonzero(converged):
            results[active[i]] = theta[i].copy()
        keep = inside & ~converged
        active = active[keep]
        theta, loss, gradient, hessian = theta[keep], loss[keep], gradient[keep], hessian[keep]
    # starts that used up the iteration budget inside the bounds are returned as they are
    for i, index in enumerate(active):
        results[index] = theta[i].copy()
    return results


def fit_gradient(points: npt.ArrayLike, params: CircleFitParams) -> List[Circle]:
    """
    Kernel-based circle detection: the loss :math:`-S/N` is minimized from
    27 starting points (a 3 x 3 grid of centers over the bounding box of the points times three radii derived from the
    diameter bounds) with Newton steps, damped towards gradient descent where the Hessian is not positive definite.

    Candidates whose diameter leaves the diameter bounds or whose center leaves the slightly expanded bounding box are
    discarded. Returns all remaining circles with a goodness-of-fit of at least :code:`min_score`.
    """
    xy = _as_xy(points)
    if len(xy) < max(params.min_points, 1):
        return []
    lower, upper = _expanded_bbox(xy, params.bandwidth)
    circles = []
    for theta in _optimize(xy, _initializations(xy, params), lower, upper, params):
        if theta is None:
            continue
        circle = Circle(float(theta[0]), float(theta[1]), float(theta[2]))
        score = circle_objective(xy, circle, params.bandwidth)
        if score >= params.min_score:
            inliers = _inlier_mask(xy, circle.a, circle.b, circle.r, params.bandwidth)
            circles.append(replace(circle, score=score, inlier_count=int(inliers.sum())))
    return circles


def _inlier_mask(xy: FloatArray, a: float, b: float, r: float, tolerance: float) -> npt.NDArray[np.bool_]:
    return np.abs(np.hypot(xy[:, 0] - a, xy[:, 1] - b) - r) <= tolerance


def _sample_triplets(rng: np.random.Generator, n: int, count: int) -> npt.NDArray[np.int64]:
    """Draws `count` triplets of distinct indices in [0, n)."""
    i = rng.integers(0, n, size=count)
    j = rng.integers(0, n - 1, size=count)
    j += j >= i
    k = rng.integers(0, n - 2, size=count)
    low = np.minimum(i, j)
    high = np.maximum(i, j)
    k += k >= low
    k += k >= high
    return np.column_stack((i, j, k))


def _batch_least_squares_circles(xy: FloatArray, masks: npt.NDArray[np.bool_]) -> Tuple[FloatArray, npt.NDArray[np.bool_]]:
    """Algebraic least-squares circles for several subsets of the (already centered) points at once."""
    weights = masks.astype(np.float64)
    x = xy[:, 0]
    y = xy[:, 1]
    z = x * x + y * y
    count = weights.sum(axis=1)
    sx, sy = weights @ x, weights @ y
    sxx, sxy, syy = weights @ (x * x), weights @ (x * y), weights @ (y * y)
    sxz, syz, sz = weights @ (x * z), weights @ (y * z), weights @ z
    normal = np.stack(
        (np.stack((sxx, sxy, sx), axis=-1), np.stack((sxy, syy, sy), axis=-1), np.stack((sx, sy, count), axis=-1)),
        axis=-2,
    )
    rhs = np.stack((sxz, syz, sz), axis=-1)
    scale = np.abs(normal).reshape(len(normal), -1).max(axis=1)
    det = np.linalg.det(normal / np.maximum(scale, 1e-300)[:, None, None])
    solvable = np.abs(det) > 1e-12
    circles = np.full((len(masks), 3), np.nan)
    if solvable.any():
        solution = np.linalg.solve(normal[solvable], rhs[solvable][..., None])[..., 0]
        a = solution[:, 0] / 2
        b = solution[:, 1] / 2
        r2 = solution[:, 2] + a * a + b * b
        circles[solvable] = np.column_stack((a, b, np.sqrt(np.where(r2 > 0, r2, np.nan))))
    return circles, np.isfinite(circles).all(axis=1)


def fit_ransac(points: npt.ArrayLike, params: CircleFitParams) -> List[Circle]:
    """
    RANSAC circle detection. Each iteration samples three points, computes their circle, rejects it if the diameter or
    center violates the bounds, collects the consensus set of points within :code:`bandwidth` of the outline, re-fits
    the circle to the consensus set by least squares, and keeps the re-fitted circle if its goodness-of-fit reaches
    :code:`min_score` and the consensus set has at least three points.

    The result depends only on the input order and :code:`rng_seed`.
    """
    xy = _as_xy(points)
    if len(xy) < max(params.min_points, 3):
        return []
    s = params.bandwidth
    # work in coordinates centered on the point set for a well-conditioned least-squares fit
    offset = xy.mean(axis=0)
    xy = xy - offset
    lower, upper = _expanded_bbox(xy, s)
    rng = np.random.default_rng(params.rng_seed)
    samples = _sample_triplets(rng, len(xy), params.ransac_iterations)

    centers, radii = _circumcircles(xy[samples[:, 0]], xy[samples[:, 1]], xy[samples[:, 2]])
    valid = (
        np.isfinite(radii)
        & (radii <= 10 * params.max_diameter)
        & (2 * radii >= params.min_diameter)
        & (2 * radii <= params.max_diameter)
        & np.all(centers >= lower, axis=1)
        & np.all(centers <= upper, axis=1)
    )
    candidates = np.flatnonzero(valid)
    circles = []
    chunk = max(1, 4_000_000 // len(xy))
    for start in range(0, len(candidates), chunk):
        batch = candidates[start : start + chunk]
        dist = np.hypot(xy[:, 0] - centers[batch, 0, None], xy[:, 1] - centers[batch, 1, None])
        consensus = np.abs(dist - radii[batch, None]) <= s
        consensus_size = consensus.sum(axis=1)
        enough = consensus_size >= 3
        refits, ok = _batch_least_squares_circles(xy, consensus[enough])
        a, b, r = refits.T
        with np.errstate(invalid="ignore"):
            ok &= (
                (2 * r >= params.min_diameter)
                & (2 * r <= params.max_diameter)
                & (a >= lower[0])
                & (a <= upper[0])
                & (b >= lower[1])
                & (b <= upper[1])
            )
        if not ok.any():
            continue
        refits = refits[ok]
        sizes = consensus_size[enough][ok]
        u = (np.hypot(xy[:, 0] - refits[:, 0, None], xy[:, 1] - refits[:, 1, None]) - refits[:, 2, None]) / s
        scores = np.exp(-0.5 * u * u).sum(axis=1) / (s * _SQRT_2PI)
        for (a_i, b_i, r_i), score, size in zip(refits, scores, sizes):
            if score >= params.min_score:
                circles.append(
                    Circle(float(a_i + offset[0]), float(b_i + offset[1]), float(r_i), float(score), int(size))
                )
    return circles


def circular_completeness_index(points: npt.ArrayLike, circle: Circle, s: float, regions: int = CCI_REGIONS) -> float:
    """Fraction of equal angular sectors around the circle center that contain at least one point within distance
    :code:`s` of the outline."""
    if regions < 1:
        raise ValueError("regions must be at least 1.")
    xy = _as_xy(points)
    if len(xy) == 0:
        return 0.0
    dx = xy[:, 0] - circle.a
    dy = xy[:, 1] - circle.b
    near = np.abs(np.hypot(dx, dy) - circle.r) <= s
    if not near.any():
        return 0.0
    angles = np.mod(np.arctan2(dy[near], dx[near]), 2 * np.pi)
    bins = np.minimum((angles / (2 * np.pi) * regions).astype(np.int64), regions - 1)
    return len(np.unique(bins)) / regions


def select_best_circle(candidates: List[Circle], points: npt.ArrayLike, params: CircleFitParams) -> Optional[Circle]:
    """
    Reduces candidate circles to the single best one: circles equal up to the fourth decimal place are deduplicated,
    overlapping circles are suppressed in favor of the highest goodness-of-fit, circles below the CCI threshold are
    dropped (unless the threshold is :code:`None`), and the highest-scoring survivor is returned.
    """
    if not candidates:
        return None
    ordered = sorted(candidates, key=lambda c: (-c.score, c.a, c.b, c.r))

    unique: List[Circle] = []
    seen = set()
    for circle in ordered:
        key = (round(circle.a, 4), round(circle.b, 4), round(circle.r, 4))
        if key not in seen:
            seen.add(key)
            unique.append(circle)

    kept: List[Circle] = []
    for circle in unique:
        if all(np.hypot(circle.a - other.a, circle.b - other.b) >= circle.r + other.r for other in kept):
            kept.append(circle)

    if params.min_cci is not None:
        xy = _as_xy(points)
        kept = [c for c in kept if circular_completeness_index(xy, c, params.bandwidth) >= params.min_cci]
    return kept[0] if kept else None


def fit_circle(points: npt.ArrayLike, params: CircleFitParams) -> Optional[Circle]:
    """Detects candidate circles with the configured method and returns the best one, or :code:`None`."""
    xy = _as_xy(points)
    if len(xy) < params.min_points:
        return None
    if params.method == "gradient":
        candidates = fit_gradient(xy, params)
    else:
        candidates = fit_ransac(xy, params)
    return select_best_circle(candidates, xy, params)
