"""Penalized cyclic spline smoother used to model stem radius as a function of angle."""

__all__ = ["CyclicSpline", "cyclic_basis", "fit_cyclic_spline", "polygon_area"]

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from .pointcloud import FloatArray

_PERIOD = 2 * np.pi


def _cubic_bspline(t: FloatArray) -> FloatArray:
    """Uniform cubic B-spline kernel with support [-2, 2]."""
    t = np.abs(t)
    out = np.zeros_like(t)
    inner = t < 1
    outer = (t >= 1) & (t < 2)
    out[inner] = (4 - 6 * t[inner] ** 2 + 3 * t[inner] ** 3) / 6
    out[outer] = (2 - t[outer]) ** 3 / 6
    return out


def cyclic_basis(angles: npt.ArrayLike, num_basis: int) -> FloatArray:
    """Periodic cubic B-spline basis on :math:`[-\\pi, \\pi)` with equally spaced knots."""
    angles = np.asarray(angles, dtype=np.float64)
    spacing = _PERIOD / num_basis
    position = np.mod(angles + np.pi, _PERIOD) / spacing
    offsets = position[:, None] - np.arange(num_basis)[None, :]
    # wrap-around distance to each knot
    offsets = np.mod(offsets + num_basis / 2, num_basis) - num_basis / 2
    return _cubic_bspline(offsets)


def _cyclic_second_difference(num_basis: int) -> FloatArray:
    penalty = np.zeros((num_basis, num_basis))
    for i in range(num_basis):
        penalty[i, (i - 1) % num_basis] += 1
        penalty[i, i] -= 2
        penalty[i, (i + 1) % num_basis] += 1
    return penalty


@dataclass(frozen=True)
class CyclicSpline:
    coefficients: FloatArray
    smoothing: float
    gcv_score: float

    def predict(self, angles: npt.ArrayLike) -> FloatArray:
        return cyclic_basis(angles, len(self.coefficients)) @ self.coefficients


def fit_cyclic_spline(
    angles: npt.ArrayLike,
    values: npt.ArrayLike,
    num_basis: int = 20,
    smoothing_grid: npt.ArrayLike = np.logspace(-3, 3, 20),
) -> CyclicSpline:
    """
    Fits a periodic function of angle by penalized least squares with a second-difference penalty on the spline
    coefficients. The smoothing parameter is chosen from :code:`smoothing_grid` by generalized cross-validation,
    :math:`n \\cdot RSS / (n - tr(A))^2`.
    """
    angles = np.asarray(angles, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    basis = cyclic_basis(angles, num_basis)
    difference = _cyclic_second_difference(num_basis)
    penalty = difference.T @ difference
    gram = basis.T @ basis
    rhs = basis.T @ values
    n = len(values)

    best = None
    for lam in np.asarray(smoothing_grid, dtype=np.float64):
        system = gram + lam * penalty
        try:
            coefficients = np.linalg.solve(system, rhs)
            trace = np.trace(np.linalg.solve(system, gram))
        except np.linalg.LinAlgError:
            continue
        residual = values - basis @ coefficients
        denominator = (n - trace) ** 2
        gcv = n * float(residual @ residual) / denominator if denominator > 0 else np.inf
        if best is None or gcv < best.gcv_score:
            best = CyclicSpline(coefficients, float(lam), gcv)
    if best is None:
        raise np.linalg.LinAlgError("Penalized spline system is singular for all smoothing parameters.")
    return best


def polygon_area(x: npt.ArrayLike, y: npt.ArrayLike) -> float:
    """Area of a simple polygon given its vertices in order (shoelace formula)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))
