"""Terrain classification with the cloth simulation filter and rasterized digital terrain models."""

__all__ = [
    "CsfParams",
    "DtmParams",
    "RasterDtm",
    "cloth_distances",
    "csf_classify",
    "idw_heights",
    "rasterize_dtm",
    "height_above_ground",
    "export_ascii_grid",
    "read_ascii_grid",
]

from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import numpy.typing as npt
from scipy.spatial import cKDTree

from .pointcloud import BoolArray, FloatArray, PointCloud, SpatialIndex, voxel_downsample

# constants of the reference cloth simulation
_TIME_STEP = 0.65
_GRAVITY = 0.2
_DAMPING = 0.01
_CONVERGENCE_THRESHOLD = 1e-5
_SLOPE_SMOOTH_THRESHOLD = 0.3
_ZERO_DISTANCE = 1e-9
# relative tolerance for neighbors tied with the k-th nearest terrain point, and the number of extra neighbors queried
_TIE_TOLERANCE = 1e-9
_TIE_MARGIN = 32


@dataclass(frozen=True)
class CsfParams:
    cloth_resolution: float = 0.5
    rigidness: int = 2
    max_iterations: int = 500
    steep_slope_fit: bool = False
    terrain_threshold: float = 0.5
    tree_threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.rigidness not in (1, 2, 3):
            raise ValueError("rigidness must be 1, 2, or 3.")
        if self.cloth_resolution <= 0:
            raise ValueError("cloth_resolution must be positive.")
        if self.tree_threshold < self.terrain_threshold:
            raise ValueError("tree_threshold must be greater than or equal to terrain_threshold.")


@dataclass(frozen=True)
class DtmParams:
    resolution: float = 0.25
    k: int = 400
    c: float = 1.0
    voxel_size: float = 0.05

    def __post_init__(self) -> None:
        if self.resolution <= 0 or self.voxel_size <= 0:
            raise ValueError("resolution and voxel_size must be positive.")
        if self.k < 1:
            raise ValueError("k must be at least 1.")


@dataclass(frozen=True)
class RasterDtm:
    """
    Regular grid of terrain heights. Node :code:`(i, j)` lies at :code:`origin + (j * resolution, i * resolution)`,
    i.e. rows run along y and columns along x.
    """

    origin: FloatArray
    resolution: float
    heights: FloatArray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.heights.shape  # type: ignore[return-value]

    def node_xy(self) -> FloatArray:
        rows, cols = self.heights.shape
        gx, gy = np.meshgrid(np.arange(cols), np.arange(rows))
        return np.column_stack((gx.ravel(), gy.ravel())) * self.resolution + self.origin

    def interpolate(self, xy: npt.ArrayLike) -> FloatArray:
        """Bilinear interpolation between the four surrounding grid nodes; positions are clamped to the grid extent."""
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        rows, cols = self.heights.shape
        grid = (xy[:, :2] - self.origin) / self.resolution
        gx = np.clip(grid[:, 0], 0, cols - 1)
        gy = np.clip(grid[:, 1], 0, rows - 1)
        j0 = np.minimum(np.floor(gx).astype(np.int64), max(cols - 2, 0))
        i0 = np.minimum(np.floor(gy).astype(np.int64), max(rows - 2, 0))
        j1 = np.minimum(j0 + 1, cols - 1)
        i1 = np.minimum(i0 + 1, rows - 1)
        tx = gx - j0
        ty = gy - i0
        h = self.heights
        return (
            h[i0, j0] * (1 - tx) * (1 - ty)
            + h[i0, j1] * tx * (1 - ty)
            + h[i1, j0] * (1 - tx) * ty
            + h[i1, j1] * tx * ty
        )


def _cloth_correction_factors(rigidness: int) -> Tuple[float, float]:
    # displacement fractions after `rigidness` repeated constraint passes between two particles
    single = 1.0 - 0.7**rigidness
    double = 0.5 * (1.0 - 0.4**rigidness) if rigidness > 0 else 0.0
    return single, double


def _intersection_heights(xy: FloatArray, z_inv: FloatArray, origin: FloatArray, resolution: float, shape) -> FloatArray:
    """Highest inverted point height among the points nearest to each cloth particle; empty cells are filled from the
    nearest non-empty cell."""
    rows, cols = shape
    cell = np.rint((xy - origin) / resolution).astype(np.int64)
    cell[:, 0] = np.clip(cell[:, 0], 0, cols - 1)
    cell[:, 1] = np.clip(cell[:, 1], 0, rows - 1)
    flat = cell[:, 1] * cols + cell[:, 0]
    ihv = np.full(rows * cols, -np.inf)
    np.maximum.at(ihv, flat, z_inv)
    empty = ~np.isfinite(ihv)
    if empty.any():
        filled = np.flatnonzero(~empty)
        fy, fx = np.divmod(filled, cols)
        ey, ex = np.divmod(np.flatnonzero(empty), cols)
        _, nearest = cKDTree(np.column_stack((fx, fy))).query(np.column_stack((ex, ey)))
        ihv[empty] = ihv[filled[nearest]]
    return ihv.reshape(rows, cols)


def _smooth_steep_slopes(cloth: FloatArray, ihv: FloatArray, movable: BoolArray) -> None:
    """Post-processing for steep slopes: movable particles adjacent to fixed ones and close to the terrain are pulled
    onto the terrain, propagating through the connected movable region."""
    rows, cols = cloth.shape
    queue = deque(zip(*np.nonzero(~movable)))
    while queue:
        i, j = queue.popleft()
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ni, nj = i + di, j + dj
            if 0 <= ni < rows and 0 <= nj < cols and movable[ni, nj]:
                if abs(cloth[ni, nj] - ihv[ni, nj]) < _SLOPE_SMOOTH_THRESHOLD:
                    cloth[ni, nj] = ihv[ni, nj]
                    movable[ni, nj] = False
                    queue.append((ni, nj))


def _simulate_cloth(xy: FloatArray, z_inv: FloatArray, params: CsfParams) -> Tuple[FloatArray, float, Tuple[int, int]]:
    resolution = params.cloth_resolution
    margin = 2 * resolution
    origin = xy.min(axis=0) - margin
    extent = xy.max(axis=0) + margin - origin
    cols = int(np.ceil(extent[0] / resolution)) + 1
    rows = int(np.ceil(extent[1] / resolution)) + 1

    ihv = _intersection_heights(xy, z_inv, origin, resolution, (rows, cols))
    start_height = z_inv.max() + 0.05
    cloth = np.full((rows, cols), start_height)
    previous = cloth.copy()
    movable = np.ones((rows, cols), dtype=bool)
    single, double = _cloth_correction_factors(params.rigidness)
    gravity_step = _GRAVITY * _TIME_STEP**2

    for _ in range(params.max_iterations):
        before = cloth.copy()
        # gravity with damped verlet integration (heights decrease in the inverted frame)
        step = (cloth - previous) * (1 - _DAMPING) - gravity_step
        previous = cloth.copy()
        cloth = np.where(movable, cloth + step, cloth)

        # internal constraints between 4-neighbors
        for axis in (0, 1):
            a = [slice(None), slice(None)]
            b = [slice(None), slice(None)]
            a[axis] = slice(None, -1)
            b[axis] = slice(1, None)
            a_t, b_t = tuple(a), tuple(b)
            diff = cloth[b_t] - cloth[a_t]
            mov_a = movable[a_t]
            mov_b = movable[b_t]
            both = mov_a & mov_b
            corr = np.zeros_like(cloth)
            corr[a_t] += np.where(both, diff * double, np.where(mov_a & ~mov_b, diff * single, 0.0))
            corr[b_t] -= np.where(both, diff * double, np.where(~mov_a & mov_b, diff * single, 0.0))
            cloth = cloth + corr

        # collision with the inverted points
        hit = movable & (cloth <= ihv)
        cloth[hit] = ihv[hit]
        previous[hit] = ihv[hit]
        movable &= ~hit

        if np.abs(cloth - before).max() < _CONVERGENCE_THRESHOLD:
            break

    if params.steep_slope_fit:
        _smooth_steep_slopes(cloth, ihv, movable)
    return cloth, origin, (rows, cols)  # type: ignore[return-value]


def cloth_distances(cloud: PointCloud, params: CsfParams = CsfParams()) -> FloatArray:
    """Vertical distance of each point to the simulated cloth (positive above the cloth)."""
    if len(cloud) == 0:
        raise ValueError("Cannot classify an empty point cloud.")
    xy = cloud.xyz[:, :2]
    z_inv = -cloud.z
    if np.ptp(cloud.xyz, axis=0).max() == 0:
        return np.zeros(len(cloud))
    cloth, origin, (rows, cols) = _simulate_cloth(xy, z_inv, params)
    cloth_surface = RasterDtm(np.asarray(origin), params.cloth_resolution, cloth)
    return cloth_surface.interpolate(xy) - z_inv


def csf_classify(cloud: PointCloud, params: CsfParams = CsfParams()) -> BoolArray:
    """
    Classifies terrain points with the cloth simulation filter: the point cloud is flipped along
    the z-axis and a grid cloth falls onto it under gravity, held together by internal constraints whose strength is set
    by :code:`rigidness`. Points whose distance to the settled cloth is at most :code:`terrain_threshold` are terrain.

    Args:
        cloud: Point cloud to classify.
        params: Cloth simulation parameters.

    Returns:
        Boolean terrain flag for each point.

    Raises:
        ValueError: If the point cloud is empty.
    """
    return np.abs(cloth_distances(cloud, params)) <= params.terrain_threshold


def _idw_chunk(index: SpatialIndex, terrain_z: FloatArray, query_xy: FloatArray, k: int, c: float) -> FloatArray:
    k = min(k, len(index))
    width = min(k + _TIE_MARGIN, len(index))
    heights = np.empty(len(query_xy))
    pending = np.arange(len(query_xy))
    while len(pending) > 0:
        dist, idx = index.knn(query_xy[pending], width)
        kth = dist[:, k - 1 : k]
        included = dist <= kth * (1 + _TIE_TOLERANCE)
        # rows whose tie ring may extend beyond the queried neighbors are repeated with more neighbors
        truncated = included[:, -1] if width < len(index) else np.zeros(len(pending), dtype=bool)
        z = terrain_z[idx]
        coincident = dist[:, 0] < _ZERO_DISTANCE
        with np.errstate(divide="ignore"):
            weights = 1.0 / dist**c if c != 0 else np.ones_like(dist)
        weights[coincident] = 1.0
        weights[~included] = 0.0
        h = (weights * z).sum(axis=1) / weights.sum(axis=1)
        # rounding can move the weighted mean outside the range of the neighbor heights by an ulp
        h = np.clip(h, np.where(included, z, np.inf).min(axis=1), np.where(included, z, -np.inf).max(axis=1))
        h[coincident] = z[coincident, 0]
        heights[pending[~truncated]] = h[~truncated]
        pending = pending[truncated]
        width = min(2 * width, len(index))
    return heights


def idw_heights(
    query_xy: npt.ArrayLike, terrain_xyz: npt.ArrayLike, k: int, c: float, index: "SpatialIndex | None" = None
) -> FloatArray:
    """Inverse-distance weighted mean of the z-values of the :code:`k` nearest terrain points (in xy) of each query
    position. Points at the same distance as the k-th nearest one (up to a relative tolerance of 1e-9) are included as
    well, so that the result does not depend on the order of the terrain points. A query that coincides with a terrain
    point takes that point's height."""
    terrain_xyz = np.asarray(terrain_xyz, dtype=np.float64)
    query_xy = np.atleast_2d(np.asarray(query_xy, dtype=np.float64))
    if index is None:
        index = SpatialIndex(terrain_xyz[:, :2], dim=2)
    heights = np.empty(len(query_xy))
    chunk = max(1, 2_000_000 // (max(k, 1) + _TIE_MARGIN))
    for start in range(0, len(query_xy), chunk):
        heights[start : start + chunk] = _idw_chunk(index, terrain_xyz[:, 2], query_xy[start : start + chunk], k, c)
    return heights


def rasterize_dtm(terrain: PointCloud, params: DtmParams = DtmParams(), workers: int = 1) -> RasterDtm:
    """
    Rasterizes a digital terrain model from terrain points. The points are voxel-downsampled with
    :code:`params.voxel_size`; the height of each grid node is the inverse-distance weighted mean
    :math:`h(q) = \\sum_p w(q, p) p_z / \\sum_p w(q, p)` with :math:`w(q, p) = 1 / ||p_{xy} - q_{xy}||^c` over the
    :code:`k` nearest terrain points (all points if there are fewer than :code:`k`, see :func:`idw_heights` for ties).

    The grid starts at the minimum xy corner of the terrain points and covers their bounding box.

    Raises:
        ValueError: If there are no terrain points.
    """
    if len(terrain) == 0:
        raise ValueError("At least one terrain point is required to construct a DTM.")
    downsampled, _ = voxel_downsample(terrain, params.voxel_size)
    xyz = downsampled.xyz
    origin = xyz[:, :2].min(axis=0)
    extent = xyz[:, :2].max(axis=0) - origin
    cols = int(np.ceil(extent[0] / params.resolution - 1e-9)) + 1
    rows = int(np.ceil(extent[1] / params.resolution - 1e-9)) + 1
    dtm = RasterDtm(origin, float(params.resolution), np.zeros((rows, cols)))
    index = SpatialIndex(xyz[:, :2], dim=2, workers=workers)
    heights = idw_heights(dtm.node_xy(), xyz, params.k, params.c, index=index)
    return RasterDtm(origin, float(params.resolution), heights.reshape(rows, cols))


def height_above_ground(dtm: RasterDtm, points: Union[PointCloud, npt.ArrayLike]) -> FloatArray:
    """Height of each point above the terrain surface, using bilinear interpolation of the DTM."""
    xyz = points.xyz if isinstance(points, PointCloud) else np.atleast_2d(np.asarray(points, dtype=np.float64))
    return xyz[:, 2] - dtm.interpolate(xyz[:, :2])


def export_ascii_grid(dtm: RasterDtm, path: Union[str, Path], nodata: float = -9999.0) -> None:
    """Writes the DTM as an ESRI ASCII grid. Cell centers coincide with the DTM nodes; the first data row is the
    northernmost one."""
    rows, cols = dtm.shape
    half = 0.5 * dtm.resolution
    lines = [
        f"ncols {cols}",
        f"nrows {rows}",
        f"xllcorner {float(dtm.origin[0] - half)!r}",
        f"yllcorner {float(dtm.origin[1] - half)!r}",
        f"cellsize {float(dtm.resolution)!r}",
        f"NODATA_value {float(nodata)!r}",
    ]
    heights = np.where(np.isfinite(dtm.heights), dtm.heights, nodata)
    for row in heights[::-1]:
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_ascii_grid(path: Union[str, Path]) -> RasterDtm:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = {}
    for line in lines[:6]:
        key, value = line.split()
        header[key.lower()] = float(value)
    cellsize = header["cellsize"]
    origin = np.array([header["xllcorner"] + 0.5 * cellsize, header["yllcorner"] + 0.5 * cellsize])
    heights = np.array([[float(v) for v in line.split()] for line in lines[6:] if line.strip()])[::-1]
    heights[heights == header["nodata_value"]] = np.nan
    return RasterDtm(origin, cellsize, np.ascontiguousarray(heights))
