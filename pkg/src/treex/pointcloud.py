"""Point cloud container, voxel-grid downsampling and spatial indexing."""

__all__ = [
    "PointCloud",
    "VoxelMap",
    "SpatialIndex",
    "voxel_downsample",
    "upsample_labels",
]

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from scipy.spatial import cKDTree

FloatArray = npt.NDArray[np.float64]
LongArray = npt.NDArray[np.int64]
BoolArray = npt.NDArray[np.bool_]

MAX_INTENSITY = 65535


@dataclass(frozen=True)
class PointCloud:
    """Columnar point storage.

    Args:
        xyz: Point coordinates in meters.
        intensity: Optional reflectance values in :code:`[0, 65535]`.
        channels: Additional per-point attributes keyed by name (e.g. :code:`"instance_id"`).

    Raises:
        ValueError: If the coordinates are not an :math:`(N, 3)` array of finite values, if the intensity values are out
            of range, or if any channel does not have one entry per point.
    """

    xyz: FloatArray
    intensity: Optional[FloatArray] = None
    channels: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        xyz = np.ascontiguousarray(self.xyz, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValueError(f"xyz must have shape (N, 3), got {xyz.shape}.")
        bad = ~np.isfinite(xyz).all(axis=1)
        if bad.any():
            raise ValueError(f"Point {int(np.flatnonzero(bad)[0])} has a non-finite coordinate.")
        object.__setattr__(self, "xyz", xyz)
        if self.intensity is not None:
            intensity = np.asarray(self.intensity, dtype=np.float64)
            if intensity.shape != (len(xyz),):
                raise ValueError("intensity must have one entry per point.")
            out_of_range = ~((intensity >= 0) & (intensity <= MAX_INTENSITY))
            if out_of_range.any():
                raise ValueError(
                    f"Point {int(np.flatnonzero(out_of_range)[0])} has an intensity outside [0, {MAX_INTENSITY}]."
                )
            object.__setattr__(self, "intensity", intensity)
        for name, values in self.channels.items():
            if len(values) != len(xyz):
                raise ValueError(f"Channel {name!r} must have one entry per point.")

    def __len__(self) -> int:
        return len(self.xyz)

    @property
    def n(self) -> int:
        return len(self.xyz)

    @property
    def x(self) -> FloatArray:
        return self.xyz[:, 0]

    @property
    def y(self) -> FloatArray:
        return self.xyz[:, 1]

    @property
    def z(self) -> FloatArray:
        return self.xyz[:, 2]

    def subset(self, indices: npt.ArrayLike) -> "PointCloud":
        """Returns a new point cloud with the selected points (index array or boolean mask)."""
        indices = np.asarray(indices)
        return PointCloud(
            self.xyz[indices],
            None if self.intensity is None else self.intensity[indices],
            {name: values[indices] for name, values in self.channels.items()},
        )

    def with_channel(self, name: str, values: np.ndarray) -> "PointCloud":
        channels = dict(self.channels)
        channels[name] = np.asarray(values)
        return PointCloud(self.xyz, self.intensity, channels)


@dataclass(frozen=True)
class VoxelMap:
    """Mapping between the points of a cloud and the occupied voxels of a regular grid.

    Attributes:
        voxel_size: Edge length of the voxels.
        origin: Corner of the voxel grid.
        voxel_of_point: Index of the voxel containing each input point.
        representative_of_voxel: Index of the input point retained for each occupied voxel.
    """

    voxel_size: float
    origin: FloatArray
    voxel_of_point: LongArray
    representative_of_voxel: LongArray

    @property
    def num_voxels(self) -> int:
        return len(self.representative_of_voxel)


def _voxel_keys(xyz: FloatArray, origin: FloatArray, voxel_size: float) -> LongArray:
    cells = np.floor((xyz - origin) / voxel_size).astype(np.int64)
    extent = cells.max(axis=0) + 1
    if float(extent[0]) * float(extent[1]) * float(extent[2]) >= 2**62:
        raise ValueError("Voxel grid is too large for the point cloud extent.")
    return cells[:, 0] + extent[0] * (cells[:, 1] + extent[1] * cells[:, 2])


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> Tuple[PointCloud, VoxelMap]:
    """
    Keeps one real point per occupied voxel. The retained point is the one closest to the centroid of the points in its
    voxel; exact ties are resolved in favor of the lexicographically smallest :code:`(x, y, z)`. The voxel grid is
    anchored at the minimum corner of the bounding box of the cloud. The result does not depend on the order of the
    input points.

    Args:
        cloud: Point cloud to downsample.
        voxel_size: Edge length of the voxels in meters.

    Returns:
        Tuple of the downsampled point cloud (voxels sorted by grid key) and the :class:`VoxelMap` needed to propagate
        labels back to the input points.

    Raises:
        ValueError: If :code:`voxel_size` is not positive.
    """
    if not voxel_size > 0:
        raise ValueError(f"voxel_size must be positive, got {voxel_size}.")
    if len(cloud) == 0:
        empty = np.empty(0, dtype=np.int64)
        return cloud.subset(empty), VoxelMap(float(voxel_size), np.zeros(3), empty, empty)

    xyz = cloud.xyz
    origin = xyz.min(axis=0)
    keys = _voxel_keys(xyz, origin, voxel_size)

    # canonical order makes the floating-point centroid sums independent of the input order
    order = np.lexsort((xyz[:, 2], xyz[:, 1], xyz[:, 0], keys))
    sorted_keys = keys[order]
    starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
    counts = np.diff(np.r_[starts, len(order)])
    voxel_of_sorted = np.repeat(np.arange(len(starts)), counts)

    sorted_xyz = xyz[order]
    centroids = np.add.reduceat(sorted_xyz, starts, axis=0) / counts[:, None]
    sq_dist = ((sorted_xyz - centroids[voxel_of_sorted]) ** 2).sum(axis=1)

    # within a voxel the points are already sorted by (x, y, z), so a stable sort on distance keeps the tie rule
    best = np.lexsort((np.arange(len(order)), sq_dist, voxel_of_sorted))
    first_of_voxel = best[starts]
    representatives = order[first_of_voxel]

    voxel_of_point = np.empty(len(xyz), dtype=np.int64)
    voxel_of_point[order] = voxel_of_sorted

    voxel_map = VoxelMap(float(voxel_size), origin, voxel_of_point, representatives.astype(np.int64))
    return cloud.subset(representatives), voxel_map


def upsample_labels(voxel_map: VoxelMap, voxel_labels: npt.ArrayLike) -> np.ndarray:
    """Propagates one label per voxel representative to every input point of the voxel.

    Raises:
        ValueError: If the number of labels differs from the number of voxels.
    """
    voxel_labels = np.asarray(voxel_labels)
    if len(voxel_labels) != voxel_map.num_voxels:
        raise ValueError(f"Expected {voxel_map.num_voxels} voxel labels, got {len(voxel_labels)}.")
    return voxel_labels[voxel_map.voxel_of_point]


class SpatialIndex:
    """
    Exact k-nearest-neighbor and fixed-radius queries on a 2D or 3D point set, backed by a k-d tree. For 2D indices
    only the first two coordinates of the points and queries are used.

    Args:
        points: Points to index.
        dim: Dimensionality of the index (2 or 3).
        workers: Number of threads used for batch queries (:code:`-1` for all cores).
    """

    def __init__(self, points: npt.ArrayLike, dim: int = 3, workers: int = 1) -> None:
        if dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {dim}.")
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] < dim:
            raise ValueError(f"points must have at least {dim} columns.")
        self.dim = dim
        self.points = np.ascontiguousarray(points[:, :dim])
        self.workers = workers
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def _as_queries(self, q: npt.ArrayLike) -> FloatArray:
        q = np.asarray(q, dtype=np.float64)
        if q.ndim == 1:
            q = q[None, :]
        return np.ascontiguousarray(q[:, : self.dim])

    def radius_query(self, q: npt.ArrayLike, r: float) -> LongArray:
        """Indices of all points with distance :math:`\\leq r` to :code:`q`, in ascending order."""
        if r < 0:
            raise ValueError("r must be non-negative.")
        result = self._tree.query_ball_point(self._as_queries(q)[0], r)
        return np.sort(np.asarray(result, dtype=np.int64))

    def radius_query_many(self, queries: npt.ArrayLike, r: float) -> Sequence[LongArray]:
        if r < 0:
            raise ValueError("r must be non-negative.")
        results = self._tree.query_ball_point(self._as_queries(queries), r, workers=self.workers)
        return [np.sort(np.asarray(res, dtype=np.int64)) for res in results]

    def count_within(self, queries: npt.ArrayLike, r: float) -> LongArray:
        """Number of points within distance :math:`\\leq r` of each query."""
        return np.asarray(
            self._tree.query_ball_point(self._as_queries(queries), r, workers=self.workers, return_length=True),
            dtype=np.int64,
        )

    def knn(self, queries: npt.ArrayLike, k: int) -> Tuple[FloatArray, LongArray]:
        """
        The :code:`k` nearest points of each query (fewer if the index is smaller). Rows are sorted by distance;
        equal distances are ordered by point index.

        Returns:
            Tuple of distance and index arrays, both of shape :math:`(Q, \\min(k, N))`.
        """
        queries = self._as_queries(queries)
        n = len(self.points)
        k = min(k, n)
        if k <= 0 or len(queries) == 0:
            return np.empty((len(queries), max(k, 0))), np.empty((len(queries), max(k, 0)), dtype=np.int64)
        k_extra = min(n, k + 8)
        dist, idx = self._tree.query(queries, k=k_extra, workers=self.workers)
        dist = np.asarray(dist).reshape(len(queries), k_extra)
        idx = np.asarray(idx, dtype=np.int64).reshape(len(queries), k_extra)

        # k-d tree results are sorted by distance only; re-sort ties by index
        order = np.lexsort((idx, dist), axis=1)
        dist = np.take_along_axis(dist, order, axis=1)
        idx = np.take_along_axis(idx, order, axis=1)

        # rows whose tie group at the k-th distance may extend beyond the fetched neighbors
        unresolved = np.flatnonzero((dist[:, k - 1] == dist[:, -1]) & (k_extra < n))
        for row in unresolved:
            # the padded radius guards against the ball query rounding differently from the k-d tree distances
            radius = dist[row, k - 1] * (1 + 1e-9) + 1e-12
            candidates = np.asarray(self._tree.query_ball_point(queries[row], radius), dtype=np.int64)
            cand_dist = np.linalg.norm(self.points[candidates] - queries[row], axis=1)
            cand_order = np.lexsort((candidates, cand_dist))[:k]
            dist[row, :k] = cand_dist[cand_order]
            idx[row, :k] = candidates[cand_order]
        return dist[:, :k], idx[:, :k]
