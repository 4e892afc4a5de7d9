"""Detection of tree stems, their positions and their diameters at breast height."""

__all__ = [
    "BREAST_HEIGHT",
    "StemDetectionParams",
    "StemCluster",
    "StemDetection",
    "extract_stem_layer",
    "cluster_stem_candidates",
    "layer_bounds",
    "fit_layer_circles",
    "best_layer_subset",
    "filter_clusters",
    "gam_layer_diameter",
    "estimate_dbh",
    "linear_prediction",
    "detect_stems",
    "write_stem_table",
]

import csv
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from .circlefit import Circle, CircleFitParams, fit_circle
from .clustering import NOISE, dbscan
from .gam import fit_cyclic_spline, polygon_area
from .pointcloud import FloatArray, LongArray, PointCloud, voxel_downsample
from .terrain import RasterDtm, height_above_ground

logger = logging.getLogger(__name__)

BREAST_HEIGHT = 1.3
_MAX_ENUMERATED_LAYERS = 20


@dataclass(frozen=True)
class StemDetectionParams:  # pylint: disable=too-many-instance-attributes
    """Parameters of the stem detection stage. Defaults correspond to the TLS preset."""

    min_height: float = 1.0
    max_height: float = 4.0
    voxel_size: float = 0.015
    eps_2d: float = 0.025
    min_pts_2d: int = 90
    eps_3d: float = 0.1
    min_pts_3d: int = 15
    min_cluster_points: int = 300
    min_vertical_extent: float = 1.5
    min_intensity: Optional[float] = 6000.0
    num_layers: int = 15
    first_layer_height: float = 1.0
    layer_height: float = 0.225
    layer_overlap: float = 0.025
    num_sample_layers: int = 6
    max_diameter_std: float = 0.04
    max_center_std: Optional[float] = None
    gam_buffer_width: float = 0.03
    gam_max_radius_diff: float = 0.3
    literal_sqrt_area: bool = False
    refined_circle_fitting: bool = False
    pca_min_explained_variance: Optional[float] = None
    pca_max_inclination: Optional[float] = None
    circle: CircleFitParams = field(default_factory=CircleFitParams)

    def __post_init__(self) -> None:
        if self.max_height <= self.min_height:
            raise ValueError("max_height must be greater than min_height.")
        if self.layer_overlap >= self.layer_height:
            raise ValueError("layer_overlap must be smaller than layer_height.")
        if self.num_sample_layers < 1 or self.num_sample_layers > self.num_layers:
            raise ValueError("num_sample_layers must be between 1 and num_layers.")


@dataclass(frozen=True)
class StemCluster:
    """A candidate stem. Point indices refer to the downsampled stem layer."""

    indices: LongArray
    centroid_xy: FloatArray = field(default_factory=lambda: np.zeros(2))
    terrain_height: float = 0.0
    layer_indices: Tuple[LongArray, ...] = ()
    layer_circles: Tuple[Optional[Circle], ...] = ()
    best_subset: Tuple[int, ...] = ()
    diameter_std: float = np.inf

    @property
    def num_points(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class StemDetection:
    position_bh: FloatArray
    dbh: float
    layer_heights: FloatArray
    layer_diameters: FloatArray
    layer_valid: npt.NDArray[np.bool_]
    cluster: StemCluster

    @property
    def diameter_std(self) -> float:
        return self.cluster.diameter_std

    @property
    def n_layers_used(self) -> int:
        return len(self.layer_heights)


def extract_stem_layer(cloud: PointCloud, heights: npt.ArrayLike, params: StemDetectionParams) -> PointCloud:
    """
    Points whose height above the terrain lies in :code:`[min_height, max_height]`, voxel-downsampled. The returned
    cloud carries the channels :code:`"height"` and :code:`"source_index"` (index into :code:`cloud`).
    """
    heights = np.asarray(heights, dtype=np.float64)
    selected = np.flatnonzero((heights >= params.min_height) & (heights <= params.max_height))
    layer = cloud.subset(selected).with_channel("height", heights[selected]).with_channel("source_index", selected)
    downsampled, _ = voxel_downsample(layer, params.voxel_size)
    return downsampled


def cluster_stem_candidates(layer: PointCloud, params: StemDetectionParams, workers: int = 1) -> List[StemCluster]:
    """Two-stage DBSCAN: clusters in the xy-plane, then each 2D cluster is split by a 3D clustering."""
    if len(layer) == 0:
        return []
    labels_2d = dbscan(layer.xyz[:, :2], params.eps_2d, params.min_pts_2d, workers=workers)
    clusters = []
    for label in range(labels_2d.max() + 1):
        members = np.flatnonzero(labels_2d == label)
        labels_3d = dbscan(layer.xyz[members], params.eps_3d, params.min_pts_3d, workers=workers)
        for sub_label in range(labels_3d.max() + 1):
            indices = members[labels_3d == sub_label]
            clusters.append(StemCluster(indices, layer.xyz[indices, :2].mean(axis=0)))
    return clusters


def layer_bounds(params: StemDetectionParams) -> FloatArray:
    """Lower and upper normalized height of each horizontal layer used for circle fitting."""
    step = params.layer_height - params.layer_overlap
    lower = params.first_layer_height + step * np.arange(params.num_layers)
    return np.column_stack((lower, lower + params.layer_height))


def _passes_pca(xyz: FloatArray, params: StemDetectionParams) -> bool:
    if params.pca_min_explained_variance is None and params.pca_max_inclination is None:
        return True
    if len(xyz) < 3:
        return False
    eigenvalues, eigenvectors = np.linalg.eigh(np.cov((xyz - xyz.mean(axis=0)).T))
    if params.pca_min_explained_variance is not None:
        if eigenvalues[-1] / eigenvalues.sum() < params.pca_min_explained_variance:
            return False
    if params.pca_max_inclination is not None:
        inclination = np.degrees(np.arccos(min(1.0, abs(eigenvectors[2, -1]))))
        if inclination > params.pca_max_inclination:
            return False
    return True


def fit_layer_circles(
    xyz: FloatArray, terrain_height: float, params: StemDetectionParams
) -> Tuple[Tuple[LongArray, ...], Tuple[Optional[Circle], ...]]:
    """Splits the points of a cluster into the horizontal layers and fits a circle to each layer."""
    normalized_z = xyz[:, 2] - terrain_height
    layer_indices = []
    circles = []
    for layer, (low, high) in enumerate(layer_bounds(params)):
        indices = np.flatnonzero((normalized_z >= low) & (normalized_z <= high))
        layer_indices.append(indices)
        circle_params = replace(params.circle, rng_seed=params.circle.rng_seed + layer)
        circles.append(fit_circle(xyz[indices, :2], circle_params))
    return tuple(layer_indices), tuple(circles)


def best_layer_subset(
    circles: Sequence[Optional[Circle]], num_sample_layers: int
) -> Tuple[Tuple[int, ...], float]:
    """
    The combination of :code:`num_sample_layers` layers with a fitted circle whose circle diameters have the smallest
    (population) standard deviation. Returns an empty tuple and :code:`inf` if fewer layers have circles.
    """
    successful = [i for i, c in enumerate(circles) if c is not None]
    if len(successful) < num_sample_layers:
        return (), np.inf
    if len(successful) > _MAX_ENUMERATED_LAYERS:
        successful = sorted(sorted(successful, key=lambda i: -circles[i].score)[:_MAX_ENUMERATED_LAYERS])
    diameters = np.array([2 * circles[i].r for i in successful])
    combinations = np.array(list(itertools.combinations(range(len(successful)), num_sample_layers)), dtype=np.int64)
    stds = diameters[combinations].std(axis=1)
    best = int(np.argmin(stds))
    return tuple(successful[i] for i in combinations[best]), float(stds[best])


def _refine_circles(
    circles: Tuple[Optional[Circle], ...], full_xyz: FloatArray, full_heights: FloatArray, params: StemDetectionParams
) -> Tuple[Optional[Circle], ...]:
    refined = []
    for circle, (low, high) in zip(circles, layer_bounds(params)):
        if circle is None:
            refined.append(None)
            continue
        in_layer = (full_heights >= low) & (full_heights <= high)
        residual = np.abs(np.hypot(full_xyz[:, 0] - circle.a, full_xyz[:, 1] - circle.b) - circle.r)
        buffer_points = full_xyz[in_layer & (residual <= params.gam_buffer_width), :2]
        refit = fit_circle(buffer_points, params.circle) if len(buffer_points) >= params.circle.min_points else None
        refined.append(refit if refit is not None else circle)
    return tuple(refined)


def _filter_cluster(
    cluster: StemCluster,
    layer: PointCloud,
    dtm: RasterDtm,
    params: StemDetectionParams,
    full_cloud: Optional[Tuple[FloatArray, FloatArray]],
) -> Optional[StemCluster]:
    if cluster.num_points < params.min_cluster_points:
        return None
    xyz = layer.xyz[cluster.indices]
    if np.ptp(xyz[:, 2]) < params.min_vertical_extent:
        return None
    if layer.intensity is not None and params.min_intensity is not None:
        if np.percentile(layer.intensity[cluster.indices], 80) < params.min_intensity:
            return None
    if not _passes_pca(xyz, params):
        return None

    terrain_height = float(dtm.interpolate(cluster.centroid_xy)[0])
    layer_indices, circles = fit_layer_circles(xyz, terrain_height, params)
    if params.refined_circle_fitting and full_cloud is not None:
        full_xyz, full_z = full_cloud
        near = np.hypot(*(full_xyz[:, :2] - cluster.centroid_xy).T) <= params.circle.max_diameter
        circles = _refine_circles(circles, full_xyz[near], full_z[near] - terrain_height, params)
    subset, std = best_layer_subset(circles, params.num_sample_layers)
    if not subset or std > params.max_diameter_std:
        return None
    if params.max_center_std is not None:
        centers = np.array([[circles[i].a, circles[i].b] for i in subset])
        if (centers.std(axis=0) > params.max_center_std).any():
            return None
    return replace(
        cluster,
        terrain_height=terrain_height,
        layer_indices=tuple(cluster.indices[i] for i in layer_indices),
        layer_circles=circles,
        best_subset=subset,
        diameter_std=std,
    )


def filter_clusters(
    candidates: Sequence[StemCluster],
    layer: PointCloud,
    dtm: RasterDtm,
    params: StemDetectionParams,
    workers: int = 1,
    full_cloud: Optional[Tuple[FloatArray, FloatArray]] = None,
) -> List[StemCluster]:
    """
    Keeps the clusters that satisfy all filter rules: a minimum number of points, a minimum vertical extent, a minimum
    80th intensity percentile (only if the layer has intensities and :code:`min_intensity` is set), the optional PCA
    rules, and the layer-wise circle consistency rule. For the latter, :code:`num_layers` horizontal layers are cut
    from the cluster (heights normalized by the terrain height at the cluster centroid), a circle is fitted to each,
    and the cluster is kept if some combination of :code:`num_sample_layers` fitted layers has a diameter standard
    deviation of at most :code:`max_diameter_std` (and, optionally, center standard deviations of at most
    :code:`max_center_std`).

    Accepted clusters are returned in input order with their fitted circles and best layer subset filled in.
    """

    def work(cluster: StemCluster) -> Optional[StemCluster]:
        return _filter_cluster(cluster, layer, dtm, params, full_cloud)

    if workers > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, candidates))
    else:
        results = [work(cluster) for cluster in candidates]
    return [cluster for cluster in results if cluster is not None]


def gam_layer_diameter(points: npt.ArrayLike, circle: Circle, params: StemDetectionParams) -> Tuple[float, bool]:
    """
    Re-estimates the stem diameter of one layer: points within :code:`gam_buffer_width` of the circle outline are
    converted to polar coordinates around the circle center, radius is modeled as a smooth periodic function of angle,
    and the predicted outline at 1-degree steps forms a polygon whose area gives the diameter. By default the
    area-equivalent diameter :math:`2 \\sqrt{A / \\pi}` is used; with :code:`literal_sqrt_area` it is :math:`\\sqrt{A}`.

    Returns:
        Tuple of the diameter and a validity flag. If fewer than four points are in the buffer, any predicted radius is
        negative, or the predicted radii spread by more than :code:`gam_max_radius_diff`, the diameter of the circle is
        returned and the flag is :code:`False`.
    """
    xy = np.atleast_2d(np.asarray(points, dtype=np.float64))[:, :2] if np.size(points) else np.empty((0, 2))
    offsets = xy - circle.center
    radii = np.hypot(offsets[:, 0], offsets[:, 1])
    in_buffer = np.abs(radii - circle.r) <= params.gam_buffer_width
    if in_buffer.sum() < 4:
        return circle.diameter, False
    angles = np.arctan2(offsets[in_buffer, 1], offsets[in_buffer, 0])
    spline = fit_cyclic_spline(angles, radii[in_buffer])
    grid = -np.pi + 2 * np.pi * np.arange(360) / 360
    predicted = spline.predict(grid)
    if (predicted < 0).any() or predicted.max() - predicted.min() > params.gam_max_radius_diff:
        return circle.diameter, False
    area = polygon_area(predicted * np.cos(grid), predicted * np.sin(grid))
    if params.literal_sqrt_area:
        return float(np.sqrt(area)), True
    return float(2 * np.sqrt(area / np.pi)), True


def linear_prediction(x: npt.ArrayLike, y: npt.ArrayLike, at: float) -> float:
    """Ordinary least-squares line through :code:`(x, y)` evaluated at :code:`at`; the mean of :code:`y` if all
    :code:`x` are equal."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x_mean = x.mean()
    sxx = ((x - x_mean) ** 2).sum()
    if sxx <= 1e-12 * max(1.0, x_mean * x_mean):
        return float(y.mean())
    slope = ((x - x_mean) * (y - y.mean())).sum() / sxx
    return float(y.mean() + slope * (at - x_mean))


def estimate_dbh(
    layer_heights: npt.ArrayLike, diameters: npt.ArrayLike, centers: npt.ArrayLike
) -> Tuple[float, FloatArray]:
    """Diameter and center position at breast height (1.3 m) from linear fits over the layer heights."""
    centers = np.asarray(centers, dtype=np.float64)
    dbh = linear_prediction(layer_heights, diameters, BREAST_HEIGHT)
    position = np.array(
        [
            linear_prediction(layer_heights, centers[:, 0], BREAST_HEIGHT),
            linear_prediction(layer_heights, centers[:, 1], BREAST_HEIGHT),
        ]
    )
    return dbh, position


def _measure_stem(cluster: StemCluster, layer: PointCloud, params: StemDetectionParams) -> StemDetection:
    bounds = layer_bounds(params)
    heights = []
    diameters = []
    valid = []
    centers = []
    for layer_id in cluster.best_subset:
        circle = cluster.layer_circles[layer_id]
        diameter, ok = gam_layer_diameter(layer.xyz[cluster.layer_indices[layer_id], :2], circle, params)
        heights.append(bounds[layer_id].mean())
        diameters.append(diameter)
        valid.append(ok)
        centers.append(circle.center)
    dbh, position = estimate_dbh(heights, diameters, centers)
    dbh = float(np.clip(dbh, params.circle.min_diameter, params.circle.max_diameter))
    return StemDetection(position, dbh, np.array(heights), np.array(diameters), np.array(valid), cluster)


def detect_stems(
    cloud: PointCloud,
    dtm: RasterDtm,
    params: StemDetectionParams = StemDetectionParams(),
    heights: Optional[FloatArray] = None,
    workers: int = 1,
) -> List[StemDetection]:
    """
    Detects tree stems: extracts the stem layer, clusters it with 2D and 3D DBSCAN, filters the clusters, and
    estimates the position and DBH of each accepted stem. The result is deterministic for a fixed
    :code:`params.circle.rng_seed`.
    """
    if heights is None:
        heights = height_above_ground(dtm, cloud)
    layer = extract_stem_layer(cloud, heights, params)
    logger.info("Stem layer contains %d points after downsampling.", len(layer))
    candidates = cluster_stem_candidates(layer, params, workers=workers)
    logger.info("DBSCAN produced %d stem candidates.", len(candidates))
    full_cloud = (cloud.xyz, cloud.z) if params.refined_circle_fitting else None
    accepted = filter_clusters(candidates, layer, dtm, params, workers=workers, full_cloud=full_cloud)
    logger.info("%d stem candidates passed the filters.", len(accepted))
    return [_measure_stem(cluster, layer, params) for cluster in accepted]


def write_stem_table(detections: Sequence[StemDetection], path: Union[str, Path]) -> None:
    """Writes one row per stem: tree_id, x_bh, y_bh, dbh_m, n_layers_used, diameter_std."""
    with open(path, "w", newline="", encoding="utf-8") as file:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(["tree_id", "x_bh", "y_bh", "dbh_m", "n_layers_used", "diameter_std"])
        for tree_id, stem in enumerate(detections):
            writer.writerow(
                [
                    tree_id,
                    repr(float(stem.position_bh[0])),
                    repr(float(stem.position_bh[1])),
                    repr(float(stem.dbh)),
                    stem.n_layers_used,
                    repr(float(stem.diameter_std)),
                ]
            )
