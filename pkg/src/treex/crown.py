"""Tree crown delineation by region growing from the detected stems."""

__all__ = [
    "NON_TREE",
    "CrownParams",
    "InstanceLabeling",
    "GrowthTrace",
    "seed_cylinder_diameter",
    "select_seeds",
    "grow_regions",
    "delineate_crowns",
]

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from scipy.spatial import cKDTree

from .pointcloud import BoolArray, FloatArray, LongArray, PointCloud, upsample_labels, voxel_downsample
from .stems import BREAST_HEIGHT, StemDetection
from .terrain import RasterDtm

logger = logging.getLogger(__name__)

NON_TREE = -1


@dataclass(frozen=True)
class CrownParams:
    voxel_size: float = 0.05
    seed_height: float = 0.6
    seed_diameter_factor: float = 1.05
    seed_min_diameter: float = 0.05
    z_scale: float = 2.0
    max_radius: float = 0.5
    min_total_assignment_ratio: float = 0.002
    min_tree_assignment_ratio: float = 0.3
    decrease_radius_after: int = 10
    max_iterations: int = 500
    max_terrain_distance: float = 0.8

    def __post_init__(self) -> None:
        if self.voxel_size <= 0 or self.max_radius < self.voxel_size:
            raise ValueError("voxel_size must be positive and not larger than max_radius.")
        if self.z_scale <= 0:
            raise ValueError("z_scale must be positive.")


@dataclass(frozen=True)
class InstanceLabeling:
    """Per-point tree instance IDs in :code:`[0, tree_count)`, :data:`NON_TREE` for other points. :code:`stem_ids`
    maps each instance to the index of the stem detection it was grown from."""

    labels: LongArray
    tree_count: int
    stem_ids: Tuple[int, ...] = ()


@dataclass
class GrowthTrace:
    """Per-iteration record of the region growing loop (filled when passed to :func:`grow_regions`)."""

    radii: List[float] = field(default_factory=list)
    new_points: List[int] = field(default_factory=list)
    trees_with_new_points: List[int] = field(default_factory=list)
    unassigned_at_start: List[int] = field(default_factory=list)
    seed_counts: List[int] = field(default_factory=list)


def seed_cylinder_diameter(dbh: float, params: CrownParams) -> float:
    return max(dbh * params.seed_diameter_factor, params.seed_min_diameter)


def select_seeds(
    cloud: PointCloud, dtm: RasterDtm, stems: Sequence[StemDetection], params: CrownParams
) -> List[LongArray]:
    """
    Initial seed points of each tree: the points inside a vertical cylinder around the stem position at breast height
    with diameter :code:`max(dbh * seed_diameter_factor, seed_min_diameter)`, spanning :code:`seed_height` centered at
    1.3 m above the terrain height at the stem position. A point inside several cylinders is a seed of the tree with
    the closest stem position (lowest index on ties).
    """
    xyz = cloud.xyz
    owner = np.full(len(xyz), -1, dtype=np.int64)
    owner_dist = np.full(len(xyz), np.inf)
    for tree_id, stem in enumerate(stems):
        terrain = float(dtm.interpolate(stem.position_bh)[0])
        low = terrain + BREAST_HEIGHT - 0.5 * params.seed_height
        high = terrain + BREAST_HEIGHT + 0.5 * params.seed_height
        radius = 0.5 * seed_cylinder_diameter(stem.dbh, params)
        candidates = np.flatnonzero((xyz[:, 2] >= low) & (xyz[:, 2] <= high))
        dist = np.hypot(xyz[candidates, 0] - stem.position_bh[0], xyz[candidates, 1] - stem.position_bh[1])
        inside = dist <= radius
        candidates, dist = candidates[inside], dist[inside]
        closer = dist < owner_dist[candidates]
        owner[candidates[closer]] = tree_id
        owner_dist[candidates[closer]] = dist[closer]
    return [np.flatnonzero(owner == tree_id) for tree_id in range(len(stems))]


def _resolve_claims(
    seed_points: LongArray,
    candidates: LongArray,
    distances: FloatArray,
    labels: LongArray,
) -> Tuple[LongArray, LongArray, FloatArray]:
    """For each candidate point the claim of the nearest seed wins; ties go to the lowest tree ID, then to the lowest
    seed index."""
    if len(candidates) == 0:
        return candidates, seed_points, distances
    order = np.lexsort((seed_points, labels[seed_points], distances, candidates))
    candidates = candidates[order]
    first = np.r_[True, candidates[1:] != candidates[:-1]]
    return candidates[first], seed_points[order][first], distances[order][first]


def grow_regions(
    xyz: npt.ArrayLike,
    seeds: Sequence[LongArray],
    restricted: Optional[BoolArray],
    params: CrownParams,
    trace: Optional[GrowthTrace] = None,
) -> LongArray:
    """
    Region growing from initial seed points. In every iteration the unassigned points within the current search radius
    of the current seed points are assigned to a tree; a point reached by seeds of several trees goes to the tree of the
    closest seed. Distances are computed with z-coordinates divided by :code:`z_scale`.

    The search radius starts at :code:`voxel_size`. It is doubled (up to :code:`max_radius`) for the next iteration if
    the ratio of newly assigned points to unassigned points falls below :code:`min_total_assignment_ratio` or the ratio
    of trees that received points falls below :code:`min_tree_assignment_ratio`, and halved (not below
    :code:`voxel_size`) after :code:`decrease_radius_after` iterations without a change. After an increase all assigned
    points are the next seeds, otherwise only the newly assigned ones.

    Restricted (terrain) points are only assigned while their cumulative hop distance from an initial seed stays
    within :code:`max_terrain_distance`. The loop stops when no seeds remain, when the radius is at its maximum and
    another increase would be needed after an iteration without new points, or after :code:`max_iterations`.

    Args:
        xyz: Point coordinates.
        seeds: Initial seed point indices of each tree.
        restricted: Flag marking terrain points, or :code:`None`.
        params: Region growing parameters.
        trace: Optional record of the per-iteration state.

    Returns:
        Tree index of each point, :data:`NON_TREE` for unassigned points.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    scaled = xyz.copy()
    scaled[:, 2] /= params.z_scale
    n = len(xyz)
    num_trees = len(seeds)
    labels = np.full(n, NON_TREE, dtype=np.int64)
    if num_trees == 0 or n == 0:
        return labels
    restricted = np.zeros(n, dtype=bool) if restricted is None else np.asarray(restricted, dtype=bool)
    cumulative = np.full(n, np.inf)
    for tree_id, tree_seeds in enumerate(seeds):
        fresh = tree_seeds[labels[tree_seeds] == NON_TREE]
        labels[fresh] = tree_id
        cumulative[fresh] = 0.0
    current = np.flatnonzero(labels != NON_TREE)

    # radius up to which a point is known to have no claimable unassigned neighbors
    exhausted = np.full(n, -1.0)
    radius = params.voxel_size
    unchanged = 0
    pool_indices: Optional[LongArray] = None
    pool_tree: Optional[cKDTree] = None

    for _ in range(params.max_iterations):
        active = current[exhausted[current] < radius]
        if len(active) == 0:
            break
        unassigned_count = int((labels == NON_TREE).sum())
        if unassigned_count == 0:
            break

        # k-d tree over a superset of the unassigned points, rebuilt when it has become too stale
        if pool_indices is None or (labels[pool_indices] != NON_TREE).sum() > 0.25 * len(pool_indices):
            pool_indices = np.flatnonzero(labels == NON_TREE)
            pool_tree = cKDTree(scaled[pool_indices])
        seed_tree = cKDTree(scaled[active])
        pairs = seed_tree.sparse_distance_matrix(pool_tree, radius, output_type="ndarray")
        seed_points = active[pairs["i"]]
        candidates = pool_indices[pairs["j"]]
        distances = pairs["v"]
        claimable = labels[candidates] == NON_TREE
        terrain = restricted[candidates]
        claimable &= ~terrain | (cumulative[seed_points] + distances <= params.max_terrain_distance)
        seed_points, candidates, distances = seed_points[claimable], candidates[claimable], distances[claimable]

        has_claims = np.zeros(n, dtype=bool)
        has_claims[seed_points] = True
        idle = active[~has_claims[active]]
        exhausted[idle] = np.maximum(exhausted[idle], radius)

        new_points, winners, win_dist = _resolve_claims(seed_points, candidates, distances, labels)
        labels[new_points] = labels[winners]
        cumulative[new_points] = cumulative[winners] + win_dist

        trees_with_new = len(np.unique(labels[new_points]))
        if trace is not None:
            trace.radii.append(radius)
            trace.new_points.append(len(new_points))
            trace.trees_with_new_points.append(trees_with_new)
            trace.unassigned_at_start.append(unassigned_count)
            trace.seed_counts.append(len(active))

        total_ratio = len(new_points) / unassigned_count
        tree_ratio = trees_with_new / num_trees
        next_radius = radius
        if total_ratio < params.min_total_assignment_ratio or tree_ratio < params.min_tree_assignment_ratio:
            if radius >= params.max_radius and len(new_points) == 0:
                break
            next_radius = min(2 * radius, params.max_radius)

        if next_radius > radius:
            unchanged = 0
            current = np.flatnonzero(labels != NON_TREE)
        else:
            unchanged += 1
            if unchanged >= params.decrease_radius_after and radius > params.voxel_size:
                next_radius = max(radius / 2, params.voxel_size)
                unchanged = 0
            current = new_points
        radius = next_radius
    return labels


def delineate_crowns(
    cloud: PointCloud,
    dtm: RasterDtm,
    stems: Sequence[StemDetection],
    params: CrownParams = CrownParams(),
    terrain: Optional[BoolArray] = None,
) -> InstanceLabeling:
    """
    Segments the full point cloud into tree instances: the cloud is voxel-downsampled, seeds are selected for each
    detected stem, regions are grown on the downsampled points, and the labels are propagated back to every point. Stems
    without seed points are dropped with a warning.

    Args:
        cloud: Full point cloud.
        dtm: Digital terrain model.
        stems: Detected stems.
        params: Crown delineation parameters.
        terrain: Terrain flag for each point of :code:`cloud`; terrain points are only claimed close to the seeds.
    """
    if len(stems) == 0 or len(cloud) == 0:
        return InstanceLabeling(np.full(len(cloud), NON_TREE, dtype=np.int64), 0, ())
    downsampled, voxel_map = voxel_downsample(cloud, params.voxel_size)
    seeds = select_seeds(downsampled, dtm, stems, params)
    kept = [i for i, tree_seeds in enumerate(seeds) if len(tree_seeds) > 0]
    for stem_id in set(range(len(stems))) - set(kept):
        logger.warning("Stem %d has no seed points and is dropped.", stem_id)
    restricted = None if terrain is None else np.asarray(terrain, dtype=bool)[voxel_map.representative_of_voxel]
    voxel_labels = grow_regions(downsampled.xyz, [seeds[i] for i in kept], restricted, params)
    labels = upsample_labels(voxel_map, voxel_labels)
    return InstanceLabeling(labels, len(kept), tuple(kept))
