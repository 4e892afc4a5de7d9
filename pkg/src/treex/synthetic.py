"""Synthetic forest scenes with ground-truth instance labels, used to verify the segmentation pipeline."""

__all__ = [
    "SceneSpecError",
    "TerrainSpec",
    "TreeSpec",
    "PointDensities",
    "SyntheticScene",
    "SyntheticData",
    "TLS_DENSITIES",
    "ULS_DENSITIES",
    "generate_synthetic",
    "grid_forest",
    "resample",
]

from dataclasses import dataclass, field, replace
from typing import Tuple

import numpy as np
import numpy.typing as npt

from .pointcloud import BoolArray, FloatArray, LongArray, PointCloud

NON_TREE = -1


class SceneSpecError(ValueError):
    """Invalid synthetic scene specification."""


@dataclass(frozen=True)
class TerrainSpec:
    """Terrain surface :math:`z = \\text{amplitude} \\cdot \\sin(x / \\text{wavelength}) + \\text{slope} \\cdot y`."""

    amplitude: float = 0.5
    wavelength: float = 5.0
    slope: float = 0.0

    def height(self, x: npt.ArrayLike, y: npt.ArrayLike) -> FloatArray:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return self.amplitude * np.sin(x / self.wavelength) + self.slope * y


@dataclass(frozen=True)
class TreeSpec:
    """
    A tree with a tapering stem and an ellipsoidal crown. Heights are relative to the terrain at the stem position.

    Args:
        x: Stem position.
        y: Stem position.
        diameter: Stem diameter at 1 m above the terrain.
        taper: Decrease of the stem diameter per meter of height.
        height: Height of the stem top.
        crown_base: Height of the lower end of the crown.
        crown_radius: Horizontal semi-axis of the crown ellipsoid.
    """

    x: float
    y: float
    diameter: float = 0.3
    taper: float = 0.0
    height: float = 12.0
    crown_base: float = 6.0
    crown_radius: float = 2.0

    def diameter_at(self, h: npt.ArrayLike) -> FloatArray:
        return self.diameter - self.taper * (np.asarray(h, dtype=np.float64) - 1.0)

    @property
    def crown_depth(self) -> float:
        return self.height - self.crown_base


@dataclass(frozen=True)
class PointDensities:
    """
    Args:
        terrain: Terrain points per square meter.
        stem: Stem surface points per square meter.
        crown: Crown points per cubic meter of the crown ellipsoid.
        stem_noise: Standard deviation of the radial noise of stem points.
        noise: Standard deviation of the noise of terrain and crown points.
    """

    terrain: float = 100.0
    stem: float = 2000.0
    crown: float = 150.0
    stem_noise: float = 0.002
    noise: float = 0.01


TLS_DENSITIES = PointDensities()
ULS_DENSITIES = PointDensities(terrain=50.0, stem=100.0, crown=150.0, stem_noise=0.01, noise=0.02)


@dataclass(frozen=True)
class SyntheticScene:
    extent: Tuple[float, float] = (20.0, 20.0)
    trees: Tuple[TreeSpec, ...] = ()
    terrain: TerrainSpec = field(default_factory=TerrainSpec)
    densities: PointDensities = TLS_DENSITIES
    with_intensity: bool = True

    def validate(self) -> None:
        """
        Raises:
            SceneSpecError: If stems overlap, a tree lies outside the extent, or a tree's geometry is inconsistent.
        """
        for i, tree in enumerate(self.trees):
            if not (0 <= tree.x <= self.extent[0] and 0 <= tree.y <= self.extent[1]):
                raise SceneSpecError(f"Tree {i} lies outside the scene extent.")
            if not 0 < tree.crown_base < tree.height:
                raise SceneSpecError(f"Tree {i}: crown_base must lie between 0 and the tree height.")
            if tree.diameter <= 0 or np.any(tree.diameter_at(np.array([0.0, tree.height])) <= 0):
                raise SceneSpecError(f"Tree {i}: stem diameter must stay positive over the full height.")
        for i, first in enumerate(self.trees):
            for j in range(i + 1, len(self.trees)):
                second = self.trees[j]
                radii = 0.5 * (float(first.diameter_at(0.0)) + float(second.diameter_at(0.0)))
                if np.hypot(first.x - second.x, first.y - second.y) < radii:
                    raise SceneSpecError(f"Stems of trees {i} and {j} overlap.")


@dataclass(frozen=True)
class SyntheticData:
    """Generated points with the ground-truth instance ID (:code:`-1` for terrain) and terrain flag of each point."""

    cloud: PointCloud
    instance_ids: LongArray
    terrain: BoolArray
    stem: BoolArray

    def labeled_cloud(self) -> PointCloud:
        return self.cloud.with_channel("instance_id", self.instance_ids).with_channel(
            "is_terrain", self.terrain.astype(np.int64)
        )


def _poisson_count(rng: np.random.Generator, expected: float) -> int:
    return int(rng.poisson(max(expected, 0.0)))


def _stem_points(rng: np.random.Generator, tree: TreeSpec, densities: PointDensities, ground: float) -> FloatArray:
    mean_diameter = float(tree.diameter_at(0.5 * tree.height))
    count = _poisson_count(rng, densities.stem * np.pi * mean_diameter * tree.height)
    h = rng.uniform(0.0, tree.height, count)
    angle = rng.uniform(-np.pi, np.pi, count)
    radius = 0.5 * tree.diameter_at(h) + rng.normal(0.0, densities.stem_noise, count)
    return np.column_stack([tree.x + radius * np.cos(angle), tree.y + radius * np.sin(angle), ground + h])


def _crown_points(rng: np.random.Generator, tree: TreeSpec, densities: PointDensities, ground: float) -> FloatArray:
    semi_z = 0.5 * tree.crown_depth
    volume = 4.0 / 3.0 * np.pi * tree.crown_radius**2 * semi_z
    count = _poisson_count(rng, densities.crown * volume)
    direction = rng.normal(size=(count, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    scale = rng.uniform(0.0, 1.0, count) ** (1.0 / 3.0)
    offsets = direction * scale[:, None] * np.array([tree.crown_radius, tree.crown_radius, semi_z])
    center = np.array([tree.x, tree.y, ground + tree.crown_base + semi_z])
    return center + offsets + rng.normal(0.0, densities.noise, (count, 3))


def generate_synthetic(scene: SyntheticScene, rng_seed: int) -> SyntheticData:
    """
    Samples a synthetic forest plot. Terrain points are drawn uniformly over the extent, stem points on the tapering
    stem surfaces with radial noise, and crown points uniformly within the crown ellipsoids. Points are ordered terrain
    first, then tree by tree (stem before crown). The output is fully determined by the scene and the seed.

    Args:
        scene: Scene specification.
        rng_seed: Seed of the random generator.

    Raises:
        SceneSpecError: If the scene specification is invalid.
    """
    scene.validate()
    rng = np.random.default_rng(rng_seed)
    densities = scene.densities
    width, depth = scene.extent

    terrain_count = _poisson_count(rng, densities.terrain * width * depth)
    terrain_xy = rng.uniform((0.0, 0.0), (width, depth), (terrain_count, 2))
    terrain_z = scene.terrain.height(terrain_xy[:, 0], terrain_xy[:, 1]) + rng.normal(0.0, densities.noise, terrain_count)
    parts = [np.column_stack([terrain_xy, terrain_z])]
    ids = [np.full(terrain_count, NON_TREE, dtype=np.int64)]
    stem_flags = [np.zeros(terrain_count, dtype=bool)]

    for tree_id, tree in enumerate(scene.trees):
        ground = float(scene.terrain.height(tree.x, tree.y))
        stem = _stem_points(rng, tree, densities, ground)
        crown = _crown_points(rng, tree, densities, ground)
        parts += [stem, crown]
        ids.append(np.full(len(stem) + len(crown), tree_id, dtype=np.int64))
        stem_flags += [np.ones(len(stem), dtype=bool), np.zeros(len(crown), dtype=bool)]

    xyz = np.concatenate(parts)
    instance_ids = np.concatenate(ids)
    stem_flag = np.concatenate(stem_flags)
    terrain_flag = instance_ids == NON_TREE
    intensity = None
    if scene.with_intensity:
        mean = np.where(stem_flag, 30000.0, np.where(terrain_flag, 15000.0, 12000.0))
        intensity = np.clip(np.rint(rng.normal(mean, 3000.0)), 0, 65535)
    return SyntheticData(PointCloud(xyz, intensity), instance_ids, terrain_flag, stem_flag)


def resample(data: SyntheticData, densities: PointDensities, source: PointDensities, rng_seed: int) -> SyntheticData:
    """
    Thins a generated scene to lower point densities (e.g. to emulate UAV-borne scanning with sparse stems) and adds the
    extra noise of the target densities.

    Args:
        data: Scene generated with the :code:`source` densities.
        densities: Target densities; each must not exceed the corresponding source density.
        source: Densities the scene was generated with.
        rng_seed: Seed of the random generator.
    """
    fractions = np.array(
        [densities.terrain / source.terrain, densities.stem / source.stem, densities.crown / source.crown]
    )
    if np.any(fractions > 1) or np.any(fractions <= 0):
        raise SceneSpecError("Resampling can only reduce point densities.")
    rng = np.random.default_rng(rng_seed)
    category = np.where(data.terrain, 0, np.where(data.stem, 1, 2))
    keep = rng.uniform(size=len(category)) < fractions[category]
    xyz = data.cloud.xyz[keep].copy()
    stem = data.stem[keep]
    extra_stem = np.sqrt(max(densities.stem_noise**2 - source.stem_noise**2, 0.0))
    extra = np.sqrt(max(densities.noise**2 - source.noise**2, 0.0))
    sigma = np.where(stem, extra_stem, extra)
    xyz += rng.normal(size=xyz.shape) * sigma[:, None]
    intensity = None if data.cloud.intensity is None else data.cloud.intensity[keep]
    return SyntheticData(PointCloud(xyz, intensity), data.instance_ids[keep], data.terrain[keep], stem)


def grid_forest(
    num_trees: int,
    extent: Tuple[float, float],
    rng_seed: int,
    densities: PointDensities = TLS_DENSITIES,
    jitter: float = 0.5,
    crown_radius: Tuple[float, float] = (1.5, 2.5),
    diameter: Tuple[float, float] = (0.2, 0.45),
    height: Tuple[float, float] = (12.0, 18.0),
    min_crown_gap: float = 1.0,
) -> SyntheticScene:
    """
    Scene layout with trees on a jittered regular grid. Crowns are shrunk where necessary so that horizontally
    neighboring crowns are separated by at least :code:`min_crown_gap`.
    """
    if num_trees < 0:
        raise SceneSpecError("num_trees must be non-negative.")
    rng = np.random.default_rng(rng_seed)
    width, depth = extent
    cols = max(int(np.ceil(np.sqrt(num_trees * width / depth))), 1) if num_trees else 1
    rows = max(int(np.ceil(num_trees / cols)), 1)
    dx, dy = width / cols, depth / rows
    trees = []
    for i in range(num_trees):
        row, col = divmod(i, cols)
        x = (col + 0.5) * dx + rng.uniform(-jitter, jitter)
        y = (row + 0.5) * dy + rng.uniform(-jitter, jitter)
        tree_height = rng.uniform(*height)
        trees.append(
            TreeSpec(
                x=float(x),
                y=float(y),
                diameter=float(rng.uniform(*diameter)),
                taper=0.01,
                height=float(tree_height),
                crown_base=float(0.5 * tree_height),
                crown_radius=float(rng.uniform(*crown_radius)),
            )
        )
    max_radius = 0.5 * (min(dx, dy) - 2 * jitter - min_crown_gap)
    if num_trees and max_radius <= 0:
        raise SceneSpecError("The extent is too small for the requested number of trees.")
    trees = [replace(tree, crown_radius=min(tree.crown_radius, max_radius)) for tree in trees]
    return SyntheticScene(extent=(float(width), float(depth)), trees=tuple(trees), densities=densities)
