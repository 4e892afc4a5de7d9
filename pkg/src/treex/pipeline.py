"""End-to-end segmentation and evaluation runs with file outputs."""

__all__ = [
    "SegmentationResult",
    "AlignmentError",
    "segment_cloud",
    "run_segmentation",
    "align_point_clouds",
    "run_evaluation",
    "export_dtm",
]

import json
import logging
import platform
import resource
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import laspy
import numpy as np
import scipy
from scipy.spatial import cKDTree

from .config import PresetConfig
from .crown import NON_TREE, InstanceLabeling, delineate_crowns
from .io import INSTANCE_FIELD, InputValidationError, read_point_cloud, write_point_cloud
from .metrics import (
    DetectionMetrics,
    MatchResult,
    SegmentationMetrics,
    aggregate,
    evaluate_labels,
    format_metrics_table,
    write_metrics_report,
)
from .pointcloud import FloatArray, LongArray, PointCloud
from .stems import StemDetection, detect_stems, write_stem_table
from .terrain import RasterDtm, cloth_distances, export_ascii_grid, height_above_ground, rasterize_dtm

logger = logging.getLogger(__name__)

COORDINATE_TOLERANCE = 1e-6


class AlignmentError(ValueError):
    """Predicted and reference point clouds cannot be aligned point by point."""


@dataclass
class SegmentationResult:
    labeling: InstanceLabeling
    stems: List[StemDetection]
    dtm: RasterDtm
    terrain: np.ndarray
    timings: Dict[str, float] = field(default_factory=dict)


@contextmanager
def _timed(timings: Dict[str, float], stage: str) -> Iterator[None]:
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[stage] = timings.get(stage, 0.0) + time.perf_counter() - start


def _terrain_model(cloud: PointCloud, config: PresetConfig, workers: int, timings: Dict[str, float]):
    with _timed(timings, "terrain_classification"):
        distances = cloth_distances(cloud, config.csf)
        terrain = np.abs(distances) <= config.csf.terrain_threshold
    if not terrain.any():
        raise InputValidationError("No terrain points were found; a terrain model cannot be constructed.")
    with _timed(timings, "dtm_construction"):
        dtm = rasterize_dtm(cloud.subset(np.flatnonzero(terrain)), config.dtm, workers=workers)
    return dtm, terrain, distances


def segment_cloud(cloud: PointCloud, config: PresetConfig, workers: int = 1) -> SegmentationResult:
    """
    Runs all stages on an in-memory point cloud: terrain classification, DTM construction, stem detection, and crown
    delineation. Points that are not clearly above the cloth (distance at most :code:`csf.tree_threshold`) are only
    added to trees close to the stems.

    Args:
        cloud: Input point cloud.
        config: Algorithm parameters.
        workers: Maximum number of worker threads.

    Returns:
        Instance labels, detected stems, terrain model, terrain flags and the runtime of each stage in seconds.
    """
    if len(cloud) == 0:
        raise InputValidationError("The point cloud contains no points.")
    timings: Dict[str, float] = {}
    dtm, terrain, distances = _terrain_model(cloud, config, workers, timings)
    params = config.stem_params()
    if cloud.intensity is None and params.min_intensity is not None:
        logger.info("The point cloud has no intensity values; the intensity filter is disabled.")
    with _timed(timings, "height_normalization"):
        heights = height_above_ground(dtm, cloud)
    with _timed(timings, "stem_detection"):
        stems = detect_stems(cloud, dtm, params, heights=heights, workers=workers)
    if not stems:
        logger.warning("No stems were detected; all points are labeled as non-tree.")
    with _timed(timings, "crown_delineation"):
        restricted = distances <= config.csf.tree_threshold
        labeling = delineate_crowns(cloud, dtm, stems, config.crown, terrain=restricted)
    kept = [stems[i] for i in labeling.stem_ids]
    return SegmentationResult(labeling, kept, dtm, terrain, timings)


def _peak_memory_mb() -> Optional[float]:
    try:
        usage = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    except (OSError, ValueError):
        return None
    # kilobytes on Linux, bytes on macOS
    return usage / (1024 * 1024) if sys.platform == "darwin" else usage / 1024


def _versions() -> Dict[str, str]:
    from . import __version__  # pylint: disable=import-outside-toplevel

    return {
        "treex": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "laspy": laspy.__version__,
    }


def output_paths(input_path: Path, output_dir: Path) -> Dict[str, Path]:
    stem = input_path.stem
    return {
        "labels": output_dir / f"{stem}_instances{input_path.suffix.lower()}",
        "stems": output_dir / f"{stem}_stems.csv",
        "manifest": output_dir / f"{stem}_manifest.json",
    }


def run_segmentation(
    input_path: Union[str, Path],
    config: PresetConfig,
    output_dir: Union[str, Path],
    workers: int = 1,
    intensity_scale: Optional[Literal["8bit"]] = None,
) -> SegmentationResult:
    """
    Segments a point cloud file and writes three files to :code:`output_dir`: the point cloud with an
    :code:`instance_id` attribute in the input format (:code:`-1` for non-tree points), the stem table as CSV, and a
    JSON run manifest holding the configuration, seed, library versions, stage timings and peak memory.

    Raises:
        InputValidationError: If the input cannot be read or contains invalid points.
    """
    input_path = Path(input_path)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    paths = output_paths(input_path, output_dir)

    start = time.perf_counter()
    cloud = read_point_cloud(input_path, intensity_scale=intensity_scale)
    read_time = time.perf_counter() - start
    result = segment_cloud(cloud, config, workers)
    result.timings = {"read_input": read_time, **result.timings}
    with _timed(result.timings, "write_output"):
        write_point_cloud(paths["labels"], cloud, result.labeling.labels)
        write_stem_table(result.stems, paths["stems"])

    manifest = {
        "input": str(input_path),
        "outputs": {key: str(path) for key, path in paths.items()},
        "preset": config.preset,
        "seed": config.seed,
        "workers": workers,
        "config": dict((key, value) for key, value in config.items()),
        "versions": _versions(),
        "num_points": len(cloud),
        "num_trees": result.labeling.tree_count,
        "timings_s": result.timings,
        "peak_memory_mb": _peak_memory_mb(),
    }
    paths["manifest"].write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return result


def align_point_clouds(predicted: FloatArray, reference: FloatArray) -> LongArray:
    """
    Index of the reference point matching each predicted point. Clouds with identical point order are aligned
    directly; otherwise points are joined by coordinates within :code:`1e-6`.

    Raises:
        AlignmentError: If a point has no unique partner. The message names the first such point.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if len(predicted) == len(reference):
        if np.all(np.abs(predicted - reference) <= COORDINATE_TOLERANCE):
            return np.arange(len(reference))
    if len(predicted) != len(reference):
        raise AlignmentError(
            f"The predicted cloud has {len(predicted)} points, the reference cloud {len(reference)}."
        )
    distances, partner = cKDTree(reference).query(predicted, distance_upper_bound=COORDINATE_TOLERANCE * np.sqrt(3))
    within = np.all(np.abs(predicted - reference[np.minimum(partner, len(reference) - 1)]) <= COORDINATE_TOLERANCE, 1)
    unmatched = np.flatnonzero(~np.isfinite(distances) | ~within)
    if len(unmatched) > 0:
        i = unmatched[0]
        raise AlignmentError(f"Predicted point {i} at {predicted[i].tolist()} has no reference point within 1e-6.")
    order = np.argsort(partner, kind="stable")
    duplicates = np.flatnonzero(partner[order][1:] == partner[order][:-1])
    if len(duplicates) > 0:
        i = int(order[duplicates[0] + 1])
        raise AlignmentError(f"Predicted point {i} matches the same reference point as another predicted point.")
    return partner


def _labels(cloud: PointCloud, name: str, path: Path) -> LongArray:
    if name not in cloud.channels:
        raise InputValidationError(f"{path} has no attribute {name!r}.")
    return np.asarray(cloud.channels[name], dtype=np.int64)


def run_evaluation(
    predicted_paths: Sequence[Union[str, Path]],
    reference_paths: Sequence[Union[str, Path]],
    output_dir: Optional[Union[str, Path]] = None,
    predicted_field: str = INSTANCE_FIELD,
    reference_field: str = INSTANCE_FIELD,
    labeled_field: Optional[str] = None,
    non_tree_id: int = NON_TREE,
) -> List[Tuple[str, DetectionMetrics, SegmentationMetrics]]:
    """
    Evaluates predicted instance labels against reference labels file by file and aggregated over all files (files are
    processed in order of their names). Both clouds are downsampled to 1 cm voxels before matching.

    Args:
        predicted_paths: Files with predicted labels.
        reference_paths: Files with reference labels, in the same order.
        output_dir: Directory for :code:`metrics.csv` and :code:`metrics.txt`, or :code:`None`.
        predicted_field: Attribute holding the predicted labels.
        reference_field: Attribute holding the reference labels.
        labeled_field: Attribute flagging annotated points (non-zero); by default all points with a reference label
            other than :code:`non_tree_id` are annotated.
        non_tree_id: Label of non-tree points in both files.

    Returns:
        One row per file followed by the aggregate row (named :code:`"aggregate"`).

    Raises:
        AlignmentError: If a pair of files cannot be aligned point by point.
    """
    if len(predicted_paths) != len(reference_paths) or len(predicted_paths) == 0:
        raise InputValidationError("Provide the same, non-zero number of predicted and reference files.")
    pairs = sorted(zip(map(Path, predicted_paths), map(Path, reference_paths)), key=lambda p: p[0].name)
    rows = []
    per_file: List[Tuple[MatchResult, SegmentationMetrics]] = []
    for predicted_path, reference_path in pairs:
        predicted_cloud = read_point_cloud(predicted_path)
        reference_cloud = read_point_cloud(reference_path)
        partner = align_point_clouds(predicted_cloud.xyz, reference_cloud.xyz)
        predicted = _labels(predicted_cloud, predicted_field, predicted_path)
        reference = _labels(reference_cloud, reference_field, reference_path)[partner]
        mask = None
        if labeled_field is not None:
            mask = _labels(reference_cloud, labeled_field, reference_path)[partner] != 0
        match, detection, segmentation = evaluate_labels(
            predicted_cloud.xyz, reference, predicted, labeled_mask=mask, invalid=non_tree_id
        )
        rows.append((predicted_path.name, detection, segmentation))
        per_file.append((match, segmentation))
    total_detection, total_segmentation = aggregate(per_file)
    rows.append(("aggregate", total_detection, total_segmentation))
    if output_dir is not None:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        write_metrics_report(rows, output_dir / "metrics.csv")
        (output_dir / "metrics.txt").write_text(format_metrics_table(rows) + "\n", encoding="utf-8")
    return rows


def export_dtm(
    input_path: Union[str, Path],
    config: PresetConfig,
    output_path: Union[str, Path],
    workers: int = 1,
) -> RasterDtm:
    """Constructs the terrain model of a point cloud file and writes it as an ASCII grid."""
    cloud = read_point_cloud(input_path)
    dtm, _, _ = _terrain_model(cloud, config, workers, {})
    export_ascii_grid(dtm, output_path)
    return dtm
