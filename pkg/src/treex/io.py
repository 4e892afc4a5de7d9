"""Reading and writing point clouds in LAS and delimited ASCII formats."""

__all__ = [
    "INSTANCE_FIELD",
    "InputValidationError",
    "read_point_cloud",
    "write_point_cloud",
    "rescale_intensity",
]

import re
from pathlib import Path
from typing import List, Literal, Optional, Union

import laspy
import numpy as np
import numpy.typing as npt

from .pointcloud import FloatArray, PointCloud

INSTANCE_FIELD = "instance_id"

# coordinate resolution of written LAS files in meters
LAS_COORDINATE_SCALE = 1e-4
_LAS_SUFFIXES = (".las", ".laz")
_ASCII_COLUMNS = ("x", "y", "z", "intensity", INSTANCE_FIELD)


class InputValidationError(ValueError):
    """Unreadable or invalid input point cloud."""


def rescale_intensity(intensity: npt.ArrayLike, scale: Optional[Literal["8bit"]]) -> FloatArray:
    """Maps intensities recorded on an 8-bit scale, :code:`[0, 255]`, to :code:`[0, 65535]`."""
    intensity = np.asarray(intensity, dtype=np.float64)
    if scale is None:
        return intensity
    if scale != "8bit":
        raise InputValidationError(f"Unknown intensity scale {scale!r}.")
    bad = np.flatnonzero((intensity < 0) | (intensity > 255))
    if len(bad) > 0:
        raise InputValidationError(
            f"Point {bad[0]}: intensity {intensity[bad[0]]} is outside the 8-bit range [0, 255]."
        )
    return intensity * (65535.0 / 255.0)


def _is_las(path: Path) -> bool:
    return path.suffix.lower() in _LAS_SUFFIXES


def _ascii_header(line: str) -> Optional[List[str]]:
    names = re.split(r"[\s,]+", line.lstrip("#").strip())
    if names and all(re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", name) for name in names):
        return [name.lower() for name in names]
    return None


def _parse_ascii_slowly(lines: List[str], first: int, width: Optional[int]) -> FloatArray:
    """Line-by-line parser used to locate the first malformed point after the fast parser failed."""
    rows = []
    for line_number, line in enumerate(lines[first:], start=first + 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        try:
            row = [float(value) for value in re.split(r"[\s,]+", stripped)]
        except ValueError as error:
            raise InputValidationError(f"Point {len(rows)} (line {line_number}): {error}") from error
        width = len(row) if width is None else width
        if len(row) != width:
            raise InputValidationError(f"Point {len(rows)} (line {line_number}): expected {width} columns.")
        rows.append(row)
    return np.asarray(rows, dtype=np.float64).reshape(-1, width or 3)


def _read_ascii(path: Path) -> PointCloud:
    with path.open(encoding="utf-8") as file:
        lines = file.read().splitlines()
    first = 0
    while first < len(lines) and not lines[first].strip():
        first += 1
    if first == len(lines):
        raise InputValidationError(f"{path} contains no points.")
    names = _ascii_header(lines[first].strip())
    if names is not None:
        first += 1
    data_lines = [line for line in lines[first:] if line.strip() and not line.lstrip().startswith("#")]
    if len(data_lines) == 0:
        raise InputValidationError(f"{path} contains no points.")
    delimiter = "," if "," in data_lines[0] else None
    try:
        data = np.loadtxt(data_lines, dtype=np.float64, delimiter=delimiter, ndmin=2)
    except ValueError:
        data = _parse_ascii_slowly(lines, first, None if names is None else len(names))
    width = data.shape[1]
    if names is None:
        if width < 3 or width > len(_ASCII_COLUMNS):
            raise InputValidationError(f"Expected 3 to {len(_ASCII_COLUMNS)} columns without a header, found {width}.")
        names = list(_ASCII_COLUMNS[:width])
    if len(names) != width or names[:3] != ["x", "y", "z"]:
        raise InputValidationError(f"Header {names} does not describe {width} columns starting with x, y, z.")
    intensity = data[:, names.index("intensity")] if "intensity" in names else None
    channels = {}
    for i, name in enumerate(names[3:], start=3):
        if name == "intensity":
            continue
        column = data[:, i]
        integral = np.all(np.isfinite(column)) and np.array_equal(column, np.round(column))
        channels[name] = column.astype(np.int64) if integral else column
    return _build_cloud(data[:, :3], intensity, channels)


def _read_las(path: Path) -> PointCloud:
    try:
        las = laspy.read(str(path))
    except Exception as error:  # laspy raises several unrelated exception types for corrupt files
        raise InputValidationError(f"Cannot read {path}: {error}") from error
    if len(las.points) == 0:
        raise InputValidationError(f"{path} contains no points.")
    xyz = np.column_stack([np.asarray(las.x), np.asarray(las.y), np.asarray(las.z)]).astype(np.float64)
    intensity = np.asarray(las.intensity, dtype=np.float64)
    # files without intensity measurements store zeros
    if not intensity.any():
        intensity = None
    channels = {name: np.asarray(las[name]) for name in las.point_format.extra_dimension_names}
    return _build_cloud(xyz, intensity, channels)


def _build_cloud(xyz: FloatArray, intensity: Optional[FloatArray], channels: dict) -> PointCloud:
    try:
        return PointCloud(xyz, intensity, channels)
    except ValueError as error:
        raise InputValidationError(str(error)) from error


def read_point_cloud(path: Union[str, Path], intensity_scale: Optional[Literal["8bit"]] = None) -> PointCloud:
    """
    Reads a point cloud from a LAS/LAZ file or a delimited ASCII file. ASCII files hold the columns x, y, z and
    optionally intensity and instance_id, separated by whitespace or commas. A header line naming the columns may
    precede the data; without a header the columns are taken in that order.

    Args:
        path: Input file.
        intensity_scale: :code:`"8bit"` to map intensities from :code:`[0, 255]` to :code:`[0, 65535]`.

    Returns:
        The point cloud. Additional columns or LAS extra-bytes attributes are stored as channels.

    Raises:
        InputValidationError: If the file cannot be read, contains no points, or contains invalid values. The message
            names the first offending point.
    """
    path = Path(path)
    if not path.is_file():
        raise InputValidationError(f"{path} does not exist.")
    if path.stat().st_size == 0:
        raise InputValidationError(f"{path} is empty.")
    cloud = _read_las(path) if _is_las(path) else _read_ascii(path)
    if intensity_scale is not None and cloud.intensity is not None:
        cloud = _build_cloud(cloud.xyz, rescale_intensity(cloud.intensity, intensity_scale), dict(cloud.channels))
    return cloud


def write_point_cloud(
    path: Union[str, Path], cloud: PointCloud, labels: Optional[npt.ArrayLike] = None
) -> None:
    """
    Writes a point cloud with an optional per-point instance ID column (:code:`-1` for non-tree points). The format is
    chosen from the file suffix: LAS/LAZ files store the IDs as an extra-bytes attribute named :code:`instance_id`,
    ASCII files as an additional integer column below a header line.

    Args:
        path: Output file.
        cloud: Points to write.
        labels: Instance ID of each point.
    """
    path = Path(path)
    labels_array = None if labels is None else np.asarray(labels, dtype=np.int64)
    channels = dict(cloud.channels)
    if labels_array is None and INSTANCE_FIELD in channels:
        labels_array = np.asarray(channels[INSTANCE_FIELD], dtype=np.int64)
    channels.pop(INSTANCE_FIELD, None)
    if labels_array is not None and len(labels_array) != len(cloud):
        raise ValueError("labels must have one entry per point.")

    if _is_las(path):
        header = laspy.LasHeader(point_format=6, version="1.4")
        header.offsets = np.floor(cloud.xyz.min(axis=0)) if len(cloud) else np.zeros(3)
        header.scales = np.full(3, LAS_COORDINATE_SCALE)
        existing = set(header.point_format.dimension_names)
        for name, values in channels.items():
            if name not in existing:
                header.add_extra_dim(laspy.ExtraBytesParams(name=name, type=np.asarray(values).dtype))
        if labels_array is not None:
            header.add_extra_dim(laspy.ExtraBytesParams(name=INSTANCE_FIELD, type=np.int32))
        las = laspy.LasData(header)
        las.x, las.y, las.z = cloud.x, cloud.y, cloud.z
        if cloud.intensity is not None:
            las.intensity = np.rint(cloud.intensity).astype(np.uint16)
        for name, values in channels.items():
            if name not in existing:
                las[name] = np.asarray(values)
        if labels_array is not None:
            las[INSTANCE_FIELD] = labels_array.astype(np.int32)
        las.write(str(path))
        return

    names = ["x", "y", "z"]
    columns = [cloud.x, cloud.y, cloud.z]
    formats = ["%.17g"] * 3
    if cloud.intensity is not None:
        names.append("intensity")
        columns.append(cloud.intensity)
        formats.append("%.17g")
    for name, values in channels.items():
        values = np.asarray(values)
        names.append(name)
        columns.append(values)
        formats.append("%d" if np.issubdtype(values.dtype, np.integer) else "%.17g")
    if labels_array is not None:
        names.append(INSTANCE_FIELD)
        columns.append(labels_array)
        formats.append("%d")
    table = np.column_stack([np.asarray(column, dtype=np.float64) for column in columns])
    np.savetxt(path, table, fmt=formats, header=" ".join(names), comments="")
