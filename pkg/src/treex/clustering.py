"""Density-based clustering (DBSCAN)."""

__all__ = ["NOISE", "dbscan"]

import numpy as np
import numpy.typing as npt
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .pointcloud import LongArray

NOISE = -1


def _core_edges(core_xyz: np.ndarray, eps: float):
    """Edges between core points closer than eps. Points sharing a grid cell of edge eps/sqrt(d) are always
    connected, so only one representative edge per cell is emitted and cells are linked through their nearest
    pairs."""
    dim = core_xyz.shape[1]
    cell_size = eps / np.sqrt(dim)
    cells = np.floor((core_xyz - core_xyz.min(axis=0)) / cell_size).astype(np.int64)
    _, cell_of_point, cell_counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    cell_of_point = cell_of_point.reshape(-1)
    order = np.argsort(cell_of_point, kind="stable")
    starts = np.r_[0, np.cumsum(cell_counts)[:-1]]
    first_of_cell = order[starts]

    rows = [order, first_of_cell[cell_of_point[order]]]  # every point linked to its cell's first point
    cols = [first_of_cell[cell_of_point[order]], order]

    # cells are linked if any pair of their points is within eps; large cells are checked against a k-d tree
    tree = cKDTree(core_xyz)
    pairs = tree.query_pairs(eps, output_type="ndarray") if len(core_xyz) <= 20000 else None
    if pairs is not None:
        rows.append(pairs[:, 0])
        cols.append(pairs[:, 1])
        return np.concatenate(rows), np.concatenate(cols)

    cell_coords = np.unique(cells, axis=0)
    cell_tree = cKDTree(cell_coords)
    reach = int(np.ceil(np.sqrt(dim))) + 1
    neighbor_cells = cell_tree.query_pairs(reach * np.sqrt(dim), output_type="ndarray")
    for c1, c2 in neighbor_cells:
        members1 = order[starts[c1] : starts[c1] + cell_counts[c1]]
        members2 = order[starts[c2] : starts[c2] + cell_counts[c2]]
        diff = core_xyz[members1, None, :] - core_xyz[None, members2, :]
        close = np.einsum("ijk,ijk->ij", diff, diff) <= eps * eps
        if close.any():
            i, j = np.unravel_index(np.argmax(close), close.shape)
            rows.append(np.array([members1[i]]))
            cols.append(np.array([members2[j]]))
    return np.concatenate(rows), np.concatenate(cols)


def dbscan(points: npt.ArrayLike, eps: float, min_pts: int, workers: int = 1) -> LongArray:
    """
    DBSCAN clustering. A point is a core point if at least :code:`min_pts` points, including the
    point itself, lie within distance :code:`eps`. Clusters are the connected components of core points plus the
    non-core points within :code:`eps` of a core point (border points). Points that are neither are noise.

    Cluster IDs follow the classic sequential scan: clusters are numbered in the order of their lowest-index core
    point, and a border point reachable from several clusters joins the one with the lowest ID (the cluster that would
    have reached it first).

    Args:
        points: Point coordinates; all columns are used.
        eps: Neighborhood radius.
        min_pts: Minimum neighborhood size of core points.
        workers: Threads used for neighborhood counting.

    Returns:
        Cluster ID for each point, :data:`NOISE` (-1) for noise points.

    Raises:
        ValueError: If :code:`eps` is not positive or :code:`min_pts` is less than one.
    """
    if eps <= 0:
        raise ValueError("eps must be positive.")
    if min_pts < 1:
        raise ValueError("min_pts must be at least 1.")
    xyz = np.ascontiguousarray(points, dtype=np.float64)
    n = len(xyz)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels

    tree = cKDTree(xyz)
    counts = np.asarray(tree.query_ball_point(xyz, eps, return_length=True, workers=workers))
    core = np.flatnonzero(counts >= min_pts)
    if len(core) == 0:
        return labels

    rows, cols = _core_edges(xyz[core], eps)
    graph = coo_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(len(core), len(core)))
    _, component = connected_components(graph, directed=False)

    # renumber components by their lowest member index (core is sorted ascending)
    first_seen = np.full(component.max() + 1, len(core))
    np.minimum.at(first_seen, component, np.arange(len(core)))
    rank = np.empty_like(first_seen)
    rank[np.argsort(first_seen, kind="stable")] = np.arange(len(first_seen))
    labels[core] = rank[component]

    border_candidates = np.flatnonzero(counts < min_pts)
    if len(border_candidates) > 0:
        core_tree = cKDTree(xyz[core])
        neighborhoods = core_tree.query_ball_point(xyz[border_candidates], eps, workers=workers)
        for point, neighbors in zip(border_candidates, neighborhoods):
            if neighbors:
                labels[point] = labels[core[neighbors]].min()
    return labels
