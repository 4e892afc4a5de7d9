import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import flat_cloud
from oracles import idw_direct
from treex import (
    CsfParams,
    DtmParams,
    PointCloud,
    RasterDtm,
    cloth_distances,
    csf_classify,
    export_ascii_grid,
    height_above_ground,
    idw_heights,
    rasterize_dtm,
    read_ascii_grid,
)


class TestCsf:
    def test_plane_is_terrain(self):
        assert csf_classify(flat_cloud(10_000)).all()

    def test_blob_above_plane_is_not_terrain(self, rng):
        plane = flat_cloud(10_000).xyz
        blob = rng.normal([5, 5, 5], 0.2, (100, 3))
        flags = csf_classify(PointCloud(np.vstack([plane, blob])))
        assert flags[:10_000].all() and not flags[10_000:].any()

    def test_sine_terrain_with_canopy(self, rng):
        ground_xy = rng.uniform(0, 40, (40_000, 2))
        ground = np.column_stack([ground_xy, 0.5 * np.sin(ground_xy[:, 0] / 5)])
        canopy = np.column_stack([rng.uniform(0, 40, (20_000, 2)), rng.uniform(5, 20, 20_000)])
        flags = csf_classify(PointCloud(np.vstack([ground, canopy])))
        truth = np.r_[np.ones(40_000, bool), np.zeros(20_000, bool)]
        true_positives = (flags & truth).sum()
        assert true_positives / flags.sum() >= 0.99
        assert true_positives / truth.sum() >= 0.99

    def test_translation_invariance(self, rng):
        xy = rng.uniform(0, 20, (5000, 2))
        xyz = np.column_stack([xy, 0.3 * np.sin(xy[:, 0] / 3) + (rng.uniform(size=5000) < 0.2) * 3])
        flags = csf_classify(PointCloud(xyz))
        shifted = csf_classify(PointCloud(xyz + [1234.5, -987.25, 0]))
        np.testing.assert_array_equal(flags, shifted)

    def test_distances_are_signed(self, rng):
        cloud = PointCloud(np.vstack([flat_cloud(2000).xyz, [[5, 5, 3.0]]]))
        distances = cloth_distances(cloud)
        assert distances[-1] == pytest.approx(3.0, abs=0.05)

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            CsfParams(rigidness=4)
        with pytest.raises(ValueError):
            CsfParams(terrain_threshold=0.6, tree_threshold=0.5)
        with pytest.raises(ValueError):
            csf_classify(PointCloud(np.empty((0, 3))))


class TestIdw:
    def test_single_point(self):
        heights = idw_heights(np.array([[0.0, 0.0], [5.0, -3.0]]), np.array([[1.0, 1.0, 2.0]]), k=400, c=1.0)
        np.testing.assert_array_equal(heights, [2.0, 2.0])

    def test_two_point_example(self):
        terrain = np.array([[1.0, 0.0, 0.0], [0.0, 3.0, 4.0]])
        assert idw_heights([[0.0, 0.0]], terrain, k=2, c=1.0)[0] == pytest.approx(1.0, abs=1e-15)

    def test_coincident_node_takes_point_height(self):
        terrain = np.array([[0.0, 0.0, 7.0], [1.0, 0.0, 1.0], [0.0, 1.0, 3.0]])
        assert idw_heights([[0.0, 0.0]], terrain, k=3, c=2.0)[0] == 7.0

    def test_random_configurations_match_direct_evaluation(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 300))
            terrain = np.column_stack([rng.uniform(0, 5, (n, 2)), rng.normal(0, 2, n)])
            nodes = rng.uniform(-1, 6, (20, 2))
            k = int(rng.integers(1, 350))
            c = float(rng.choice([0.5, 1.0, 2.0, rng.uniform(0.1, 3)]))
            heights = idw_heights(nodes, terrain, k, c)
            for node, height in zip(nodes, heights):
                expected, neighbors = idw_direct(node, terrain, k, c)
                assert height == pytest.approx(expected, rel=1e-9, abs=1e-12)
                assert neighbors.min() - 1e-12 <= height <= neighbors.max() + 1e-12

    def test_ties_with_kth_neighbor_are_included(self):
        # four points at distance 1; with k = 1 all of them are equally near
        terrain = np.array([[1.0, 0, 0], [-1.0, 0, 4], [0, 1.0, 8], [0, -1.0, 12]])
        assert idw_heights([[0.0, 0.0]], terrain, k=1, c=1.0)[0] == pytest.approx(6.0)
        permuted = idw_heights([[0.0, 0.0]], terrain[::-1], k=1, c=1.0)[0]
        assert permuted == pytest.approx(6.0)


class TestRasterizeDtm:
    def test_plane_interior_nodes(self):
        g = np.arange(0, 10.0001, 0.1)
        x, y = np.meshgrid(g, g)
        dtm = rasterize_dtm(PointCloud(np.column_stack([x.ravel(), y.ravel(), x.ravel()])))
        nodes = dtm.node_xy()
        # nodes whose 400 nearest points surround them symmetrically (more than the neighborhood radius from the edge)
        interior = np.all((nodes >= 1.5) & (nodes <= 8.5), axis=1)
        np.testing.assert_allclose(dtm.heights.ravel()[interior], nodes[interior, 0], atol=1e-3)

    def test_grid_geometry(self):
        dtm = rasterize_dtm(PointCloud(np.array([[1.0, 2.0, 0.0], [2.0, 2.6, 0.0]])), DtmParams(resolution=0.25))
        np.testing.assert_allclose(dtm.origin, [1.0, 2.0])
        assert dtm.shape == (4, 5)

    def test_fewer_points_than_k(self):
        terrain = PointCloud(np.array([[0.0, 0.0, 1.0], [1.0, 1.0, 3.0]]))
        dtm = rasterize_dtm(terrain, DtmParams(k=400))
        assert np.isfinite(dtm.heights).all()
        assert dtm.heights[0, 0] == 1.0 and dtm.heights[-1, -1] == 3.0

    def test_no_terrain_points(self):
        with pytest.raises(ValueError, match="At least one terrain point"):
            rasterize_dtm(PointCloud(np.empty((0, 3))))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_convex_combination(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 200))
        terrain = PointCloud(np.column_stack([rng.uniform(0, 3, (n, 2)), rng.normal(0, 1, n)]))
        dtm = rasterize_dtm(terrain, DtmParams(k=int(rng.integers(1, 50)), resolution=0.3))
        assert dtm.heights.min() >= terrain.z.min() - 1e-12
        assert dtm.heights.max() <= terrain.z.max() + 1e-12


class TestHeightAboveGround:
    def test_exact_at_node(self):
        dtm = RasterDtm(np.zeros(2), 1.0, np.full((2, 2), 3.0))
        assert height_above_ground(dtm, np.array([[1.0, 1.0, 10.0]]))[0] == 7.0

    def test_cell_center(self):
        dtm = RasterDtm(np.zeros(2), 1.0, np.array([[0.0, 0.0], [4.0, 4.0]]))
        assert height_above_ground(dtm, np.array([[0.5, 0.5, 2.0]]))[0] == 0.0

    def test_flat_scene(self):
        cloud = flat_cloud(5000)
        dtm = rasterize_dtm(cloud)
        np.testing.assert_allclose(height_above_ground(dtm, cloud), 0.0, atol=1e-6)

    def test_clamped_outside_extent(self):
        dtm = RasterDtm(np.zeros(2), 1.0, np.array([[0.0, 1.0], [2.0, 3.0]]))
        assert height_above_ground(dtm, np.array([[-5.0, 0.5, 0.0]]))[0] == -1.0
        assert height_above_ground(dtm, np.array([[7.0, 9.0, 0.0]]))[0] == -3.0

    def test_linear_along_grid_axes(self, rng):
        heights = rng.normal(0, 1, (4, 5))
        dtm = RasterDtm(np.array([10.0, 20.0]), 0.5, heights)
        t = rng.uniform(0, 1, 20)
        xy = np.column_stack([10.0 + 0.5 * (1 + t), np.full(20, 20.0 + 0.5 * 2)])
        expected = heights[2, 1] * (1 - t) + heights[2, 2] * t
        np.testing.assert_allclose(dtm.interpolate(xy), expected, rtol=1e-12, atol=1e-12)


def test_ascii_grid_round_trip(tmp_path, rng):
    dtm = RasterDtm(np.array([100.0, 200.0]), 0.25, rng.normal(0, 1, (3, 4)))
    path = tmp_path / "dtm.asc"
    export_ascii_grid(dtm, path)
    text = path.read_text()
    assert text.startswith("ncols 4\nnrows 3\n")
    loaded = read_ascii_grid(path)
    np.testing.assert_allclose(loaded.origin, dtm.origin)
    assert loaded.resolution == dtm.resolution
    np.testing.assert_allclose(loaded.heights, dtm.heights, rtol=1e-12)
