import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import canonical_partition, dbscan_reachability
from treex import NOISE, dbscan


def test_two_blobs(rng):
    eps = 0.1
    blob = rng.uniform(0, 0.2, (100, 2))
    labels = dbscan(np.vstack([blob, blob + [10 * eps + 0.2, 0]]), eps, 5)
    assert set(labels[:100]) == {0} and set(labels[100:]) == {1}


def test_isolated_point_is_noise():
    assert dbscan(np.zeros((1, 3)), 0.5, 2).tolist() == [NOISE]


def test_min_pts_counts_the_point_itself():
    points = np.array([[0.0, 0.0], [0.5, 0.0]])
    assert dbscan(points, 0.5, 2).tolist() == [0, 0]
    assert dbscan(points, 0.49, 2).tolist() == [NOISE, NOISE]


def test_border_point_joins_lowest_cluster():
    # point 3 is a border point within eps of core points of both clusters
    points = np.array([[0.0, 0], [0.1, 0], [0.2, 0], [0.5, 0], [0.8, 0], [0.9, 0], [1.0, 0]])
    labels = dbscan(points, 0.3, 3)
    assert labels.tolist() == [0, 0, 0, 0, 1, 1, 1]


def test_parameter_errors():
    with pytest.raises(ValueError):
        dbscan(np.zeros((2, 2)), 0.0, 1)
    with pytest.raises(ValueError):
        dbscan(np.zeros((2, 2)), 1.0, 0)


def test_empty_input():
    assert dbscan(np.empty((0, 3)), 1.0, 2).tolist() == []


def test_500_points_match_reachability_oracle(rng):
    points = rng.uniform(0, 3, (500, 2))
    labels = dbscan(points, 0.1, 5)
    expected = dbscan_reachability(points, 0.1, 5)
    np.testing.assert_array_equal(labels, expected)
    assert (labels == NOISE).any() and labels.max() >= 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([2, 3]))
def test_permutation_invariance(seed, dim):
    rng = np.random.default_rng(seed)
    points = rng.uniform(0, 1, (150, dim))
    permutation = rng.permutation(len(points))
    labels = dbscan(points, 0.12, 4)
    permuted = dbscan(points[permutation], 0.12, 4)
    # core points and noise do not depend on the order; border points may switch between touching clusters
    relabeled = np.empty_like(permuted)
    relabeled[permutation] = permuted
    assert np.array_equal(labels == NOISE, relabeled == NOISE)
    core_oracle = dbscan_reachability(points, 0.12, 4)
    assert canonical_partition(labels) == canonical_partition(core_oracle)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 300), st.floats(0.02, 0.3), st.integers(1, 12))
def test_property_matches_oracle(seed, n, eps, min_pts):
    rng = np.random.default_rng(seed)
    points = rng.uniform(0, 1, (n, 3))
    np.testing.assert_array_equal(dbscan(points, eps, min_pts), dbscan_reachability(points, eps, min_pts))
