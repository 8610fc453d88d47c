import numpy as np
import pytest

from tinysel.kmeans import kmeans

from oracles import nearest_centroid


def test_k1_centroid_is_mean():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 3))
    res = kmeans(x, 1, seed=0)
    np.testing.assert_allclose(res.centroids[0], x.mean(axis=0), rtol=1e-9)
    assert (res.assignments == 0).all()


def test_two_far_blobs_separate():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(30, 2))
    b = rng.normal(size=(30, 2)) + 100.0
    x = np.concatenate([a, b])
    res = kmeans(x, 2, seed=0)
    first, second = res.assignments[:30], res.assignments[30:]
    assert len(set(first.tolist())) == 1
    assert len(set(second.tolist())) == 1
    assert first[0] != second[0]


@pytest.mark.parametrize("seed", range(5))
def test_assignments_match_nearest_centroid_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(60, 4))
    res = kmeans(x, 5, seed=seed)
    np.testing.assert_array_equal(res.assignments,
                                  nearest_centroid(x, res.centroids))
    # inertia definition: sum of squared distances to assigned centroids
    inertia = sum(((row - res.centroids[c]) ** 2).sum()
                  for row, c in zip(x, res.assignments))
    assert res.inertia == pytest.approx(inertia, rel=1e-9)


def test_inertia_not_worse_than_random_assignment():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(80, 3))
    res = kmeans(x, 4, seed=2)
    rand = rng.integers(4, size=80)
    cents = np.stack([x[rand == i].mean(axis=0) for i in range(4)])
    rand_inertia = sum(((row - cents[c]) ** 2).sum()
                       for row, c in zip(x, rand))
    assert res.inertia <= rand_inertia


def test_deterministic_under_seed():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(50, 6))
    a = kmeans(x, 4, seed=11)
    b = kmeans(x, 4, seed=11)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    np.testing.assert_array_equal(a.centroids, b.centroids)


def test_k_exceeds_rows_rejected():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 4, seed=0)


def test_degenerate_duplicate_points():
    # mostly-duplicate rows must not crash or produce invalid assignments
    x = np.zeros((10, 2))
    x[0] = [5.0, 5.0]
    res = kmeans(x, 3, seed=0)
    assert res.inertia >= 0.0
    assert res.assignments.min() >= 0 and res.assignments.max() < 3
    np.testing.assert_array_equal(res.assignments,
                                  nearest_centroid(x, res.centroids))
