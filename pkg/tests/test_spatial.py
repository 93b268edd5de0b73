"""Grid-index KNN against the exhaustive oracle, including the tie rule."""
import numpy as np
import pytest

from guv.core import init_from_anchors
from guv.errors import InvalidArgumentError
from guv.spatial import (brute_force_knn, build_index, knn_query,
                         nearest_k_batch)


def _avatar_from_centers(centers):
    """Wrap an (N, 3) center list into a 1 x N avatar."""
    c = np.asarray(centers, dtype=np.float64)[None, :, :]
    h, w = c.shape[:2]
    normals = np.zeros((h, w, 3))
    normals[..., 2] = 1.0
    avatar = init_from_anchors(np.zeros((h, w, 3)), normals,
                               np.full((h, w), 0.01), plane_size=1, channels=1)
    return avatar.replace(centers=c, anchors=c)


def _random_avatar(rng, n):
    return _avatar_from_centers(rng.uniform(-1.0, 1.0, size=(n, 3)))


class TestBruteForce:
    def test_single_gaussian(self):
        avatar = _avatar_from_centers([[0.0, 0.0, 0.0]])
        np.testing.assert_array_equal(brute_force_knn(avatar, [1.0, 2.0, 3.0], 1),
                                      [0])

    def test_duplicate_centers_take_lower_index(self):
        avatar = _avatar_from_centers([[1, 0, 0], [0, 0, 0], [0, 0, 0]])
        np.testing.assert_array_equal(
            brute_force_knn(avatar, [0.0, 0.0, 0.0], 3), [1, 2, 0]
        )

    def test_query_at_center_returns_it_first(self, rng):
        avatar = _random_avatar(rng, 20)
        x = avatar.centers[0, 7]
        assert brute_force_knn(avatar, x, 1)[0] == 7

    def test_k_bounds(self, rng):
        avatar = _random_avatar(rng, 4)
        with pytest.raises(InvalidArgumentError):
            brute_force_knn(avatar, np.zeros(3), 5)
        with pytest.raises(InvalidArgumentError):
            brute_force_knn(avatar, np.zeros(3), 0)


class TestBuildIndex:
    def test_single_gaussian_occupies_one_cell(self):
        index = build_index(_avatar_from_centers([[0.3, 0.3, 0.3]]))
        assert len(index.cells) == 1
        assert index.count == 1

    def test_indexes_every_gaussian(self, rng):
        index = build_index(_random_avatar(rng, 1024))
        assert index.count == 1024
        total = sum(ids.size for ids in index.cells.values())
        assert total == 1024

    def test_rebuild_relocates_a_moved_center(self, rng):
        avatar = _random_avatar(rng, 16)
        moved = avatar.centers.copy()
        moved[0, 3] = [50.0, 50.0, 50.0]
        index = build_index(avatar.replace(centers=moved), cell_size=1.0)
        far_cells = [key for key, ids in index.cells.items() if 3 in ids]
        assert len(far_cells) == 1
        assert index.cells[far_cells[0]].tolist() == [3]

    def test_rejects_nonpositive_cell_size(self, rng):
        with pytest.raises(InvalidArgumentError):
            build_index(_random_avatar(rng, 4), cell_size=0.0)


class TestKnnQuery:
    def test_line_of_centers(self):
        avatar = _avatar_from_centers([[0, 0, 0], [1, 0, 0], [2, 0, 0]])
        index = build_index(avatar)
        np.testing.assert_array_equal(knn_query(index, [0.1, 0.0, 0.0], 2),
                                      [0, 1])

    def test_k_equals_n_returns_all_sorted(self, rng):
        avatar = _random_avatar(rng, 12)
        index = build_index(avatar)
        x = rng.uniform(-1, 1, 3)
        got = knn_query(index, x, 12)
        d2 = np.sum((avatar.centers.reshape(-1, 3) - x) ** 2, axis=-1)
        np.testing.assert_array_equal(got, np.lexsort((np.arange(12), d2)))

    def test_matches_brute_force_on_random_scenes(self, rng):
        # small cell sizes force multi-ring searches; ties planted by
        # duplicating centers
        for scene in range(4):
            centers = rng.uniform(-1, 1, size=(200, 3))
            centers[50:60] = centers[100:110]
            avatar = _avatar_from_centers(centers)
            for cell in (None, 0.05, 0.7):
                index = build_index(avatar, cell_size=cell)
                for _ in range(40):
                    x = rng.uniform(-1.5, 1.5, 3)
                    k = int(rng.integers(1, 8))
                    np.testing.assert_array_equal(
                        knn_query(index, x, k), brute_force_knn(avatar, x, k)
                    )

    def test_query_far_outside_indexed_box(self, rng):
        avatar = _random_avatar(rng, 30)
        index = build_index(avatar, cell_size=0.1)
        x = np.array([40.0, -3.0, 12.0])
        np.testing.assert_array_equal(knn_query(index, x, 3),
                                      brute_force_knn(avatar, x, 3))

    def test_tie_rule_on_exact_duplicates(self):
        avatar = _avatar_from_centers([[0, 0, 0], [0, 0, 0], [0, 0, 0], [1, 1, 1]])
        index = build_index(avatar, cell_size=0.5)
        np.testing.assert_array_equal(knn_query(index, [0.0, 0.0, 0.0], 3),
                                      [0, 1, 2])

    def test_k_bounds(self, rng):
        index = build_index(_random_avatar(rng, 4))
        with pytest.raises(InvalidArgumentError):
            knn_query(index, np.zeros(3), 5)
        with pytest.raises(InvalidArgumentError):
            knn_query(index, np.zeros(3), 0)


class TestNearestKBatch:
    def test_matches_brute_force_per_point(self, rng):
        centers = rng.uniform(-1, 1, size=(100, 3))
        centers[10:20] = centers[40:50]  # planted ties
        avatar = _avatar_from_centers(centers)
        points = rng.uniform(-1, 1, size=(64, 3))
        batch = nearest_k_batch(centers, points, 4)
        for i, x in enumerate(points):
            np.testing.assert_array_equal(batch[i], brute_force_knn(avatar, x, 4))

    def test_chunking_does_not_change_results(self, rng):
        centers = rng.uniform(-1, 1, size=(50, 3))
        points = rng.uniform(-1, 1, size=(33, 3))
        np.testing.assert_array_equal(
            nearest_k_batch(centers, points, 3, chunk=7),
            nearest_k_batch(centers, points, 3),
        )

    def test_k_exceeding_count_rejected(self, rng):
        with pytest.raises(InvalidArgumentError):
            nearest_k_batch(rng.uniform(size=(5, 3)), rng.uniform(size=(2, 3)), 6)
