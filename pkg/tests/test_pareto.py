"""Dominance, non-dominated sorting, NSGA-II, and hypervolume tests.

Hypervolume values are checked against inclusion-exclusion by hand and a
Monte-Carlo volume oracle; sorting against a quadratic reference
implementation.
"""

import numpy as np
import pytest

from qhsri.pareto import (
    FrontArchive,
    crowding_distance,
    dominance_matrix,
    dominates,
    fast_non_dominated_sort,
    hypervolume,
    non_dominated_filter,
    nsga2,
)


def _dominates_ref(a, b):
    return bool(np.all(a <= b) and np.any(a < b))


def _peel_ref(values):
    """Quadratic peeling used as the sorting oracle."""
    n = len(values)
    ranks = np.full(n, -1)
    alive = list(range(n))
    rank = 0
    while alive:
        front = [
            i for i in alive
            if not any(_dominates_ref(values[j], values[i]) for j in alive)
        ]
        for i in front:
            ranks[i] = rank
        alive = [i for i in alive if i not in front]
        rank += 1
    return ranks


class TestDominance:
    def test_basic_cases(self):
        assert dominates([0, 0], [1, 1])
        assert dominates([0, 1], [0, 2])
        assert not dominates([0, 1], [1, 0])
        assert not dominates([1, 1], [1, 1])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dominates([0, 0], [0, 0, 0])

    def test_matrix_matches_pairwise(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            n = int(rng.integers(2, 25))
            p = int(rng.integers(2, 5))
            v = rng.integers(0, 4, size=(n, p)).astype(float)
            dom = dominance_matrix(v)
            for i in range(n):
                for j in range(n):
                    assert dom[i, j] == _dominates_ref(v[i], v[j])

    def test_filter_keeps_duplicates(self):
        v = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
        assert set(non_dominated_filter(v)) == {0, 1, 2}

    def test_filter_empty_input(self):
        with pytest.raises(ValueError):
            non_dominated_filter(np.empty((0, 2)))


class TestNonDominatedSort:
    def test_matches_reference(self):
        """Both the 2-objective sweep and the general path agree with
        the quadratic oracle, including heavy ties."""
        rng = np.random.default_rng(1)
        for trial in range(60):
            n = int(rng.integers(2, 60))
            p = 2 if trial % 2 else int(rng.integers(3, 5))
            if trial % 3 == 0:
                v = rng.integers(0, 5, size=(n, p)).astype(float)
            else:
                v = rng.normal(size=(n, p))
            ranks, fronts = fast_non_dominated_sort(v)
            np.testing.assert_array_equal(ranks, _peel_ref(v))
            recovered = np.full(n, -1)
            for k, front in enumerate(fronts):
                recovered[front] = k
            np.testing.assert_array_equal(recovered, ranks)

    def test_single_front(self):
        v = np.array([[0.0, 3.0], [1.0, 2.0], [2.0, 1.0], [3.0, 0.0]])
        ranks, fronts = fast_non_dominated_sort(v)
        assert np.all(ranks == 0)
        assert len(fronts) == 1

    def test_chain(self):
        v = np.array([[3.0, 3.0], [2.0, 2.0], [1.0, 1.0], [0.0, 0.0]])
        ranks, _ = fast_non_dominated_sort(v)
        np.testing.assert_array_equal(ranks, [3, 2, 1, 0])


class TestCrowding:
    def test_boundaries_infinite(self):
        v = np.array([[0.0, 4.0], [1.0, 2.0], [2.0, 1.0], [4.0, 0.0]])
        d = crowding_distance(v)
        assert np.isinf(d[0]) and np.isinf(d[3])
        assert np.isfinite(d[1]) and np.isfinite(d[2])

    def test_hand_value(self):
        """Interior distance sums normalized neighbor gaps over objectives."""
        v = np.array([[0.0, 4.0], [1.0, 2.0], [4.0, 0.0]])
        d = crowding_distance(v)
        assert abs(d[1] - (4.0 / 4.0 + 4.0 / 4.0)) < 1e-12

    def test_small_fronts(self):
        assert np.all(np.isinf(crowding_distance(np.array([[1.0, 2.0]]))))
        assert np.all(np.isinf(crowding_distance(np.zeros((2, 3)))))


class TestFrontArchive:
    def test_rejects_dominated_member(self):
        with pytest.raises(ValueError):
            FrontArchive(np.zeros((2, 1)), np.array([[0.0, 0.0], [1.0, 1.0]]))

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            FrontArchive(np.zeros((2, 1)), np.zeros((3, 2)))

    def test_len(self):
        arch = FrontArchive(np.zeros((2, 1)), np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert len(arch) == 2


class TestNsga2:
    @staticmethod
    def _convex(x):
        pen = np.sum(x[:, 1:] ** 2, axis=1)
        return np.column_stack([x[:, 0] + pen,
                                1 - np.sqrt(x[:, 0]) + pen])

    def test_convex_front_recovered(self):
        """Final archive lies near f2 = 1 - sqrt(f1) on the convex toy."""
        arch = nsga2(self._convex, 4, pop_size=100, generations=100, seed=5)
        f = arch.values
        gap = np.abs(f[:, 1] - (1 - np.sqrt(np.clip(f[:, 0], 0, None))))
        assert gap.max() < 0.1
        assert f[:, 0].min() < 0.05 and f[:, 0].max() > 0.9

    def test_deterministic(self):
        a = nsga2(self._convex, 4, pop_size=48, generations=30, seed=9)
        b = nsga2(self._convex, 4, pop_size=48, generations=30, seed=9)
        np.testing.assert_array_equal(a.designs, b.designs)
        np.testing.assert_array_equal(a.values, b.values)

    def test_archive_is_non_dominated(self):
        arch = nsga2(self._convex, 3, pop_size=40, generations=20, seed=2)
        assert len(non_dominated_filter(arch.values)) == len(arch)

    def test_non_finite_rows_excluded(self):
        def partial(x):
            out = np.column_stack([x[:, 0], 1 - x[:, 0]])
            out[x[:, 0] < 0.2] = np.nan
            return out

        arch = nsga2(partial, 2, pop_size=40, generations=30, seed=3)
        assert np.all(np.isfinite(arch.values))
        assert len(arch) > 0

    def test_population_size_validated(self):
        with pytest.raises(ValueError):
            nsga2(self._convex, 2, pop_size=5, generations=3, seed=0)
        with pytest.raises(ValueError):
            nsga2(self._convex, 2, pop_size=2, generations=3, seed=0)


def _mc_hypervolume(points, ref, lower, n, seed):
    rng = np.random.default_rng(seed)
    u = lower + (ref - lower) * rng.random((n, len(ref)))
    dominated = np.zeros(n, dtype=bool)
    for p in points:
        dominated |= np.all(p <= u, axis=1)
    return dominated.mean() * np.prod(ref - lower)


class TestHypervolume:
    def test_single_point_2d(self):
        assert abs(hypervolume([[0.2, 0.4]], [1.0, 1.0]) - 0.48) < 1e-12

    def test_pair_with_overlap(self):
        """Inclusion-exclusion by hand: 0.48 + 0.45 - 0.30 = 0.63."""
        pts = [[0.2, 0.4], [0.5, 0.1]]
        hv = hypervolume(pts, [1.0, 1.0])
        assert abs(hv - 0.63) < 1e-12

    def test_point_on_reference_ignored(self):
        assert hypervolume([[1.0, 0.0]], [1.0, 1.0]) == 0.0
        assert hypervolume([[2.0, 2.0]], [1.0, 1.0]) == 0.0

    def test_empty(self):
        assert hypervolume(np.empty((0, 2)), [1.0, 1.0]) == 0.0

    def test_duplicate_points_no_double_count(self):
        hv = hypervolume([[0.2, 0.4], [0.2, 0.4]], [1.0, 1.0])
        assert abs(hv - 0.48) < 1e-12

    def test_3d_hand_case(self):
        """Two boxes with overlap: 0.336 + 0.288 - overlap 0.192."""
        pts = [[0.3, 0.4, 0.2], [0.4, 0.2, 0.4]]
        expect = 0.7 * 0.6 * 0.8 + 0.6 * 0.8 * 0.6 - 0.6 * 0.6 * 0.6
        assert abs(hypervolume(pts, [1.0, 1.0, 1.0]) - expect) < 1e-12

    def test_monte_carlo_agreement(self):
        rng = np.random.default_rng(11)
        for p in (2, 3):
            for trial in range(6):
                pts = rng.random((int(rng.integers(1, 12)), p))
                ref = np.ones(p)
                hv = hypervolume(pts, ref)
                mc = _mc_hypervolume(pts, ref, np.zeros(p), 200_000,
                                     seed=100 * p + trial)
                assert abs(hv - mc) < 5e-3

    def test_monotone_in_points(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            pts = rng.random((8, 3))
            ref = np.ones(3) * 1.1
            hv_all = hypervolume(pts, ref)
            hv_sub = hypervolume(pts[:4], ref)
            assert hv_all >= hv_sub - 1e-12

    def test_unsupported_dimension(self):
        with pytest.raises(ValueError):
            hypervolume(np.zeros((2, 4)), np.ones(4))
