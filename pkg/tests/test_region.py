import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatgrasp import region as rg


def greedy_reference(points, k, seed):
    """Plain-python greedy maximin, ties to the smallest index."""
    chosen = [seed]
    while len(chosen) < min(k, len(points)):
        best, best_d = None, -1.0
        for i, p in enumerate(points):
            if i in chosen:
                continue
            d = min(math.dist(p, points[j]) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


class TestSelectCandidates:
    def test_uniform_falls_back_to_first_cell(self):
        assert rg.select_candidates(np.full((6, 6), 0.5), 0.6, 10) == [(0, 0, 0.5)]

    def test_single_peak(self):
        hm = np.full((5, 7), 0.1)
        hm[3, 4] = 0.9
        assert rg.select_candidates(hm, 0.5, 10) == [(4, 3, 0.9)]

    def test_top_n_sorted(self):
        rng = np.random.default_rng(0)
        hm = rng.uniform(0, 0.2, (24, 24))
        hot = rng.choice(576, 300, replace=False)
        hm.reshape(-1)[hot] = rng.uniform(0.5, 1.0, 300)
        out = rg.select_candidates(hm, 0.4, 128)
        assert len(out) == 128
        expected = sorted(hm.reshape(-1)[hot], reverse=True)[:128]
        assert [c[2] for c in out] == pytest.approx(expected)
        for u, v, val in out:
            assert hm[v, u] == val


class TestFps:
    def test_k1(self):
        pts = np.random.default_rng(1).uniform(0, 10, (8, 2))
        assert rg.farthest_point_sampling(pts, 1, 5) == [5]

    def test_collinear_brute_force(self):
        pts = [(0, 0), (1, 0), (2, 0), (10, 0)]
        best = max(itertools.combinations(range(4), 2), key=lambda s: math.dist(pts[s[0]], pts[s[1]]))
        assert set(best) == {0, 3}
        assert set(rg.farthest_point_sampling(pts, 2, 0)) == {0, 3}

    def test_matches_greedy_reference(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = int(rng.integers(1, 33))
            pts = [tuple(p) for p in rng.uniform(0, 24, (n, 2))]
            k = int(rng.integers(1, 6))
            seed = int(rng.integers(0, n))
            assert rg.farthest_point_sampling(pts, k, seed) == greedy_reference(pts, k, seed)

    def test_integer_grid_ties(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            pts = [tuple(p) for p in rng.integers(0, 6, (20, 2)).astype(float)]
            assert rg.farthest_point_sampling(pts, 5, 0) == greedy_reference(pts, 5, 0)

    def test_k_larger_than_n(self):
        pts = [(0, 0), (3, 0), (1, 1)]
        assert sorted(rg.farthest_point_sampling(pts, 10, 1)) == [0, 1, 2]

    def test_bad_seed(self):
        with pytest.raises(ValueError):
            rg.farthest_point_sampling([(0, 0)], 1, 3)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 30), st.integers(1, 8))
    def test_permutation_stable(self, seed, n, k):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(0, 24, (n, 2))
        perm = rng.permutation(n)
        a = rg.farthest_point_sampling(pts, k, 0)
        b = rg.farthest_point_sampling(pts[perm], k, int(np.where(perm == 0)[0][0]))
        assert {tuple(pts[i]) for i in a} == {tuple(pts[perm][i]) for i in b}


class TestGridCoords:
    hw = (24, 24)

    def to_cells(self, coords):
        return np.stack([(coords[:, 0] + 1) / 2 * 23, (coords[:, 1] + 1) / 2 * 23], axis=1)

    def test_hand_lattice(self):
        c = rg.RegionCenter(10, 10, 0.5, 1.0)
        cells = self.to_cells(rg.region_grid_coords(c, 2.0, 2, self.hw))
        assert np.allclose(cells, [(9, 9), (11, 9), (9, 11), (11, 11)])

    def test_odd_g_middle_is_center(self):
        c = rg.RegionCenter(7.25, 13.5, 0.61, 1.0)
        cells = self.to_cells(rg.region_grid_coords(c, 5.0, 5, self.hw))
        assert np.allclose(cells[12], (7.25, 13.5), atol=1e-12)
        assert cells[:, 0].min() <= 7.25 <= cells[:, 0].max()

    def test_inverse_depth_scaling(self):
        near = self.to_cells(rg.region_grid_coords(rg.RegionCenter(12, 12, 0.4, 1), 6, 4, self.hw))
        far = self.to_cells(rg.region_grid_coords(rg.RegionCenter(12, 12, 0.8, 1), 6, 4, self.hw))
        assert np.ptp(near[:, 0]) == pytest.approx(2 * np.ptp(far[:, 0]))

    def test_invalid_center(self):
        with pytest.raises(ValueError):
            rg.RegionCenter(1, 1, 0.0, 0.5)


class TestRegionSize:
    def test_inference_exact(self):
        assert rg.sample_region_size(np.random.default_rng(0), False, 12.0) == 12.0

    def test_training_range_and_mean(self):
        rng = np.random.default_rng(1)
        draws = np.array([rg.sample_region_size(rng, True, 12.0) for _ in range(10000)])
        assert draws.min() >= 0.7 * 12 and draws.max() <= 1.3 * 12
        assert abs(draws.mean() - 12.0) < 0.02 * 12.0


class TestPropagation:
    def test_constant_field(self):
        fused = np.full((1, 4, 24, 24), 3.0)
        centers = [rg.RegionCenter(5, 6, 0.5, 1), rg.RegionCenter(18.3, 2.2, 0.45, 1)]
        batch = rg.propagate_region_features(fused, centers, [6.0, 10.0], g=4)
        assert batch.features.shape == (2, 4, 4, 4)
        # a few lattice points of region 2 fall off the map and pick up zero padding
        assert np.allclose(batch.features[0], 3.0)
        inside = rg.propagate_region_features(fused, [rg.RegionCenter(12, 12, 0.6, 1)], [8.0], g=8)
        assert np.allclose(inside.features, 3.0)

    def test_fully_outside_is_zero(self):
        fused = np.random.default_rng(0).standard_normal((1, 3, 24, 24))
        batch = rg.propagate_region_features(fused, [rg.RegionCenter(60, -40, 0.5, 1)], [6.0], g=4)
        assert np.all(batch.features == 0)

    def test_aligned_equals_crop(self):
        fused = np.random.default_rng(1).standard_normal((1, 5, 24, 24))
        # s = g - 1 at d = 1 puts lattice points on integer cells 7..14
        batch = rg.propagate_region_features(fused, [rg.RegionCenter(10.5, 10.5, 0.5, 1)], [7.0], g=8)
        assert np.allclose(batch.features[0], fused[0, :, 7:15, 7:15], atol=1e-12)

    def test_backward_matches_fd(self):
        from heatgrasp.gradcheck import max_relative_error, numerical_gradient
        rng = np.random.default_rng(2)
        fused = rng.standard_normal((1, 3, 10, 10))
        centers = [rg.RegionCenter(3.3, 4.1, 0.5, 1), rg.RegionCenter(6.0, 6.7, 0.55, 1)]
        r = rng.standard_normal((2, 3, 4, 4))
        batch = rg.propagate_region_features(fused, centers, [5.0, 4.0], g=4)
        g = rg.propagate_backward(r, batch)
        loss = lambda: float((rg.propagate_region_features(fused, centers, [5.0, 4.0], g=4).features * r).sum())
        idx = rng.choice(fused.size, 60, replace=False)
        assert max_relative_error(g, numerical_gradient(loss, fused, idx), idx) < 1e-4

    def test_perturbing_covered_element_changes_region(self):
        fused = np.zeros((1, 2, 24, 24))
        c = rg.RegionCenter(10.5, 10.5, 0.5, 1)
        base = rg.propagate_region_features(fused, [c], [7.0], g=8).features.copy()
        fused[0, 1, 9, 12] = 1.0
        assert not np.array_equal(rg.propagate_region_features(fused, [c], [7.0], g=8).features, base)


def test_choose_centers_spread():
    hm = np.zeros((24, 24))
    hm[4:7, 4:7] = 0.9
    hm[17:20, 15:18] = 0.8
    depth = np.full((96, 96), 550.0)
    centers = rg.choose_centers(hm, depth, k=2, threshold=0.3)
    assert len(centers) == 2
    assert centers[0].graspability == pytest.approx(0.9)
    assert centers[1].v >= 17
    assert all(c.depth_m == pytest.approx(0.55) for c in centers)


def test_region_overlay_shape():
    hm = np.random.default_rng(0).uniform(size=(24, 24))
    batch = rg.propagate_region_features(np.ones((1, 2, 24, 24)), [rg.RegionCenter(5, 5, 0.5, 0.7)], [6.0], 4)
    img = rg.region_overlay(hm, batch, 4)
    assert img.shape == (3, 24, 24)
    assert tuple(img[:, 5, 5]) == (0, 1, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_batched_depth_lookup_matches_scalar(seed):
    rng = np.random.default_rng(seed)
    depth = rng.uniform(300, 700, (20, 24)).astype(np.float32)
    depth[rng.random(depth.shape) < 0.4] = 0
    px = np.concatenate([rng.uniform(-2, 26, 50), rng.integers(0, 24, 10).astype(float)])
    py = np.concatenate([rng.uniform(-2, 22, 50), rng.integers(0, 20, 10).astype(float)])
    want = [rg.lookup_depth_m(depth, x, y) for x, y in zip(px, py)]
    assert rg.lookup_depth_m_batch(depth, px, py).tolist() == want
