"""Tests for segmentation masks, occlusion maps, and density-level labels."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointcount.annot import ObjectDisc, make_point_set
from pointcount.errors import EmptyDatasetError
from pointcount.focus import (
    DEFAULT_M_LEVELS,
    crowding_level,
    density_step,
    global_density_label,
    occlusion_level,
    occlusion_map,
    seg_mask,
)


def brute_seg(discs, width, height):
    out = np.zeros((height, width))
    for r in range(height):
        for c in range(width):
            for d in discs:
                if (c - d.cx) ** 2 + (r - d.cy) ** 2 <= d.sigma**2:
                    out[r, c] = 1.0
                    break
    return out


def brute_occ(discs, width, height):
    out = np.zeros((height, width))
    for r in range(height):
        for c in range(width):
            for d in discs:
                if (c - d.cx) ** 2 + (r - d.cy) ** 2 <= (2.0 * d.sigma) ** 2:
                    out[r, c] += 1.0
    return out


class TestSegMask:
    def test_empty_disc_list(self):
        mask = seg_mask([], 5, 5)
        assert mask.shape == (5, 5)
        assert (mask == 0.0).all()

    def test_plus_shape(self):
        # sigma 1.4 covers center and 4-neighbors; diagonals sit at
        # squared distance 2 > 1.96 and stay out.
        mask = seg_mask([ObjectDisc(2.0, 2.0, 1.4)], 5, 5)
        expected = np.zeros((5, 5))
        expected[2, 2] = expected[1, 2] = expected[3, 2] = expected[2, 1] = expected[2, 3] = 1.0
        np.testing.assert_array_equal(mask, expected)
        assert mask.sum() == 5.0

    def test_duplicate_disc_idempotent(self):
        disc = ObjectDisc(3.0, 3.0, 2.0)
        np.testing.assert_array_equal(seg_mask([disc, disc], 8, 8), seg_mask([disc], 8, 8))

    def test_binary_values(self):
        rng = np.random.default_rng(7)
        discs = [
            ObjectDisc(float(rng.uniform(0, 12)), float(rng.uniform(0, 12)), float(rng.uniform(0.5, 3)))
            for _ in range(6)
        ]
        mask = seg_mask(discs, 12, 12)
        assert set(np.unique(mask)) <= {0.0, 1.0}

    def test_uses_sigma_radius_not_two_sigma(self):
        # A pixel between sigma and 2*sigma away is outside the seg mask
        # but inside the occlusion support.
        disc = ObjectDisc(5.0, 5.0, 2.0)
        mask = seg_mask([disc], 11, 11)
        occ = occlusion_map([disc], 11, 11)
        assert mask[5, 8] == 0.0
        assert occ[5, 8] == 1.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(19)
        for _ in range(5):
            w, h = int(rng.integers(3, 14)), int(rng.integers(3, 14))
            discs = [
                ObjectDisc(float(rng.uniform(0, w)), float(rng.uniform(0, h)), float(rng.uniform(0.4, 4)))
                for _ in range(int(rng.integers(0, 5)))
            ]
            np.testing.assert_array_equal(seg_mask(discs, w, h), brute_seg(discs, w, h))


class TestOcclusionMap:
    def test_single_disc_binary(self):
        occ = occlusion_map([ObjectDisc(4.0, 4.0, 1.5)], 9, 9)
        assert set(np.unique(occ)) <= {0.0, 1.0}

    def test_overlap_counts_multiplicity(self):
        discs = [ObjectDisc(4.0, 4.0, 1.0), ObjectDisc(5.0, 4.0, 1.0)]
        occ = occlusion_map(discs, 10, 10)
        assert occ.max() == 2.0
        assert occ[4, 4] == 2.0
        assert occ[4, 2] == 1.0

    def test_empty(self):
        assert (occlusion_map([], 4, 4) == 0.0).all()

    def test_additive_over_disjoint_lists(self):
        a = [ObjectDisc(3.0, 3.0, 1.0)]
        b = [ObjectDisc(12.0, 12.0, 1.5)]
        both = occlusion_map(a + b, 16, 16)
        np.testing.assert_array_equal(both, occlusion_map(a, 16, 16) + occlusion_map(b, 16, 16))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(23)
        for _ in range(5):
            w, h = int(rng.integers(3, 14)), int(rng.integers(3, 14))
            discs = [
                ObjectDisc(float(rng.uniform(0, w)), float(rng.uniform(0, h)), float(rng.uniform(0.4, 4)))
                for _ in range(int(rng.integers(0, 5)))
            ]
            np.testing.assert_array_equal(occlusion_map(discs, w, h), brute_occ(discs, w, h))

    def test_seg_support_inside_occlusion_support(self):
        rng = np.random.default_rng(31)
        discs = [
            ObjectDisc(float(rng.uniform(0, 20)), float(rng.uniform(0, 20)), float(rng.uniform(0.5, 3)))
            for _ in range(10)
        ]
        mask = seg_mask(discs, 20, 20)
        occ = occlusion_map(discs, 20, 20)
        assert (mask <= (occ > 0)).all()


class TestOcclusionLevel:
    def test_two_ones(self):
        assert occlusion_level(np.array([[0.0, 0.0], [1.0, 1.0]])) == 1.0

    def test_mixed(self):
        level = occlusion_level(np.array([[0.0, 2.0], [1.0, 1.0]]))
        np.testing.assert_allclose(level, 4.0 / 3.0)

    def test_all_zero(self):
        assert occlusion_level(np.zeros((3, 3))) == 0.0

    def test_at_least_one_when_covered(self):
        rng = np.random.default_rng(41)
        for _ in range(10):
            discs = [
                ObjectDisc(float(rng.uniform(0, 10)), float(rng.uniform(0, 10)), float(rng.uniform(0.5, 2)))
                for _ in range(int(rng.integers(1, 6)))
            ]
            occ = occlusion_map(discs, 10, 10)
            if occ.max() > 0:
                assert occlusion_level(occ) >= 1.0


class TestDensityStep:
    def test_worked_example(self):
        # 1000 points on 100x100 with a 50x50 patch: expectation 250,
        # step floor(250/8) + 1 = 32.
        ps = make_point_set(100, 100, np.random.default_rng(0).uniform(0, 100, (1000, 2)).tolist())
        assert density_step([(ps, 2500)], m_levels=8) == 32.0

    def test_all_empty_images(self):
        ps = make_point_set(10, 10, [])
        assert density_step([(ps, 25)], m_levels=8) == 1.0

    def test_small_expectation_gives_one(self):
        ps = make_point_set(100, 100, [(1, 1), (2, 2)])
        assert density_step([(ps, 100)], m_levels=8) == 1.0

    def test_empty_dataset(self):
        with pytest.raises(EmptyDatasetError):
            density_step([], m_levels=8)

    def test_max_over_dataset(self):
        sparse = make_point_set(100, 100, [(1, 1)])
        dense = make_point_set(10, 10, [(i % 10, i // 10) for i in range(80)])
        step = density_step([(sparse, 2500), (dense, 2500)], m_levels=8)
        # The dense image dominates: 80/100*2500 = 2000, floor(2000/8)+1 = 251.
        assert step == 251.0

    def test_step_at_least_one(self):
        ps = make_point_set(1000, 1000, [(5, 5)])
        assert density_step([(ps, 1)], m_levels=8) >= 1.0


class TestGlobalDensityLabel:
    def test_worked_example(self):
        assert global_density_label(7, 3, m_levels=8) == 2

    def test_zero_points(self):
        assert global_density_label(0, 5, m_levels=8) == 0

    def test_clamp(self):
        assert global_density_label(1000, 3, m_levels=8) == 8

    def test_default_m_levels(self):
        assert DEFAULT_M_LEVELS == 8

    @given(
        n=st.integers(0, 500),
        extra=st.integers(0, 50),
        step=st.floats(1.0, 40.0),
        m=st.integers(1, 12),
    )
    @settings(max_examples=60, deadline=None)
    def test_monotone_in_points(self, n, extra, step, m):
        assert global_density_label(n + extra, step, m) >= global_density_label(n, step, m)

    @given(
        n=st.integers(0, 500),
        step=st.floats(1.0, 20.0),
        widen=st.floats(0.0, 20.0),
        m=st.integers(1, 12),
    )
    @settings(max_examples=60, deadline=None)
    def test_monotone_in_step(self, n, step, widen, m):
        assert global_density_label(n, step + widen, m) <= global_density_label(n, step, m)

    def test_label_in_range(self):
        for n in range(0, 40):
            label = global_density_label(n, 2.5, m_levels=8)
            assert 0 <= label <= 8


class TestCrowdingLevel:
    def test_empty(self):
        assert crowding_level(make_point_set(10, 10, [])) == 0.0

    def test_worked_example(self):
        pts = np.random.default_rng(1).uniform(0, 100, (50, 2)).tolist()
        assert crowding_level(make_point_set(100, 100, pts)) == 0.005

    def test_linearity(self):
        pts = np.random.default_rng(2).uniform(0, 50, (20, 2)).tolist()
        once = crowding_level(make_point_set(50, 50, pts))
        twice = crowding_level(make_point_set(50, 50, pts + pts))
        assert twice == 2 * once
