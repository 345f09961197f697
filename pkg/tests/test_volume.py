import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from flairnorm.errors import (
    DegenerateRangeError,
    DimsMismatchError,
    EdgesMismatchError,
    EmptyListError,
    EmptyMaskError,
    InvalidOverlapError,
)
from flairnorm.volume import (
    Histogram,
    Mask,
    MaskKind,
    Volume,
    compute_histogram,
    extract_patches,
    lesion_load_ml,
    masked_stats,
    mean_histogram,
)


def full_mask(shape):
    return Mask(np.ones(shape, bool), MaskKind.ICV)


class TestTypes:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Volume(np.array([[[1.0, np.nan]]]))

    def test_rejects_bad_spacing(self):
        with pytest.raises(ValueError):
            Volume(np.zeros((2, 2, 2)), spacing=(1, 0, 1))

    def test_voxels_x_fastest(self):
        data = np.arange(24).reshape((2, 3, 4), order="F")
        v = Volume(data)
        assert list(v.voxels) == list(range(24))
        assert v.dims == (2, 3, 4)

    def test_2d_promoted(self):
        assert Volume(np.zeros((3, 4))).dims == (3, 4, 1)

    def test_mask_values_checked(self):
        with pytest.raises(ValueError):
            Mask(np.array([[[0, 2]]]))

    def test_immutable(self):
        v = Volume(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 1


class TestMaskedStats:
    def test_three_values(self):
        v = Volume(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1))
        s = masked_stats(v, full_mask((3, 1, 1)))
        assert s.mean == 2.0
        assert s.std == pytest.approx(math.sqrt(2 / 3), abs=1e-15)
        assert s.count == 3
        assert (s.min, s.max) == (1.0, 3.0)

    def test_constant(self):
        v = Volume(np.full((3, 3, 3), 7.5))
        s = masked_stats(v, full_mask((3, 3, 3)))
        assert s.mean == 7.5 and s.std == 0.0

    def test_brute_force(self):
        rng = np.random.default_rng(1)
        data = rng.normal(size=(8, 8, 8))
        bits = rng.random((8, 8, 8)) < 0.3
        s = masked_stats(Volume(data), Mask(bits))
        picked = [data[i] for i in np.ndindex(8, 8, 8) if bits[i]]
        mean = sum(picked) / len(picked)
        var = sum((x - mean) ** 2 for x in picked) / len(picked)
        assert s.count == len(picked)
        assert s.mean == pytest.approx(mean, rel=1e-12)
        assert s.std == pytest.approx(math.sqrt(var), rel=1e-12)

    def test_errors(self):
        with pytest.raises(DimsMismatchError):
            masked_stats(Volume(np.zeros((2, 2, 2))), full_mask((2, 2, 3)))
        bits = np.zeros((2, 2, 2), bool)
        bits[0, 0, 0] = True
        with pytest.raises(EmptyMaskError):
            masked_stats(Volume(np.zeros((2, 2, 2))), Mask(bits))


class TestHistogram:
    def test_constant_auto_range(self):
        with pytest.raises(DegenerateRangeError):
            compute_histogram(Volume(np.full((3, 3, 3), 4.0)), full_mask((3, 3, 3)))

    def test_two_valued(self):
        data = np.array([0.0] * 10 + [1.0] * 6).reshape(16, 1, 1)
        h = compute_histogram(Volume(data), full_mask((16, 1, 1)), bins=2, range=(0, 1))
        assert list(h.counts) == [10, 6]

    def test_brute_force(self):
        rng = np.random.default_rng(5)
        data = rng.normal(size=(7, 6, 5))
        data[0, 0, 0] = 1.5  # exactly on the upper bound
        bits = rng.random(data.shape) < 0.6
        bits[0, 0, 0] = True
        h = compute_histogram(Volume(data), Mask(bits), bins=17, range=(-1.0, 1.5))
        expected = oracles.histogram_counts(data[bits], list(h.edges))
        assert list(h.counts) == expected

    def test_empty_mask(self):
        with pytest.raises(EmptyMaskError):
            compute_histogram(Volume(np.zeros((2, 2, 2))), Mask(np.zeros((2, 2, 2), bool)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 64))
    def test_count_sum_is_in_range_count(self, seed, bins):
        rng = np.random.default_rng(seed)
        data = rng.normal(size=(5, 5, 4))
        bits = rng.random(data.shape) < 0.5
        bits[0, 0, 0] = True
        lo, hi = -0.5, 0.8
        h = compute_histogram(Volume(data), Mask(bits), bins=bins, range=(lo, hi))
        vals = data[bits]
        assert h.counts.sum() == np.count_nonzero((vals >= lo) & (vals <= hi))

    def test_normalized_invariant(self):
        with pytest.raises(ValueError):
            Histogram([0, 1, 2], [0.5, 0.6], normalized=True)


class TestMeanHistogram:
    edges = np.array([0.0, 1.0, 2.0])

    def test_identity(self):
        h = Histogram(self.edges, [0.3, 0.7], normalized=True)
        np.testing.assert_allclose(mean_histogram([h]).counts, h.counts, rtol=0, atol=1e-15)

    def test_pair(self):
        a = Histogram(self.edges, [1.0, 0.0], normalized=True)
        b = Histogram(self.edges, [0.0, 1.0], normalized=True)
        assert list(mean_histogram([a, b]).counts) == [0.5, 0.5]

    def test_brute_force_and_permutation(self):
        rng = np.random.default_rng(3)
        edges = np.linspace(0, 1, 9)
        hs = []
        for _ in range(5):
            c = rng.random(8)
            hs.append(Histogram(edges, c / c.sum(), normalized=True))
        m = mean_histogram(hs)
        for b in range(8):
            assert m.counts[b] == pytest.approx(sum(h.counts[b] for h in hs) / 5, abs=1e-15)
        assert abs(m.counts.sum() - 1) < 1e-9
        for perm in ([4, 3, 2, 1, 0], [2, 0, 4, 1, 3]):
            assert np.array_equal(mean_histogram([hs[i] for i in perm]).counts, m.counts)

    def test_errors(self):
        with pytest.raises(EmptyListError):
            mean_histogram([])
        a = Histogram([0, 1, 2], [0.5, 0.5], normalized=True)
        b = Histogram([0, 1, 3], [0.5, 0.5], normalized=True)
        with pytest.raises(EdgesMismatchError):
            mean_histogram([a, b])


class TestPatches:
    def test_single(self):
        g = extract_patches(np.zeros((64, 64)), 64, 0.5)
        assert g.origins == [(0, 0)]

    @pytest.mark.parametrize("n, axis_origins", [(128, [0, 32, 64]), (96, [0, 32])])
    def test_enumeration(self, n, axis_origins):
        g = extract_patches(np.zeros((n, n)), 64, 0.5)
        assert g.stride == (32, 32)
        assert g.origins == [(r, c) for r in axis_origins for c in axis_origins]

    def test_clamped_final_origin(self):
        g = extract_patches(np.zeros((100, 70)), 64, 0.5)
        rows = sorted({r for r, _ in g.origins})
        cols = sorted({c for _, c in g.origins})
        assert rows == [0, 32, 36] and cols == [0, 6]

    def test_small_slice_padded(self):
        img = np.arange(12.0).reshape(3, 4)
        g = extract_patches(img, 8, 0.5)
        patches = g.extract(img)
        assert patches.shape == (1, 8, 8)
        assert patches[0, 7, 7] == img[-1, -1]

    def test_invalid_overlap(self):
        with pytest.raises(InvalidOverlapError):
            extract_patches(np.zeros((8, 8)), 4, 1.0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 150), st.integers(1, 150), st.sampled_from([2, 4, 8, 16, 64]))
    def test_coverage_and_stride(self, h, w, size):
        img = np.zeros((h, w))
        g = extract_patches(img, size, 0.5)
        covered = np.zeros((max(h, size), max(w, size)), bool)
        for r, c in g.origins:
            covered[r : r + size, c : c + size] = True
        assert covered[:h, :w].all()
        rows = sorted({r for r, _ in g.origins})
        diffs = np.diff(rows)
        if len(diffs) > 1:
            assert np.all(diffs[:-1] == size // 2)
        assert np.all(diffs <= size // 2)
        assert g.extract(img).shape == (len(g), size, size)


class TestLesionLoad:
    def test_empty(self):
        assert lesion_load_ml(Mask(np.zeros((3, 3, 3), bool))) == 0.0

    def test_unit(self):
        assert lesion_load_ml(Mask(np.ones((10, 10, 10), bool))) == pytest.approx(1.0, abs=1e-15)

    def test_adni_spacing(self):
        bits = np.zeros((50, 50, 1), bool)
        bits.ravel()[:2000] = True
        sp = (0.8594, 0.8594, 3.0)
        expected = 2000 * (0.8594 * 0.8594 * 3.0) / 1000
        assert 0.8594 * 0.8594 * 3.0 == pytest.approx(2.21570508, abs=1e-12)
        assert lesion_load_ml(Mask(bits), sp) == pytest.approx(expected, rel=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 500), st.integers(0, 500))
    def test_linear(self, a, b):
        sp = (0.9, 1.1, 3.0)

        def mask(n):
            bits = np.zeros(1000, bool)
            bits[:n] = True
            return Mask(bits.reshape(10, 10, 10), spacing=sp)

        assert lesion_load_ml(mask(a + b)) == pytest.approx(lesion_load_ml(mask(a)) + lesion_load_ml(mask(b)), rel=1e-12, abs=1e-15)

    def test_icv_rejected(self):
        with pytest.raises(ValueError):
            lesion_load_ml(Mask(np.ones((2, 2, 2)), MaskKind.ICV))
