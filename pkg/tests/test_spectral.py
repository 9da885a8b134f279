import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pfa.errors import DegenerateSpectrum, InvalidInput, InvalidShape
from pfa.spectral import (
    ResponseMatrix,
    Spectrum,
    compute_spectrum,
    kl_to_uniform,
    pool_responses,
)

from oracles import kl_uniform, normalized_spectrum


def spectrum_of(data, layer_id="l"):
    return compute_spectrum(ResponseMatrix(layer_id, np.asarray(data, dtype=np.float64)))


class TestPooling:
    def test_max_of_single_slice(self):
        t = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        t = np.concatenate([t, t])  # M must be >= 2
        r = pool_responses(t, "conv")
        assert r.data.shape == (2, 1)
        assert r.data[0, 0] == 4.0

    def test_constant_tensor(self):
        r = pool_responses(np.full((3, 4, 5, 2), 7.0))
        np.testing.assert_array_equal(r.data, 7.0)

    def test_dense_input_is_unchanged(self):
        a = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(pool_responses(a).data, a)

    def test_per_channel_spatial_max(self):
        rng = np.random.default_rng(1)
        t = rng.normal(size=(4, 3, 5, 6))
        r = pool_responses(t)
        for i in range(4):
            for c in range(6):
                assert r.data[i, c] == max(t[i, h, w, c] for h in range(3) for w in range(5))

    def test_avg_pool_flag(self):
        t = np.arange(2 * 2 * 2 * 1, dtype=np.float64).reshape(2, 2, 2, 1)
        np.testing.assert_allclose(pool_responses(t, pool="avg").data[:, 0], [1.5, 5.5])

    @pytest.mark.parametrize("shape", [(4,), (2, 3, 4), (2, 2, 2, 2, 2)])
    def test_bad_rank(self, shape):
        with pytest.raises(InvalidShape):
            pool_responses(np.zeros(shape))

    def test_single_sample_rejected(self):
        with pytest.raises(InvalidShape):
            pool_responses(np.zeros((1, 2, 2, 3)))


class TestSpectrum:
    def test_orthogonal_equal_variance(self):
        a = np.array([[1, 0], [-1, 0], [0, 1], [0, -1]], dtype=float)
        np.testing.assert_allclose(spectrum_of(a).values, [0.5, 0.5], atol=1e-12)

    def test_identical_columns_rank_one(self):
        x = np.random.default_rng(2).normal(size=10)
        np.testing.assert_allclose(spectrum_of(np.stack([x, x], 1)).values, [1.0, 0.0], atol=1e-12)

    def test_matches_jacobi_oracle(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(12, 5))
        expected = normalized_spectrum(a.tolist())
        got = spectrum_of(a).values
        np.testing.assert_allclose(got, expected, rtol=1e-8)

    def test_degenerate_layer_flagged(self):
        s = spectrum_of(np.ones((6, 3)))
        assert s.degenerate
        np.testing.assert_array_equal(s.values, 0.0)

    def test_nan_rejected(self):
        a = np.ones((4, 2))
        a[1, 1] = np.nan
        with pytest.raises(InvalidInput):
            ResponseMatrix("x", a)

    def test_spectrum_validation(self):
        with pytest.raises(InvalidInput):
            Spectrum("x", [0.2, 0.8])
        with pytest.raises(InvalidInput):
            Spectrum("x", [0.5, 0.4])
        with pytest.raises(InvalidInput):
            Spectrum("x", [0.5, 0.0], degenerate=True)

    def test_cumulative_pinned_to_one(self):
        s = Spectrum("x", [0.5, 0.3, 0.2 - 1e-12])
        assert s.cumulative()[-1] == 1.0


matrices = arrays(
    np.float64,
    st.tuples(st.integers(4, 20), st.integers(1, 6)),
    elements=st.floats(-100, 100, allow_nan=False, width=64),
)


class TestSpectrumProperties:
    @settings(max_examples=60, deadline=None)
    @given(matrices, st.floats(1e-3, 1e3))
    def test_scale_invariance(self, a, c):
        s1, s2 = spectrum_of(a), spectrum_of(c * a)
        if s1.degenerate or s2.degenerate:
            return
        np.testing.assert_allclose(s1.values, s2.values, atol=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(matrices, st.randoms(use_true_random=False))
    def test_row_permutation_invariance(self, a, rnd):
        perm = list(range(a.shape[0]))
        rnd.shuffle(perm)
        s1, s2 = spectrum_of(a), spectrum_of(a[perm])
        assert s1.degenerate == s2.degenerate
        np.testing.assert_allclose(s1.values, s2.values, atol=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(matrices)
    def test_sums_to_one_and_sorted(self, a):
        s = spectrum_of(a)
        if not s.degenerate:
            assert abs(s.values.sum() - 1) <= 1e-9
            assert np.all(np.diff(s.values) <= 0)
            assert np.all(s.values >= 0)

    @settings(max_examples=60, deadline=None)
    @given(matrices, st.floats(-50, 50))
    def test_column_shift_invariance(self, a, shift):
        offsets = shift * np.arange(1, a.shape[1] + 1)
        s1, s2 = spectrum_of(a), spectrum_of(a + offsets)
        if s1.degenerate or s2.degenerate:
            return
        np.testing.assert_allclose(s1.values, s2.values, atol=1e-9)


class TestKL:
    def test_uniform_is_zero(self):
        assert kl_to_uniform(Spectrum("x", [0.25] * 4)) == 0.0

    def test_dirac_is_log_c(self):
        assert kl_to_uniform(Spectrum("x", [1, 0, 0, 0])) == pytest.approx(math.log(4), abs=1e-12)

    def test_skewed_value(self):
        got = kl_to_uniform(Spectrum("x", [0.7, 0.1, 0.1, 0.1]))
        assert got == pytest.approx(kl_uniform([0.7, 0.1, 0.1, 0.1]), abs=1e-12)
        assert got == pytest.approx(0.44581, abs=1e-4)

    def test_degenerate_raises(self):
        with pytest.raises(DegenerateSpectrum):
            kl_to_uniform(Spectrum("x", [0, 0], degenerate=True))

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(0, 1)))
    def test_bounds(self, raw):
        if raw.sum() <= 0:
            return
        v = np.sort(raw / raw.sum())[::-1]
        v = v / v.sum()
        if abs(v.sum() - 1) > 1e-9:
            return
        kl = kl_to_uniform(Spectrum("x", v))
        assert 0.0 <= kl <= math.log(v.size) + 1e-12
