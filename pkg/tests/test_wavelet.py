import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

from cascadevol.ingest import SeriesPath
from cascadevol.wavelet import (AnalyzingWavelet, CWTTransformer, ScaleGrid, WaveletField, cwt,
                                loglog_fit, moment_scaling, volatility_series)


def test_wavelet_values():
    w = AnalyzingWavelet()
    t = np.array([0.0, 1.0, 2.0])
    np.testing.assert_allclose(w(t), (t ** 2 - 1) * np.exp(-t ** 2 / 2))


@pytest.mark.parametrize("s", [4.0, 7.3, 64.0, 300.0])
def test_vanishing_moments(s):
    m0, m1 = AnalyzingWavelet().vanishing_moments(s)
    assert m0 <= 1e-8 and m1 <= 1e-8


def test_kernel_close_to_sampled_wavelet():
    w = AnalyzingWavelet()
    s = 16.0
    k = w.kernel(s)
    t = np.arange(-96, 97) / s
    assert np.max(np.abs(k * s - w(t))) < 1e-6


def test_unknown_kind():
    with pytest.raises(ValueError):
        AnalyzingWavelet("haar")


def test_scale_grid_consistency():
    g = ScaleGrid.geometric(4096, 4, 128, 10)
    assert np.all(np.diff(g.scales) > 0) and np.all(np.diff(g.lambdas) < 0)
    np.testing.assert_allclose(g.L * np.exp(-g.lambdas), g.scales, rtol=1e-12)
    assert g.scales[-1] == pytest.approx(128)
    assert g.index_of(4.1) == 0


def test_scale_grid_parse():
    g = ScaleGrid.parse("4:64:5", 1024)
    np.testing.assert_allclose(g.scales, [4, 8, 16, 32, 64])
    with pytest.raises(ValueError, match="min:max:count"):
        ScaleGrid.parse("4-64", 1024)


def test_default_grid():
    g = ScaleGrid.geometric(2 ** 14)
    assert len(g) == 64 and g.scales[0] == 4 and g.scales[-1] == pytest.approx(2 ** 14 / 32)


def test_linear_trend_removed():
    t = np.arange(4096, dtype=float)
    f = cwt(0.37 * t - 5.0, ScaleGrid.geometric(4096, 4, 256, 8))
    assert np.nanmax(np.abs(f.coeffs)) <= 1e-8


def test_constant_path_gives_zero():
    f = cwt(np.full(2048, 3.0), ScaleGrid.geometric(2048, 4, 128, 6))
    assert np.nanmax(np.abs(f.coeffs)) <= 1e-12


def test_delta_difference_is_exact(brownian):
    grid = ScaleGrid(np.array([1.0, 2.0, 5.0, 17.0]), brownian.size)
    f = cwt(brownian, grid, AnalyzingWavelet("delta_difference"))
    for j, s in enumerate([1, 2, 5, 17]):
        pos, w = f.column(j)
        np.testing.assert_array_equal(pos, np.arange(brownian.size - s))
        np.testing.assert_array_equal(w, brownian[pos + s] - brownian[pos])


def test_delta_difference_needs_integer_scales(brownian):
    with pytest.raises(ValueError, match="integer"):
        cwt(brownian, ScaleGrid(np.array([1.5, 3.0]), brownian.size),
            AnalyzingWavelet("delta_difference"))


def test_direct_sum_matches_definition(brownian):
    # brute-force W[u,s] = sum_t Z(t) psi((t-u)/s)/s with the zero-mean kernel
    grid = ScaleGrid(np.array([5.0, 80.0]), brownian.size)
    f = cwt(brownian, grid)
    w = AnalyzingWavelet()
    for j, s in enumerate(grid.scales):
        k = w.kernel(s)
        half = (k.size - 1) // 2
        for u in (half + 3, brownian.size // 2, brownian.size - half - 1):
            expected = np.dot(brownian[u - half:u + half + 1], k)
            assert f.coeffs[u, j] == pytest.approx(expected, rel=1e-9, abs=1e-9)


def test_masking_at_edges_and_breaks(brownian):
    L = brownian.size
    path = SeriesPath(brownian, 1.0, (4000,))
    grid = ScaleGrid(np.array([4.0, 20.0]), L)
    f = cwt(path, grid)
    for j, s in enumerate(grid.scales):
        width = int(np.ceil(6 * s))
        valid = f.valid_mask[:, j]
        assert not valid[:width].any() and not valid[L - width:].any()
        assert not valid[4000 - width:4000 + width].any()
        assert np.all(np.isfinite(f.coeffs[valid, j]))
        assert np.all(np.isnan(f.coeffs[~valid, j]))


def test_preconditions(brownian):
    with pytest.raises(ValueError, match="L/8"):
        cwt(brownian, ScaleGrid(np.array([4.0, brownian.size / 4]), brownian.size))
    with pytest.raises(ValueError, match="built for"):
        cwt(brownian, ScaleGrid(np.array([4.0, 8.0]), 100))
    with pytest.raises(ValueError, match="shorter"):
        cwt(np.zeros(40), ScaleGrid(np.array([4.0, 5.0]), 40))


def test_volatility_series_absolute_value():
    coeffs = np.array([[-0.3], [np.nan]])
    f = WaveletField(coeffs, ScaleGrid(np.array([1.0]), 2), np.array([[True], [False]]))
    v = volatility_series(f, 0)
    np.testing.assert_array_equal(v.values, [0.3])
    assert not v.empty


def test_all_masked_scale_is_empty():
    f = WaveletField(np.full((3, 1), np.nan), ScaleGrid(np.array([1.0]), 3),
                     np.zeros((3, 1), dtype=bool))
    assert volatility_series(f, 0).empty
    with pytest.raises(IndexError):
        volatility_series(f, 1)


def test_brownian_mean_modulus_exponent():
    gen = np.random.default_rng(1)
    L = 4096
    grid = ScaleGrid.geometric(L, 4, 128, 8)
    acc = np.zeros(len(grid))
    var = np.zeros(len(grid))
    for _ in range(100):
        f = cwt(np.cumsum(gen.standard_normal(L)), grid)
        acc += np.nanmean(f.modulus, axis=0)
        var += np.nanvar(f.coeffs, axis=0)
    assert loglog_fit(grid.scales, acc)[0] == pytest.approx(0.5, abs=0.03)
    assert loglog_fit(grid.scales, var)[0] == pytest.approx(1.0, abs=0.05)


def test_moment_scaling_q0_and_errors(brownian):
    f = cwt(brownian, ScaleGrid.geometric(brownian.size, 4, 256, 8))
    ms = moment_scaling(f, [0.0, 1.0])
    assert ms.exponents[0] == 0.0
    with pytest.raises(ValueError, match="q >= 0"):
        moment_scaling(f, [-1.0])
    with pytest.raises(ValueError, match="at least 4"):
        moment_scaling(f, [1.0], fit_range=(4, 6))


def test_field_export(tmp_path, brownian):
    f = cwt(brownian[:512], ScaleGrid(np.array([4.0, 8.0]), 512))
    f.write(tmp_path / "w.csv", tmp_path / "w.json")
    rows = np.loadtxt(tmp_path / "w.csv", delimiter=",", skiprows=1)
    assert rows.shape[0] == f.valid_mask.sum()
    desc = json.loads((tmp_path / "w.json").read_text())
    assert desc["L"] == 512 and desc["scales"] == [4.0, 8.0]


def test_transformer(brownian):
    tr = CWTTransformer(n_scales=6, s_max=256.0)
    out = tr.fit(brownian).transform(brownian)
    assert out.shape == (brownian.size, 6)
    assert clone(tr).get_params() == tr.get_params()
    np.testing.assert_array_equal(out, cwt(brownian, tr.grid_).coeffs)


def test_fft_and_direct_agree(brownian):
    grid = ScaleGrid(np.array([60.0, 70.0]), brownian.size)
    f = cwt(brownian, grid)
    from scipy import signal
    k = AnalyzingWavelet().kernel(70.0)
    direct = signal.convolve(brownian, k, mode="valid", method="direct")
    half = (k.size - 1) // 2
    np.testing.assert_allclose(f.coeffs[half:brownian.size - half, 1], direct, atol=1e-9)


@given(arrays(np.float64, 600, elements=st.floats(-100, 100)),
       arrays(np.float64, 600, elements=st.floats(-100, 100)),
       st.floats(-5, 5), st.floats(-5, 5))
def test_linearity(z1, z2, a, b):
    grid = ScaleGrid(np.array([4.0, 9.0, 30.0, 70.0]), 600)
    lhs = cwt(a * z1 + b * z2, grid).coeffs
    rhs = a * cwt(z1, grid).coeffs + b * cwt(z2, grid).coeffs
    np.testing.assert_allclose(lhs, rhs, atol=1e-10, rtol=1e-10)


@given(st.floats(1.0, 60.0))
def test_kernel_moments_any_scale(s):
    m0, m1 = AnalyzingWavelet().vanishing_moments(s)
    assert m0 <= 1e-8 and m1 <= 1e-8
