import json
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cascadevol import cascade, kmest
from cascadevol.cascade import ModelParams


def _moment(x, value, se, count=None):
    count = np.full(x.size, 100.0) if count is None else count
    return kmest.ConditionalMoment(1, np.nan, np.nan, 0.1, np.column_stack([x, value, se, count]))


def test_identical_scales_give_zero_moments():
    x = np.random.default_rng(0).lognormal(size=5000)
    for k in (1, 2, 4):
        m = kmest.conditional_moment(x, x, k, 0.1)
        np.testing.assert_array_equal(m.value, 0.0)


def test_constant_shift_gives_rate():
    x = np.random.default_rng(1).lognormal(size=5000)
    m = kmest.conditional_moment(x + 0.3 * 0.2, x, 1, 0.2)
    np.testing.assert_allclose(m.value, 0.3, rtol=1e-12)
    m2 = kmest.conditional_moment(x + 0.3 * 0.2, x, 2, 0.2)
    np.testing.assert_allclose(m2.value, 0.06 ** 2 / 0.2, rtol=1e-12)


def test_bins_cover_and_drop_top_quantile():
    x = np.random.default_rng(2).lognormal(size=10_000)
    m = kmest.conditional_moment(x, x, 1, 0.1, bins=20, min_count=10)
    assert m.bins.shape[0] == 20
    assert m.count.sum() == pytest.approx(9900, abs=2)
    assert np.all(np.diff(m.x) > 0)


def test_binning_errors():
    with pytest.raises(kmest.BinningError):
        kmest.conditional_moment(np.ones(100), np.ones(100), 1, 0.1)
    with pytest.raises(kmest.BinningError):
        kmest.conditional_moment(np.arange(100.0), np.arange(100.0), 1, 0.1, min_count=500)
    with pytest.raises(ValueError):
        kmest.conditional_moment(np.ones(3), np.ones(4), 1, 0.1)
    with pytest.raises(ValueError):
        kmest.conditional_moment(np.ones(3), np.ones(3), 1, 0.0)


def test_drift_fit_exact_line():
    x = np.linspace(1, 10, 12)
    fit = kmest.fit_drift(_moment(x, 0.7 - 0.45 * x, np.full(12, 0.01)))
    assert fit.intercept == pytest.approx(0.7, abs=1e-10)
    assert fit.slope == pytest.approx(0.45, abs=1e-10)


def test_diffusion_fit_exact_quadratic():
    x = np.linspace(1, 10, 12)
    fit = kmest.fit_diffusion(_moment(x, 2.5 + 0.026 * x ** 2, np.full(12, 0.01)))
    assert fit.intercept == pytest.approx(2.5, abs=1e-10)
    assert fit.slope == pytest.approx(0.026, abs=1e-10)


def test_drift_fit_noisy_within_two_se():
    gen = np.random.default_rng(3)
    x = np.linspace(1, 10, 30)
    se = np.full(30, 0.05)
    hits = 0
    for _ in range(40):
        fit = kmest.fit_drift(_moment(x, 1.0 - 0.5 * x + gen.normal(0, 0.05, 30), se))
        hits += abs(fit.slope - 0.5) < 2 * fit.slope_se
    assert hits >= 32  # ~95% coverage


def test_fit_errors():
    with pytest.raises(np.linalg.LinAlgError):
        kmest.fit_diffusion(_moment(np.array([-1.0, 1, -1, 1, 1]), np.ones(5), np.ones(5)))
    with pytest.raises(ValueError, match="populated bins"):
        kmest.fit_drift(_moment(np.arange(3.0), np.ones(3), np.ones(3)))


def test_extrapolation_exact_quadratic_log():
    h = np.array(kmest.DEFAULT_LADDER)
    vals = 3.0 * np.exp(0.4 * h - 0.8 * h * h)
    ex = kmest.extrapolate_dlambda(h, vals)
    assert ex.value == pytest.approx(3.0, rel=1e-10)
    np.testing.assert_allclose(ex.coef, [np.log(3.0), 0.4, -0.8], atol=1e-10)


def test_extrapolation_errors():
    with pytest.raises(ValueError, match="4 distinct"):
        kmest.extrapolate_dlambda([0.1, 0.1, 0.2, 0.3], [1, 1, 1, 1])
    with pytest.raises(ValueError, match="positive"):
        kmest.extrapolate_dlambda([0.1, 0.2, 0.3, 0.4], [1, -1, 1, 1])


def test_pool_scalar():
    v, e = kmest.pool_scalar([1.0, 3.0], [1.0, 1.0])
    assert v == 2.0 and e == pytest.approx(np.sqrt(2) / 2)
    v, e = kmest.pool_scalar([1.0, 4.0], [1.0, 2.0])
    # weights 1 and 1/2
    assert v == pytest.approx(2.0) and e == pytest.approx(np.sqrt(2) / 1.5)
    with pytest.raises(ValueError):
        kmest.pool_scalar([1.0], [1.0])
    with pytest.raises(ValueError):
        kmest.pool_scalar([1.0, 2.0], [0.0, 1.0])


def test_power_law_exact():
    s = 2.0 ** np.arange(3, 10)
    fit = kmest.fit_power_law(s, 0.16 * s ** 0.5, 0.01 * s ** 0.5)
    assert fit.exponent == pytest.approx(0.5, abs=1e-10)
    assert fit(1.0) == pytest.approx(0.16, rel=1e-10)
    assert set(fit.to_dict()) == {"intercept", "intercept_se", "exponent", "exponent_se"}


@given(st.floats(-3, 3), st.floats(0.2, 5.0))
def test_drift_fit_equivariance(shift, scale):
    # rescaling x by c leaves gamma unchanged and scales a_A by c; a constant increment
    # shift adds to the intercept only
    x = np.linspace(1, 10, 15)
    m = 0.8 - 0.3 * x
    base = kmest.fit_drift(_moment(x, m, np.full(15, 0.1)))
    moved = kmest.fit_drift(_moment(x, m + shift, np.full(15, 0.1)))
    scaled = kmest.fit_drift(_moment(scale * x, scale * m, np.full(15, 0.1 * scale)))
    assert moved.intercept == pytest.approx(base.intercept + shift, abs=1e-9)
    assert moved.slope == pytest.approx(base.slope, abs=1e-9)
    assert scaled.slope == pytest.approx(base.slope, abs=1e-9)
    assert scaled.intercept == pytest.approx(scale * base.intercept, abs=1e-9)


def _diffusive_pairs(gen, n=200_000, jumps=False):
    pairs = []
    for dl in (0.02, 0.04, 0.06, 0.08, 0.1):
        x2 = gen.lognormal(1.0, 0.5, n)
        x1 = x2 + (0.3 - 0.5 * x2) * dl + np.sqrt((1.0 + 0.03 * x2 ** 2) * dl) * \
            gen.standard_normal(n)
        if jumps:
            hit = gen.random(n) < 1.0 * dl
            x1 = x1 + hit * 3.0 * x2.std() * gen.choice([-1.0, 1.0], n)
        pairs.append((x1, x2, dl))
    return pairs


def test_pawula_gaussian_increments_vanish():
    rep = kmest.pawula_check(_diffusive_pairs(np.random.default_rng(5)))
    assert rep.vanishes and rep.verdict == "vanishes"
    assert set(rep.to_dict()) >= {"limit", "limit_se", "verdict"}


def test_pawula_jump_control_rejects():
    rep = kmest.pawula_check(_diffusive_pairs(np.random.default_rng(6), jumps=True))
    assert not rep.vanishes
    assert rep.limit > 0


def test_pawula_needs_four_steps():
    pairs = _diffusive_pairs(np.random.default_rng(7), n=2000)[:3]
    with pytest.raises(ValueError, match="4 distinct"):
        kmest.pawula_check(pairs)


def test_lambda_grid_contains_pairs():
    s2 = np.array([64.0, 256.0])
    lam = kmest.km_lambda_grid(1024.0, s2, s0=512.0)
    assert np.all(np.diff(lam) > 0)
    assert np.log(1024 / 512) == pytest.approx(lam[0])
    for s in s2:
        for h in kmest.DEFAULT_LADDER:
            assert np.min(np.abs(lam - np.log(1024 / (s * (1 - h))))) < 1e-12


@pytest.fixture(scope="module")
def ensemble_fit():
    p = ModelParams()
    s2 = 2.0 ** np.arange(5, 11)
    lam = kmest.km_lambda_grid(p.L, s2, s0=2048.0)
    ens = cascade.simulate_sde(p, None, lam, 40_000, 17)
    est = kmest.KramersMoyalEstimator(s2_values=s2, L=p.L).fit(ens)
    return p, est


def test_estimator_recovers_rates(ensemble_fit):
    p, est = ensemble_fit
    assert est.gamma_M_ == pytest.approx(p.gamma_M, abs=max(4 * est.gamma_M_se_, 0.03))
    assert est.sigma_M2_ == pytest.approx(p.sigma_M2, abs=max(4 * est.sigma_M2_se_, 0.01))
    assert est.estimate_.b_A2_fit.exponent == pytest.approx(1.0, abs=0.15)


def test_estimate_outputs(ensemble_fit, tmp_path):
    _, est = ensemble_fit
    summ = est.estimate_.summary()
    est.estimate_.write(tmp_path / "km.csv", tmp_path / "km.json")
    data = json.loads((tmp_path / "km.json").read_text())
    assert data["pawula"]["verdict"] in ("vanishes", "does not vanish")
    assert summ["gamma_M"] == data["gamma_M"]
    lines = (tmp_path / "km.csv").read_text().splitlines()
    assert lines[0].startswith("s,a_A,a_A_se,b_A2")
    assert len(lines) == 1 + est.estimate_.a_A_by_scale.shape[0]
    assert est.estimate_.pair_table.shape[1] == len(kmest.KMEstimate.PAIR_COLUMNS)
    params = est.to_params(epsilon=0.16)
    assert params.gamma_M == pytest.approx(est.gamma_M_)


def test_estimator_requires_scales_for_ensembles():
    ens = cascade.Ensemble(np.ones((10, 2)), np.array([0.0, 1.0]), 0)
    with pytest.raises(ValueError, match="s2_values"):
        kmest.KramersMoyalEstimator().fit(ens)
    with pytest.raises(ValueError, match="L is required"):
        kmest.estimate_km(ens, [8.0, 16.0])


def test_estimator_on_wavelet_field():
    from cascadevol import ingest, wavelet

    path = ingest.synthesize_cascade_path(ModelParams(), 2 ** 16, 9)
    grid = wavelet.ScaleGrid.geometric(2 ** 16, 8, 512, 48)
    field = wavelet.cwt(path, grid)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        est = kmest.KramersMoyalEstimator(ladder=(0.05, 0.1, 0.2, 0.3, 0.4),
                                          min_count=30).fit(field)
    assert np.isfinite(est.gamma_M_) and est.gamma_M_ > 0
