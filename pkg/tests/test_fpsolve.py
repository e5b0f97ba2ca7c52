import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from cascadevol import cascade, fpsolve
from cascadevol.cascade import ModelParams
from cascadevol.fpsolve import FPCoefficients, PdfGrid


def _gaussian_grid(mu, sd, x_max=10.0, n=801, lam=0.0):
    x = np.linspace(0, x_max, n)
    pdf = PdfGrid(x, stats.norm.pdf(x, mu, sd), lam)
    return PdfGrid(x, pdf.density / pdf.mass, lam)


@pytest.fixture(scope="module")
def lognormal_pdf():
    x = np.random.default_rng(0).lognormal(1.0, 0.5, 200_000)
    return fpsolve.build_initial_pdf(x, lam=np.log(131072.0 / 128.0))


def test_initial_pdf_recovers_lognormal(lognormal_pdf):
    pdf = lognormal_pdf
    true = stats.lognorm.pdf(pdf.x, 0.5, scale=np.e)
    assert pdf.mass == pytest.approx(1.0, abs=1e-12)
    assert np.sum(pdf.weights * np.abs(pdf.density - true)) < 0.05
    assert pdf.meta["n_bins"] > 10 and pdf.meta["splice_point"] > pdf.mean


def test_initial_pdf_tail_exponent(lognormal_pdf):
    xc = lognormal_pdf.meta["splice_point"]
    assert fpsolve.tail_index(lognormal_pdf, 1.5 * xc, lognormal_pdf.x[-1]) == \
        pytest.approx(-4.9, abs=0.05)
    assert 0 < lognormal_pdf.truncated_mass < 1e-3


def test_initial_pdf_errors():
    with pytest.raises(ValueError, match="at least 1000"):
        fpsolve.build_initial_pdf(np.ones(999))
    with pytest.raises(ValueError, match="degenerate"):
        fpsolve.build_initial_pdf(np.ones(5000))
    with pytest.raises(ValueError, match="non-negative"):
        fpsolve.build_initial_pdf(np.linspace(-1, 1, 5000))


def test_pdf_grid_helpers():
    pdf = _gaussian_grid(5.0, 1.0)
    assert pdf.mean == pytest.approx(5.0, abs=1e-6)
    assert pdf.sd == pytest.approx(1.0, abs=1e-4)
    assert pdf.cdf()[-1] == 1.0
    probs = pdf.bin_probabilities(np.array([0.0, 5.0, 10.0]))
    np.testing.assert_allclose(probs, [0.5, 0.5], atol=1e-4)
    draws = pdf.sample(np.random.default_rng(1), 100_000)
    assert draws.mean() == pytest.approx(5.0, abs=0.02)


def test_heat_kernel_variance_growth():
    pdf = _gaussian_grid(5.0, 0.5)
    coeffs = FPCoefficients.constant(b2=0.2)
    out = fpsolve.solve(pdf, coeffs, [0.5])[-1]
    assert out.sd ** 2 - pdf.sd ** 2 == pytest.approx(0.2 * 0.5, rel=1e-3)
    assert out.mean == pytest.approx(pdf.mean, abs=1e-8)


def test_linear_drift_mean_decay():
    pdf = _gaussian_grid(5.0, 0.5)
    coeffs = FPCoefficients.constant(gamma_M=0.5, b2=0.01)
    out = fpsolve.solve(pdf, coeffs, [0.5, 1.0])
    for snap in out[1:]:
        assert snap.mean == pytest.approx(pdf.mean * np.exp(-0.5 * snap.lam), rel=5e-3)


def test_stability_error():
    pdf = _gaussian_grid(5.0, 0.5)
    coeffs = FPCoefficients.constant(b2=1.0)
    bound = coeffs.stable_step(pdf.x, [0.0])
    assert bound == pytest.approx(0.4 * pdf.dx ** 2)
    with pytest.raises(fpsolve.StabilityError):
        fpsolve.step_rk4(pdf, coeffs, 2 * bound)
    fpsolve.step_rk4(pdf, coeffs, bound)


@pytest.fixture(scope="module")
def consistent_pdf():
    # initial law matching E|W(s0)| = 2.27 s0^0.5; coarse grid keeps the explicit steps few
    p = ModelParams()
    x = cascade.default_x0_sampler(p, 128.0)(np.random.default_rng(2), 200_000)
    return fpsolve.build_initial_pdf(x, n_nodes=512, lam=p.lam(128.0))


@pytest.fixture(scope="module")
def default_solution(consistent_pdf):
    p = ModelParams()
    coeffs = FPCoefficients.from_params(p)
    sched = p.lam(np.array([64.0, 32.0, 16.0, 8.0]))
    return p, fpsolve.solve(consistent_pdf, coeffs, sched)


def test_conservation_and_positivity(default_solution):
    _, out = default_solution
    for snap in out:
        assert abs(snap.mass - 1.0) <= 1e-6
        assert np.all(snap.density >= 0)
    assert out[-1].meta["max_step_drift"] <= 1e-9


def test_schedule_handling(lognormal_pdf):
    coeffs = FPCoefficients.from_params(ModelParams())
    assert fpsolve.solve(lognormal_pdf, coeffs, []) == [lognormal_pdf]
    with pytest.raises(ValueError):
        fpsolve.solve(lognormal_pdf, coeffs, [lognormal_pdf.lam - 1])


def _discrete_mean_rate(pdf, gamma, sig2, a, b2):
    # d/dlambda sum(w x p) for the flux form: interior faces plus the boundary term
    x, p = pdf.x, pdf.density
    d1 = a - gamma * x
    d2 = b2 + sig2 * x ** 2
    interior = pdf.dx * np.sum(0.5 * (d1[1:] + d1[:-1]) * 0.5 * (p[1:] + p[:-1]))
    return interior + 0.5 * (d2[0] * p[0] - d2[-1] * p[-1])


@settings(max_examples=25)
@given(st.floats(0.0, 1.0), st.floats(0.0, 0.1), st.floats(0.0, 1.0), st.floats(0.0, 3.0),
       st.floats(0.5, 6.0))
def test_discrete_moment_identity(gamma, sig2, a, b2, mu):
    pdf = _gaussian_grid(mu, 1.0, n=201)
    out = np.empty(pdf.x.size)
    fpsolve._rhs(pdf.density, pdf.x, 1.0 / pdf.weights, pdf.dx, gamma, sig2, a, b2, out)
    w = pdf.weights
    assert abs(w @ out) < 1e-10 * max(1.0, np.abs(out).max())
    assert w @ (pdf.x * out) == pytest.approx(_discrete_mean_rate(pdf, gamma, sig2, a, b2),
                                              rel=1e-9, abs=1e-10)


def test_moments_tau_conventions(default_solution):
    p, out = default_solution
    res = fpsolve.pdf_moments_tau(out, [0.0, 1.0, 2.0], p.L)
    assert res.tau[0] == 0.0 and res.tau_wtmm[0] == -1.0
    assert len(list(res.rows())) == 6
    with pytest.raises(ValueError, match="diverge"):
        fpsolve.pdf_moments_tau(out, [3.9], p.L)
    with pytest.raises(ValueError, match="q >= 0"):
        fpsolve.pdf_moments_tau(out, [-1.0], p.L)
    with pytest.raises(ValueError, match="at least 4"):
        fpsolve.pdf_moments_tau(out[:3], [1.0], p.L)


def test_pure_multiplicative_second_moment_exponent(consistent_pdf):
    p = ModelParams(epsilon=0.0)
    sched = p.lam(np.array([64.0, 32.0, 16.0]))
    out = fpsolve.solve(consistent_pdf, FPCoefficients.from_params(p), sched)
    res = fpsolve.pdf_moments_tau(out, [2.0], p.L)
    # E[x^2] ~ s^(2 gamma - sigma^2)
    assert res.tau[0] == pytest.approx(2 * 0.51 - 0.026, abs=0.01)


def test_mean_follows_moment_ode(consistent_pdf):
    # dE/dlambda = a_A - gamma_M E + 1/2 D2(0) p(0) - 1/2 D2(x_max) p(x_max); the boundary
    # terms are the zero-flux walls, read off dense snapshots and integrated independently
    p = ModelParams()
    lam = np.linspace(consistent_pdf.lam, p.lam(8.0), 41)
    out = fpsolve.solve(consistent_pdf, FPCoefficients.from_params(p), lam[1:])
    walls = np.array([0.5 * p.b_A2(o.scale(p.L)) * o.density[0]
                      - 0.5 * (p.b_A2(o.scale(p.L)) + p.sigma_M2 * o.x[-1] ** 2) * o.density[-1]
                      for o in out])
    sol = integrate.solve_ivp(
        lambda l, e: p.a_A(p.scale(l)) - p.gamma_M * e + np.interp(l, lam, walls),
        (lam[0], lam[-1]), [out[0].mean], t_eval=lam, rtol=1e-10, max_step=0.01)
    np.testing.assert_allclose([o.mean for o in out], sol.y[0], rtol=2e-3)
    assert walls[-1] > 0  # reflection at x = 0 raises the mean


def test_additive_term_shifts_mean_exponent(consistent_pdf, default_solution):
    # d log E / dlambda = a_A/E - gamma_M, so epsilon lowers tau(1) by about a_A/E
    p, with_eps = default_solution
    sched = [s.lam for s in with_eps[1:]]
    without = fpsolve.solve(consistent_pdf, FPCoefficients.from_params(ModelParams(epsilon=0.0)),
                            sched)
    t1 = fpsolve.pdf_moments_tau(with_eps, [1.0], p.L).tau[0]
    t0 = fpsolve.pdf_moments_tau(without, [1.0], p.L).tau[0]
    assert t0 == pytest.approx(p.gamma_M, abs=2e-3)
    # a_A/E starts at epsilon/2.27 = 0.07; reflection at x = 0 adds a little more
    assert 0.05 < t0 - t1 < 0.1


def test_solver_estimator():
    x = cascade.default_x0_sampler(ModelParams(), 128.0)(np.random.default_rng(3), 20_000)
    est = fpsolve.FokkerPlanckSolver(s0=128.0, n_nodes=512).fit(x)
    snaps = est.predict([64.0, 32.0])
    assert [s.scale(est.L) for s in snaps] == pytest.approx([64.0, 32.0])
    assert snaps[-1].mean < snaps[0].mean < est.pdf0_.mean


def test_drift_warning_is_logged(caplog, monkeypatch):
    pdf = _gaussian_grid(5.0, 0.5)
    real = fpsolve._advance

    def leaky(pdf, coeffs, lam_end, nsteps):
        out = real(pdf, coeffs, lam_end, nsteps)
        return PdfGrid(out.x, out.density * 1.001, out.lam, meta=out.meta)

    monkeypatch.setattr(fpsolve, "_advance", leaky)
    with caplog.at_level(logging.WARNING, logger=fpsolve.logger.name):
        fpsolve.solve(pdf, FPCoefficients.constant(b2=0.1), [0.01])
    assert "mass drift" in caplog.text
