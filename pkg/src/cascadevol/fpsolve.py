"""Fokker-Planck evolution of the volatility pdf across scales.

Solves

    dp/dlambda = -d/dx (D1 p) + 1/2 d^2/dx^2 (D2 p)
    D1 = a_A(lambda) - gamma_M x,   D2 = b_A(lambda)^2 + sigma_M2 x^2

on a uniform grid over ``[0, x_max]`` with zero flux at both ends.  The
spatial operator is a finite-volume flux form whose boundary cells have half
width, so the trapezoid mass is conserved to rounding; time stepping is
classical explicit RK4.
"""

import logging
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy import interpolate
from sklearn.base import BaseEstimator

from ._validation import check_series
from .wavelet import loglog_fit

logger = logging.getLogger(__name__)

N_NODES = 2048
XMAX_FACTOR = 20.0
TAIL_INDEX = -4.9
SPLICE_QUANTILE = 0.99
STABILITY_C = 0.4
MAX_STEP = 1e-3
MIN_SAMPLES = 1000


class StabilityError(ValueError):
    pass


@dataclass(frozen=True)
class PdfGrid:
    """Density on uniform nodes ``x_i = i * dx`` over ``[0, x_max]``."""

    x: np.ndarray
    density: np.ndarray
    lam: float = 0.0
    truncated_mass: float = 0.0  # tail mass cut off beyond x_max at construction
    clipped_mass: float = 0.0  # cumulative mass removed by positivity clipping
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def dx(self):
        return float(self.x[1] - self.x[0])

    @property
    def weights(self):
        w = np.full(self.x.size, self.dx)
        w[0] = w[-1] = 0.5 * self.dx
        return w

    @property
    def mass(self):
        return float(self.weights @ self.density)

    def moment(self, q):
        return float(self.weights @ (self.x ** q * self.density))

    @property
    def mean(self):
        return self.moment(1) / self.mass

    @property
    def sd(self):
        m = self.mean
        return float(np.sqrt(self.moment(2) / self.mass - m * m))

    def scale(self, L):
        return float(L * np.exp(-self.lam))

    def cdf(self):
        """Cumulative trapezoid integral at the nodes, normalised to end at one."""
        inc = 0.5 * (self.density[1:] + self.density[:-1]) * self.dx
        c = np.concatenate([[0.0], np.cumsum(inc)])
        return c / c[-1]

    def sample(self, gen, n):
        """Inverse-CDF draws (density taken piecewise linear in the CDF)."""
        c = self.cdf()
        keep = np.concatenate([[True], np.diff(c) > 0])
        return np.interp(gen.random(n), c[keep], self.x[keep])

    def bin_probabilities(self, edges):
        """Probability of each ``[edges[k], edges[k+1])`` from the interpolated CDF."""
        return np.diff(np.interp(edges, self.x, self.cdf()))

    def write_rows(self, fh, s):
        for xi, pi in zip(self.x, self.density):
            fh.write(f"{s:.10g},{xi:.10g},{pi:.10g}\n")


@dataclass(frozen=True)
class FPCoefficients:
    """Drift and diffusion of the cascade FP equation.

    ``a_A`` and ``b_A2`` are callables of ``lambda``.
    """

    gamma_M: float
    sigma_M2: float
    a_A: object
    b_A2: object

    @classmethod
    def from_params(cls, params):
        def a_A(lam):
            return params.a_A(params.scale(lam))

        def b_A2(lam):
            return params.b_A2(params.scale(lam))

        return cls(params.gamma_M, params.sigma_M2, a_A, b_A2)

    @classmethod
    def constant(cls, gamma_M=0.0, sigma_M2=0.0, a=0.0, b2=0.0):
        return cls(gamma_M, sigma_M2, lambda lam: np.full(np.shape(lam), float(a)),
                   lambda lam: np.full(np.shape(lam), float(b2)))

    def D1(self, lam, x):
        return self.a_A(lam) - self.gamma_M * np.asarray(x)

    def D2(self, lam, x):
        return self.b_A2(lam) + self.sigma_M2 * np.asarray(x) ** 2

    def stable_step(self, x, lam_values):
        """Largest explicit step ``0.4 dx^2 / max D2`` over the given lambdas."""
        dx = x[1] - x[0]
        d2max = float(np.max(self.b_A2(np.asarray(lam_values)))) + self.sigma_M2 * x[-1] ** 2
        if d2max <= 0:
            return np.inf
        return STABILITY_C * dx * dx / d2max


# --------------------------------------------------------------------------
# initial pdf


def build_initial_pdf(samples, n_nodes=N_NODES, x_max=None, lam=0.0, tail_index=TAIL_INDEX,
                      splice_quantile=SPLICE_QUANTILE, bins="fd", smoothing=None):
    """Smoothed density from samples with a power-law tail.

    A histogram of ``samples`` is smoothed with a cubic smoothing spline (GCV
    chooses the penalty unless ``smoothing`` is given).  Beyond the
    ``splice_quantile`` the density is replaced by ``c * x**tail_index``,
    continuous at the splice point.  The result is renormalised on
    ``[0, x_max]`` (default ``20 * mean``) and the analytic tail mass beyond
    ``x_max`` is recorded as ``truncated_mass``.
    """
    x = check_series(samples, "samples")
    if x.size < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {x.size}")
    if np.any(x < 0):
        raise ValueError("samples must be non-negative")
    if np.ptp(x) == 0:
        raise ValueError("all samples are equal; support is degenerate")
    x_c = float(np.quantile(x, splice_quantile))
    if x_max is None:
        x_max = XMAX_FACTOR * float(x.mean())
    if not x_max > x_c:
        raise ValueError(f"x_max={x_max:g} must exceed the splice point {x_c:g}")

    counts, edges = np.histogram(x, bins=bins, range=(0.0, x_c))
    centers = 0.5 * (edges[1:] + edges[:-1])
    dens = counts / (x.size * np.diff(edges))
    spline = interpolate.make_smoothing_spline(centers, dens, lam=smoothing)

    nodes = np.linspace(0.0, x_max, int(n_nodes))
    p = np.clip(spline(nodes), 0.0, None)
    p_c = max(float(spline(x_c)), 0.0)
    if p_c == 0.0:
        p_c = float(dens[-1]) if dens[-1] > 0 else float(dens[dens > 0][-1])
    c = p_c * x_c ** (-tail_index)
    tail = nodes > x_c
    p[tail] = c * nodes[tail] ** tail_index
    truncated = c * x_max ** (tail_index + 1) / -(tail_index + 1)
    pdf = PdfGrid(nodes, p, float(lam))
    mass = pdf.mass
    total = mass + truncated
    pdf = replace(pdf, density=p / mass, truncated_mass=float(truncated / total),
                  meta={"splice_point": x_c, "tail_coefficient": c / mass,
                        "tail_index": tail_index, "n_samples": int(x.size),
                        "n_bins": int(centers.size)})
    if pdf.truncated_mass > 1e-8:
        logger.info("tail mass beyond x_max is %.3g", pdf.truncated_mass)
    return pdf


def tail_index(pdf, x_lo, x_hi):
    """Log-log slope of the density over ``[x_lo, x_hi]``."""
    sel = (pdf.x >= x_lo) & (pdf.x <= x_hi) & (pdf.density > 0)
    if sel.sum() < 3:
        raise ValueError("fewer than three positive nodes in the tail window")
    return float(np.polyfit(np.log(pdf.x[sel]), np.log(pdf.density[sel]), 1)[0])


# --------------------------------------------------------------------------
# semi-discrete operator and RK4 kernel


@numba.njit(cache=True)
def _rhs(p, x, inv_w, dx, gamma, sig2, a, b2, out):
    n = p.size
    out[:] = 0.0
    for i in range(n - 1):
        xf = 0.5 * (x[i] + x[i + 1])
        d1 = a - gamma * xf
        d2l = b2 + sig2 * x[i] * x[i]
        d2r = b2 + sig2 * x[i + 1] * x[i + 1]
        f = d1 * 0.5 * (p[i] + p[i + 1]) - 0.5 * (d2r * p[i + 1] - d2l * p[i]) / dx
        out[i] -= f
        out[i + 1] += f
    for i in range(n):
        out[i] *= inv_w[i]


@numba.njit(cache=True)
def _rk4_steps(p, x, w, dx, gamma, sig2, a_arr, b2_arr, h):
    """Advance ``p`` in place over ``len(a_arr) // 2`` steps.

    ``a_arr``/``b2_arr`` hold the coefficients at every half step.  Negative
    values are clipped after each step and the removed mass is restored by
    rescaling.  Returns ``(clipped_mass, most_negative_value, max_step_drift)``.
    """
    n = p.size
    inv_w = 1.0 / w
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    clipped = 0.0
    most_negative = 0.0
    max_drift = 0.0
    nsteps = (a_arr.size - 1) // 2
    for k in range(nsteps):
        m0 = 0.0
        for i in range(n):
            m0 += w[i] * p[i]
        _rhs(p, x, inv_w, dx, gamma, sig2, a_arr[2 * k], b2_arr[2 * k], k1)
        for i in range(n):
            tmp[i] = p[i] + 0.5 * h * k1[i]
        _rhs(tmp, x, inv_w, dx, gamma, sig2, a_arr[2 * k + 1], b2_arr[2 * k + 1], k2)
        for i in range(n):
            tmp[i] = p[i] + 0.5 * h * k2[i]
        _rhs(tmp, x, inv_w, dx, gamma, sig2, a_arr[2 * k + 1], b2_arr[2 * k + 1], k3)
        for i in range(n):
            tmp[i] = p[i] + h * k3[i]
        _rhs(tmp, x, inv_w, dx, gamma, sig2, a_arr[2 * k + 2], b2_arr[2 * k + 2], k4)
        m1 = 0.0
        neg = 0.0
        for i in range(n):
            p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            m1 += w[i] * p[i]
            if p[i] < most_negative:
                most_negative = p[i]
            if p[i] < 0.0:
                neg -= w[i] * p[i]
                p[i] = 0.0
        d = abs(m1 - m0)
        if d > max_drift:
            max_drift = d
        if neg > 0.0:
            clipped += neg
            scale = m1 / (m1 + neg)
            for i in range(n):
                p[i] *= scale
    return clipped, most_negative, max_drift


def _advance(pdf, coeffs, lam_end, nsteps):
    h = (lam_end - pdf.lam) / nsteps
    half = pdf.lam + 0.5 * h * np.arange(2 * nsteps + 1)
    a_arr = np.ascontiguousarray(np.broadcast_to(coeffs.a_A(half), half.shape), dtype=float)
    b2_arr = np.ascontiguousarray(np.broadcast_to(coeffs.b_A2(half), half.shape), dtype=float)
    p = pdf.density.astype(float, copy=True)
    clipped, neg, drift = _rk4_steps(p, pdf.x, pdf.weights, pdf.dx, float(coeffs.gamma_M),
                                     float(coeffs.sigma_M2), a_arr, b2_arr, float(h))
    meta = dict(pdf.meta, most_negative=min(neg, pdf.meta.get("most_negative", 0.0)),
                max_step_drift=max(drift, pdf.meta.get("max_step_drift", 0.0)),
                steps=pdf.meta.get("steps", 0) + nsteps)
    return replace(pdf, density=p, lam=float(lam_end), clipped_mass=pdf.clipped_mass + clipped,
                   meta=meta)


def step_rk4(pdf, coeffs, dlambda):
    """One explicit RK4 step of size ``dlambda``.

    Raises :class:`StabilityError` when ``dlambda`` exceeds
    ``0.4 dx^2 / max D2``.
    """
    bound = coeffs.stable_step(pdf.x, [pdf.lam, pdf.lam + 0.5 * dlambda, pdf.lam + dlambda])
    if dlambda > bound * (1 + 1e-12):
        raise StabilityError(f"dlambda={dlambda:.3g} exceeds the explicit stability bound "
                             f"0.4*dx^2/max(D2) = {bound:.3g}")
    return _advance(pdf, coeffs, pdf.lam + dlambda, 1)


def solve(pdf0, coeffs, lambda_schedule, max_step=MAX_STEP):
    """Evolve ``pdf0`` and return snapshots at every lambda of the schedule.

    The first element is ``pdf0`` itself.  Within each interval the step is the
    explicit bound ``0.4 dx^2 / max D2`` (capped at ``max_step``), shrunk so
    that the interval is covered by whole steps.
    """
    sched = np.asarray(lambda_schedule, dtype=float).ravel()
    if sched.size and (np.any(np.diff(sched) <= 0) or sched[0] <= pdf0.lam):
        raise ValueError("lambda schedule must be strictly increasing and beyond the start")
    out = [pdf0]
    cur = pdf0
    for lam_end in sched:
        span = lam_end - cur.lam
        probe = np.linspace(cur.lam, lam_end, 9)
        h = min(max_step, coeffs.stable_step(cur.x, probe))
        nsteps = max(1, int(np.ceil(span / h - 1e-9)))
        cur = _advance(cur, coeffs, lam_end, nsteps)
        out.append(cur)
    drift = abs(out[-1].mass - pdf0.mass)
    if drift > 1e-6:
        logger.warning("cumulative mass drift %.3g exceeds 1e-6", drift)
    return out


# --------------------------------------------------------------------------
# moments and tau


@dataclass(frozen=True)
class PdfTau:
    """Moment scaling of solved pdfs.

    ``tau`` follows the moment convention (``tau(0) = 0``); ``tau_wtmm`` is
    shifted by -1 to compare with partition-function exponents.
    """

    qs: np.ndarray
    tau: np.ndarray
    tau_se: np.ndarray
    scales: np.ndarray
    moments: np.ndarray
    convention: str = "moment"

    @property
    def tau_wtmm(self):
        return self.tau - 1.0

    def rows(self):
        for conv, t in (("moment", self.tau), ("wtmm", self.tau_wtmm)):
            for q, ti, se in zip(self.qs, t, self.tau_se):
                yield q, ti, se, conv


def pdf_moments_tau(pdfs, qs, L, tail_index=TAIL_INDEX):
    """``tau(q)`` from ``E[x^q] ~ s^tau`` over solved pdfs (``q >= 0``).

    Moments with ``q >= -tail_index - 1`` diverge for the power-law tail and are
    rejected.
    """
    qs = np.atleast_1d(np.asarray(qs, dtype=float))
    q_max = -tail_index - 1.0
    if np.any(qs < 0):
        raise ValueError("pdf_moments_tau requires q >= 0")
    if np.any(qs >= q_max - 1e-9):
        raise ValueError(f"moments diverge for q >= {q_max:g} with tail index {tail_index:g}; "
                         f"the largest admissible q is below {q_max:g}")
    if len(pdfs) < 4:
        raise ValueError(f"need at least 4 scales, got {len(pdfs)}")
    scales = np.array([p.scale(L) for p in pdfs])
    M = np.array([[p.moment(q) / p.mass for p in pdfs] for q in qs])
    tau, se = np.zeros(qs.size), np.zeros(qs.size)
    for i, q in enumerate(qs):
        if q != 0:
            tau[i], se[i], _, _ = loglog_fit(scales, M[i])
    return PdfTau(qs, tau, se, scales, M)


class FokkerPlanckSolver(BaseEstimator):
    """Estimator-style wrapper: ``fit`` builds the initial pdf, ``predict`` solves.

    ``predict(scales)`` returns snapshots at the requested scales (decreasing).
    """

    def __init__(self, gamma_M=0.51, sigma_M2=0.026, epsilon=0.16, L=131072.0, s0=128.0,
                 n_nodes=N_NODES, x_max_factor=XMAX_FACTOR, max_step=MAX_STEP):
        self.gamma_M = gamma_M
        self.sigma_M2 = sigma_M2
        self.epsilon = epsilon
        self.L = L
        self.s0 = s0
        self.n_nodes = n_nodes
        self.x_max_factor = x_max_factor
        self.max_step = max_step

    def _params(self):
        from .cascade import ModelParams

        return ModelParams(self.gamma_M, self.sigma_M2, self.epsilon, self.L)

    def fit(self, X, y=None):
        x = check_series(X, "samples")
        lam0 = float(np.log(self.L / self.s0))
        self.pdf0_ = build_initial_pdf(x, self.n_nodes, self.x_max_factor * x.mean(), lam0)
        self.coefficients_ = FPCoefficients.from_params(self._params())
        return self

    def predict(self, scales):
        lam = np.log(self.L / np.asarray(scales, dtype=float))
        self.snapshots_ = solve(self.pdf0_, self.coefficients_, lam, self.max_step)
        return self.snapshots_[1:]
