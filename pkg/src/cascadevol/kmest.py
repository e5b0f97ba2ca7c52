"""Kramers-Moyal estimation of the cascade coefficients.

For a pair of scales ``s1 < s2`` (``lambda1 > lambda2``) the increments
``x1 - x2`` of the volatility proxy are binned on ``x2``.  Their first and
second conditional moments, divided by ``dlambda = lambda1 - lambda2``, are
regressed on ``x`` and ``x**2``:

    M1 / dlambda = a_A - gamma_M x
    M2 / dlambda = b_A^2 + sigma_M2 x^2

Each coefficient is extrapolated to ``dlambda -> 0`` with a quadratic model of
its logarithm in ``h = ds/s``, then the additive amplitudes are fitted by
power laws in ``s`` and the multiplicative rates are pooled across scales.
"""

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .wavelet import ScaleGrid, WaveletField

logger = logging.getLogger(__name__)

DEFAULT_LADDER = (0.05, 0.1, 0.15, 0.2, 0.3, 0.4)
DEFAULT_BINS = 24
MIN_BIN_COUNT = 50
UPPER_QUANTILE = 0.99


class BinningError(ValueError):
    pass


# --------------------------------------------------------------------------
# weighted least squares


def _wls(X, y, se):
    """Weighted least squares with weights ``1/se**2``.

    The parameter covariance is inflated by the reduced chi-square when it
    exceeds one.  Returns ``(coef, cov)``.
    """
    X = np.asarray(X, dtype=float)
    w = 1.0 / np.asarray(se, dtype=float) ** 2
    XtW = X.T * w
    A = XtW @ X
    if np.linalg.matrix_rank(A) < X.shape[1]:
        raise np.linalg.LinAlgError("singular design matrix")
    A_inv = np.linalg.inv(A)
    coef = A_inv @ (XtW @ y)
    dof = y.size - X.shape[1]
    if dof > 0:
        chi2 = float(np.sum(w * (y - X @ coef) ** 2)) / dof
        A_inv = A_inv * max(1.0, chi2)
    return coef, A_inv


def _positive_se(se, values):
    se = np.asarray(se, dtype=float)
    floor = 1e-12 * max(1.0, float(np.max(np.abs(values)))) if values.size else 1e-12
    return np.where(se > floor, se, floor)


# --------------------------------------------------------------------------
# conditional moments


@dataclass(frozen=True)
class ConditionalMoment:
    """Binned ``E[(x1 - x2)^k | x2] / dlambda``.

    ``bins`` has columns ``(x_center, moment, se, count)``.
    """

    k: int
    s1: float
    s2: float
    dlambda: float
    bins: np.ndarray

    @property
    def x(self):
        return self.bins[:, 0]

    @property
    def value(self):
        return self.bins[:, 1]

    @property
    def se(self):
        return self.bins[:, 2]

    @property
    def count(self):
        return self.bins[:, 3].astype(int)


def _bin_edges(x2, n_bins, upper_quantile):
    hi = np.quantile(x2, upper_quantile) if upper_quantile < 1 else np.max(x2)
    keep = x2 <= hi
    edges = np.quantile(x2[keep], np.linspace(0.0, 1.0, n_bins + 1))
    return keep, edges


def conditional_moment(x1, x2, k, dlambda, bins=DEFAULT_BINS, min_count=MIN_BIN_COUNT,
                       upper_quantile=UPPER_QUANTILE, s1=np.nan, s2=np.nan):
    """Conditional ``k``-th moment of ``x1 - x2`` given ``x2``, per unit ``dlambda``.

    Parameters
    ----------
    x1, x2 : arrays
        Aligned samples at the finer (``x1``) and coarser (``x2``) scale.
    k : int
    dlambda : float
        ``lambda1 - lambda2 > 0``.
    bins : int or array
        Number of equal-occupancy bins, or explicit edges.
    min_count : int
        Bins with fewer samples are dropped.
    upper_quantile : float
        Samples with ``x2`` above this quantile are excluded.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x1.shape != x2.shape or x1.ndim != 1:
        raise ValueError("x1 and x2 must be aligned 1-D arrays")
    if not dlambda > 0:
        raise ValueError(f"dlambda must be positive, got {dlambda}")
    if np.isscalar(bins):
        keep, edges = _bin_edges(x2, int(bins), upper_quantile)
    else:
        edges = np.asarray(bins, dtype=float)
        keep = np.ones(x2.size, dtype=bool)
    edges = np.unique(edges)
    if edges.size < 2:
        raise BinningError("all samples share one x2 value; cannot bin")
    x1, x2 = x1[keep], x2[keep]
    idx = np.clip(np.searchsorted(edges, x2, side="right") - 1, 0, edges.size - 2)
    inside = (x2 >= edges[0]) & (x2 <= edges[-1])
    dx = (x1 - x2) ** k / dlambda
    rows = []
    dropped = 0
    for b in range(edges.size - 1):
        sel = inside & (idx == b)
        n = int(sel.sum())
        if n < min_count:
            dropped += n > 0
            continue
        vals = dx[sel]
        rows.append((x2[sel].mean(), vals.mean(), vals.std(ddof=1) / np.sqrt(n), n))
    if dropped:
        logger.info("dropped %d bins with fewer than %d samples", dropped, min_count)
    if not rows:
        raise BinningError(f"every bin has fewer than {min_count} samples")
    return ConditionalMoment(int(k), float(s1), float(s2), float(dlambda), np.array(rows))


# --------------------------------------------------------------------------
# drift and diffusion fits


@dataclass(frozen=True)
class CoefficientFit:
    intercept: float
    intercept_se: float
    slope: float
    slope_se: float


def _line_fit(x, moment, min_bins):
    if moment.bins.shape[0] < min_bins:
        raise ValueError(f"need at least {min_bins} populated bins, got {moment.bins.shape[0]}")
    if np.unique(x).size < 2:
        raise np.linalg.LinAlgError("regressor takes a single distinct value")
    X = np.column_stack([np.ones_like(x), x])
    coef, cov = _wls(X, moment.value, _positive_se(moment.se, moment.value))
    return coef, np.sqrt(np.diag(cov))


def fit_drift(moment, min_bins=5):
    """WLS fit ``M1/dlambda = a_A - gamma_M x``.

    Returns a :class:`CoefficientFit` with ``intercept = a_A`` and
    ``slope = gamma_M`` (the negated regression slope).
    """
    coef, se = _line_fit(moment.x, moment, min_bins)
    return CoefficientFit(float(coef[0]), float(se[0]), float(-coef[1]), float(se[1]))


def fit_diffusion(moment, min_bins=5):
    """WLS fit ``M2/dlambda = b_A^2 + sigma_M2 x^2``; ``intercept = b_A^2``, ``slope = sigma_M2``."""
    coef, se = _line_fit(moment.x ** 2, moment, min_bins)
    return CoefficientFit(float(coef[0]), float(se[0]), float(coef[1]), float(se[1]))


# --------------------------------------------------------------------------
# extrapolation, pooling, power laws


@dataclass(frozen=True)
class Extrapolation:
    value: float
    se: float
    coef: np.ndarray  # a, b, c of log(p) = a + b h + c h^2
    coef_se: np.ndarray


def extrapolate_dlambda(h, values, se=None):
    """Limit of a coefficient as ``h = ds/s -> 0``.

    Fits ``log(p) = a + b h + c h^2`` and returns ``exp(a)`` with a delta-method
    standard error.  ``se`` (of ``p``) sets the weights; uniform otherwise.
    """
    h = np.asarray(h, dtype=float)
    values = np.asarray(values, dtype=float)
    if np.unique(h).size < 4:
        raise ValueError("need at least 4 distinct ds/s values to extrapolate")
    if np.any(~(values > 0)):
        raise ValueError("extrapolation needs positive values (log undefined)")
    log_se = np.ones_like(values) if se is None else np.asarray(se, dtype=float) / values
    X = np.column_stack([np.ones_like(h), h, h * h])
    coef, cov = _wls(X, np.log(values), _positive_se(log_se, np.log(values)))
    coef_se = np.sqrt(np.diag(cov))
    limit = float(np.exp(coef[0]))
    return Extrapolation(limit, limit * float(coef_se[0]), coef, coef_se)


def pool_scalar(values, se):
    """Mean weighted by ``1/se``, with the propagated standard error."""
    values = np.asarray(values, dtype=float)
    se = np.asarray(se, dtype=float)
    if values.size < 2:
        raise ValueError("need at least two entries to pool")
    if np.any(~(se > 0)):
        raise ValueError("standard errors must be positive")
    w = 1.0 / se
    value = float(np.sum(w * values) / w.sum())
    return value, float(np.sqrt(np.sum((w * se) ** 2)) / w.sum())


@dataclass(frozen=True)
class PowerLawFit:
    """``log p = intercept + exponent * log s``."""

    intercept: float
    intercept_se: float
    exponent: float
    exponent_se: float

    def __call__(self, s):
        return np.exp(self.intercept) * np.asarray(s, dtype=float) ** self.exponent

    def to_dict(self):
        return {"intercept": self.intercept, "intercept_se": self.intercept_se,
                "exponent": self.exponent, "exponent_se": self.exponent_se}


def fit_power_law(s, values, se):
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise ValueError("need at least two scales for a power-law fit")
    X = np.column_stack([np.ones(values.size), np.log(s)])
    coef, cov = _wls(X, np.log(values), _positive_se(np.asarray(se) / values, values))
    err = np.sqrt(np.diag(cov))
    return PowerLawFit(float(coef[0]), float(err[0]), float(coef[1]), float(err[1]))


# --------------------------------------------------------------------------
# Pawula check


@dataclass(frozen=True)
class PawulaReport:
    dlambdas: np.ndarray
    d4: np.ndarray  # occupancy-weighted quartic fit of M4/dlambda per dlambda
    d4_se: np.ndarray
    limit: float
    limit_se: float
    slope: float
    n_se: float = 2.0

    @property
    def vanishes(self):
        return abs(self.limit) <= self.n_se * self.limit_se

    @property
    def verdict(self):
        return "vanishes" if self.vanishes else "does not vanish"

    def to_dict(self):
        return {"dlambda": self.dlambdas.tolist(), "d4": self.d4.tolist(),
                "d4_se": self.d4_se.tolist(), "limit": self.limit, "limit_se": self.limit_se,
                "slope": self.slope, "verdict": self.verdict}


def _quartic_level(moment):
    """Occupancy-weighted mean of a quartic WLS fit of a binned moment, with its se."""
    x = moment.x
    # rescale to [-1, 1] for conditioning; the fitted values do not depend on it
    mid, half = 0.5 * (x.max() + x.min()), 0.5 * np.ptp(x)
    X = np.vander((x - mid) / (half if half > 0 else 1.0), 5, increasing=True)
    coef, cov = _wls(X, moment.value, _positive_se(moment.se, moment.value))
    w = moment.count / moment.count.sum()
    g = w @ X
    return float(g @ coef), float(np.sqrt(g @ cov @ g))


def pawula_check(pairs, bins=DEFAULT_BINS, min_count=MIN_BIN_COUNT, n_se=2.0):
    """Fourth-order coefficient extrapolated to ``dlambda -> 0``.

    ``pairs`` is a sequence of ``(x1, x2, dlambda)``.  For each ``dlambda`` the
    binned ``M4/dlambda`` is fitted by a quartic in ``x``; its occupancy-weighted
    level is then extrapolated with a quadratic in ``dlambda``.  The verdict is
    "vanishes" when the limit lies within ``n_se`` standard errors of zero.
    """
    pairs = list(pairs)
    if len({round(p[2], 12) for p in pairs}) < 4:
        raise ValueError("need at least 4 distinct dlambda values")
    dl, lev, lev_se = [], [], []
    for x1, x2, d in pairs:
        m = conditional_moment(x1, x2, 4, d, bins, min_count)
        v, e = _quartic_level(m)
        dl.append(d)
        lev.append(v)
        lev_se.append(e)
    dl, lev, lev_se = map(np.asarray, (dl, lev, lev_se))
    X = np.column_stack([np.ones_like(dl), dl, dl * dl])
    coef, cov = _wls(X, lev, _positive_se(lev_se, lev))
    return PawulaReport(dl, lev, lev_se, float(coef[0]), float(np.sqrt(cov[0, 0])),
                        float(coef[1]), n_se)


# --------------------------------------------------------------------------
# pairing sources


def km_scales(s2_values, ladder=DEFAULT_LADDER):
    """All scales needed for the given coarse scales and ``ds/s`` ladder."""
    s2 = np.asarray(s2_values, dtype=float)
    h = np.asarray(ladder, dtype=float)
    return np.unique(np.concatenate([s2, (s2[:, None] * (1.0 - h[None, :])).ravel()]))


def km_lambda_grid(L, s2_values, ladder=DEFAULT_LADDER, s0=None):
    """Increasing lambda grid containing every pair needed by :func:`estimate_km`.

    ``s0`` (default the largest scale) prepends a starting scale for simulation.
    """
    scales = km_scales(s2_values, ladder)
    if s0 is not None:
        scales = np.unique(np.append(scales, float(s0)))
    return np.sort(np.log(L / scales))


def km_scale_grid(L, s2_values, ladder=DEFAULT_LADDER):
    return ScaleGrid(km_scales(s2_values, ladder), L)


class _EnsembleSource:
    def __init__(self, ensemble, L):
        self.ensemble = ensemble
        self.L = float(L)

    def pair(self, s2, h):
        lam2 = np.log(self.L / s2)
        dl = -np.log1p(-h)
        x2 = self.ensemble.at(lam2)
        x1 = self.ensemble.at(lam2 + dl)
        return x1, x2, s2 * (1.0 - h), dl


class _FieldSource:
    def __init__(self, field):
        self.field = field

    def pair(self, s2, h):
        grid = self.field.grid
        j2 = grid.index_of(s2)
        j1 = grid.index_of(s2 * (1.0 - h))
        if j1 == j2:
            raise ValueError(f"scale grid cannot resolve ds/s={h} at s={s2}")
        both = self.field.valid_mask[:, j1] & self.field.valid_mask[:, j2]
        x1 = np.abs(self.field.coeffs[both, j1])
        x2 = np.abs(self.field.coeffs[both, j2])
        s1, s2 = grid.scales[j1], grid.scales[j2]
        return x1, x2, float(s1), float(np.log(s2 / s1))


def _source(data, L):
    if isinstance(data, WaveletField):
        return _FieldSource(data), data.grid.L
    if L is None:
        raise ValueError("L is required to convert ensemble lambdas into scales")
    return _EnsembleSource(data, L), float(L)


# --------------------------------------------------------------------------
# full pipeline


@dataclass(frozen=True)
class KMEstimate:
    """Per-scale limits, power laws and pooled rates.

    ``a_A_by_scale`` and ``b_A2_by_scale`` have columns ``(s, value, se)``;
    ``gamma_M`` and ``sigma_M2`` are ``(value, se)`` pairs.
    """

    a_A_by_scale: np.ndarray
    b_A2_by_scale: np.ndarray
    gamma_by_scale: np.ndarray
    sigma2_by_scale: np.ndarray
    gamma_M: tuple
    sigma_M2: tuple
    a_A_fit: PowerLawFit
    b_A2_fit: PowerLawFit
    pawula: PawulaReport = None
    pair_table: np.ndarray = field(default=None, repr=False)

    PAIR_COLUMNS = ("s2", "ds_over_s", "s1", "dlambda", "a_A", "a_A_se", "gamma_M",
                    "gamma_M_se", "b_A2", "b_A2_se", "sigma_M2", "sigma_M2_se")

    def summary(self):
        return {
            "gamma_M": {"value": self.gamma_M[0], "se": self.gamma_M[1]},
            "sigma_M2": {"value": self.sigma_M2[0], "se": self.sigma_M2[1]},
            "a_A_fit": self.a_A_fit.to_dict(),
            "b_A2_fit": self.b_A2_fit.to_dict(),
            "pawula": None if self.pawula is None else self.pawula.to_dict(),
        }

    def write(self, csv_path, json_path):
        """Per-scale table as CSV and the summary as JSON."""
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("s,a_A,a_A_se,b_A2,b_A2_se,gamma_M,gamma_M_se,sigma_M2,sigma_M2_se\n")
            tables = (self.a_A_by_scale, self.b_A2_by_scale, self.gamma_by_scale,
                      self.sigma2_by_scale)
            # a scale skipped for one coefficient is written as nan for that one
            lookup = [{float(r[0]): r[1:] for r in t} for t in tables]
            for s in np.unique(np.concatenate([t[:, 0] for t in tables])):
                vals = [s]
                for d in lookup:
                    vals.extend(d.get(float(s), (np.nan, np.nan)))
                fh.write(",".join(f"{z:.10g}" for z in vals) + "\n")
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def estimate_km(data, s2_values, ladder=DEFAULT_LADDER, L=None, bins=DEFAULT_BINS,
                min_count=MIN_BIN_COUNT, pawula_scale=None):
    """Run the Kramers-Moyal pipeline on an Ensemble or a WaveletField.

    Parameters
    ----------
    data : Ensemble or WaveletField
        An ensemble must contain every lambda of :func:`km_lambda_grid`.
    s2_values : array
        Coarse scales at which coefficients are estimated.
    ladder : sequence
        ``ds/s`` values; ``s1 = s2 * (1 - ds/s)``.
    L : float
        Reference length, required for ensembles.
    pawula_scale : float, optional
        Coarse scale used for the fourth-order check; the median of
        ``s2_values`` by default.
    """
    src, L = _source(data, L)
    s2_values = np.sort(np.asarray(s2_values, dtype=float))
    ladder = np.asarray(ladder, dtype=float)
    rows, a_rows, b_rows, g_rows, v_rows = [], [], [], [], []
    for s2 in s2_values:
        per_h = []
        for h in ladder:
            x1, x2, s1, dl = src.pair(s2, h)
            drift = fit_drift(conditional_moment(x1, x2, 1, dl, bins, min_count, s1=s1, s2=s2))
            diff = fit_diffusion(conditional_moment(x1, x2, 2, dl, bins, min_count, s1=s1, s2=s2))
            per_h.append((s2, 1.0 - s1 / s2, s1, dl, drift.intercept, drift.intercept_se,
                          drift.slope, drift.slope_se, diff.intercept, diff.intercept_se,
                          diff.slope, diff.slope_se))
        per_h = np.array(per_h)
        rows.append(per_h)
        hs = per_h[:, 1]
        for col, out, name in ((4, a_rows, "a_A"), (8, b_rows, "b_A2"), (6, g_rows, "gamma_M"),
                               (10, v_rows, "sigma_M2")):
            try:
                ex = extrapolate_dlambda(hs, per_h[:, col], per_h[:, col + 1])
            except ValueError as exc:
                warnings.warn(f"skipping {name} at s={s2:g}: {exc}", RuntimeWarning, stacklevel=2)
                continue
            out.append((s2, ex.value, ex.se))
    a_rows, b_rows, g_rows, v_rows = (np.array(r).reshape(-1, 3)
                                      for r in (a_rows, b_rows, g_rows, v_rows))
    for name, r in (("a_A", a_rows), ("b_A2", b_rows), ("gamma_M", g_rows),
                    ("sigma_M2", v_rows)):
        if r.shape[0] < 2:
            raise ValueError(f"fewer than two scales produced a usable {name} limit")
    pscale = float(np.median(s2_values)) if pawula_scale is None else float(pawula_scale)
    pscale = s2_values[np.argmin(np.abs(np.log(s2_values / pscale)))]
    pairs = [(x1, x2, dl) for x1, x2, _, dl in (src.pair(pscale, h) for h in ladder)]
    pawula = pawula_check(pairs, bins, min_count)
    return KMEstimate(
        a_A_by_scale=a_rows, b_A2_by_scale=b_rows, gamma_by_scale=g_rows,
        sigma2_by_scale=v_rows,
        gamma_M=pool_scalar(g_rows[:, 1], g_rows[:, 2]),
        sigma_M2=pool_scalar(v_rows[:, 1], v_rows[:, 2]),
        a_A_fit=fit_power_law(a_rows[:, 0], a_rows[:, 1], a_rows[:, 2]),
        b_A2_fit=fit_power_law(b_rows[:, 0], b_rows[:, 1], b_rows[:, 2]),
        pawula=pawula, pair_table=np.vstack(rows))


class KramersMoyalEstimator(BaseEstimator):
    """Estimator wrapper around :func:`estimate_km`.

    ``fit(X)`` takes an Ensemble (with ``L`` set) or a WaveletField.
    """

    def __init__(self, s2_values=None, ladder=DEFAULT_LADDER, L=None, n_bins=DEFAULT_BINS,
                 min_count=MIN_BIN_COUNT):
        self.s2_values = s2_values
        self.ladder = ladder
        self.L = L
        self.n_bins = n_bins
        self.min_count = min_count

    def fit(self, X, y=None):
        s2 = self.s2_values
        if s2 is None:
            if not isinstance(X, WaveletField):
                raise ValueError("s2_values is required for ensembles")
            scales = X.grid.scales
            s2 = scales[scales >= scales[0] / (1.0 - max(self.ladder))]
        self.estimate_ = estimate_km(X, s2, self.ladder, self.L, self.n_bins, self.min_count)
        self.gamma_M_, self.gamma_M_se_ = self.estimate_.gamma_M
        self.sigma_M2_, self.sigma_M2_se_ = self.estimate_.sigma_M2
        return self

    def to_params(self, epsilon=None, L=None):
        """A ModelParams from the pooled rates; ``epsilon`` from the a_A prefactor by default."""
        from .cascade import ModelParams

        check_is_fitted(self, "estimate_")
        if epsilon is None:
            epsilon = float(np.exp(self.estimate_.a_A_fit.intercept))
        L = L if L is not None else (self.L if self.L is not None else 131072.0)
        return ModelParams(gamma_M=max(self.gamma_M_, 1e-6), sigma_M2=max(self.sigma_M2_, 0.0),
                           epsilon=epsilon, L=L)
