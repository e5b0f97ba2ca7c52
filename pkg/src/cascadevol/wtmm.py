"""Wavelet transform modulus maxima (WTMM) multifractal analysis.

Local maxima of ``|W|`` in position are chained across scales into maxima
lines.  For every scale ``s`` the partition function sums, over the lines that
reach ``s`` from the finest scale, the supremum of ``|W|`` along the line below
``s`` raised to the power ``q``.  Its log-log slope gives ``tau(q)`` and a
Legendre transform gives the singularity spectrum ``D(alpha)``.
"""

import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import signal
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_paths
from .wavelet import AnalyzingWavelet, ScaleGrid, cwt, loglog_fit

logger = logging.getLogger(__name__)

DEFAULT_FIT_RANGE = (2.0 ** -10, 2.0 ** -5)
MIN_SUP = 1e-12


def default_qs():
    return np.round(np.arange(-20.0, 20.0 + 1e-9, 0.5), 10)


@dataclass(frozen=True)
class Maxima:
    positions: np.ndarray
    moduli: np.ndarray


def _segments(mask):
    """``(start, stop)`` pairs of the True runs in a boolean vector."""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return edges.reshape(-1, 2)


def find_maxima(field):
    """Per-scale local maxima of ``|W|`` over the valid positions.

    Maxima must be strictly larger than both neighbours; a flat top reports its
    middle sample.  Endpoints of a valid segment are never maxima.
    """
    out = []
    for j in range(len(field.grid)):
        mod = np.abs(field.coeffs[:, j])
        pos = []
        for start, stop in _segments(field.valid_mask[:, j]):
            peaks, _ = signal.find_peaks(mod[start:stop])
            pos.append(peaks + start)
        pos = np.concatenate(pos) if pos else np.empty(0, dtype=int)
        pos = pos[mod[pos] > 0]
        out.append(Maxima(pos.astype(int), mod[pos]))
    return out


@dataclass(frozen=True)
class MaximaLineSet:
    """Maxima chained across scales.

    For scale index ``j``: ``positions[j]``, ``moduli[j]``, ``line_ids[j]`` and
    ``sups[j]`` (running supremum of ``|W|`` along the line up to ``j``).  A line
    is rooted when it starts at the finest scale; rooted lines with a positive
    supremum are the admissible ones.
    """

    scales: np.ndarray
    positions: tuple
    moduli: tuple
    line_ids: tuple
    sups: tuple
    rooted: np.ndarray
    coverage: np.ndarray  # valid fraction of positions per scale
    min_sup: float = MIN_SUP

    @property
    def s0(self):
        return float(self.scales[-1])

    def admissible(self, j):
        return self.rooted[self.line_ids[j]] & (self.sups[j] >= self.min_sup)

    def counts(self):
        return np.array([int(self.admissible(j).sum()) for j in range(self.scales.size)])

    @property
    def lines(self):
        """Rooted lines as ``(n_points, 3)`` arrays of ``(u, s, |W|)``, ordered by scale."""
        pts = {}
        for j, s in enumerate(self.scales):
            for lid, u, m in zip(self.line_ids[j], self.positions[j], self.moduli[j]):
                if self.rooted[lid]:
                    pts.setdefault(int(lid), []).append((u, s, m))
        return [np.array(v, dtype=float) for _, v in sorted(pts.items())]


def chain_maxima(maxima, grid, window=1.0, min_sup=MIN_SUP, coverage=None):
    """Link maxima across neighbouring scales into lines.

    Each maximum at scale index ``j`` links to the nearest maximum at ``j - 1``
    within ``window * s_j`` samples (ties go to the larger modulus).  When
    several maxima claim the same parent, the nearest wins (then the larger
    modulus) and the others start new, non-rooted lines.
    """
    if len(maxima) < 2:
        raise ValueError("need at least two scales to chain maxima")
    if len(maxima) != len(grid):
        raise ValueError("maxima and grid disagree on the number of scales")
    n0 = maxima[0].positions.size
    ids = [np.arange(n0)]
    sups = [maxima[0].moduli.copy()]
    rooted = [np.ones(n0, dtype=bool)]
    next_id = n0
    for j in range(1, len(maxima)):
        prev, cur = maxima[j - 1], maxima[j]
        n = cur.positions.size
        new_ids = np.full(n, -1)
        new_sup = cur.moduli.copy()
        if n and prev.positions.size:
            pp = prev.positions
            right = np.clip(np.searchsorted(pp, cur.positions), 0, pp.size - 1)
            left = np.clip(right - 1, 0, pp.size - 1)
            dl = np.abs(cur.positions - pp[left])
            dr = np.abs(cur.positions - pp[right])
            take_right = (dr < dl) | ((dr == dl) & (prev.moduli[right] > prev.moduli[left]))
            parent = np.where(take_right, right, left)
            dist = np.where(take_right, dr, dl)
            ok = dist <= window * grid.scales[j]
            cand = np.flatnonzero(ok)
            # resolve several children per parent: nearest first, then larger modulus
            order = np.lexsort((-cur.moduli[cand], dist[cand], parent[cand]))
            cand = cand[order]
            first = np.ones(cand.size, dtype=bool)
            first[1:] = parent[cand][1:] != parent[cand][:-1]
            win = cand[first]
            new_ids[win] = ids[j - 1][parent[win]]
            new_sup[win] = np.maximum(sups[j - 1][parent[win]], cur.moduli[win])
        fresh = new_ids < 0
        new_ids[fresh] = np.arange(next_id, next_id + fresh.sum())
        next_id += int(fresh.sum())
        rooted.append(np.zeros(int(fresh.sum()), dtype=bool))
        ids.append(new_ids)
        sups.append(new_sup)
    if coverage is None:
        coverage = np.ones(len(grid))
    return MaximaLineSet(grid.scales.copy(), tuple(m.positions for m in maxima),
                         tuple(m.moduli for m in maxima), tuple(ids), tuple(sups),
                         np.concatenate(rooted), np.asarray(coverage, dtype=float), min_sup)


@dataclass(frozen=True)
class PartitionFunction:
    qs: np.ndarray
    scales: np.ndarray
    Z: np.ndarray  # (n_q, n_scales)
    counts: np.ndarray
    coverage: np.ndarray  # valid positions per scale over total positions

    def __add__(self, other):
        """Pool two realizations analysed on the same grid."""
        if not (np.array_equal(self.qs, other.qs) and np.allclose(self.scales, other.scales)):
            raise ValueError("partition functions are on different q or scale grids")
        return PartitionFunction(self.qs, self.scales, self.Z + other.Z,
                                 self.counts + other.counts, self.coverage + other.coverage)


def partition_function(lines, qs):
    """``Z(q, s) = sum over admissible lines at s of sup|W|**q``."""
    qs = np.atleast_1d(np.asarray(qs, dtype=float))
    Z = np.empty((qs.size, lines.scales.size))
    counts = lines.counts()
    for j, s in enumerate(lines.scales):
        if counts[j] == 0:
            raise ValueError(f"no admissible maxima lines at scale s={s:g}")
        sup = lines.sups[j][lines.admissible(j)]
        with np.errstate(over="raise"):
            Z[:, j] = np.sum(sup[None, :] ** qs[:, None], axis=1)
    return PartitionFunction(qs, lines.scales.copy(), Z, counts, lines.coverage.copy())


@dataclass(frozen=True)
class ScalingResult:
    qs: np.ndarray
    tau: np.ndarray
    tau_se: np.ndarray
    intercept: np.ndarray
    fit_range: tuple  # in samples
    alpha: np.ndarray = None
    D: np.ndarray = None

    def quadratic_fit(self, q_min=-5.0, q_max=5.0):
        """Least-squares ``tau(q) ~ c0 + c1 q + c2 q^2`` over a q window.

        Returns ``(coefficients, standard_errors)`` ordered ``c0, c1, c2``.
        """
        sel = (self.qs >= q_min) & (self.qs <= q_max)
        coef, cov = np.polyfit(self.qs[sel], self.tau[sel], 2, cov="unscaled",
                               w=1.0 / np.maximum(self.tau_se[sel], 1e-12))
        return coef[::-1], np.sqrt(np.diag(cov))[::-1]

    def peak(self):
        """``(alpha, D)`` at the maximum of the spectrum."""
        if self.D is None:
            raise ValueError("spectrum not computed; call legendre_spectrum first")
        i = int(np.argmax(self.D))
        return float(self.alpha[i]), float(self.D[i])


def scaling_exponents(pf, fit_range=DEFAULT_FIT_RANGE, L=None, correct_coverage=True):
    """``tau(q)`` as the log-log slope of ``Z(q, s)`` over ``fit_range``.

    ``fit_range`` is given as fractions ``s/L`` when ``L`` is supplied,
    otherwise directly in samples.  With ``correct_coverage`` the partition
    function is divided by the valid fraction of positions at each scale, which
    removes the bias from masking the path ends.
    """
    lo, hi = fit_range
    if L is not None:
        lo, hi = lo * L, hi * L
    eps = 1e-9 * hi
    sel = (pf.scales >= lo - eps) & (pf.scales <= hi + eps)
    if sel.sum() < 4:
        raise ValueError(f"need at least 4 scales in the fit range, got {sel.sum()}")
    Zs = pf.Z[:, sel]
    if np.any(~(Zs > 0)):
        raise ValueError("partition function has non-positive entries in the fit range")
    if correct_coverage:
        Zs = Zs / pf.coverage[sel]
    scales = pf.scales[sel]
    tau, se, icp = (np.empty(pf.qs.size) for _ in range(3))
    for i in range(pf.qs.size):
        tau[i], se[i], icp[i], _ = loglog_fit(scales, Zs[i])
    return ScalingResult(pf.qs.copy(), tau, se, icp, (float(scales[0]), float(scales[-1])))


def legendre_spectrum(result, slack=0.02):
    """Discrete Legendre transform ``D(alpha) = min_q (q alpha - tau(q))``.

    ``alpha`` runs over the finite-difference slopes of ``tau``.
    """
    qs, tau = result.qs, result.tau
    if qs.size < 3:
        raise ValueError("need at least three q values")
    second = np.diff(tau, 2)
    if np.any(second > slack):
        warnings.warn(f"tau(q) is not concave (max second difference {second.max():.3g})",
                      RuntimeWarning, stacklevel=2)
    alpha = np.gradient(tau, qs)
    D = np.min(qs[None, :] * alpha[:, None] - tau[None, :], axis=1)
    return replace(result, alpha=alpha, D=D)


def analyze(path, grid=None, qs=None, fit_range=DEFAULT_FIT_RANGE, window=1.0, wavelet=None):
    """Partition function of one path (array or SeriesPath)."""
    field = cwt(path, grid, wavelet)
    cov = field.valid_lengths() / field.coeffs.shape[0]
    lines = chain_maxima(find_maxima(field), field.grid, window, coverage=cov)
    return partition_function(lines, default_qs() if qs is None else qs)


class WTMMEstimator(BaseEstimator):
    """Multifractal spectrum of one or several paths.

    ``fit`` accepts a 1-D path or a ``(n_paths, L)`` stack; partition functions
    of the realizations are summed before fitting.
    """

    def __init__(self, n_scales=64, s_min=4.0, s_max_frac=1 / 32, fit_range=DEFAULT_FIT_RANGE,
                 qs=None, window=1.0, support_radius=6.0):
        self.n_scales = n_scales
        self.s_min = s_min
        self.s_max_frac = s_max_frac
        self.fit_range = fit_range
        self.qs = qs
        self.window = window
        self.support_radius = support_radius

    def fit(self, X, y=None):
        breaks = getattr(X, "session_breaks", ())
        paths = check_paths(getattr(X, "values", X))
        L = paths.shape[1]
        grid = ScaleGrid.geometric(L, self.s_min, self.s_max_frac * L, self.n_scales)
        wav = AnalyzingWavelet("mexican_hat", self.support_radius)
        qs = default_qs() if self.qs is None else np.asarray(self.qs, dtype=float)
        pf = None
        for row in paths:
            target = row
            if breaks:
                from .ingest import SeriesPath

                target = SeriesPath(row, 1.0, breaks)
            part = analyze(target, grid, qs, self.fit_range, self.window, wav)
            pf = part if pf is None else pf + part
        self.partition_ = pf
        self.grid_ = grid
        self.result_ = legendre_spectrum(scaling_exponents(pf, self.fit_range, L=L))
        self.tau_ = self.result_.tau
        self.tau_se_ = self.result_.tau_se
        self.alpha_ = self.result_.alpha
        self.D_ = self.result_.D
        return self

    def quadratic_fit(self, q_min=-5.0, q_max=5.0):
        check_is_fitted(self, "result_")
        return self.result_.quadratic_fit(q_min, q_max)
