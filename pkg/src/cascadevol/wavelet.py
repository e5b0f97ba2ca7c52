"""Continuous wavelet transform of a cumulative log-price path.

The analyzing wavelet is the second derivative of a Gaussian,
``psi(t) = (t**2 - 1) * exp(-t**2 / 2)``, applied with the L1 normalisation

    W[u, s] = sum_t Z(t) * psi((t - u) / s) / s.

The ``delta_difference`` wavelet turns the same machinery into plain
increments, ``W[u, s] = Z(u + s) - Z(u)``.  The modulus ``|W|`` at fixed
position is the volatility proxy ``x`` used throughout the package.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import signal, stats
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_series

KINDS = ("mexican_hat", "delta_difference")
# above this scale (in samples) the convolution switches to FFT
FFT_THRESHOLD = 64


@dataclass(frozen=True)
class AnalyzingWavelet:
    kind: str = "mexican_hat"
    support_radius: float = 6.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown wavelet kind {self.kind!r}; expected one of {KINDS}")
        if self.support_radius <= 0:
            raise ValueError("support_radius must be positive")

    def __call__(self, t):
        if self.kind != "mexican_hat":
            raise TypeError("delta_difference has no pointwise values")
        t = np.asarray(t, dtype=float)
        return (t * t - 1.0) * np.exp(-0.5 * t * t)

    def mask_width(self, s):
        """Number of samples masked on each side of an edge at scale ``s``."""
        if self.kind == "delta_difference":
            return int(round(s))
        return int(np.ceil(self.support_radius * s))

    def kernel(self, s):
        """Sampled kernel ``psi(k/s)/s`` for ``|k| <= support_radius*s``.

        The truncated, sampled wavelet does not integrate to exactly zero, so a
        multiple of the Gaussian envelope is subtracted to restore a vanishing
        discrete mean.  Symmetry already makes the first moment vanish.
        """
        half = int(np.floor(self.support_radius * s))
        t = np.arange(-half, half + 1) / s
        psi = self(t)
        envelope = np.exp(-0.5 * t * t)
        psi = psi - envelope * (psi.sum() / envelope.sum())
        return psi / s

    def vanishing_moments(self, s):
        """Quadrature of ``psi`` and ``t*psi`` over the truncated support at scale ``s``."""
        k = self.kernel(s)
        half = (k.size - 1) // 2
        t = np.arange(-half, half + 1) / s
        return float(abs(k.sum())), float(abs((t * k).sum()))


@dataclass(frozen=True)
class ScaleGrid:
    """Increasing scales (in samples) together with ``lambda = log(L / s)``."""

    scales: np.ndarray
    L: int

    def __post_init__(self):
        scales = np.asarray(self.scales, dtype=float)
        if scales.ndim != 1 or scales.size == 0:
            raise ValueError("scales must be a non-empty 1-D array")
        if np.any(scales <= 0) or np.any(np.diff(scales) <= 0):
            raise ValueError("scales must be positive and strictly increasing")
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "L", int(self.L))

    @property
    def lambdas(self):
        return np.log(self.L / self.scales)

    def __len__(self):
        return self.scales.size

    @classmethod
    def geometric(cls, L, s_min=4.0, s_max=None, n=64, integer=False):
        """Geometric grid; ``s_max`` defaults to ``L / 32``."""
        if s_max is None:
            s_max = L / 32.0
        if not 0 < s_min < s_max:
            raise ValueError(f"need 0 < s_min < s_max, got {s_min}, {s_max}")
        scales = np.geomspace(s_min, s_max, int(n))
        if integer:
            scales = np.unique(np.round(scales))
        return cls(scales, L)

    @classmethod
    def parse(cls, spec, L, integer=False):
        """Build a grid from a ``"min:max:count"`` string."""
        try:
            lo, hi, n = spec.split(":")
            lo, hi, n = float(lo), float(hi), int(n)
        except ValueError as exc:
            raise ValueError(f"scale spec must look like min:max:count, got {spec!r}") from exc
        return cls.geometric(L, lo, hi, n, integer=integer)

    def index_of(self, s):
        """Index of the grid scale nearest to ``s`` in log distance."""
        return int(np.argmin(np.abs(np.log(self.scales) - np.log(s))))

    def to_dict(self):
        return {"L": self.L, "scales": self.scales.tolist()}


@dataclass(frozen=True)
class WaveletField:
    coeffs: np.ndarray  # (positions, scales); NaN outside valid_mask
    grid: ScaleGrid
    valid_mask: np.ndarray
    wavelet: AnalyzingWavelet = field(default_factory=AnalyzingWavelet)

    @property
    def modulus(self):
        return np.abs(self.coeffs)

    def column(self, j):
        """Valid positions and coefficients at scale index ``j``."""
        pos = np.flatnonzero(self.valid_mask[:, j])
        return pos, self.coeffs[pos, j]

    def valid_lengths(self):
        return self.valid_mask.sum(axis=0)

    def write(self, csv_path, json_path):
        """Export the valid coefficients as ``u,s,W`` rows plus a JSON grid descriptor."""
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("u,s,W\n")
            for j, s in enumerate(self.grid.scales):
                pos, w = self.column(j)
                for u, value in zip(pos, w):
                    fh.write(f"{u},{s:.17g},{value:.17g}\n")
        desc = dict(self.grid.to_dict(), wavelet=self.wavelet.kind,
                    support_radius=self.wavelet.support_radius)
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(desc, fh, indent=2, sort_keys=True)


def _path_values(path):
    values = getattr(path, "values", path)
    return check_series(values, "path", min_length=2)


def cwt(path, grid=None, wavelet=None):
    """Wavelet transform of ``path`` (a SeriesPath or 1-D array) on ``grid``.

    Coefficients whose support reaches past either end of the path, or
    straddles a session break, are masked invalid and stored as NaN.
    """
    wavelet = wavelet or AnalyzingWavelet()
    Z = _path_values(path)
    L = Z.size
    breaks = np.asarray(getattr(path, "session_breaks", ()), dtype=int)
    if grid is None:
        grid = ScaleGrid.geometric(L)
    if grid.L != L:
        raise ValueError(f"scale grid built for L={grid.L} but path has {L} samples")
    if grid.scales[-1] > L / 8:
        raise ValueError(f"max scale {grid.scales[-1]:g} exceeds the L/8 = {L / 8:g} limit")
    if L < 2 * wavelet.mask_width(grid.scales[0]):
        raise ValueError(f"path of {L} samples is shorter than twice the wavelet support "
                         f"at the smallest scale {grid.scales[0]:g}")

    n = len(grid)
    coeffs = np.full((L, n), np.nan)
    valid = np.zeros((L, n), dtype=bool)
    for j, s in enumerate(grid.scales):
        if wavelet.kind == "delta_difference":
            step = int(round(s))
            if step != s:
                raise ValueError("delta_difference needs integer scales (use integer=True)")
            coeffs[: L - step, j] = Z[step:] - Z[:-step]
            valid[: L - step, j] = True
            for b in breaks:
                valid[max(0, b - step): b, j] = False
        else:
            k = wavelet.kernel(s)
            half = (k.size - 1) // 2
            if k.size > L:
                continue  # support wider than the path: nothing valid at this scale
            method = "direct" if s <= FFT_THRESHOLD else "fft"
            # symmetric kernel: convolution equals correlation
            coeffs[half: L - half, j] = signal.convolve(Z, k, mode="valid", method=method)
            width = wavelet.mask_width(s)
            valid[width: L - width, j] = True
            for b in breaks:
                valid[max(0, b - width): b + width, j] = False
    coeffs[~valid] = np.nan
    return WaveletField(coeffs, grid, valid, wavelet)


@dataclass(frozen=True)
class VolatilitySeries:
    values: np.ndarray
    positions: np.ndarray
    scale: float

    @property
    def empty(self):
        return self.values.size == 0


def volatility_series(field, scale_index):
    """Volatility proxy ``x(u) = |W[u, s]|`` over the valid positions of one scale."""
    if not 0 <= scale_index < len(field.grid):
        raise IndexError(f"scale index {scale_index} outside grid of {len(field.grid)} scales")
    pos, w = field.column(scale_index)
    return VolatilitySeries(np.abs(w), pos, float(field.grid.scales[scale_index]))


@dataclass(frozen=True)
class MomentScaling:
    qs: np.ndarray
    exponents: np.ndarray
    stderr: np.ndarray
    intercepts: np.ndarray
    scales: np.ndarray
    moments: np.ndarray  # (len(qs), len(scales))


def scale_moments(field, qs):
    """``E|W|^q`` at every grid scale, shape ``(len(qs), n_scales)``."""
    qs = np.atleast_1d(np.asarray(qs, dtype=float))
    out = np.empty((qs.size, len(field.grid)))
    for j in range(len(field.grid)):
        x = volatility_series(field, j).values
        if x.size == 0:
            out[:, j] = np.nan
            continue
        for i, q in enumerate(qs):
            out[i, j] = np.mean(x ** q)
    return out


def loglog_fit(scales, values):
    """OLS slope and intercept of ``log(values)`` against ``log(scales)`` with standard errors."""
    res = stats.linregress(np.log(scales), np.log(values))
    return res.slope, res.stderr, res.intercept, res.intercept_stderr


def moment_scaling(field, qs, fit_range=None):
    """Scaling exponent of ``E|W|^q`` in ``s`` for each ``q >= 0``.

    ``fit_range`` is an ``(s_min, s_max)`` pair in samples; all scales by default.
    """
    qs = np.atleast_1d(np.asarray(qs, dtype=float))
    if np.any(qs < 0):
        raise ValueError("moment_scaling requires q >= 0")
    scales = field.grid.scales
    sel = np.ones(scales.size, dtype=bool)
    if fit_range is not None:
        sel = (scales >= fit_range[0]) & (scales <= fit_range[1])
    if sel.sum() < 4:
        raise ValueError(f"need at least 4 scales in the fit range, got {sel.sum()}")
    moments = scale_moments(field, qs)
    exps, ses, icps = (np.zeros(qs.size) for _ in range(3))
    for i, q in enumerate(qs):
        if q == 0:
            continue
        m = moments[i, sel]
        if np.any(~(m > 0)):
            raise ValueError(f"non-positive moment for q={q:g}; field is degenerate")
        exps[i], ses[i], icps[i], _ = loglog_fit(scales[sel], m)
    return MomentScaling(qs, exps, ses, icps, scales, moments)


class CWTTransformer(TransformerMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`cwt`.

    ``fit`` fixes the scale grid from the path length; ``transform`` returns the
    coefficient matrix ``(positions, scales)`` with NaN at masked entries and
    keeps the full :class:`WaveletField` on ``field_``.
    """

    def __init__(self, n_scales=64, s_min=4.0, s_max=None, kind="mexican_hat",
                 support_radius=6.0):
        self.n_scales = n_scales
        self.s_min = s_min
        self.s_max = s_max
        self.kind = kind
        self.support_radius = support_radius

    def fit(self, X, y=None):
        Z = _path_values(X)
        self.n_samples_ = Z.size
        self.grid_ = ScaleGrid.geometric(Z.size, self.s_min, self.s_max, self.n_scales,
                                         integer=self.kind == "delta_difference")
        self.wavelet_ = AnalyzingWavelet(self.kind, self.support_radius)
        return self

    def transform(self, X):
        check_is_fitted(self, "grid_")
        self.field_ = cwt(X, self.grid_, self.wavelet_)
        return self.field_.coeffs
