"""Continuous random cascade of volatility across scales.

The volatility proxy ``x`` evolves in ``lambda = log(L / s)`` (growing as the
scale ``s`` shrinks) according to

    dx = x * (-gamma_M dlambda + sigma_M dB_M) + a_A dlambda + b_A dB_A

with independent Brownian drivers.  The additive amplitudes follow the
power laws ``a_A(s) = epsilon * s**0.5`` and ``b_A(s)**2 = 2.27 * epsilon * s``.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from . import rng as _rng
from ._validation import check_increasing

logger = logging.getLogger(__name__)

# E|W(s)| ~ 2.27 s^0.5 for the mexican-hat transform of the reference data
EW_PREFACTOR = 2.27
EW_EXPONENT = 0.5
MAX_STEP = 0.05
MODES = ("signed", "reflected")


@dataclass(frozen=True)
class ModelParams:
    gamma_M: float = 0.51
    sigma_M2: float = 0.026
    epsilon: float = 0.16
    L: float = 131072.0
    ew_prefactor: float = EW_PREFACTOR

    def __post_init__(self):
        if not self.gamma_M > 0:
            raise ValueError(f"gamma_M must be > 0, got {self.gamma_M}")
        if not self.sigma_M2 >= 0:
            raise ValueError(f"sigma_M2 must be >= 0, got {self.sigma_M2}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.L > 0:
            raise ValueError(f"L must be > 0, got {self.L}")

    @property
    def sigma_M(self):
        return float(np.sqrt(self.sigma_M2))

    @property
    def mu(self):
        """Log-drift of the multiplicative part, ``-(gamma_M + sigma_M2/2)``."""
        return -(self.gamma_M + 0.5 * self.sigma_M2)

    def scale(self, lam):
        return self.L * np.exp(-np.asarray(lam, dtype=float))

    def lam(self, s):
        return np.log(self.L / np.asarray(s, dtype=float))

    def a_A(self, s):
        return self.epsilon * np.asarray(s, dtype=float) ** 0.5

    def b_A2(self, s):
        return self.ew_prefactor * self.epsilon * np.asarray(s, dtype=float)

    def expected_modulus(self, s):
        """Reference mean of ``|W|`` at scale ``s``."""
        return self.ew_prefactor * np.asarray(s, dtype=float) ** EW_EXPONENT

    def tau_basic(self, q):
        """WTMM exponent of the purely multiplicative model."""
        q = np.asarray(q, dtype=float)
        return -1.0 - self.mu * q - 0.5 * self.sigma_M2 * q * q

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in ("gamma_M", "sigma_M2", "epsilon", "L", "ew_prefactor") if k in d}
        return cls(**{k: float(v) for k, v in known.items()})


def analytic_moment(params, q, s, s0=None):
    """``E[x(s)^q] / E[x(s0)^q]`` for the purely multiplicative model.

    With ``s0`` defaulting to ``L`` this is ``(s/L)**(-mu*q - sigma_M2*q**2/2)``.
    """
    if params.epsilon != 0:
        raise ValueError("analytic_moment has a closed form only for epsilon = 0")
    q = np.asarray(q, dtype=float)
    ref = params.L if s0 is None else s0
    ratio = np.asarray(s, dtype=float) / ref
    return ratio ** (-params.mu * q - 0.5 * params.sigma_M2 * q * q)


# --------------------------------------------------------------------------
# initial laws


def lognormal_sampler(mean, sd=None):
    """Sampler for a log-normal law with the given mean and standard deviation (default sd = mean)."""
    sd = mean if sd is None else sd
    s2 = np.log1p((sd / mean) ** 2)
    m = np.log(mean) - 0.5 * s2

    def sample(gen, n):
        return np.exp(gen.normal(m, np.sqrt(s2), n))

    return sample


def normal_sampler(sd, mean=0.0):
    def sample(gen, n):
        return gen.normal(mean, sd, n)

    return sample


def constant_sampler(value):
    def sample(gen, n):
        return np.full(n, float(value))

    return sample


def default_x0_sampler(params, s0):
    """Log-normal initial law with ``E = sd = 2.27 * s0**0.5``."""
    return lognormal_sampler(float(params.expected_modulus(s0)))


# --------------------------------------------------------------------------
# simulation


@dataclass(frozen=True)
class Ensemble:
    x_paths: np.ndarray  # (n_paths, n_lambda)
    lambda_grid: np.ndarray
    seed: int
    mode: str = "signed"
    scheme: str = "euler"

    @property
    def n_paths(self):
        return self.x_paths.shape[0]

    def index_of(self, lam, atol=1e-9):
        idx = np.flatnonzero(np.isclose(self.lambda_grid, lam, rtol=0, atol=atol))
        if idx.size == 0:
            raise KeyError(f"lambda={lam:g} is not on the ensemble grid")
        return int(idx[0])

    def at(self, lam):
        return self.x_paths[:, self.index_of(lam)]

    def write(self, csv_path):
        """Export as ``path_id,lambda,x`` rows."""
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("path_id,lambda,x\n")
            for i, row in enumerate(self.x_paths):
                for lam, x in zip(self.lambda_grid, row):
                    fh.write(f"{i},{lam:.17g},{x:.17g}\n")


def _substeps(grid, dlambda):
    gaps = np.diff(grid)
    counts = np.maximum(1, np.ceil(gaps / dlambda - 1e-12)).astype(int)
    return counts, gaps / counts


def _run_block(params, x0, grid, counts, steps, gen, mode, scheme):
    n = x0.size
    out = np.empty((n, grid.size))
    x = x0.astype(float, copy=True)
    out[:, 0] = x
    sig = params.sigma_M
    lam = grid[0]
    for i, (m, h) in enumerate(zip(counts, steps)):
        sqh = np.sqrt(h)
        for _ in range(m):
            s = params.L * np.exp(-lam)
            a = params.a_A(s)
            b = np.sqrt(params.b_A2(s))
            dB = gen.standard_normal((2, n))
            if scheme == "euler":
                x = x + x * (-params.gamma_M * h + sig * sqh * dB[0]) + a * h + b * sqh * dB[1]
            else:
                w = np.exp(params.mu * h + sig * sqh * dB[0])
                x = w * (x + a * h + b * sqh * dB[1])
            if mode == "reflected":
                np.abs(x, out=x)
            lam = lam + h
        lam = grid[i + 1]
        out[:, i + 1] = x
    return out


def _simulate(params, x0_sampler, lambda_grid, n_paths, seed, dlambda, mode, scheme,
              block_size, n_jobs):
    grid = check_increasing(lambda_grid, "lambda_grid")
    if dlambda > MAX_STEP:
        raise ValueError(f"step dlambda={dlambda:g} exceeds the stability bound {MAX_STEP}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if x0_sampler is None:
        x0_sampler = default_x0_sampler(params, params.scale(grid[0]))
    elif np.isscalar(x0_sampler):
        x0_sampler = constant_sampler(x0_sampler)
    counts, steps = _substeps(grid, dlambda)
    out = np.empty((int(n_paths), grid.size))

    def work(block):
        index, start, stop = block
        gen = _rng.block_rng(seed, index)
        x0 = np.asarray(x0_sampler(gen, stop - start), dtype=float)
        out[start:stop] = _run_block(params, x0, grid, counts, steps, gen, mode, scheme)

    jobs = list(_rng.blocks(int(n_paths), block_size))
    if n_jobs == 1:
        for job in jobs:
            work(job)
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            list(pool.map(work, jobs))
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("simulation produced non-finite values")
    return Ensemble(out, grid, int(seed), mode, scheme)


def simulate_sde(params, x0_sampler, lambda_grid, n_paths, seed, dlambda=0.01,
                 mode="signed", block_size=_rng.DEFAULT_BLOCK, n_jobs=1):
    """Euler-Maruyama ensemble of the cascade SDE, recorded on ``lambda_grid``.

    Parameters
    ----------
    params : ModelParams
    x0_sampler : callable ``(generator, n) -> array``, a constant, or None
        Law of ``x`` at ``lambda_grid[0]``.  None uses a log-normal with
        ``E = sd = 2.27 * s0**0.5``.
    lambda_grid : increasing array
        Output grid; intervals are split into sub-steps no longer than ``dlambda``.
    n_paths, seed : int
    dlambda : float
        Largest integration step, at most 0.05.
    mode : {"signed", "reflected"}
        ``reflected`` maps ``x -> |x|`` after every step.
    """
    return _simulate(params, x0_sampler, lambda_grid, n_paths, seed, dlambda, mode,
                     "euler", block_size, n_jobs)


def simulate_discrete_cascade(params, x0_sampler, lambda_grid, n_paths, seed, dlambda=0.01,
                              mode="signed", block_size=_rng.DEFAULT_BLOCK, n_jobs=1):
    """Discrete cascade ``x' = W_M * (x + a_A h + b_A dB_A)`` with log-normal ``W_M``."""
    return _simulate(params, x0_sampler, lambda_grid, n_paths, seed, dlambda, mode,
                     "discrete", block_size, n_jobs)


def closed_form_path(params, x0, lambdas, dB_M, dB_A):
    """Variation-of-constants solution for piecewise-constant ``a_A``, ``b_A``.

    ``dB_M`` and ``dB_A`` are the Brownian increments over ``diff(lambdas)``;
    ``a_A`` and ``b_A`` are frozen at the left end of each interval.  Returns
    ``x`` at every entry of ``lambdas``.
    """
    lambdas = np.asarray(lambdas, dtype=float)
    h = np.diff(lambdas)
    sig = params.sigma_M
    logw = np.concatenate([[0.0], np.cumsum(params.mu * h + sig * np.asarray(dB_M))])
    w = np.exp(logw)
    s = params.scale(lambdas[:-1])
    a = params.a_A(s)
    b = np.sqrt(params.b_A2(s))
    # left-point quadrature of the integrals of a/w and b/w dB_A
    integral = np.concatenate([[0.0], np.cumsum(a * h / w[:-1] + b * np.asarray(dB_A) / w[:-1])])
    return w * (integral + x0)


# --------------------------------------------------------------------------
# multipliers


@dataclass(frozen=True)
class MultiplierSample:
    W1: np.ndarray  # x(lambda2) / x(lambda1)
    W2: np.ndarray  # x(lambda3) / x(lambda2)
    lambdas: tuple


@dataclass(frozen=True)
class MultiplierStats:
    cauchy_loc: float
    cauchy_scale: float
    ks_distance: float
    kendall_tau: float
    kendall_pvalue: float
    n: int
    sample: MultiplierSample


def multiplier_sample(ensemble, scale_triple, drop_quantile=0.01):
    """Adjacent multipliers on three grid scales, filtering small denominators."""
    lam1, lam2, lam3 = scale_triple
    if not lam1 < lam2 < lam3:
        raise ValueError("need lambda1 < lambda2 < lambda3")
    x1, x2, x3 = (ensemble.at(lam) for lam in (lam1, lam2, lam3))
    keep = (np.abs(x1) > np.quantile(np.abs(x1), drop_quantile)) & \
           (np.abs(x2) > np.quantile(np.abs(x2), drop_quantile))
    return MultiplierSample(x2[keep] / x1[keep], x3[keep] / x2[keep], (lam1, lam2, lam3))


def multiplier_stats(ensemble, scale_triple, drop_quantile=0.01, min_count=1000):
    """Cauchy fit of ``W(lambda2, lambda1)`` and Kendall's tau of adjacent multipliers.

    The Cauchy location is the median and the scale half the interquartile
    range, both insensitive to the divergent moments of the law.
    """
    sample = multiplier_sample(ensemble, scale_triple, drop_quantile)
    n = sample.W1.size
    if n < min_count:
        raise ValueError(f"only {n} valid multipliers after filtering; need {min_count}")
    q1, med, q3 = np.quantile(sample.W1, [0.25, 0.5, 0.75])
    scale = 0.5 * (q3 - q1)
    ks = stats.kstest(sample.W1, stats.cauchy(loc=med, scale=scale).cdf).statistic
    tau, p = stats.kendalltau(sample.W1, sample.W2)
    return MultiplierStats(float(med), float(scale), float(ks), float(tau), float(p), n, sample)


# --------------------------------------------------------------------------
# constraints


@dataclass(frozen=True)
class ConstraintReport:
    scales: np.ndarray
    eq15_residual: np.ndarray  # a_A * E|W| - b_A^2 at each scale
    unit_scale_residual: float  # a_A(1) E|W(1)| - b_A^2(1)
    a_ratio: np.ndarray  # a_A / E|W|
    b_ratio: np.ndarray  # b_A / E|W|
    threshold: float
    violations: tuple

    @property
    def ok(self):
        return not self.violations


def check_constraints(params, threshold=0.2, scales=None):
    """Check the additive-amplitude constraints of a parameter set.

    The additive terms must be perturbations: ``a_A / E|W|`` is compared with
    ``threshold`` and, because ``b_A`` only enters the dynamics squared,
    ``(b_A / E|W|)**2`` is compared with the same threshold.
    """
    scales = np.geomspace(1.0, 1024.0, 11) if scales is None else np.asarray(scales, float)
    ew = params.expected_modulus(scales)
    a = params.a_A(scales)
    b2 = params.b_A2(scales)
    resid = a * ew - b2
    unit = float(params.a_A(1.0) * params.expected_modulus(1.0) - params.b_A2(1.0))
    a_ratio = a / ew
    b_ratio = np.sqrt(b2) / ew
    violations = []
    if abs(unit) > 1e-12 * max(1.0, float(params.b_A2(1.0))):
        violations.append(f"a_A(1) E|W(1)| != b_A^2(1) (residual {unit:.3g})")
    if np.any(a_ratio >= threshold):
        violations.append(f"a_A/E|W| reaches {a_ratio.max():.3g} >= {threshold}")
    if np.any(b_ratio ** 2 >= threshold):
        violations.append(f"(b_A/E|W|)^2 reaches {(b_ratio ** 2).max():.3g} >= {threshold}")
    return ConstraintReport(scales, resid, unit, a_ratio, b_ratio, threshold, tuple(violations))


@dataclass(frozen=True)
class MomentRecursion:
    lambdas: np.ndarray
    E1: np.ndarray
    E2: np.ndarray

    @property
    def ratio(self):
        """``E2 / (2 E1^2)``; equal to one when the mean equals the standard deviation."""
        return self.E2 / (2.0 * self.E1 ** 2)


def appendix_moment_recursion(params, E1_0, E2_0, lambda_grid):
    """Iterate the one-step recursions for ``E[x]`` and ``E[x^2]`` of the discrete cascade."""
    lam = check_increasing(lambda_grid, "lambda_grid")
    if E1_0 <= 0 or E2_0 <= 0:
        raise ValueError("initial moments must be positive")
    mu, s2 = params.mu, params.sigma_M2
    E1 = np.empty(lam.size)
    E2 = np.empty(lam.size)
    E1[0], E2[0] = E1_0, E2_0
    for i, h in enumerate(np.diff(lam)):
        s = params.scale(lam[i])
        a, b2 = params.a_A(s), params.b_A2(s)
        E1[i + 1] = np.exp((mu + 0.5 * s2) * h) * (E1[i] + a * h)
        E2[i + 1] = np.exp((2 * mu + 2 * s2) * h) * (E2[i] + (2 * a * E1[i] + b2) * h)
    return MomentRecursion(lam, E1, E2)
