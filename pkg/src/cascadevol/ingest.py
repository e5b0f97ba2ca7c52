"""Intraday price data to an analysis path ``Z``.

Pipeline: load per-issue 1-minute log prices, take intraday returns (the
overnight change is dropped), divide each return by the standard deviation
of its minute of the day, standardise each issue, average across issues and
cumulate.
"""

import csv
import json
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import date, datetime, timedelta

import numpy as np

from . import rng as _rng
from .cascade import EW_PREFACTOR

logger = logging.getLogger(__name__)

DEFAULT_SCHEMA = {"timestamp": "timestamp", "issue": "issue", "price": "price"}
MAX_FILL = 5  # longest run of missing minutes that is forward-filled
MIN_BUCKET = 5  # minute-of-day buckets with fewer returns use the issue-wide sigma


class ParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class EmptyInputError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class IssueSeries:
    """Log prices of one issue, split into trading sessions.

    ``sessions[i]`` is a ``(minutes, log_prices)`` pair where ``minutes`` are
    minutes after midnight; ``session_labels[i]`` identifies the trading day.
    """

    issue_id: str
    sessions: tuple
    session_labels: tuple

    def __post_init__(self):
        for label, (t, p) in zip(self.session_labels, self.sessions):
            if len(t) < 2 or len(t) != len(p):
                raise ValueError(f"{self.issue_id} session {label}: need >= 2 aligned samples")
            if np.any(np.diff(t) <= 0):
                raise ValueError(f"{self.issue_id} session {label}: timestamps not increasing")
        if list(self.session_labels) != sorted(self.session_labels):
            raise ValueError(f"{self.issue_id}: sessions out of order")


@dataclass(frozen=True)
class SeriesPath:
    values: np.ndarray
    dt: float = 1.0
    session_breaks: tuple = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or not np.all(np.isfinite(values)):
            raise ValueError("path values must be a finite 1-D array")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "session_breaks", tuple(int(b) for b in self.session_breaks))

    @property
    def L(self):
        return self.values.size

    def __len__(self):
        return self.values.size

    def write(self, csv_path, json_path):
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("index,Z\n")
            for k, z in enumerate(self.values):
                fh.write(f"{k},{z:.17g}\n")
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump({"dt": self.dt, "L": self.L, "session_breaks": list(self.session_breaks)},
                      fh, indent=2, sort_keys=True)

    @classmethod
    def read(cls, csv_path, json_path=None):
        data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        meta = {"dt": 1.0, "session_breaks": []}
        if json_path is not None:
            with open(json_path, encoding="utf-8") as fh:
                meta.update(json.load(fh))
        return cls(data[:, 1], float(meta["dt"]), tuple(meta["session_breaks"]))


def load_csv(path, schema=None):
    """Read ``timestamp, issue, price`` rows into one :class:`IssueSeries` per issue.

    Timestamps are ISO-8601 date-times; the calendar date labels the session.
    Prices are converted to natural logarithms.
    """
    schema = dict(DEFAULT_SCHEMA, **(schema or {}))
    rows = defaultdict(lambda: defaultdict(list))
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise EmptyInputError(f"{path} is empty")
        missing = [c for c in schema.values() if c not in reader.fieldnames]
        if missing:
            raise ParseError(f"missing columns {missing}", line=1)
        for rec in reader:
            line = reader.line_num
            try:
                ts = datetime.fromisoformat(rec[schema["timestamp"]].strip())
                price = float(rec[schema["price"]])
                issue = rec[schema["issue"]].strip()
            except (TypeError, ValueError, AttributeError) as exc:
                raise ParseError(f"malformed row ({exc})", line=line) from None
            if not issue:
                raise ParseError("empty issue id", line=line)
            if not price > 0 or not np.isfinite(price):
                raise ParseError(f"non-positive price {price}", line=line)
            minute = ts.hour * 60 + ts.minute
            rows[issue][ts.date().isoformat()].append((minute, np.log(price), line))
    if not rows:
        raise EmptyInputError(f"{path} has no data rows")

    out = []
    for issue in sorted(rows):
        sessions, labels = [], []
        for label in sorted(rows[issue]):
            recs = sorted(rows[issue][label])
            t = np.array([r[0] for r in recs], dtype=int)
            dup = np.flatnonzero(np.diff(t) == 0)
            if dup.size:
                raise ParseError(f"duplicate timestamp for {issue}", line=recs[dup[0] + 1][2])
            if t.size < 2:
                logger.warning("dropping %s session %s with a single sample", issue, label)
                continue
            sessions.append((t, np.array([r[1] for r in recs])))
            labels.append(label)
        out.append(IssueSeries(issue, tuple(sessions), tuple(labels)))
    return out


@dataclass(frozen=True)
class IssueReturns:
    issue_id: str
    values: np.ndarray  # intraday returns divided by the minute-of-day profile
    session_labels: np.ndarray  # per return
    minutes: np.ndarray  # per return: minute of day at the end of the return

    @property
    def keys(self):
        return list(zip(self.session_labels.tolist(), self.minutes.tolist()))


@dataclass(frozen=True)
class Deseasonalizer:
    mu: dict
    sigma: dict
    profiles: dict  # issue -> (minutes, sigma per minute-of-day bucket)


def _fill_session(t, p, dt):
    """Regular minute grid with short gaps forward-filled; None if a gap is too long."""
    grid = np.arange(t[0], t[-1] + 1)
    idx = np.searchsorted(t, grid, side="right") - 1
    present = np.isin(grid, t)
    # longest run of absent minutes
    run = longest = 0
    for flag in present:
        run = 0 if flag else run + 1
        longest = max(longest, run)
    if longest > MAX_FILL:
        return None
    span = t[-1] - t[0]
    if span % dt:
        raise ValueError(f"dt={dt} does not divide the session length of {span} minutes")
    keep = slice(None, None, dt)
    return grid[keep], p[idx][keep]


def _issue_returns(series, dt):
    rets, labels, minutes = [], [], []
    for label, (t, p) in zip(series.session_labels, series.sessions):
        filled = _fill_session(np.asarray(t), np.asarray(p), dt)
        if filled is None:
            logger.warning("dropping %s session %s: gap longer than %d minutes",
                           series.issue_id, label, MAX_FILL)
            continue
        g, lp = filled
        rets.append(np.diff(lp))
        minutes.append(g[1:])
        labels.append(np.full(g.size - 1, label, dtype=object))
    if not rets:
        raise ValueError(f"{series.issue_id}: no usable sessions")
    r = np.concatenate(rets)
    m = np.concatenate(minutes)
    lab = np.concatenate(labels)
    overall = r.std(ddof=1)
    if not overall > 0:
        raise ValueError(f"{series.issue_id}: returns have zero variance")
    buckets = np.arange(m.min(), m.max() + 1)
    prof = np.full(buckets.size, overall)
    for i, minute in enumerate(buckets):
        sel = r[m == minute]
        if sel.size >= MIN_BUCKET:
            sd = sel.std(ddof=1)
            if not sd > 0:
                raise ValueError(f"{series.issue_id}: zero variance in minute-of-day bucket "
                                 f"{minute // 60:02d}:{minute % 60:02d}")
            prof[i] = sd
    norm = r / prof[m - buckets[0]]
    return IssueReturns(series.issue_id, norm, lab, m), (buckets, prof)


def deseasonalize(series, dt=1, n_jobs=1):
    """Intraday returns at lag ``dt`` minutes, normalised by each issue's intraday profile.

    Returns ``(list of IssueReturns, Deseasonalizer)``.  The Deseasonalizer holds
    the minute-of-day profile and the mean/std of each normalised series.
    """
    dt = int(dt)
    if dt < 1:
        raise ValueError("dt must be a positive number of minutes")
    if n_jobs == 1:
        results = [_issue_returns(s, dt) for s in series]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(lambda s: _issue_returns(s, dt), series))
    returns = [r for r, _ in results]
    mu = {r.issue_id: float(r.values.mean()) for r in returns}
    sigma = {r.issue_id: float(r.values.std(ddof=1)) for r in returns}
    profiles = {r.issue_id: prof for r, prof in results}
    return returns, Deseasonalizer(mu, sigma, profiles)


def average_path(returns, stats, dt=1.0):
    """Average of standardised issue returns, cumulated into a :class:`SeriesPath`."""
    if not returns:
        raise ValueError("no issues to average")
    ref = returns[0]
    bad = [r.issue_id for r in returns[1:]
           if r.values.size != ref.values.size
           or not np.array_equal(r.minutes, ref.minutes)
           or not np.array_equal(r.session_labels, ref.session_labels)]
    if bad:
        raise AlignmentError(f"issues not aligned with {ref.issue_id}: {', '.join(bad)}")
    acc = np.zeros(ref.values.size)
    for r in returns:
        acc += (r.values - stats.mu[r.issue_id]) / stats.sigma[r.issue_id]
    dZ = acc / len(returns)
    labels = ref.session_labels
    breaks = tuple(int(i) for i in np.flatnonzero(labels[1:] != labels[:-1]) + 1)
    return SeriesPath(np.cumsum(dZ), float(dt), breaks)


# --------------------------------------------------------------------------
# synthetic substitute


def fgn(n, hurst, gen):
    """Unit-variance fractional Gaussian noise by circulant embedding (Davies-Harte)."""
    if not 0 < hurst < 1:
        raise ValueError(f"Hurst exponent must lie in (0, 1), got {hurst}")
    if hurst == 0.5:
        return gen.standard_normal(n)
    k = np.arange(n + 1, dtype=float)
    acov = 0.5 * (np.abs(k + 1) ** (2 * hurst) - 2 * k ** (2 * hurst)
                  + np.abs(k - 1) ** (2 * hurst))
    row = np.concatenate([acov, acov[-2:0:-1]])
    eig = np.fft.fft(row).real
    if np.any(eig < -1e-10 * eig.max()):
        raise ValueError("circulant embedding is not non-negative definite")
    m = row.size
    z = gen.standard_normal(m) + 1j * gen.standard_normal(m)
    y = np.fft.fft(np.sqrt(np.clip(eig, 0, None) / m) * z)
    return y.real[:n]


def brownian_amplitude(prefactor=EW_PREFACTOR):
    """Increment standard deviation giving ``E|W(s)| = prefactor * s**0.5`` for Brownian paths.

    For unit-variance increments the mexican-hat coefficient has variance
    ``s * sqrt(pi) / 2``, hence ``E|W| = pi**(-1/4) * s**0.5``.
    """
    return prefactor * np.pi ** 0.25


def synthesize_cascade_path(params, L, seed, amplitude=None):
    """Synthetic log-price path with multifractal wavelet statistics.

    Increments are fractional Gaussian noise of Hurst exponent
    ``H = gamma_M - sigma_M2/2`` modulated by a dyadic log-normal cascade whose
    log-weights have variance ``sigma_M2 * log 2`` per level, so that

        E|W(s)|^q ~ s^{(gamma_M + sigma_M2/2) q - sigma_M2 q^2 / 2}.

    With ``sigma_M2 = 0`` and ``gamma_M = 0.5`` the path is Brownian.
    """
    L = int(L)
    if L < 2 or L & (L - 1):
        raise ValueError(f"L must be a power of two, got {L}")
    gen = _rng.block_rng(seed, 0)
    hurst = params.gamma_M - 0.5 * params.sigma_M2
    noise = fgn(L, hurst, gen)
    v = params.sigma_M2 * np.log(2.0)
    log_amp = np.zeros(L)
    if v > 0:
        for level in range(1, int(np.log2(L)) + 1):
            # mean -v makes E[w^2] = 1 so the increment variance stays put
            g = gen.normal(-v, np.sqrt(v), 2 ** level)
            log_amp += np.repeat(g, L >> level)
    amp = brownian_amplitude() if amplitude is None else float(amplitude)
    return SeriesPath(np.cumsum(amp * np.exp(log_amp) * noise), 1.0, ())


def synthesize_issue_series(n_issues, n_sessions, session_minutes, seed, open_minute=480,
                            profile=None, start_price=100.0):
    """Independent random-walk issues with an optional intraday volatility profile.

    Used to exercise the ingest pipeline without market data.
    """
    gen = _rng.block_rng(seed, 0)
    first_day = date(2008, 1, 1)
    minutes = open_minute + np.arange(session_minutes)
    prof = np.ones(session_minutes - 1) if profile is None else np.asarray(profile, float)
    out = []
    for i in range(n_issues):
        sessions, labels = [], []
        level = np.log(start_price)
        for d in range(n_sessions):
            r = 1e-3 * prof * gen.standard_normal(session_minutes - 1)
            level = level + 1e-2 * gen.standard_normal()
            lp = level + np.concatenate([[0.0], np.cumsum(r)])
            level = lp[-1]
            sessions.append((minutes.copy(), lp))
            labels.append((first_day + timedelta(days=d)).isoformat())
        out.append(IssueSeries(f"I{i:03d}", tuple(sessions), tuple(labels)))
    return out


def write_csv(series, path):
    """Write IssueSeries in the default ``timestamp,issue,price`` schema."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("timestamp,issue,price\n")
        for s in series:
            for label, (t, lp) in zip(s.session_labels, s.sessions):
                day = date.fromisoformat(label)
                for minute, value in zip(t, lp):
                    ts = datetime(day.year, day.month, day.day) + timedelta(minutes=int(minute))
                    fh.write(f"{ts.isoformat()},{s.issue_id},{np.exp(value):.12g}\n")
