import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import fftconvolve

from config import Config
from errors import OracleCapError, ValidationError

logger = logging.getLogger(__name__)

BIDIRECTIONAL = 'bidirectional'
FORWARD = 'forward'
DIRECTIONS = (BIDIRECTIONAL, FORWARD)
NO_NEIGHBOR = -1


def exclusion_radius(m: int) -> int:
    """Trivial-match exclusion radius: candidates with |i - j| < ceil(m/4) are ignored"""
    return max(1, math.ceil(m / 4))


def check_direction(direction: str):
    if direction not in DIRECTIONS:
        raise ValidationError(f"unknown direction '{direction}', expected one of {DIRECTIONS}")


@dataclass(frozen=True, eq=False)
class DistanceProfile:
    """One row of the distance matrix"""
    values: np.ndarray
    query_index: Optional[int] = None


@dataclass(frozen=True, eq=False)
class ProfilePair:
    """Matrix profile P and nearest-neighbour index I"""
    profile: np.ndarray
    index: np.ndarray
    m: int
    tc: Optional[int] = None
    direction: str = BIDIRECTIONAL
    exclusion: int = 1

    def __len__(self) -> int:
        return len(self.profile)


def window_stats(series: np.ndarray, m: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean, population std and constant-flag of every length-m window.

    Sums are accumulated column by column so each window's statistics depend
    only on its own samples, never on how many windows are computed at once.
    """
    view = sliding_window_view(series, m)
    total = view[:, 0].copy()
    for k in range(1, m):
        total += view[:, k]
    mu = total / m
    sq = (view[:, 0] - mu) ** 2
    for k in range(1, m):
        sq += (view[:, k] - mu) ** 2
    sigma = np.sqrt(sq / m)
    constant = view.max(axis=1) == view.min(axis=1)
    return mu, sigma, constant


def sliding_dot_product(query: np.ndarray, series: np.ndarray) -> np.ndarray:
    """Dot product of query with every window of series, via FFT convolution"""
    m = len(query)
    n = len(series)
    qt = fftconvolve(series, query[::-1], mode='full')
    return qt[m - 1:n]


def _distances_from_dot(qt, m, mu_q, sig_q, const_q, mu, sig, const) -> np.ndarray:
    """z-normalized Euclidean distance from sliding dot products"""
    with np.errstate(divide='ignore', invalid='ignore'):
        corr = (qt - m * mu_q * mu) / (m * sig_q * sig)
    sq = 2.0 * m * (1.0 - corr)
    sq = np.clip(sq, 0.0, 4.0 * m)
    if const_q:
        sq = np.where(const, 0.0, float(m))
    else:
        sq = np.where(const, float(m), sq)
    return np.sqrt(sq)


def mass_distance_profile(query: np.ndarray, series: np.ndarray) -> DistanceProfile:
    """Mueen's similarity search: distance from query to every window of series"""
    query = np.asarray(query, dtype=np.float64)
    series = np.asarray(series, dtype=np.float64)
    m = len(query)
    if m < 2:
        raise ValidationError(f"query length must be at least 2 for z-normalization, got {m}")
    if m > len(series):
        raise ValidationError(f"invalid window: query length {m} exceeds series length {len(series)}")
    mu_q, sig_q, const_q = window_stats(query, m)
    mu, sig, const = window_stats(series, m)
    qt = sliding_dot_product(query, series)
    values = _distances_from_dot(qt, m, mu_q[0], sig_q[0], bool(const_q[0]), mu, sig, const)
    return DistanceProfile(values)


def _row_bounds(i: int, L: int, tc: Optional[int], direction: str, excl: int) -> Tuple[int, int]:
    """Candidate window range [lo, hi) searched for row i"""
    reach = L if tc is None else tc
    hi = min(L, i + reach + 1)
    if direction == FORWARD:
        lo = i + excl
    else:
        lo = max(0, i - reach)
    return lo, max(lo, hi)


def _stamp_row(series, stats, i, m, tc, direction, excl) -> Tuple[float, int]:
    mu, sig, const = stats
    L = len(series) - m + 1
    lo, hi = _row_bounds(i, L, tc, direction, excl)
    if hi <= lo:
        return np.inf, NO_NEIGHBOR
    query = series[i:i + m]
    qt = sliding_dot_product(query, series[lo:hi - 1 + m])
    d = _distances_from_dot(qt, m, mu[i], sig[i], bool(const[i]), mu[lo:hi], sig[lo:hi], const[lo:hi])
    # trivial-match zone around the diagonal
    zlo = max(lo, i - excl + 1)
    zhi = min(hi, i + excl)
    if zhi > zlo:
        d[zlo - lo:zhi - lo] = np.inf
    j = int(np.argmin(d))
    if not np.isfinite(d[j]):
        return np.inf, NO_NEIGHBOR
    return float(d[j]), lo + j


def stamp_rows(series: np.ndarray, stats, rows: range, m: int, tc: Optional[int],
               direction: str, excl: int, threads: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Profile values and indices for the given rows; results are independent of thread count"""
    threads = Config.THREADS if threads is None else threads
    rows = list(rows)

    def work(chunk):
        out = [_stamp_row(series, stats, i, m, tc, direction, excl) for i in chunk]
        return out

    if threads > 1 and len(rows) > 1:
        size = math.ceil(len(rows) / threads)
        chunks = [rows[k:k + size] for k in range(0, len(rows), size)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = [r for part in pool.map(work, chunks) for r in part]
    else:
        results = work(rows)

    profile = np.array([r[0] for r in results], dtype=np.float64)
    index = np.array([r[1] for r in results], dtype=np.int64)
    return profile, index


def _validate(series: np.ndarray, m: int, tc: Optional[int], direction: str):
    check_direction(direction)
    if m < 2:
        raise ValidationError(f"window length must be at least 2, got {m}")
    if len(series) < 2 * m:
        raise ValidationError(f"series of length {len(series)} is shorter than 2*m = {2 * m}")
    if tc is not None and tc < 1:
        raise ValidationError(f"temporal constraint must be positive, got {tc}")
    if not np.all(np.isfinite(series)):
        raise ValidationError("series contains non-finite values")


def stamp(series: np.ndarray, m: int, tc: Optional[int] = None, direction: str = BIDIRECTIONAL,
          threads: Optional[int] = None) -> ProfilePair:
    """Scalable time series Anytime Matrix Profile, run to completion.

    Each row is the MASS distance profile of window i against the admissible
    neighbourhood (whole series, or |j - i| <= tc, and j > i when forward),
    masked by the trivial-match exclusion zone and reduced to its minimum.
    Ties go to the smallest index. Rows with no admissible neighbour get
    +inf and index -1.
    """
    series = np.asarray(series, dtype=np.float64)
    _validate(series, m, tc, direction)
    L = len(series) - m + 1
    excl = exclusion_radius(m)
    stats = window_stats(series, m)
    profile, index = stamp_rows(series, stats, range(L), m, tc, direction, excl, threads)
    logger.debug(f"STAMP m={m} tc={tc} direction={direction}: {int(np.sum(index < 0))} rows without neighbour")
    return ProfilePair(profile, index, m, tc, direction, excl)


def brute_force_mp(series: np.ndarray, m: int, tc: Optional[int] = None, direction: str = BIDIRECTIONAL,
                   cap: Optional[int] = None) -> ProfilePair:
    """Matrix profile from the fully materialized distance matrix (test oracle)"""
    series = np.asarray(series, dtype=np.float64)
    cap = Config.ORACLE_CAP if cap is None else cap
    if len(series) > cap:
        raise OracleCapError(f"brute-force oracle is capped at n={cap}, got n={len(series)}")
    _validate(series, m, tc, direction)
    L = len(series) - m + 1
    excl = exclusion_radius(m)

    windows = sliding_window_view(series, m)
    mu = windows.mean(axis=1, keepdims=True)
    sigma = windows.std(axis=1, keepdims=True)
    constant = (windows.max(axis=1) == windows.min(axis=1))
    with np.errstate(divide='ignore', invalid='ignore'):
        z = np.where(constant[:, None], 0.0, (windows - mu) / sigma)

    cols = np.arange(L)
    profile = np.full(L, np.inf)
    index = np.full(L, NO_NEIGHBOR, dtype=np.int64)
    for i in range(L):
        d = np.sqrt(np.sum((z - z[i]) ** 2, axis=1))
        if constant[i]:
            d = np.where(constant, 0.0, np.sqrt(m))
        else:
            d = np.where(constant, np.sqrt(m), d)
        admissible = np.abs(cols - i) >= excl
        if tc is not None:
            admissible &= np.abs(cols - i) <= tc
        if direction == FORWARD:
            admissible &= cols > i
        d = np.where(admissible, d, np.inf)
        j = int(np.argmin(d))
        if np.isfinite(d[j]):
            profile[i] = d[j]
            index[i] = j
    return ProfilePair(profile, index, m, tc, direction, excl)


class StreamingProfile:
    """Matrix profile over a growing single-channel series.

    A row is computed once every candidate it may use has arrived, i.e. when
    the newest window index is at least i + tc. Rows therefore equal the rows
    stamp() produces on any longer series containing the same prefix.

    Only what later rows can still reach is kept: samples and window
    statistics from window `offset` on, where offset is the next row in
    forward mode and tc windows before it in bidirectional mode.
    """

    def __init__(self, m: int, tc: int, direction: str = FORWARD):
        check_direction(direction)
        if tc is None or tc < 1:
            raise ValidationError("streaming profiles need a positive temporal constraint")
        self.m = m
        self.tc = tc
        self.direction = direction
        self.excl = exclusion_radius(m)
        self.offset = 0
        self.finalized = 0
        self.samples_seen = 0
        self.samples = np.empty(0)
        self.mu = np.empty(0)
        self.sigma = np.empty(0)
        self.constant = np.empty(0, dtype=bool)

    @property
    def window_count(self) -> int:
        return max(0, self.samples_seen - self.m + 1)

    def extend(self, samples: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Append samples; returns the profile values and indices of the rows this call finalized"""
        samples = np.asarray(samples, dtype=np.float64)
        old_windows = self.window_count
        self.samples = np.concatenate([self.samples, samples])
        self.samples_seen += len(samples)
        L = self.window_count
        if L > old_windows:
            mu, sigma, constant = window_stats(self.samples[old_windows - self.offset:], self.m)
            self.mu = np.concatenate([self.mu, mu])
            self.sigma = np.concatenate([self.sigma, sigma])
            self.constant = np.concatenate([self.constant, constant])

        ready = max(0, L - self.tc)
        if ready <= self.finalized:
            return np.empty(0), np.empty(0, dtype=np.int64)
        # rows are computed on the retained buffer and shifted back to global numbering
        rows = range(self.finalized - self.offset, ready - self.offset)
        stats = (self.mu, self.sigma, self.constant)
        p, idx = stamp_rows(self.samples, stats, rows, self.m, self.tc, self.direction, self.excl, threads=1)
        idx = np.where(idx >= 0, idx + self.offset, idx)
        self.finalized = ready
        self._evict()
        return p, idx

    def _evict(self):
        keep_from = self.finalized if self.direction == FORWARD else max(0, self.finalized - self.tc)
        drop = keep_from - self.offset
        if drop <= 0:
            return
        self.samples = self.samples[drop:]
        self.mu = self.mu[drop:]
        self.sigma = self.sigma[drop:]
        self.constant = self.constant[drop:]
        self.offset = keep_from
