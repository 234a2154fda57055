import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from config import Config
from errors import ShapeError, ValidationError
from matprof import BIDIRECTIONAL, FORWARD, check_direction

logger = logging.getLogger(__name__)

IAC_EPS = 1e-12
_BLOCK = 1024  # positions drawn per generator in the Monte Carlo IAC


@dataclass(frozen=True, eq=False)
class ArcCurve:
    """Number of nearest-neighbour arcs crossing each position"""
    counts: np.ndarray
    direction: str = BIDIRECTIONAL
    tc: Optional[int] = None

    def __len__(self) -> int:
        return len(self.counts)


@dataclass(frozen=True, eq=False)
class Iac:
    """Idealized arc curve: expected crossings under random arcs"""
    values: np.ndarray
    kind: str
    direction: str = BIDIRECTIONAL
    tc: Optional[int] = None
    n_trials: Optional[int] = None

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True, eq=False)
class Cac:
    """Corrected arc curve in [0, 1]; low values mark likely regime changes"""
    values: np.ndarray
    direction: str = BIDIRECTIONAL
    tc: Optional[int] = None
    edge_guard: int = 0

    def __len__(self) -> int:
        return len(self.values)


def crossing_counts(index: np.ndarray, length: Optional[int] = None, lo: int = 0,
                    first_row: int = 0) -> np.ndarray:
    """Strict-interior crossings at positions [lo, length) using a difference array.

    Entry r of `index` is the neighbour of position first_row + r, and
    `length` defaults to the end of those rows. Arcs are clipped to
    [lo, length) and may end beyond it, so a caller holding only the rows
    within reach of that range still gets exact counts.
    """
    index = np.asarray(index, dtype=np.int64)
    hi = first_row + len(index) if length is None else int(length)
    if hi <= lo:
        return np.zeros(0, dtype=np.int64)
    valid = index >= 0
    src = (first_row + np.arange(len(index)))[valid]
    dst = index[valid]
    start = np.maximum(np.minimum(src, dst) + 1, lo)
    stop = np.minimum(np.maximum(src, dst), hi)
    live = start < stop
    size = hi - lo + 1
    diff = (np.bincount(start[live] - lo, minlength=size)
            - np.bincount(stop[live] - lo, minlength=size))
    return np.cumsum(diff[:hi - lo]).astype(np.int64)


def arc_curve(index: np.ndarray, direction: str = BIDIRECTIONAL, tc: Optional[int] = None) -> ArcCurve:
    """Arc curve of a nearest-neighbour index vector; -1 entries draw no arc"""
    check_direction(direction)
    index = np.asarray(index)
    if index.ndim != 1:
        raise ShapeError(f"index vector must be 1-D, got shape {index.shape}")
    L = len(index)
    bad = (index < -1) | (index >= L)
    if np.any(bad):
        pos = int(np.argmax(bad))
        raise ValidationError(f"invalid index {int(index[pos])} at position {pos} for length {L}")
    return ArcCurve(crossing_counts(index), direction, tc)


def iac_parabolic(L: int) -> Iac:
    """Closed-form bidirectional IAC: an inverted parabola of height L/2"""
    if L < 3:
        raise ValidationError(f"idealized arc curve needs L >= 3, got {L}")
    i = np.arange(L, dtype=np.float64)
    return Iac(2.0 * i * (L - i) / L, 'parabolic')


def _uniform_draws(seed: int, trial: int, first: int, last: int) -> np.ndarray:
    b0 = first // _BLOCK
    b1 = (last - 1) // _BLOCK
    u = np.concatenate([np.random.default_rng([seed, trial, b]).random(_BLOCK) for b in range(b0, b1 + 1)])
    return u[first - b0 * _BLOCK:last - b0 * _BLOCK]


def random_neighbors(L: int, direction: str, tc: Optional[int], exclusion: int,
                     seed: int, trial: int, rows: Optional[range] = None) -> np.ndarray:
    """One uniformly random admissible neighbour per position (-1 when none exists).

    Uniforms are drawn in fixed blocks from generators keyed by
    (seed, trial, block), so position i always receives the same draw
    whatever L is. Together with tc this makes the curve stable on prefixes.
    `rows` limits the draw to a range of positions of the length-L curve.
    """
    rows = range(L) if rows is None else rows
    if rows.stop <= rows.start:
        return np.zeros(0, dtype=np.int64)
    i = np.arange(rows.start, rows.stop, dtype=np.int64)
    reach = L if tc is None else tc
    right_lo = i + exclusion
    right_count = np.maximum(0, np.minimum(L - 1, i + reach) - right_lo + 1)
    if direction == FORWARD:
        left_lo = np.zeros(len(i), dtype=np.int64)
        left_count = np.zeros(len(i), dtype=np.int64)
    else:
        left_lo = np.maximum(0, i - reach)
        left_count = np.maximum(0, i - exclusion - left_lo + 1)
    total = left_count + right_count

    u = _uniform_draws(seed, trial, rows.start, rows.stop)
    pick = np.minimum(np.floor(u * total).astype(np.int64), np.maximum(total - 1, 0))
    j = np.where(pick < left_count, left_lo + pick, right_lo + pick - left_count)
    return np.where(total > 0, j, -1)


@lru_cache(maxsize=64)
def _empirical_values(L: int, direction: str, tc: Optional[int], n_trials: int, seed: int,
                      exclusion: int) -> np.ndarray:
    total = np.zeros(L, dtype=np.int64)
    for trial in range(n_trials):
        total += crossing_counts(random_neighbors(L, direction, tc, exclusion, seed, trial))
    values = total / n_trials
    values.setflags(write=False)
    return values


def iac_empirical(L: int, direction: str = BIDIRECTIONAL, tc: Optional[int] = None,
                  n_trials: Optional[int] = None, seed: int = 0, exclusion: int = 1) -> Iac:
    """Monte Carlo IAC: mean crossings when every position points at a random admissible neighbour.

    Used for forward-only curves and temporally constrained curves, which
    have no closed form. Results are cached per argument tuple.
    """
    check_direction(direction)
    n_trials = Config.IAC_TRIALS if n_trials is None else n_trials
    if n_trials < 1:
        raise ValidationError(f"n_trials must be at least 1, got {n_trials}")
    if L < 3:
        raise ValidationError(f"idealized arc curve needs L >= 3, got {L}")
    if tc is not None and tc < 1:
        raise ValidationError(f"temporal constraint must be positive, got {tc}")
    values = _empirical_values(int(L), direction, None if tc is None else int(tc), int(n_trials),
                               int(seed), int(exclusion))
    return Iac(values, 'empirical', direction, tc, n_trials)


def iac_segment(lo: int, hi: int, direction: str, tc: int, n_trials: Optional[int] = None, seed: int = 0,
                exclusion: int = 1) -> np.ndarray:
    """Monte Carlo IAC values at positions [lo, hi) of any curve at least hi + 2*tc long.

    Only the rows within tc of the range are drawn, so the values equal
    iac_empirical(L, ...).values[lo:hi] for every such L while the cost
    stays independent of L.
    """
    check_direction(direction)
    n_trials = Config.IAC_TRIALS if n_trials is None else n_trials
    if n_trials < 1:
        raise ValidationError(f"n_trials must be at least 1, got {n_trials}")
    if tc is None or tc < 1:
        raise ValidationError("IAC segments need a positive temporal constraint")
    if not 0 <= lo <= hi:
        raise ValidationError(f"invalid IAC segment [{lo}, {hi})")
    L = hi + 2 * tc
    rows = range(max(0, lo - tc), hi + tc)
    total = np.zeros(hi - lo, dtype=np.int64)
    for trial in range(n_trials):
        neighbors = random_neighbors(L, direction, tc, exclusion, seed, trial, rows)
        total += crossing_counts(neighbors, hi, lo=lo, first_row=rows.start)
    return total / n_trials


def idealized_arc_curve(L: int, direction: str = BIDIRECTIONAL, tc: Optional[int] = None,
                        n_trials: Optional[int] = None, seed: int = 0, exclusion: int = 1) -> Iac:
    """Parabola for unconstrained bidirectional curves, Monte Carlo estimate otherwise"""
    if direction == BIDIRECTIONAL and tc is None:
        return iac_parabolic(L)
    return iac_empirical(L, direction, tc, n_trials, seed, exclusion)


def correct_counts(counts: np.ndarray, iac_values: np.ndarray, eps: float = IAC_EPS) -> np.ndarray:
    """Element-wise min(counts / IAC, 1), with the IAC floored at eps"""
    return np.minimum(np.asarray(counts) / np.maximum(iac_values, eps), 1.0)


def cac(ac: ArcCurve, iac: Iac, edge_guard: int, eps: float = IAC_EPS) -> Cac:
    """Corrected arc curve min(AC / IAC, 1), pinned to 1 within edge_guard of either end"""
    if len(ac) != len(iac):
        raise ShapeError(f"arc curve length {len(ac)} does not match IAC length {len(iac)}")
    if iac.kind == 'empirical' and (ac.direction != iac.direction or ac.tc != iac.tc):
        raise ValidationError(
            f"arc curve ({ac.direction}, tc={ac.tc}) does not match IAC ({iac.direction}, tc={iac.tc})")
    if iac.kind == 'parabolic' and (ac.direction != BIDIRECTIONAL or ac.tc is not None):
        raise ValidationError("the parabolic IAC only corrects unconstrained bidirectional arc curves")
    if edge_guard < 0:
        raise ValidationError(f"edge guard must be non-negative, got {edge_guard}")

    values = correct_counts(ac.counts, iac.values, eps)
    L = len(values)
    guard = min(edge_guard, L)
    values[:guard] = 1.0
    values[L - guard:] = 1.0
    return Cac(values, ac.direction, ac.tc, edge_guard)


def mean_cac(curves) -> Cac:
    """Element-wise mean of per-channel corrected arc curves"""
    curves = list(curves)
    if not curves:
        raise ValidationError("no curves to average")
    if len({len(c) for c in curves}) != 1:
        raise ShapeError("per-channel curves have different lengths")
    first = curves[0]
    total = first.values.copy()
    for c in curves[1:]:
        total += c.values
    values = total / len(curves)
    return Cac(values, first.direction, first.tc, first.edge_guard)
