import logging
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import pandas as pd

from arc import Cac
from config import Config
from errors import ExtractionExhausted, ValidationError

logger = logging.getLogger(__name__)

REA = 'rea'
LREA = 'lrea'
LTEA = 'ltea'
LFMD_MAXIMA = 'lfmd-maxima'
GROUND_TRUTH = 'ground-truth'
EXTRACTORS = (REA, LREA, LTEA)

CENTERED = 'centered'
TRAILING = 'trailing'


@dataclass(frozen=True, eq=False)
class ChangePointSet:
    """Sorted change-point sample positions with their provenance"""
    indices: np.ndarray
    source: str = GROUND_TRUTH
    k_requested: Optional[int] = None

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if len(idx) and (idx[0] < 0 or np.any(np.diff(idx) <= 0)):
            raise ValidationError(f"change-points must be non-negative and strictly increasing, got {idx.tolist()}")
        idx.setflags(write=False)
        object.__setattr__(self, 'indices', idx)

    def __len__(self) -> int:
        return len(self.indices)

    def tolist(self):
        return [int(i) for i in self.indices]

    def check_bounds(self, n: int):
        if len(self.indices) and self.indices[-1] >= n:
            raise ValidationError(f"change-point {int(self.indices[-1])} outside a series of length {n}")


@dataclass(frozen=True)
class RollingScaleParams:
    """Half-width of the local standardization window and its placement"""
    local_window: int
    mode: str = CENTERED
    sigma_floor: float = 1e-12

    def __post_init__(self):
        if self.local_window < 2:
            raise ValidationError(f"local window must be at least 2, got {self.local_window}")
        if self.mode not in (CENTERED, TRAILING):
            raise ValidationError(f"rolling mode must be '{CENTERED}' or '{TRAILING}', got '{self.mode}'")


def _values(curve: Union[Cac, np.ndarray]) -> np.ndarray:
    values = curve.values if isinstance(curve, Cac) else curve
    return np.asarray(values, dtype=np.float64)


def _radius(nw: int, exclusion: Optional[int]) -> int:
    return int(exclusion) if exclusion is not None else Config.EXCLUSION_FACTOR * int(nw)


def scale_cac(curve: Union[Cac, np.ndarray], params: RollingScaleParams) -> np.ndarray:
    """Standardize each position by the mean and population std of its local window.

    The window spans [i - w, i + w] in centered mode and [i - 2w, i] in
    trailing mode, clipped at the array bounds. Positions whose window is
    constant scale to exactly 0.
    """
    if params.mode == TRAILING:
        return TrailingScaler(params).feed(_values(curve))
    series = pd.Series(_values(curve))
    width = 2 * params.local_window + 1
    rolling = series.rolling(window=width, center=params.mode == CENTERED, min_periods=1)
    mu = rolling.mean().to_numpy()
    sigma = rolling.std(ddof=0).to_numpy()
    sigma = np.maximum(np.nan_to_num(sigma, nan=0.0), params.sigma_floor)
    flat = (rolling.max() == rolling.min()).to_numpy()
    scaled = (series.to_numpy() - mu) / sigma
    scaled[flat] = 0.0
    return scaled


class TrailingScaler:
    """Trailing-window standardization of a curve that arrives in pieces.

    Positions are grouped in aligned blocks as wide as the window, so every
    window is a suffix of the previous block plus a prefix of its own. Both
    parts are summed from block boundaries only, which makes each scaled
    value independent of how the curve was split. Memory stays at two blocks.
    """

    def __init__(self, params: RollingScaleParams):
        self.params = params
        self.width = 2 * params.local_window + 1
        self.position = 0
        self._block = np.empty(0)
        self._suffix = None

    def _close_block(self, block: np.ndarray):
        rev = block[::-1]
        self._suffix = (np.cumsum(rev)[::-1], np.cumsum(rev * rev)[::-1],
                        np.maximum.accumulate(rev)[::-1], np.minimum.accumulate(rev)[::-1])

    def _scale_part(self, block: np.ndarray, new: int) -> np.ndarray:
        """Scaled values of the last `new` entries of the current block"""
        j = np.arange(len(block) - new, len(block))
        total = np.cumsum(block)[j]
        squares = np.cumsum(block * block)[j]
        hi = np.maximum.accumulate(block)[j]
        lo = np.minimum.accumulate(block)[j]
        count = (j + 1).astype(np.float64)
        if self._suffix is not None:
            # window start j + 1 of the previous block; the block's last entry needs none of it
            part = j < self.width - 1
            k = j[part] + 1
            suf_total, suf_squares, suf_hi, suf_lo = self._suffix
            total[part] += suf_total[k]
            squares[part] += suf_squares[k]
            hi[part] = np.maximum(hi[part], suf_hi[k])
            lo[part] = np.minimum(lo[part], suf_lo[k])
            count[:] = self.width
        mu = total / count
        var = np.maximum(squares / count - mu * mu, 0.0)
        sigma = np.maximum(np.sqrt(var), self.params.sigma_floor)
        scaled = (block[j] - mu) / sigma
        scaled[hi == lo] = 0.0
        return scaled

    def feed(self, values) -> np.ndarray:
        """Scaled values for the next positions of the curve"""
        values = np.asarray(values, dtype=np.float64)
        out = []
        i = 0
        while i < len(values):
            take = min(self.width - len(self._block), len(values) - i)
            block = np.concatenate([self._block, values[i:i + take]])
            out.append(self._scale_part(block, take))
            i += take
            if len(block) == self.width:
                self._close_block(block)
                block = np.empty(0)
            self._block = block
        self.position += len(values)
        return np.concatenate(out) if out else np.empty(0)


def _masked_argmins(values: np.ndarray, k: int, radius: int):
    if k < 1:
        raise ValidationError(f"k must be at least 1, got {k}")
    curve = np.array(values, dtype=np.float64)
    curve[np.isnan(curve)] = np.inf
    found = []
    for step in range(k):
        if not np.any(np.isfinite(curve)):
            raise ExtractionExhausted(f"only {step} of {k} requested change-points could be extracted")
        idx = int(np.argmin(curve))
        found.append(idx)
        curve[max(0, idx - radius):idx + radius + 1] = np.inf
    return sorted(found)


def rea(curve: Union[Cac, np.ndarray], k: int, nw: int, exclusion: Optional[int] = None) -> ChangePointSet:
    """Regime Extracting Algorithm: the k lowest points, each masking +-5*nw around itself"""
    found = _masked_argmins(_values(curve), k, _radius(nw, exclusion))
    return ChangePointSet(found, REA, k)


def lrea(curve: Union[Cac, np.ndarray], k: int, nw: int, params: RollingScaleParams,
         exclusion: Optional[int] = None) -> ChangePointSet:
    """REA on the locally standardized curve"""
    found = _masked_argmins(scale_cac(curve, params), k, _radius(nw, exclusion))
    return ChangePointSet(found, LREA, k)


def check_threshold(threshold: float) -> float:
    """LTEA thresholds are finite or -inf; +inf would turn the whole curve into one valley"""
    threshold = float(threshold)
    if math.isnan(threshold):
        raise ValidationError("LTEA threshold must not be NaN")
    if threshold == math.inf:
        raise ValidationError("LTEA threshold must not be +inf")
    return threshold


def valleys(scaled: np.ndarray, threshold: float):
    """Maximal runs of positions that stay at or below the threshold, as (start, stop) pairs"""
    marked = np.where(scaled > threshold, 1.0, scaled)
    inside = (marked != 1.0).astype(np.int8)
    edges = np.diff(np.concatenate([[0], inside, [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    return list(zip(starts.tolist(), stops.tolist()))


def valley_minima(scaled: np.ndarray, threshold: float):
    """(position, depth) of the lowest point of every valley"""
    out = []
    for a, b in valleys(scaled, threshold):
        pos = a + int(np.argmin(scaled[a:b]))
        out.append((pos, float(scaled[pos])))
    return out


def suppress_by_depth(candidates, radius: int):
    """Keep candidates deepest first, dropping any within radius of one already kept"""
    kept = []
    for pos, _ in sorted(candidates, key=lambda c: (c[1], c[0])):
        if all(abs(pos - other) > radius for other in kept):
            kept.append(pos)
    return sorted(kept)


def ltea(curve: Union[Cac, np.ndarray], params: RollingScaleParams, threshold: Optional[float] = None,
         nw: int = 1, exclusion: Optional[int] = None) -> ChangePointSet:
    """Local Threshold Extracting Algorithm; needs no change-point count.

    Scaled values above the threshold are set to 1, every maximal run of
    remaining values is a valley, and each valley contributes its minimum.
    Valleys closer than the exclusion radius are resolved deepest first.
    """
    threshold = check_threshold(Config.LTEA_THRESHOLD if threshold is None else threshold)
    scaled = scale_cac(curve, params)
    found = suppress_by_depth(valley_minima(scaled, threshold), _radius(nw, exclusion))
    return ChangePointSet(found, LTEA)


def lfmd_extract(curve: np.ndarray, nw: int, step: int, m: int, k: Optional[int] = None,
                 params: Optional[RollingScaleParams] = None, threshold: Optional[float] = None,
                 extractor: Optional[str] = None) -> ChangePointSet:
    """Local maxima of an adjacent-window distance curve, mapped back to sample positions.

    The curve is negated so maxima become valleys for REA/LREA/LTEA. The
    exclusion radius and local window are converted from samples to curve
    positions; entry c maps to sample c*step + m//2.
    """
    if step < 1:
        raise ValidationError(f"step must be a positive integer, got {step}")
    extractor = extractor or (LTEA if k is None else (LREA if params is not None else REA))
    if extractor in (REA, LREA) and k is None:
        raise ValidationError(f"{extractor.upper()} needs the number of change-points k")
    negated = -np.asarray(curve, dtype=np.float64)
    exclusion = math.ceil(Config.EXCLUSION_FACTOR * nw / step)
    local = None
    if params is not None:
        local = RollingScaleParams(max(2, round(params.local_window / step)), params.mode, params.sigma_floor)

    if extractor == REA:
        found = rea(negated, k, nw, exclusion)
    elif extractor == LREA:
        if local is None:
            raise ValidationError("LREA needs rolling-window parameters")
        found = lrea(negated, k, nw, local, exclusion)
    elif extractor == LTEA:
        if local is None:
            raise ValidationError("LTEA needs rolling-window parameters")
        found = ltea(negated, local, threshold, nw, exclusion)
    else:
        raise ValidationError(f"unknown extractor '{extractor}', expected one of {EXTRACTORS}")

    samples = found.indices * step + m // 2
    return ChangePointSet(samples, LFMD_MAXIMA, k)


def run_extractor(curve: Union[Cac, np.ndarray], extractor: str, nw: int, k: Optional[int] = None,
                  params: Optional[RollingScaleParams] = None, threshold: Optional[float] = None) -> ChangePointSet:
    """Dispatch to REA, LREA or LTEA by name"""
    if extractor == REA:
        if k is None:
            raise ValidationError("REA needs the number of change-points k")
        return rea(curve, k, nw)
    if extractor in (LREA, LTEA) and params is None:
        raise ValidationError(f"{extractor.upper()} needs rolling-window parameters")
    if extractor == LREA:
        if k is None:
            raise ValidationError("LREA needs the number of change-points k")
        return lrea(curve, k, nw, params)
    if extractor == LTEA:
        return ltea(curve, params, threshold, nw)
    raise ValidationError(f"unknown extractor '{extractor}', expected one of {EXTRACTORS}")


class OnlineLtea:
    """Causal LTEA over a curve that grows one finalized position at a time.

    A valley's minimum becomes a candidate when the valley closes. The
    candidate is decided once the curve has advanced `horizon` positions past
    it and no valley that is still open starts within `radius` of it: it is
    emitted unless an emitted point or a deeper undecided candidate lies
    within `radius`. Decisions depend only on the values fed so far, so any
    chunking of the same curve emits the same points.
    """

    def __init__(self, threshold: float, radius: int, horizon: int):
        self.threshold = check_threshold(threshold)
        self.radius = int(radius)
        self.horizon = max(int(horizon), self.radius)
        self.position = 0
        self.emitted = []
        self._pending = []
        self._open = None

    def _decide(self, t: int):
        new = []
        while self._pending:
            p, depth = self._pending[0]
            if t < p + self.horizon:
                break
            if self._open is not None and self._open[0] <= p + self.radius:
                break
            self._pending.pop(0)
            near_emitted = any(abs(p - e) <= self.radius for e in self.emitted)
            deeper = any(q - p <= self.radius and (d, q) < (depth, p) for q, d in self._pending)
            if not near_emitted and not deeper:
                self.emitted.append(p)
                new.append(p)
        return new

    def feed(self, values) -> list:
        """Consume the next finalized scaled values; returns newly emitted positions"""
        new = []
        for v in np.asarray(values, dtype=np.float64):
            t = self.position
            if v <= self.threshold:
                if self._open is None:
                    self._open = [t, t, v]
                elif v < self._open[2]:
                    self._open[1], self._open[2] = t, v
            elif self._open is not None:
                self._pending.append((self._open[1], self._open[2]))
                self._open = None
            new.extend(self._decide(t))
            self.position += 1
        return new


def online_ltea(curve: Union[Cac, np.ndarray], params: RollingScaleParams, threshold: Optional[float] = None,
                nw: int = 1, exclusion: Optional[int] = None) -> ChangePointSet:
    """Everything OnlineLtea emits when fed the whole trailing-scaled curve at once"""
    threshold = Config.LTEA_THRESHOLD if threshold is None else float(threshold)
    extractor = OnlineLtea(threshold, _radius(nw, exclusion), params.local_window)
    extractor.feed(scale_cac(curve, params))
    return ChangePointSet(extractor.emitted, LTEA)
