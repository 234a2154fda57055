import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.preprocessing import MinMaxScaler, RobustScaler, StandardScaler

from config import Config
from errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)

SCALER_KINDS = ('none', 'standard', 'minmax', 'robust')


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Channel-major multichannel series: data has shape (nc, n)"""
    data: np.ndarray
    sample_rate_hz: Optional[float] = None
    channel_names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[np.newaxis, :]
        if data.ndim != 2:
            raise ShapeError(f"time series must be 1-D or 2-D, got {data.ndim} dimensions")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValidationError(f"time series needs at least one channel and one sample, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            bad = np.argwhere(~np.isfinite(data))[0]
            raise ValidationError(f"non-finite sample in channel {bad[0]} at index {bad[1]}")
        if self.sample_rate_hz is not None and not self.sample_rate_hz > 0:
            raise ValidationError(f"sample rate must be positive, got {self.sample_rate_hz}")
        names = self.channel_names
        if names is not None:
            names = tuple(str(c) for c in names)
            if len(names) != data.shape[0]:
                raise ShapeError(f"{len(names)} channel names for {data.shape[0]} channels")
        object.__setattr__(self, 'data', _readonly(data))
        object.__setattr__(self, 'channel_names', names)

    @property
    def nc(self) -> int:
        return self.data.shape[0]

    @property
    def n(self) -> int:
        return self.data.shape[1]

    def channel(self, c: int) -> np.ndarray:
        return self.data[c]

    def slice(self, start: int, stop: int) -> 'TimeSeries':
        """Return samples [start, stop) as a new series with the same metadata"""
        return TimeSeries(self.data[:, start:stop], self.sample_rate_hz, self.channel_names)


@dataclass(frozen=True, eq=False)
class SubsequenceSet:
    """Sliding windows of length m taken every `step` samples from a series"""
    source: TimeSeries
    m: int
    step: int = 1

    @property
    def count(self) -> int:
        return (self.source.n - self.m) // self.step + 1

    @property
    def windows(self) -> np.ndarray:
        """Read-only view of shape (count, nc, m); window i covers samples [i*step, i*step + m)"""
        view = sliding_window_view(self.source.data, self.m, axis=1)[:, ::self.step, :]
        return view.transpose(1, 0, 2)

    def starts(self) -> np.ndarray:
        return np.arange(self.count) * self.step

    def __len__(self) -> int:
        return self.count


def window_all(ts: TimeSeries, m: int, step: int = 1) -> SubsequenceSet:
    """Extract every length-m window at the given step"""
    if step < 1:
        raise ValidationError(f"step must be a positive integer, got {step}")
    if m < 1 or m > ts.n:
        raise ValidationError(f"invalid window: m={m} for a series of length {ts.n}")
    return SubsequenceSet(ts, int(m), int(step))


@dataclass(frozen=True, eq=False)
class ScalerParams:
    """Per-channel location/scale statistics fitted on training data"""
    kind: str
    center: np.ndarray
    scale: np.ndarray
    per_channel_stats: Tuple[Dict[str, float], ...] = field(default=())
    fitted_on: str = ''

    @property
    def nc(self) -> int:
        return len(self.center)


def fit_scaler(kind: str, train: TimeSeries, fitted_on: str = '', eps: Optional[float] = None) -> ScalerParams:
    """Fit scaler statistics independently per channel on the training series"""
    if kind not in SCALER_KINDS:
        raise ValidationError(f"unknown scaler kind '{kind}', expected one of {SCALER_KINDS}")
    eps = Config.SCALER_EPS if eps is None else eps
    X = train.data.T  # samples x channels, the layout scikit-learn expects

    if kind == 'none':
        center = np.zeros(train.nc)
        scale = np.ones(train.nc)
        stats = tuple({} for _ in range(train.nc))
    elif kind == 'standard':
        scaler = StandardScaler().fit(X)
        center = scaler.mean_.copy()
        std = np.sqrt(scaler.var_)  # population std (ddof=0)
        scale = np.maximum(std, eps)
        stats = tuple({'mean': float(mu), 'std': float(sd)} for mu, sd in zip(center, std))
    elif kind == 'minmax':
        scaler = MinMaxScaler().fit(X)
        center = scaler.data_min_.copy()
        scale = np.maximum(scaler.data_range_, eps)
        stats = tuple({'min': float(lo), 'max': float(hi)}
                      for lo, hi in zip(scaler.data_min_, scaler.data_max_))
    else:
        scaler = RobustScaler(quantile_range=(25.0, 75.0)).fit(X)
        center = scaler.center_.copy()
        # RobustScaler replaces a zero IQR by 1; the raw IQR is needed for the eps floor
        q25, q75 = np.percentile(X, [25.0, 75.0], axis=0)
        iqr = q75 - q25
        scale = np.maximum(iqr, eps)
        stats = tuple({'median': float(med), 'q25': float(a), 'q75': float(b)}
                      for med, a, b in zip(center, q25, q75))

    logger.debug(f"Fitted {kind} scaler on {train.nc} channels ({fitted_on or 'unnamed'})")
    return ScalerParams(kind, _readonly(np.asarray(center, dtype=np.float64)),
                        _readonly(np.asarray(scale, dtype=np.float64)), stats, fitted_on)


def _check_channels(params: ScalerParams, ts: TimeSeries):
    if params.nc != ts.nc:
        raise ShapeError(f"scaler fitted on {params.nc} channels applied to {ts.nc} channels")


def apply_scaler(params: ScalerParams, ts: TimeSeries) -> TimeSeries:
    """Apply (x - center) / scale channel by channel"""
    _check_channels(params, ts)
    if params.kind == 'none':
        return TimeSeries(ts.data.copy(), ts.sample_rate_hz, ts.channel_names)
    scaled = (ts.data - params.center[:, np.newaxis]) / params.scale[:, np.newaxis]
    return TimeSeries(scaled, ts.sample_rate_hz, ts.channel_names)


def inverse_scaler(params: ScalerParams, ts: TimeSeries) -> TimeSeries:
    """Undo apply_scaler"""
    _check_channels(params, ts)
    if params.kind == 'none':
        return TimeSeries(ts.data.copy(), ts.sample_rate_hz, ts.channel_names)
    restored = ts.data * params.scale[:, np.newaxis] + params.center[:, np.newaxis]
    return TimeSeries(restored, ts.sample_rate_hz, ts.channel_names)


def concatenate(series: List[TimeSeries]) -> TimeSeries:
    """Join series along time; used to fit scalers on a whole training split"""
    if not series:
        raise ValidationError("nothing to concatenate")
    first = series[0]
    if any(s.nc != first.nc for s in series):
        raise ShapeError("cannot concatenate series with different channel counts")
    return TimeSeries(np.concatenate([s.data for s in series], axis=1),
                      first.sample_rate_hz, first.channel_names)
