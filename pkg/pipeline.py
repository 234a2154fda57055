import logging
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from arc import Cac, arc_curve, cac, correct_counts, crossing_counts, iac_segment, idealized_arc_curve, mean_cac
from autoenc import ARCH_KINDS, CONVOLUTIONAL, AeModel, encode_batch
from config import Config
from core import SCALER_KINDS, ScalerParams, TimeSeries, apply_scaler, fit_scaler, window_all
from errors import ShapeError, ValidationError
from extract import (CENTERED, EXTRACTORS, LREA, LTEA, REA, TRAILING, ChangePointSet, OnlineLtea,
                     RollingScaleParams, TrailingScaler, check_threshold, lfmd_extract, online_ltea, run_extractor)
from lsmp import LsmpState, batched_collapse, collapse, encode_all, pair_distances
from matprof import BIDIRECTIONAL, FORWARD, ProfilePair, StreamingProfile, exclusion_radius, stamp

logger = logging.getLogger(__name__)

FLUSS = 'fluss'
FLUSS_EPS = 'fluss_eps'
FLOSS = 'floss'
LFMD = 'lfmd'
LSUSS = 'lsuss'
LSUSS_ONLINE = 'lsuss_online'
LSUSS_EPS = 'lsuss_eps'
ALGORITHMS = (FLUSS, FLUSS_EPS, FLOSS, LFMD, LSUSS, LSUSS_ONLINE, LSUSS_EPS)
STREAMING = (FLUSS_EPS, FLOSS, LSUSS_ONLINE, LSUSS_EPS)
NEEDS_MODEL = (LFMD, LSUSS, LSUSS_ONLINE, LSUSS_EPS)
NEEDS_TC = (FLUSS_EPS, FLOSS, LSUSS, LSUSS_ONLINE, LSUSS_EPS)
MATRIX_PROFILE = (FLUSS, FLUSS_EPS, FLOSS)
IAC_CHUNK = 4096  # minimum positions per cached streaming IAC segment


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one segmentation run needs apart from the data and the model"""
    algorithm: str
    nw: int
    tc: Optional[int] = None
    step: Optional[int] = None
    scaler: str = 'none'
    arch: str = 'fc'
    extractor: Optional[str] = None
    k: Optional[int] = None
    local_window: Optional[int] = None
    rolling_mode: Optional[str] = None
    threshold: float = Config.LTEA_THRESHOLD
    epsilon_batch: int = 1
    t_lim: Optional[int] = None
    seed: int = Config.SEED
    n_trials: Optional[int] = None
    threads: Optional[int] = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValidationError(f"unknown algorithm '{self.algorithm}', expected one of {ALGORITHMS}")
        if self.nw < 2:
            raise ValidationError(f"window length nw must be at least 2, got {self.nw}")
        if self.algorithm in NEEDS_TC and self.tc is None:
            raise ValidationError(f"{self.algorithm} needs a temporal constraint (tc)")
        if self.tc is not None and self.tc < 1:
            raise ValidationError(f"temporal constraint must be positive, got {self.tc}")
        if self.step is not None and self.step < 1:
            raise ValidationError(f"step must be a positive integer, got {self.step}")
        if self.scaler not in SCALER_KINDS:
            raise ValidationError(f"unknown scaler kind '{self.scaler}', expected one of {SCALER_KINDS}")
        if self.arch not in ARCH_KINDS:
            raise ValidationError(f"unknown architecture '{self.arch}', expected one of {ARCH_KINDS}")
        if self.algorithm in NEEDS_MODEL and self.arch == CONVOLUTIONAL and self.nw % 4:
            raise ValidationError(f"convolutional autoencoder needs nw divisible by 4, got nw={self.nw}")
        if self.extractor is not None and self.extractor not in EXTRACTORS:
            raise ValidationError(f"unknown extractor '{self.extractor}', expected one of {EXTRACTORS}")
        if self.k is not None and self.k < 1:
            raise ValidationError(f"k must be at least 1, got {self.k}")
        if self.local_window is not None and self.local_window < 2:
            raise ValidationError(f"local window must be at least 2, got {self.local_window}")
        if self.rolling_mode is not None and self.rolling_mode not in (CENTERED, TRAILING):
            raise ValidationError(f"rolling mode must be '{CENTERED}' or '{TRAILING}', got '{self.rolling_mode}'")
        check_threshold(self.threshold)
        if self.epsilon_batch < 1:
            raise ValidationError(f"epsilon_batch must be at least 1, got {self.epsilon_batch}")
        if self.t_lim is not None and self.tc is not None and self.t_lim <= 2 * self.tc:
            raise ValidationError(f"batch length t_lim={self.t_lim} must exceed 2*tc={2 * self.tc}")

        chosen = self.resolved_extractor
        if chosen in (REA, LREA) and self.k is None:
            raise ValidationError(f"{chosen.upper()} needs the number of change-points k")
        if chosen in (LREA, LTEA) and self.local_window is None:
            raise ValidationError(f"{chosen.upper()} needs a local window")

    @property
    def resolved_extractor(self) -> str:
        """Explicit choice, else LREA/REA when k is known and LTEA otherwise"""
        if self.extractor is not None:
            return self.extractor
        if self.k is None:
            return LTEA
        return LREA if self.local_window is not None else REA

    @property
    def direction(self) -> str:
        return FORWARD if self.algorithm in (FLOSS, LSUSS_ONLINE) else BIDIRECTIONAL

    @property
    def rolling_params(self) -> Optional[RollingScaleParams]:
        if self.local_window is None:
            return None
        mode = self.rolling_mode or (TRAILING if self.algorithm in STREAMING else CENTERED)
        return RollingScaleParams(self.local_window, mode)

    @property
    def lfmd_step(self) -> int:
        return self.step if self.step is not None else max(1, self.nw // 2)

    @property
    def lag(self) -> int:
        """Windows a streaming profile row waits for before its arcs are final"""
        tc = self.tc or 0
        return tc if self.direction == FORWARD else 2 * tc

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict) -> 'PipelineConfig':
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValidationError(f"unknown pipeline settings: {', '.join(unknown)}")
        return cls(**values)


def finalized_length(window_count: int, cfg: PipelineConfig) -> int:
    """CAC positions a stream of window_count windows has settled for good"""
    return max(0, window_count - cfg.lag - cfg.nw)


def _scaled(ts: TimeSeries, cfg: PipelineConfig, scaler: Optional[ScalerParams]) -> TimeSeries:
    params = scaler if scaler is not None else fit_scaler(cfg.scaler, ts, fitted_on='input series')
    return apply_scaler(params, ts)


def _check_model(model: Optional[AeModel], nc: int, cfg: PipelineConfig):
    if model is None:
        raise ValidationError(f"{cfg.algorithm} needs a trained autoencoder")
    if model.arch.nc != nc or model.arch.nw != cfg.nw:
        raise ShapeError(f"model expects {model.arch.nc} channels x {model.arch.nw} samples, "
                         f"run has {nc} channels x nw={cfg.nw}")
    if model.arch.kind != cfg.arch:
        raise ValidationError(f"model is a '{model.arch.kind}' autoencoder, configuration says '{cfg.arch}'")


def profile_cac(pair: ProfilePair, cfg: PipelineConfig) -> Cac:
    """Arc curve of a profile corrected by the matching idealized curve, edges pinned over nw"""
    ac = arc_curve(pair.index, pair.direction, pair.tc)
    iac = idealized_arc_curve(len(pair), pair.direction, pair.tc, cfg.n_trials, cfg.seed, pair.exclusion)
    return cac(ac, iac, edge_guard=cfg.nw)


def _extract(curve: Cac, cfg: PipelineConfig) -> ChangePointSet:
    extractor = cfg.resolved_extractor
    if cfg.algorithm in STREAMING and extractor == LTEA:
        settled = curve.values[:finalized_length(len(curve), cfg)]
        return online_ltea(settled, cfg.rolling_params, cfg.threshold, cfg.nw)
    return run_extractor(curve, extractor, cfg.nw, cfg.k, cfg.rolling_params, cfg.threshold)


def _channel_cacs(ts: TimeSeries, cfg: PipelineConfig, scaler: Optional[ScalerParams]) -> Cac:
    data = _scaled(ts, cfg, scaler)
    if data.n < 2 * cfg.nw:
        raise ValidationError(f"series of length {data.n} is shorter than 2*nw = {2 * cfg.nw}")
    curves = []
    for c in range(data.nc):
        pair = stamp(data.channel(c), cfg.nw, cfg.tc, cfg.direction, cfg.threads)
        curves.append(profile_cac(pair, cfg))
        logger.debug(f"Channel {c}: CAC minimum {float(np.min(curves[-1].values)):.4f}")
    return mean_cac(curves)


def run_fluss(ts: TimeSeries, cfg: PipelineConfig,
              scaler: Optional[ScalerParams] = None) -> Tuple[Cac, ChangePointSet]:
    """FLUSS: per-channel bidirectional matrix profiles, CACs averaged across channels.

    fluss_eps configurations give the whole-recording equivalent of the
    ε-real-time stream: tc-constrained profiles, and LTEA only sees the part
    of the curve a stream would have settled.
    """
    if cfg.algorithm not in (FLUSS, FLUSS_EPS):
        raise ValidationError(f"run_fluss got a '{cfg.algorithm}' configuration")
    curve = _channel_cacs(ts, cfg, scaler)
    found = _extract(curve, cfg)
    logger.info(f"FLUSS on {ts.nc}x{ts.n}: {len(found)} change-points via {cfg.resolved_extractor}")
    return curve, found


def run_floss(ts: TimeSeries, cfg: PipelineConfig,
              scaler: Optional[ScalerParams] = None) -> Tuple[Cac, ChangePointSet]:
    """FLOSS over a whole recording: forward-only constrained profiles and the one-directional IAC"""
    if cfg.algorithm != FLOSS:
        raise ValidationError(f"run_floss got a '{cfg.algorithm}' configuration")
    curve = _channel_cacs(ts, cfg, scaler)
    found = _extract(curve, cfg)
    logger.info(f"FLOSS on {ts.nc}x{ts.n}: {len(found)} change-points via {cfg.resolved_extractor}")
    return curve, found


def run_lfmd(ts: TimeSeries, cfg: PipelineConfig, model: AeModel,
             scaler: Optional[ScalerParams] = None) -> Tuple[np.ndarray, ChangePointSet]:
    """Latent distance between adjacent windows; its local maxima are the change-points"""
    if cfg.algorithm != LFMD:
        raise ValidationError(f"run_lfmd got a '{cfg.algorithm}' configuration")
    data = _scaled(ts, cfg, scaler)
    _check_model(model, data.nc, cfg)
    step = cfg.lfmd_step
    subs = window_all(data, cfg.nw, step)
    if subs.count < 2:
        raise ValidationError(f"LFMD needs at least 2 windows, got {subs.count}")
    latents = encode_batch(model, subs)
    curve = pair_distances(latents[:-1], latents[1:])
    found = lfmd_extract(curve, cfg.nw, step, cfg.nw, cfg.k, cfg.rolling_params, cfg.threshold, cfg.extractor)
    logger.info(f"LFMD on {ts.nc}x{ts.n} with step {step}: {len(found)} change-points")
    return curve, found


def lsuss_profile(ts: TimeSeries, cfg: PipelineConfig, model: AeModel, scaler: Optional[ScalerParams] = None,
                  meter: Optional[Dict[str, int]] = None) -> ProfilePair:
    """Scale, encode every window and collapse the constrained latent distance matrix"""
    if cfg.algorithm not in (LSUSS, LSUSS_ONLINE, LSUSS_EPS):
        raise ValidationError(f"latent profiles need an lsuss configuration, got '{cfg.algorithm}'")
    data = _scaled(ts, cfg, scaler)
    _check_model(model, data.nc, cfg)
    latents = encode_all(model, window_all(data, cfg.nw))
    excl = exclusion_radius(cfg.nw)
    if cfg.t_lim is not None:
        return batched_collapse(latents, cfg.t_lim, cfg.tc, excl, cfg.direction, meter)
    return collapse(latents, cfg.tc, cfg.direction, excl)


def run_lsuss(ts: TimeSeries, cfg: PipelineConfig, model: AeModel, scaler: Optional[ScalerParams] = None,
              meter: Optional[Dict[str, int]] = None) -> Tuple[Cac, ChangePointSet]:
    """LS-USS over a whole recording.

    The scaled all-subsequence set is encoded, its temporally constrained
    latent distance matrix is collapsed (in batches when cfg.t_lim is set)
    and the arc curve of the resulting index is corrected and searched for
    valleys. lsuss_online configurations run the forward-only variant.
    """
    pair = lsuss_profile(ts, cfg, model, scaler, meter)
    curve = profile_cac(pair, cfg)
    found = _extract(curve, cfg)
    logger.info(f"LS-USS ({cfg.direction}) on {ts.nc}x{ts.n}: {len(found)} change-points "
                f"via {cfg.resolved_extractor}")
    return curve, found


def run_pipeline(ts: TimeSeries, cfg: PipelineConfig, model: Optional[AeModel] = None,
                 scaler: Optional[ScalerParams] = None) -> Tuple[np.ndarray, ChangePointSet]:
    """Dispatch on cfg.algorithm; returns the curve values and the change-points"""
    if cfg.algorithm in (FLUSS, FLUSS_EPS):
        curve, found = run_fluss(ts, cfg, scaler)
    elif cfg.algorithm == FLOSS:
        curve, found = run_floss(ts, cfg, scaler)
    elif cfg.algorithm == LFMD:
        return run_lfmd(ts, cfg, model, scaler)
    else:
        curve, found = run_lsuss(ts, cfg, model, scaler)
    return curve.values, found


@dataclass
class SegmentUpdate:
    """What one processed ε-batch settled"""
    samples_seen: int
    start: int
    cac_values: np.ndarray
    new_points: List[int]
    emitted: Tuple[int, ...]

    @property
    def finalized(self) -> int:
        return self.start + len(self.cac_values)


class StreamingSegmenter:
    """ε-real-time segmentation of a growing stream.

    Samples are buffered until cfg.epsilon_batch have arrived, then scaled,
    turned into matrix-profile rows (floss, fluss_eps) or latent vectors
    (lsuss_online, lsuss_eps), and the CAC prefix whose arcs can no longer
    change is extended. The settled positions are scaled with a trailing
    window and fed to a causal LTEA, so emitted points are never retracted
    and do not depend on the batch size.

    State is bounded: index rows more than tc behind the settled prefix are
    dropped, the IAC is drawn in cached segments and the settled CAC itself
    is handed out through the updates rather than kept.
    """

    def __init__(self, cfg: PipelineConfig, nc: int, model: Optional[AeModel] = None,
                 scaler: Optional[ScalerParams] = None):
        if cfg.algorithm not in STREAMING:
            raise ValidationError(f"'{cfg.algorithm}' has no streaming mode, expected one of {STREAMING}")
        if cfg.resolved_extractor != LTEA:
            raise ValidationError("streaming runs extract with LTEA; leave k unset")
        params = cfg.rolling_params
        if params.mode != TRAILING:
            raise ValidationError("streaming runs scale the CAC with a trailing window")
        if scaler is None:
            if cfg.scaler != 'none':
                raise ValidationError(f"streaming with the '{cfg.scaler}' scaler needs statistics fitted beforehand")
            scaler = fit_scaler('none', TimeSeries(np.zeros((nc, 1))))
        if scaler.nc != nc:
            raise ShapeError(f"scaler fitted on {scaler.nc} channels, stream has {nc}")

        self.cfg = cfg
        self.nc = nc
        self.scaler = scaler
        self.params = params
        self.samples_seen = 0
        self.settled = 0
        self.exclusion = exclusion_radius(cfg.nw)
        if cfg.algorithm in MATRIX_PROFILE:
            self.profiles = [StreamingProfile(cfg.nw, cfg.tc, cfg.direction) for _ in range(nc)]
            self._rows = [np.empty(0, dtype=np.int64) for _ in range(nc)]
            self._row_base = 0
            self.state = None
        else:
            _check_model(model, nc, cfg)
            self.model = model
            self.profiles = None
            self.state = LsmpState(cfg.tc, cfg.direction, self.exclusion, batch_len=1, m=cfg.nw)
            self._tail = np.empty((nc, 0))
        self._buffer = []
        self._buffered = 0
        self._iac_chunk = max(IAC_CHUNK, 4 * cfg.tc)
        self._iac = {}
        self._scaling = TrailingScaler(params)
        self._extractor = OnlineLtea(cfg.threshold, Config.EXCLUSION_FACTOR * cfg.nw, params.local_window)

    @property
    def emitted(self) -> ChangePointSet:
        return ChangePointSet(self._extractor.emitted, LTEA)

    @property
    def retained_rows(self) -> int:
        """Index rows currently held per channel"""
        if self.state is not None:
            return len(self.state.index)
        return len(self._rows[0])

    def push(self, samples: np.ndarray) -> Optional[SegmentUpdate]:
        """Buffer samples of shape (nc, k); processes the buffer once it holds epsilon_batch samples"""
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[np.newaxis, :]
        if samples.shape[0] != self.nc:
            raise ShapeError(f"stream has {self.nc} channels, got a chunk of shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValidationError(f"non-finite sample after {self.samples_seen + self._buffered} samples")
        if samples.shape[1] == 0:
            return None
        self._buffer.append(samples)
        self._buffered += samples.shape[1]
        if self._buffered < self.cfg.epsilon_batch:
            return None
        return self.flush()

    def flush(self) -> Optional[SegmentUpdate]:
        """Process whatever is buffered"""
        if not self._buffer:
            return None
        batch = np.hstack(self._buffer)
        self._buffer = []
        self._buffered = 0
        return self._process(batch)

    def _add_windows(self, scaled: np.ndarray) -> int:
        """Feed new samples to the per-channel profiles or the latent state; returns the window count"""
        if self.profiles is not None:
            for c, profile in enumerate(self.profiles):
                _, index = profile.extend(scaled[c])
                self._rows[c] = np.concatenate([self._rows[c], index])
            return self.profiles[0].window_count

        nw = self.cfg.nw
        data = np.hstack([self._tail, scaled])
        if data.shape[1] >= nw:
            windows = sliding_window_view(data, nw, axis=1).transpose(1, 0, 2)
            self.state.append(encode_batch(self.model, windows))
        self._tail = data[:, data.shape[1] - (nw - 1):] if data.shape[1] >= nw - 1 else data
        return self.state.count

    def _index_rows(self) -> Tuple[int, List[np.ndarray]]:
        if self.state is not None:
            return self.state.base, [self.state.index]
        return self._row_base, self._rows

    def _release(self, upto: int):
        """Drop index rows that no arc reaching position `upto` or later can come from"""
        if upto <= 0:
            return
        if self.state is not None:
            self.state.release(upto)
            return
        drop = upto - self._row_base
        if drop > 0:
            self._rows = [rows[drop:] for rows in self._rows]
            self._row_base = upto

    def _iac_values(self, start: int, target: int) -> np.ndarray:
        """IAC at positions [start, target), drawn in fixed segments that are cached until passed"""
        size = self._iac_chunk
        first, last = start // size, (target - 1) // size
        for k in [k for k in self._iac if k < first]:
            del self._iac[k]
        parts = []
        for k in range(first, last + 1):
            if k not in self._iac:
                self._iac[k] = iac_segment(k * size, (k + 1) * size, self.cfg.direction, self.cfg.tc,
                                           self.cfg.n_trials, self.cfg.seed, self.exclusion)
                logger.debug(f"Streaming IAC segment {k} drawn for positions [{k * size}, {(k + 1) * size})")
            parts.append(self._iac[k])
        joined = np.concatenate(parts)
        return joined[start - first * size:target - first * size]

    def _process(self, batch: np.ndarray) -> SegmentUpdate:
        scaled = apply_scaler(self.scaler, TimeSeries(batch)).data
        self.samples_seen += batch.shape[1]
        window_count = self._add_windows(scaled)

        start = self.settled
        target = finalized_length(window_count, self.cfg)
        new_points = []
        values = np.empty(0)
        if target > start:
            iac = self._iac_values(start, target)
            first_row, indices = self._index_rows()
            guard = self.cfg.nw
            total = None
            for index in indices:
                counts = crossing_counts(index, target, lo=start, first_row=first_row)
                part = correct_counts(counts, iac)
                if start < guard:
                    part[:guard - start] = 1.0
                if total is None:
                    total = part.copy()
                else:
                    total += part
            values = total / len(indices)
            self.settled = target
            self._release(target - self.cfg.tc)
            new_points = self._extractor.feed(self._scaling.feed(values))
            for p in new_points:
                logger.info(f"Change-point at {p} emitted after {self.samples_seen} samples")

        return SegmentUpdate(self.samples_seen, start, values, new_points, tuple(self._extractor.emitted))


def _chunks(stream: Union[TimeSeries, Iterable[np.ndarray]], size: int) -> Iterator[np.ndarray]:
    if isinstance(stream, TimeSeries):
        for s in range(0, stream.n, size):
            yield stream.data[:, s:s + size]
    else:
        yield from stream


def replay(segmenter: StreamingSegmenter, stream: Union[TimeSeries, Iterable[np.ndarray]],
           chunk: Optional[int] = None) -> Iterator[SegmentUpdate]:
    """Feed a recording or an iterable of chunks; yields an update per processed batch"""
    for part in _chunks(stream, chunk or segmenter.cfg.epsilon_batch):
        update = segmenter.push(part)
        if update is not None:
            yield update
    update = segmenter.flush()
    if update is not None:
        yield update


def run_lsuss_online(stream: Union[TimeSeries, Iterable[np.ndarray]], cfg: PipelineConfig, model: AeModel,
                     scaler: Optional[ScalerParams] = None) -> Iterator[SegmentUpdate]:
    """LS-USS Online (forward-only) or ε-real-time LS-USS (bidirectional) over a stream"""
    if cfg.algorithm not in (LSUSS_ONLINE, LSUSS_EPS):
        raise ValidationError(f"run_lsuss_online got a '{cfg.algorithm}' configuration")
    segmenter = StreamingSegmenter(cfg, model.arch.nc, model, scaler)
    return replay(segmenter, stream)


def _stream_profiles(stream: Union[TimeSeries, Iterable[np.ndarray]], cfg: PipelineConfig,
                     scaler: Optional[ScalerParams], nc: Optional[int], caller: str) -> Iterator[SegmentUpdate]:
    if nc is None:
        if not isinstance(stream, TimeSeries):
            raise ValidationError(f"{caller} needs the channel count for a chunk iterable")
        nc = stream.nc
    segmenter = StreamingSegmenter(cfg, nc, scaler=scaler)
    return replay(segmenter, stream)


def stream_floss(stream: Union[TimeSeries, Iterable[np.ndarray]], cfg: PipelineConfig,
                 scaler: Optional[ScalerParams] = None, nc: Optional[int] = None) -> Iterator[SegmentUpdate]:
    """FLOSS over a stream; nc is read from the recording when a TimeSeries is given"""
    if cfg.algorithm != FLOSS:
        raise ValidationError(f"stream_floss got a '{cfg.algorithm}' configuration")
    return _stream_profiles(stream, cfg, scaler, nc, 'stream_floss')


def stream_fluss(stream: Union[TimeSeries, Iterable[np.ndarray]], cfg: PipelineConfig,
                 scaler: Optional[ScalerParams] = None, nc: Optional[int] = None) -> Iterator[SegmentUpdate]:
    """ε-real-time FLUSS: bidirectional tc-constrained profiles, settled 2*tc + nw windows behind the stream"""
    if cfg.algorithm != FLUSS_EPS:
        raise ValidationError(f"stream_fluss got a '{cfg.algorithm}' configuration")
    return _stream_profiles(stream, cfg, scaler, nc, 'stream_fluss')
