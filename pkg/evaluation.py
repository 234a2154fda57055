import itertools
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from autoenc import CONVOLUTIONAL, FULLY_CONNECTED, AeModel, TrainConfig, build_arch, init_model, train
from config import Config
from core import ScalerParams, apply_scaler, concatenate, fit_scaler, window_all
from errors import LsussError, ValidationError
from extract import LREA, LTEA, REA, ChangePointSet
from pipeline import ALGORITHMS, LFMD, NEEDS_MODEL, PipelineConfig, run_pipeline

logger = logging.getLogger(__name__)

SCORE_REGIMES = 'score_regimes'
PREDICTION_LOSS_MAE = 'prediction_loss_mae'
LITERAL = 'literal'
OFFSET = 'offset'
OFFLINE = 'offline'
ONLINE = 'online'


@dataclass
class EvalResult:
    """A metric value together with the ground-truth to prediction pairing behind it"""
    metric: str
    value: float
    n: Optional[int]
    n_gt: int
    n_pred: int
    pairing: List[Tuple[int, Optional[int], int]]

    def to_dict(self) -> Dict:
        return {
            'metric': self.metric,
            'value': float(self.value),
            'n': self.n,
            'n_gt': self.n_gt,
            'n_pred': self.n_pred,
            'pairing': [[g, p, d] for g, p, d in self.pairing],
        }


def _pairing(pred: ChangePointSet, gt: ChangePointSet, penalty: Optional[int]):
    """Each ground-truth point with its nearest prediction (ties to the earlier one)"""
    predicted = pred.indices
    out = []
    for g in gt.tolist():
        if len(predicted) == 0:
            out.append((g, None, int(penalty)))
            continue
        gaps = np.abs(predicted - g)
        j = int(np.argmin(gaps))
        out.append((g, int(predicted[j]), int(gaps[j])))
    return out


def score_regimes(pred: ChangePointSet, gt: ChangePointSet, n: int) -> EvalResult:
    """Summed distance from every true change-point to its nearest prediction, over N_GT * n"""
    if len(gt) == 0:
        raise ValidationError("score_regimes needs at least one ground-truth change-point")
    if n < 1:
        raise ValidationError(f"series length must be positive, got {n}")
    if len(pred) == 0:
        logger.warning(f"Empty prediction set: every ground-truth point scored at penalty distance {n}")
    pairing = _pairing(pred, gt, n)
    value = sum(d for _, _, d in pairing) / (len(gt) * n)
    return EvalResult(SCORE_REGIMES, value, n, len(gt), len(pred), pairing)


def prediction_loss_mae(pred: ChangePointSet, gt: ChangePointSet, n: Optional[int] = None,
                        weighting: str = LITERAL) -> EvalResult:
    """MAE to the nearest prediction weighted by how far the predicted count is off.

    The literal weighting is |1 - N_pred/N_GT|, which is zero whenever the
    counts agree. The offset weighting (1 + |1 - N_pred/N_GT|) keeps the
    MAE term in that case.
    """
    if len(gt) == 0:
        raise ValidationError("prediction_loss_mae needs at least one ground-truth change-point")
    if weighting not in (LITERAL, OFFSET):
        raise ValidationError(f"unknown weighting '{weighting}', expected '{LITERAL}' or '{OFFSET}'")
    if len(pred) == 0:
        if n is None:
            raise ValidationError("an empty prediction set needs the series length for its penalty")
        logger.warning(f"Empty prediction set: MAE uses penalty distance {n}")
    pairing = _pairing(pred, gt, n)
    mae = float(np.mean([d for _, _, d in pairing]))
    ratio_error = abs(1.0 - len(pred) / len(gt))
    weight = ratio_error if weighting == LITERAL else 1.0 + ratio_error
    return EvalResult(PREDICTION_LOSS_MAE, weight * mae, n, len(gt), len(pred), pairing)


def local_window_from_train(gt_sets: Sequence[ChangePointSet]) -> int:
    """Mean gap between consecutive change-points, pooled over all training series"""
    gaps = [np.diff(gt.indices) for gt in gt_sets if len(gt) >= 2]
    if not gaps:
        raise ValidationError("no training series has two change-points to measure a gap")
    mean_gap = float(np.mean(np.concatenate(gaps)))
    return int(np.floor(mean_gap + 0.5))


@dataclass
class GridSpec:
    """Named axes whose cartesian product is searched, optionally capped by a seeded budget"""
    axes: Dict[str, List]
    budget: Optional[int] = None
    seed: int = Config.SEED

    def __post_init__(self):
        if not self.axes or any(len(values) == 0 for values in self.axes.values()):
            raise ValidationError("grid is empty: every axis needs at least one value")
        if self.budget is not None and self.budget < 1:
            raise ValidationError(f"grid budget must be at least 1, got {self.budget}")

    @property
    def size(self) -> int:
        return int(np.prod([len(v) for v in self.axes.values()]))

    def configs(self) -> List[Dict]:
        names = sorted(self.axes)
        combos = [dict(zip(names, values)) for values in itertools.product(*(self.axes[k] for k in names))]
        if self.budget is None or self.budget >= len(combos):
            return combos
        keep = np.sort(np.random.default_rng(self.seed).choice(len(combos), self.budget, replace=False))
        return [combos[i] for i in keep]


NW_GRID = [50, 100, 150, 200, 300, 400, 500]
TC_GRID = {'emg': [1000, 1500, 2000], 'uci': [800, 1200, 1600]}
STEP_GRID = [25, 50, 100, 150, 200, 250, 350, 500]
SCALER_GRID = ['none', 'standard', 'robust', 'minmax']
THRESHOLD_GRID = [-0.5, -1.0, -1.5, -2.0, -2.5, -3.0]


def hyperparameter_grid(algorithm: str, setting: str, dataset: str) -> GridSpec:
    """Search space of one algorithm in the offline or online setting on 'uci' or 'emg'"""
    if algorithm not in ALGORITHMS:
        raise ValidationError(f"no grid for algorithm '{algorithm}'")
    if setting not in (OFFLINE, ONLINE):
        raise ValidationError(f"setting must be '{OFFLINE}' or '{ONLINE}', got '{setting}'")
    if dataset not in TC_GRID:
        raise ValidationError(f"no grid for dataset '{dataset}', expected one of {sorted(TC_GRID)}")
    axes = {'scaler': SCALER_GRID, 'nw': NW_GRID}
    if algorithm != LFMD:
        axes['tc'] = TC_GRID[dataset]
    if algorithm == LFMD:
        axes['step'] = STEP_GRID
    if algorithm in NEEDS_MODEL:
        axes['arch'] = [FULLY_CONNECTED, CONVOLUTIONAL]
    if setting == OFFLINE:
        axes['extractor'] = [REA, LREA]
    else:
        axes['threshold'] = THRESHOLD_GRID
    return GridSpec(axes)


@dataclass
class GridResult:
    """Mean validation metric of one configuration"""
    config: Dict
    metric: str
    value: float
    per_series: List[float] = field(default_factory=list)
    mean_rank: Optional[float] = None
    error: Optional[str] = None
    nw_used: Optional[int] = None

    @property
    def sort_key(self):
        return self.value, json.dumps(self.config, sort_keys=True)

    def to_dict(self) -> Dict:
        return {
            'config': self.config,
            'metric': self.metric,
            'value': self.value if np.isfinite(self.value) else None,
            'per_series': [v if np.isfinite(v) else None for v in self.per_series],
            'mean_rank': self.mean_rank,
            'error': self.error,
            'nw_used': self.nw_used,
        }


def _conv_window(settings: Dict) -> Dict:
    """Grid cells pairing the convolutional autoencoder with nw not divisible by 4 run at the next lower multiple"""
    nw = settings.get('nw')
    if (settings.get('arch') == CONVOLUTIONAL and settings['algorithm'] in NEEDS_MODEL
            and isinstance(nw, int) and nw % 4):
        rounded = nw - nw % 4
        logger.warning(f"nw={nw} rounded down to {rounded} for the convolutional autoencoder")
        settings = {**settings, 'nw': rounded}
    return settings


ModelProvider = Callable[[PipelineConfig, int, Optional[ScalerParams]], AeModel]


class ModelCache:
    """Trains one autoencoder per (arch, nw, scaler) on the training split and reuses it"""

    def __init__(self, train_series, train_cfg: Optional[TrainConfig] = None):
        self.train_series = list(train_series)
        self.train_cfg = train_cfg or TrainConfig()
        self._models = {}
        self._lock = threading.Lock()

    def __call__(self, cfg: PipelineConfig, nc: int, scaler: Optional[ScalerParams]) -> AeModel:
        key = (cfg.arch, cfg.nw, cfg.scaler)
        with self._lock:
            if key not in self._models:
                if not self.train_series:
                    raise ValidationError("training an autoencoder needs a training split")
                windows = []
                for item in self.train_series:
                    ts = item.series if scaler is None else apply_scaler(scaler, item.series)
                    if ts.n >= cfg.nw:
                        windows.append(window_all(ts, cfg.nw).windows)
                if not windows:
                    raise ValidationError(f"no training series is at least nw={cfg.nw} samples long")
                model = init_model(build_arch(cfg.arch, nc, cfg.nw), seed=cfg.seed)
                logger.info(f"Training {cfg.arch} autoencoder for nw={cfg.nw}, scaler={cfg.scaler}")
                self._models[key] = train(model, np.concatenate(windows), self.train_cfg)
            return self._models[key]


class GridSearch:
    """Evaluates pipeline configurations on a validation split.

    Offline runs are told the true change-point count of each series and
    scored with score_regimes; online runs extract without it and are scored
    with prediction_loss_mae. Scalers are fitted on the whole training split
    when one is given, on each series otherwise. Cells that extract with LREA
    or LTEA and set no local window get the training split's mean
    change-point gap.
    """

    def __init__(self, validation, algorithm: str, setting: str = OFFLINE, train=None,
                 model_provider: Optional[ModelProvider] = None, threads: Optional[int] = None,
                 weighting: str = LITERAL):
        if setting not in (OFFLINE, ONLINE):
            raise ValidationError(f"setting must be '{OFFLINE}' or '{ONLINE}', got '{setting}'")
        self.validation = list(validation)
        if not self.validation:
            raise ValidationError("grid search needs a validation split")
        self.algorithm = algorithm
        self.setting = setting
        self.train = list(train or [])
        self.model_provider = model_provider
        self.threads = Config.THREADS if threads is None else threads
        self.weighting = weighting
        self.runs = 0
        self._lock = threading.Lock()
        self._scalers = {}
        self._train_window = None

    @property
    def metric(self) -> str:
        return SCORE_REGIMES if self.setting == OFFLINE else PREDICTION_LOSS_MAE

    def _scaler(self, kind: str) -> Optional[ScalerParams]:
        if not self.train:
            return None
        with self._lock:
            if kind not in self._scalers:
                joined = concatenate([item.series for item in self.train])
                self._scalers[kind] = fit_scaler(kind, joined, fitted_on='training split')
            return self._scalers[kind]

    def _needs_local_window(self, settings: Dict) -> bool:
        if settings.get('local_window') is not None:
            return False
        extractor = settings.get('extractor')
        if extractor is not None:
            return extractor in (LREA, LTEA)
        return self.setting == ONLINE

    def _local_window(self) -> int:
        with self._lock:
            if self._train_window is None:
                self._train_window = local_window_from_train([item.change_points for item in self.train])
                logger.info(f"Local window {self._train_window} from the training split's mean change-point gap")
            return self._train_window

    def _score(self, pred: ChangePointSet, gt: ChangePointSet, n: int) -> float:
        if self.setting == OFFLINE:
            return score_regimes(pred, gt, n).value
        return prediction_loss_mae(pred, gt, n, self.weighting).value

    def evaluate(self, combo: Dict, base: Optional[Dict] = None) -> GridResult:
        """Mean metric of one configuration over every validation series"""
        with self._lock:
            self.runs += 1
        settings = _conv_window({**(base or {}), **combo, 'algorithm': self.algorithm})
        if self.setting == OFFLINE:
            settings['k'] = 1  # replaced by each series' true count below
        try:
            if self._needs_local_window(settings):
                settings['local_window'] = self._local_window()
            cfg = PipelineConfig.from_dict(settings)
            scaler = self._scaler(cfg.scaler)
            values = []
            for item in self.validation:
                run_cfg = cfg
                if self.setting == OFFLINE:
                    run_cfg = replace(cfg, k=len(item.change_points))
                model = None
                if cfg.algorithm in NEEDS_MODEL:
                    if self.model_provider is None:
                        raise ValidationError(f"{cfg.algorithm} needs a model provider for grid search")
                    model = self.model_provider(cfg, item.series.nc, scaler)
                _, found = run_pipeline(item.series, run_cfg, model, scaler)
                values.append(self._score(found, item.change_points, item.series.n))
            return GridResult(combo, self.metric, float(np.mean(values)), values, nw_used=settings.get('nw'))
        except LsussError as e:
            logger.warning(f"Grid cell {combo} failed: {e}")
            return GridResult(combo, self.metric, float('inf'), error=str(e), nw_used=settings.get('nw'))

    def run(self, spec: GridSpec, base: Optional[Dict] = None) -> List[GridResult]:
        """Evaluate every grid cell (in parallel when threads > 1) and rank ascending"""
        combos = spec.configs()
        logger.info(f"Grid search for {self.algorithm} ({self.setting}): {len(combos)} of {spec.size} cells")
        if self.threads > 1 and len(combos) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(lambda c: self.evaluate(c, base), combos))
        else:
            results = [self.evaluate(c, base) for c in combos]
        _assign_mean_ranks(results, len(self.validation))
        return sorted(results, key=lambda r: r.sort_key)


def _assign_mean_ranks(results: List[GridResult], n_series: int):
    """Average per-series rank of every configuration, ties averaged, failed cells last"""
    table = pd.DataFrame([r.per_series if r.per_series else [np.inf] * n_series for r in results])
    ranks = table.rank(axis=0, method='average').mean(axis=1)
    for result, rank in zip(results, ranks):
        result.mean_rank = float(rank)


def grid_search(validation, algorithm: str, spec: GridSpec, setting: str = OFFLINE, train=None,
                base: Optional[Dict] = None, model_provider: Optional[ModelProvider] = None,
                threads: Optional[int] = None) -> List[GridResult]:
    """Rank every configuration of the grid on the validation split"""
    return GridSearch(validation, algorithm, setting, train, model_provider, threads).run(spec, base)
