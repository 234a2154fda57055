#!/usr/bin/env python3
"""
Command-line entry point for the change-point toolkit.

    python cli.py synth --out synth.csv --seed 7
    python cli.py train --data synth.csv --arch fc --nw 100 --out model.lsae
    python cli.py segment --data synth.csv --algorithm lsuss --nw 100 --tc 400 --k 1 --model model.lsae
    python cli.py stream --data synth.csv --algorithm floss --nw 100 --tc 400 --local-window 500
    python cli.py eval --pred out.cps --gt synth.cps --n 1000
    python cli.py gridsearch --data dataset/ --algorithm fluss --grid grid.json --out ranked.json
"""

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from autoenc import ARCH_KINDS, TrainConfig, build_arch, init_model, load_model, save_model, train
from config import Config
from core import SCALER_KINDS, apply_scaler, concatenate, fit_scaler, window_all
from datasets import (SynthSpec, generate_synthetic, load_dataset, load_delimited, load_emg_3dc, load_uci_har,
                      read_change_points, write_change_points, write_curve, write_delimited, write_results)
from errors import DataError, LsussError, ValidationError
from evaluation import (LITERAL, OFFLINE, OFFSET, ONLINE, PREDICTION_LOSS_MAE, SCORE_REGIMES, GridSearch, GridSpec,
                        ModelCache, hyperparameter_grid, prediction_loss_mae, score_regimes)
from extract import EXTRACTORS
from pipeline import ALGORITHMS, NEEDS_MODEL, STREAMING, PipelineConfig, StreamingSegmenter, replay, run_pipeline

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
DATASET_KINDS = ('delimited', 'uci', 'emg-artificial', 'emg-evaluation')


def setup_logging(level_name: Optional[str] = None):
    name = (level_name or Config.LOG_LEVEL).upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        raise ValidationError(f"unknown log level '{name}'")
    logging.basicConfig(level=level, format=LOG_FORMAT)
    root = logging.getLogger()
    root.setLevel(level)
    if Config.LOG_FILE and not any(isinstance(h, logging.FileHandler) for h in root.handlers):
        handler = logging.FileHandler(Config.LOG_FILE)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)


def _read_json(path: str):
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise DataError(f"cannot read JSON file: {e}", path)
    except json.JSONDecodeError as e:
        raise DataError(f"invalid JSON ({e.msg})", path, e.lineno)


def parse_assignment(item: str):
    """key=value with a JSON value; anything that is not JSON is taken as a string"""
    key, sep, raw = item.partition('=')
    if not sep or not key.strip():
        raise ValidationError(f"--set expects key=value, got '{item}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().replace('-', '_'), value


def resolve_settings(args, flags: Dict) -> Dict:
    """Flags, then --config file entries, then --set overrides"""
    settings = {k: v for k, v in flags.items() if v is not None}
    if args.config:
        overrides = _read_json(args.config)
        if not isinstance(overrides, dict):
            raise DataError("config file must hold a JSON object", args.config)
        settings.update(overrides)
    for item in args.set or []:
        key, value = parse_assignment(item)
        settings[key] = value
    return settings


def echo(command: str, settings: Dict):
    print(f"{command} config: {json.dumps(settings, sort_keys=True, default=str)}", file=sys.stderr)


def _pipeline_flags(args) -> Dict:
    return {
        'algorithm': args.algorithm, 'nw': args.nw, 'tc': args.tc, 'step': args.step, 'scaler': args.scaler,
        'arch': args.arch, 'extractor': args.extractor, 'k': args.k, 'local_window': args.local_window,
        'rolling_mode': args.rolling_mode, 'threshold': args.threshold, 'epsilon_batch': args.epsilon_batch,
        't_lim': args.t_lim, 'n_trials': args.n_trials, 'seed': args.seed, 'threads': args.threads,
    }


def _fitted_scaler(kind: str, path: Optional[str]):
    if path is None:
        return None
    return fit_scaler(kind, load_delimited(path).series, fitted_on=str(path))


def _model_for(cfg: PipelineConfig, path: Optional[str]):
    if cfg.algorithm not in NEEDS_MODEL:
        return None
    if path is None:
        raise ValidationError(f"{cfg.algorithm} needs a trained model (--model)")
    return load_model(path)


def cmd_train(args) -> int:
    settings = resolve_settings(args, {
        'arch': args.arch, 'nw': args.nw, 'scaler': args.scaler, 'seed': args.seed, 'max_epochs': args.epochs,
        'batch_size': args.batch_size, 'learning_rate': args.learning_rate, 'patience': args.patience,
        'val_fraction': args.val_fraction,
    })
    echo('train', settings)
    train_fields = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(settings) - train_fields - {'arch', 'nw', 'scaler'})
    if unknown:
        raise ValidationError(f"unknown training settings: {', '.join(unknown)}")
    if 'nw' not in settings:
        raise ValidationError("training needs a window length (--nw)")
    nw = int(settings['nw'])
    kind = settings.get('arch', ARCH_KINDS[0])
    scaler_kind = settings.get('scaler', 'none')

    items = load_dataset(args.data)
    train_items = [item for item in items if item.split == 'train'] or items
    series = [item.series for item in train_items]
    scaler = fit_scaler(scaler_kind, concatenate(series), fitted_on=str(args.data))
    windows = [window_all(apply_scaler(scaler, ts), nw) for ts in series if ts.n >= nw]
    if not windows:
        raise ValidationError(f"no training series is at least nw={nw} samples long")

    arch = build_arch(kind, series[0].nc, nw)
    model = init_model(arch, seed=int(settings.get('seed', Config.SEED)))
    train_cfg = TrainConfig(**{k: v for k, v in settings.items() if k in train_fields})
    trained = train(model, np.concatenate([w.windows for w in windows]), train_cfg)
    save_model(trained, args.out)
    last = trained.history[-1]
    print(f"Trained {kind} autoencoder for {trained.trained_epochs} epochs: "
          f"train loss {last['train_loss']:.6g}, val loss {last['val_loss']:.6g}, best val {trained.best_val_loss:.6g}")
    print(f"Model written to {args.out}")
    return 0


def cmd_segment(args) -> int:
    settings = resolve_settings(args, _pipeline_flags(args))
    echo('segment', settings)
    cfg = PipelineConfig.from_dict(settings)
    labeled = load_delimited(args.data)
    scaler = _fitted_scaler(cfg.scaler, args.scaler_fit)
    model = _model_for(cfg, args.model)
    curve, found = run_pipeline(labeled.series, cfg, model, scaler)
    for idx in found.tolist():
        print(idx)
    if args.out:
        write_change_points(args.out, found)
    if args.curve:
        write_curve(args.curve, curve)
    logger.info(f"{len(found)} change-points from {cfg.algorithm} on {args.data}")
    return 0


def cmd_stream(args) -> int:
    settings = resolve_settings(args, _pipeline_flags(args))
    echo('stream', settings)
    cfg = PipelineConfig.from_dict(settings)
    if cfg.algorithm not in STREAMING:
        raise ValidationError(f"'{cfg.algorithm}' has no streaming mode, expected one of {STREAMING}")
    labeled = load_delimited(args.data)
    scaler = _fitted_scaler(cfg.scaler, args.scaler_fit)
    model = _model_for(cfg, args.model)
    segmenter = StreamingSegmenter(cfg, labeled.series.nc, model, scaler)
    settled = []
    for update in replay(segmenter, labeled.series, args.chunk):
        if args.curve:
            settled.append(update.cac_values)
        for idx in update.new_points:
            print(f"{idx} {update.samples_seen - idx}", flush=True)
    if args.out:
        write_change_points(args.out, segmenter.emitted)
    if args.curve:
        write_curve(args.curve, np.concatenate(settled) if settled else np.empty(0))
    return 0


def cmd_eval(args) -> int:
    settings = resolve_settings(args, {'metric': args.metric, 'weighting': args.weighting, 'n': args.n})
    echo('eval', settings)
    n = settings.get('n')
    gt = None
    if args.data:
        labeled = load_delimited(args.data)
        n = labeled.series.n if n is None else n
        gt = labeled.change_points
    if args.gt:
        gt = read_change_points(args.gt, n)
    if gt is None:
        raise ValidationError("eval needs ground truth: --gt or --data with a .cps companion")
    # extractors may emit position 0, so predictions only need to lie in [0, n)
    pred = read_change_points(args.pred)
    if n is not None:
        pred.check_bounds(int(n))

    metric = settings.get('metric', SCORE_REGIMES)
    if metric == SCORE_REGIMES:
        if n is None:
            raise ValidationError("score_regimes needs the series length (--n or --data)")
        result = score_regimes(pred, gt, int(n))
    elif metric == PREDICTION_LOSS_MAE:
        result = prediction_loss_mae(pred, gt, n, settings.get('weighting', LITERAL))
    else:
        raise ValidationError(f"unknown metric '{metric}'")
    print(json.dumps(result.to_dict(), sort_keys=True))
    if args.out:
        write_results(args.out, result.to_dict())
    return 0


def _load_items(path: str, kind: str):
    if kind == 'delimited':
        return load_dataset(path)
    if kind == 'uci':
        return load_uci_har(path)
    return load_emg_3dc(path, kind.split('-', 1)[1])


def cmd_gridsearch(args) -> int:
    base = resolve_settings(args, {'seed': args.seed, 'n_trials': args.n_trials})
    echo('gridsearch', {**base, 'algorithm': args.algorithm, 'setting': args.setting})
    if args.grid:
        axes = _read_json(args.grid)
        if not isinstance(axes, dict):
            raise DataError("grid file must hold a JSON object of axis lists", args.grid)
        spec = GridSpec(axes, args.budget, int(base.get('seed', Config.SEED)))
    elif args.published_grid:
        spec = hyperparameter_grid(args.algorithm, args.setting, args.published_grid)
        spec = GridSpec(spec.axes, args.budget, int(base.get('seed', Config.SEED)))
    else:
        raise ValidationError("gridsearch needs --grid FILE or --published-grid {uci,emg}")

    items = _load_items(args.data, args.dataset_kind)
    train_items = [item for item in items if item.split == 'train']
    validation = [item for item in items if item.split == 'val']

    provider = None
    if args.algorithm in NEEDS_MODEL:
        provider = ModelCache(train_items, TrainConfig(max_epochs=args.epochs, seed=int(base.get('seed', Config.SEED))))
    search = GridSearch(validation, args.algorithm, args.setting, train_items, provider, args.threads, args.weighting)
    results = search.run(spec, base)
    write_results(args.out, [r.to_dict() for r in results])
    for r in results[:args.top]:
        print(f"{r.value:.6g}\t{r.mean_rank:.3g}\t{json.dumps(r.config, sort_keys=True)}")
    print(f"{search.runs} configurations evaluated; ranking written to {args.out}")
    return 0


def cmd_synth(args) -> int:
    settings = _read_json(args.spec) if args.spec else {}
    if not isinstance(settings, dict):
        raise DataError("synthetic spec must hold a JSON object", args.spec)
    settings = {**settings, **resolve_settings(args, {'seed': args.seed})}
    echo('synth', settings)
    labeled = generate_synthetic(SynthSpec.from_dict(settings))
    write_delimited(args.out, labeled)
    print(f"Wrote {labeled.series.nc}x{labeled.series.n} series with {len(labeled.change_points)} "
          f"change-points to {args.out}")
    return 0


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument('--threads', type=int, default=Config.THREADS, help='Worker threads (default LSUSS_THREADS)')
    parser.add_argument('--log-level', default=None, help='Logging level (default LOG_LEVEL)')
    parser.add_argument('--config', default=None, help='JSON file of setting overrides')
    parser.add_argument('--set', action='append', metavar='KEY=VALUE', help='Override one setting (JSON value)')
    parser.add_argument('--seed', type=int, default=Config.SEED, help='Random seed (default LSUSS_SEED)')


def _add_pipeline(parser: argparse.ArgumentParser, algorithms):
    parser.add_argument('--data', required=True, help='Delimited series file')
    parser.add_argument('--algorithm', required=True, choices=algorithms)
    parser.add_argument('--nw', type=int, required=True, help='Window length in samples')
    parser.add_argument('--tc', type=int, help='Temporal constraint in windows')
    parser.add_argument('--step', type=int, help='LFMD window step')
    parser.add_argument('--scaler', choices=SCALER_KINDS, default='none')
    parser.add_argument('--scaler-fit', help='Fit scaler statistics on this file instead of the input')
    parser.add_argument('--arch', choices=ARCH_KINDS, default=ARCH_KINDS[0])
    parser.add_argument('--model', help='LSAE model file (lfmd and lsuss variants)')
    parser.add_argument('--extractor', choices=EXTRACTORS)
    parser.add_argument('--k', type=int, help='Known number of change-points (selects REA/LREA)')
    parser.add_argument('--local-window', type=int, help='Half-width of the CAC standardization window')
    parser.add_argument('--rolling-mode', choices=('centered', 'trailing'))
    parser.add_argument('--threshold', type=float, help='LTEA threshold')
    parser.add_argument('--epsilon-batch', type=int, help='Samples buffered before each streaming update')
    parser.add_argument('--t-lim', type=int, help='Batch length for the memory-bounded collapse')
    parser.add_argument('--n-trials', type=int, help='Monte Carlo trials for the idealized arc curve')
    parser.add_argument('--out', help='Write change-points here, one index per line')
    parser.add_argument('--curve', help='Write the CAC or distance curve here as index,value CSV')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Unsupervised change-point detection for multichannel time series')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help='Train an autoencoder on the training split')
    _add_common(p)
    p.add_argument('--data', required=True, help='Delimited file or dataset directory')
    p.add_argument('--arch', choices=ARCH_KINDS, default=ARCH_KINDS[0])
    p.add_argument('--nw', type=int, required=True)
    p.add_argument('--scaler', choices=SCALER_KINDS, default='none')
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--batch-size', type=int, default=None)
    p.add_argument('--learning-rate', type=float, default=None)
    p.add_argument('--patience', type=int, default=None)
    p.add_argument('--val-fraction', type=float, default=None)
    p.add_argument('--out', required=True, help='LSAE model file to write')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('segment', help='Offline segmentation of one recording')
    _add_common(p)
    _add_pipeline(p, ALGORITHMS)
    p.set_defaults(handler=cmd_segment)

    p = sub.add_parser('stream', help='Replay a recording as a stream and print emissions')
    _add_common(p)
    _add_pipeline(p, STREAMING)
    p.add_argument('--chunk', type=int, help='Samples pushed per call (default: epsilon batch)')
    p.set_defaults(handler=cmd_stream)

    p = sub.add_parser('eval', help='Score predicted change-points against ground truth')
    _add_common(p)
    p.add_argument('--pred', required=True, help='Predicted change-points (.cps)')
    p.add_argument('--gt', help='Ground-truth change-points (.cps)')
    p.add_argument('--data', help='Series file; gives n and, without --gt, the ground truth')
    p.add_argument('--n', type=int, help='Series length')
    p.add_argument('--metric', choices=(SCORE_REGIMES, PREDICTION_LOSS_MAE), default=None)
    p.add_argument('--weighting', choices=(LITERAL, OFFSET), default=None)
    p.add_argument('--out', help='Write the result JSON here')
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('gridsearch', help='Rank hyperparameter configurations on the validation split')
    _add_common(p)
    p.add_argument('--data', required=True, help='Dataset root')
    p.add_argument('--dataset-kind', choices=DATASET_KINDS, default='delimited')
    p.add_argument('--algorithm', required=True, choices=ALGORITHMS)
    p.add_argument('--setting', choices=(OFFLINE, ONLINE), default=OFFLINE)
    p.add_argument('--grid', help='JSON object mapping setting names to value lists')
    p.add_argument('--published-grid', choices=('uci', 'emg'), help='Use the published search space for this dataset')
    p.add_argument('--budget', type=int, help='Evaluate a seeded subset of this many cells')
    p.add_argument('--weighting', choices=(LITERAL, OFFSET), default=LITERAL)
    p.add_argument('--n-trials', type=int, help='Monte Carlo trials for the idealized arc curve')
    p.add_argument('--epochs', type=int, default=Config.AE_MAX_EPOCHS, help='Autoencoder training epochs')
    p.add_argument('--top', type=int, default=5, help='Configurations to print')
    p.add_argument('--out', required=True, help='Ranked results JSON')
    p.set_defaults(handler=cmd_gridsearch)

    p = sub.add_parser('synth', help='Generate a synthetic labeled series')
    _add_common(p)
    p.add_argument('--spec', help='SynthSpec JSON file')
    p.add_argument('--out', required=True, help='Series CSV; labels go to the .cps companion')
    p.set_defaults(handler=cmd_synth, seed=None)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        setup_logging(args.log_level)
        return args.handler(args)
    except LsussError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        return DataError.exit_code
    except Exception as e:
        logger.error(f"{args.command} failed unexpectedly: {e}")
        return 4


if __name__ == "__main__":
    sys.exit(main())
