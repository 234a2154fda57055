import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core import TimeSeries
from errors import DataError, ValidationError
from extract import GROUND_TRUTH, ChangePointSet

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')
LABEL_SUFFIX = '.cps'
DELIMITED_SUFFIXES = ('.csv', '.tsv', '.txt')

UCI_CHANNEL_FILES = ('gyro.txt', 'acc.txt', 'body_acc.txt')
UCI_SPLIT = (9, 5, 16)
EMG_CHANNELS = 10
EMG_RATE_HZ = 1000.0
EMG_BLOCK = 5000
EMG_SPLITS = {'artificial': (10, 4, 8), 'evaluation': (6, 5, 9)}

PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class LabeledSeries:
    """A recording with its ground-truth change-points"""
    series: TimeSeries
    change_points: ChangePointSet
    split: str = 'test'
    subject_id: str = ''
    labels_missing: bool = False

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS}, got '{self.split}'")
        idx = self.change_points.indices
        if len(idx) and (idx[0] <= 0 or idx[-1] >= self.series.n):
            raise ValidationError(f"change-points must lie strictly inside (0, {self.series.n}), got {idx.tolist()}")


def _is_number(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def _read_table(path: Path, delimiter: Optional[str] = None) -> Tuple[np.ndarray, Optional[List[str]]]:
    """Rows are timesteps and columns channels; a non-numeric first row is a header"""
    if not path.is_file():
        raise DataError("file not found", path)
    with open(path) as f:
        first = f.readline()
    if not first.strip():
        raise DataError("file is empty", path, 1)
    sep = delimiter or ('\t' if '\t' in first else ',')
    has_header = not all(_is_number(c.strip()) for c in first.rstrip('\r\n').split(sep))

    try:
        frame = pd.read_csv(path, sep=sep, header=0 if has_header else None, dtype=str,
                            keep_default_na=False, skip_blank_lines=True)
    except pd.errors.ParserError as e:
        match = re.search(r'line (\d+)', str(e))
        raise DataError(f"ragged row ({e})", path, int(match.group(1)) if match else None)
    except pd.errors.EmptyDataError:
        raise DataError("no data rows", path)
    if frame.empty:
        raise DataError("no data rows", path)

    numeric = frame.apply(pd.to_numeric, errors='coerce').to_numpy(dtype=np.float64)
    bad = ~np.isfinite(numeric)
    if np.any(bad):
        row, col = np.argwhere(bad)[0]
        cell = frame.iat[row, col]
        raise DataError(f"missing, non-numeric or non-finite cell {cell!r} in column {col}",
                        path, int(row) + 1 + int(has_header))
    # float() parsing reads %.17g text back bit for bit
    values = frame.to_numpy(dtype=object).astype(np.float64)
    header = [str(c).strip() for c in frame.columns] if has_header else None
    return values, header


def read_change_points(path: PathLike, n: Optional[int] = None) -> ChangePointSet:
    """One integer index per line; blank lines are ignored. With n, every index must lie in (0, n)"""
    path = Path(path)
    if not path.is_file():
        raise DataError("label file not found", path)
    found = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                idx = int(text)
            except ValueError:
                raise DataError(f"change-point {text!r} is not an integer", path, line_no)
            if n is not None and not 0 < idx < n:
                raise DataError(f"change-point {idx} outside (0, {n})", path, line_no)
            if found and idx <= found[-1]:
                raise DataError(f"change-point {idx} does not increase", path, line_no)
            found.append(idx)
    return ChangePointSet(found, GROUND_TRUTH)


def load_delimited(path: PathLike, delimiter: Optional[str] = None, split: str = 'test',
                   subject_id: Optional[str] = None, sample_rate_hz: Optional[float] = None) -> LabeledSeries:
    """Comma- or tab-delimited series with an optional header and a .cps label companion"""
    path = Path(path)
    values, header = _read_table(path, delimiter)
    series = TimeSeries(values.T, sample_rate_hz, header)
    labels = path.with_suffix(LABEL_SUFFIX)
    if labels.is_file():
        cps = read_change_points(labels, series.n)
        missing = False
    else:
        logger.warning(f"No label file {labels}; ground truth left empty")
        cps = ChangePointSet([], GROUND_TRUTH)
        missing = True
    return LabeledSeries(series, cps, split, subject_id if subject_id is not None else path.stem, missing)


def _delimited_files(directory: Path) -> List[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix in DELIMITED_SUFFIXES)


def load_dataset(root: PathLike, delimiter: Optional[str] = None) -> List[LabeledSeries]:
    """A delimited file, a flat directory of them, or a directory with train/val/test subdirectories"""
    root = Path(root)
    if root.is_file():
        return [load_delimited(root, delimiter)]
    if not root.is_dir():
        raise DataError("dataset path not found", root)
    split_dirs = [root / s for s in SPLITS if (root / s).is_dir()]
    out = []
    if split_dirs:
        for directory in split_dirs:
            out.extend(load_delimited(p, delimiter, split=directory.name) for p in _delimited_files(directory))
    else:
        out.extend(load_delimited(p, delimiter) for p in _delimited_files(root))
    if not out:
        raise DataError("no delimited files found", root)
    logger.info(f"Loaded {len(out)} series from {root}")
    return out


def _split_counts(n: int, proportions: Tuple[int, int, int]) -> Tuple[int, int]:
    total = sum(proportions)
    n_train = max(1, int(np.floor(n * proportions[0] / total + 0.5)))
    n_val = max(1, int(np.floor(n * proportions[1] / total + 0.5)))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return n_train, n_val


def assign_splits(subject_ids: Sequence[str], proportions: Tuple[int, int, int]) -> Dict[str, str]:
    """Subjects in sorted id order fill train, then val, then test in the given proportions"""
    ordered = sorted(subject_ids, key=_subject_key)
    n_train, n_val = _split_counts(len(ordered), proportions)
    return {sid: SPLITS[0] if i < n_train else SPLITS[1] if i < n_train + n_val else SPLITS[2]
            for i, sid in enumerate(ordered)}


def _subject_key(name: str):
    digits = re.findall(r'\d+', name)
    return (int(digits[-1]) if digits else -1, name)


def _subject_dirs(root: Path) -> List[Path]:
    if not root.is_dir():
        raise DataError("dataset directory not found", root)
    dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: _subject_key(p.name))
    if not dirs:
        raise DataError("no subject directories", root)
    return dirs


def _load_matrix(path: Path, columns: int) -> np.ndarray:
    if not path.is_file():
        raise DataError("missing file", path)
    try:
        data = np.loadtxt(path, ndmin=2)
    except ValueError as e:
        raise DataError(f"unreadable numeric table ({e})", path)
    if data.shape[1] != columns:
        raise DataError(f"expected {columns} columns, got {data.shape[1]}", path)
    if not np.all(np.isfinite(data)):
        raise DataError("non-finite value", path)
    return data


def label_transitions(labels: Sequence, resolution: int = 1) -> List[int]:
    """Sample positions where the activity label changes, labels given every `resolution` samples"""
    labels = list(labels)
    return [i * resolution for i in range(1, len(labels)) if labels[i] != labels[i - 1]]


def load_uci_har(root: PathLike, label_resolution: Optional[int] = None) -> List[LabeledSeries]:
    """Nine-channel UCI-HAR recordings, one per subject.

    Layout: root/subject_XX/{gyro.txt, acc.txt, body_acc.txt} hold n x 3
    whitespace-delimited samples each and labels.txt one activity label per
    line, one line every `label_resolution` samples (read from
    root/layout.json when not given, default 1). Ground truth is every
    activity transition. Subjects are split 9/5/16 in sorted id order.
    """
    root = Path(root)
    if label_resolution is None:
        layout = root / 'layout.json'
        label_resolution = int(json.loads(layout.read_text()).get('label_resolution', 1)) if layout.is_file() else 1
    subjects = _subject_dirs(root)
    splits = assign_splits([p.name for p in subjects], UCI_SPLIT)
    out = []
    for subject in subjects:
        blocks = [_load_matrix(subject / name, 3) for name in UCI_CHANNEL_FILES]
        lengths = {len(b) for b in blocks}
        if len(lengths) != 1:
            raise DataError(f"channel files disagree on length: {sorted(lengths)}", subject)
        data = np.hstack(blocks).T
        labels_path = subject / 'labels.txt'
        if not labels_path.is_file():
            raise DataError("missing file", labels_path)
        labels = [line.strip() for line in labels_path.read_text().splitlines() if line.strip()]
        n = data.shape[1]
        cps = label_transitions(labels, label_resolution)
        if cps and cps[-1] >= n:
            raise DataError(f"label transition at {cps[-1]} beyond {n} samples", labels_path)
        names = tuple(f"{prefix}_{axis}" for prefix in ('gyro', 'acc', 'body_acc') for axis in 'xyz')
        out.append(LabeledSeries(TimeSeries(data, channel_names=names), ChangePointSet(cps), splits[subject.name],
                                 subject.name))
    logger.info(f"Loaded {len(out)} UCI-HAR subjects from {root}")
    return out


def load_emg_3dc(root: PathLike, variant: str = 'artificial') -> List[LabeledSeries]:
    """Ten-channel 1000 Hz armband recordings.

    artificial: root/artificial/subject_XX/*.csv gesture blocks, concatenated in
    sorted order with change-points at the joints. evaluation:
    root/evaluation/subject_XX/session.csv with an optional session.cps of
    recorded transitions, otherwise a transition every 5 s.
    """
    if variant not in EMG_SPLITS:
        raise ValidationError(f"EMG variant must be one of {sorted(EMG_SPLITS)}, got '{variant}'")
    base = Path(root) / variant
    subjects = _subject_dirs(base)
    splits = assign_splits([p.name for p in subjects], EMG_SPLITS[variant])
    out = []
    for subject in subjects:
        if variant == 'artificial':
            blocks = [_read_table(p)[0] for p in _delimited_files(subject)]
            if not blocks:
                raise DataError("no gesture blocks", subject)
            for p, block in zip(_delimited_files(subject), blocks):
                if block.shape[1] != EMG_CHANNELS:
                    raise DataError(f"expected {EMG_CHANNELS} channels, got {block.shape[1]}", p)
            data = np.vstack(blocks).T
            cps = np.cumsum([len(b) for b in blocks])[:-1].tolist()
        else:
            session = subject / 'session.csv'
            data = _read_table(session)[0]
            if data.shape[1] != EMG_CHANNELS:
                raise DataError(f"expected {EMG_CHANNELS} channels, got {data.shape[1]}", session)
            data = data.T
            labels = session.with_suffix(LABEL_SUFFIX)
            if labels.is_file():
                cps = read_change_points(labels, data.shape[1]).tolist()
            else:
                cps = list(range(EMG_BLOCK, data.shape[1], EMG_BLOCK))
        out.append(LabeledSeries(TimeSeries(data, EMG_RATE_HZ), ChangePointSet(cps), splits[subject.name],
                                 subject.name))
    logger.info(f"Loaded {len(out)} EMG ({variant}) subjects from {base}")
    return out


@dataclass
class SynthSpec:
    """Recipe for a seeded multichannel series with known regime boundaries"""
    nc_informative: int = 1
    nc_noise: int = 0
    nc_redundant: int = 0
    regime_count: int = 2
    regime_length_range: Tuple[int, int] = (500, 500)
    generators: Optional[List[Dict]] = None
    noise_level: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.regime_length_range = tuple(int(v) for v in self.regime_length_range)
        lo, hi = self.regime_length_range
        if self.regime_count < 2:
            raise ValidationError(f"a synthetic series needs at least 2 regimes, got {self.regime_count}")
        if not 0 < lo <= hi:
            raise ValidationError(f"regime lengths must be positive and ordered, got {self.regime_length_range}")
        if self.nc_informative < 1:
            raise ValidationError("a synthetic series needs at least one informative channel")
        if self.nc_noise < 0 or self.nc_redundant < 0:
            raise ValidationError("channel counts must be non-negative")
        if self.noise_level < 0:
            raise ValidationError(f"noise level must be non-negative, got {self.noise_level}")
        if self.generators is not None:
            if len(self.generators) != self.regime_count:
                raise ValidationError(f"{len(self.generators)} generators for {self.regime_count} regimes")
            for g in self.generators:
                if g.get('kind') not in ('sine', 'ar1', 'noise'):
                    raise ValidationError(f"unknown generator kind {g.get('kind')!r}")

    @property
    def nc(self) -> int:
        return self.nc_informative + self.nc_noise + self.nc_redundant

    def to_dict(self) -> Dict:
        values = asdict(self)
        values['regime_length_range'] = list(self.regime_length_range)
        return values

    @classmethod
    def from_dict(cls, values: Dict) -> 'SynthSpec':
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValidationError(f"unknown synthetic settings: {', '.join(unknown)}")
        return cls(**values)


def _random_generators(count: int, rng: np.random.Generator) -> List[Dict]:
    kinds = ('sine', 'ar1', 'noise')
    out = []
    previous = None
    for _ in range(count):
        kind = kinds[int(rng.integers(len(kinds)))]
        while kind == previous:
            kind = kinds[int(rng.integers(len(kinds)))]
        if kind == 'sine':
            out.append({'kind': 'sine', 'freq': float(rng.uniform(1 / 60, 1 / 8)), 'amp': float(rng.uniform(0.5, 2.0))})
        elif kind == 'ar1':
            out.append({'kind': 'ar1', 'phi': float(rng.uniform(0.5, 0.95))})
        else:
            out.append({'kind': 'noise', 'sigma': float(rng.uniform(0.3, 1.0))})
        previous = kind
    return out


def _render(generator: Dict, length: int, rng: np.random.Generator) -> np.ndarray:
    kind = generator['kind']
    if kind == 'sine':
        t = np.arange(length)
        phase = rng.uniform(0, 2 * np.pi)
        return generator.get('amp', 1.0) * np.sin(2 * np.pi * generator['freq'] * t + phase)
    if kind == 'ar1':
        phi = generator['phi']
        shocks = rng.standard_normal(length) * generator.get('sigma', 1.0) * np.sqrt(1 - phi ** 2)
        out = np.empty(length)
        prev = 0.0
        for i in range(length):
            prev = phi * prev + shocks[i]
            out[i] = prev
        return out
    return generator.get('sigma', 1.0) * rng.standard_normal(length)


def generate_synthetic(spec: SynthSpec) -> LabeledSeries:
    """Informative channels switch generator at every boundary, noise channels never do.

    Redundant channels copy an informative channel and add fresh noise.
    Everything is drawn from one generator seeded with spec.seed.
    """
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.regime_length_range
    lengths = rng.integers(lo, hi + 1, size=spec.regime_count)
    generators = spec.generators or _random_generators(spec.regime_count, rng)
    n = int(lengths.sum())

    informative = np.vstack([
        np.concatenate([_render(g, int(length), rng) for g, length in zip(generators, lengths)])
        + spec.noise_level * rng.standard_normal(n)
        for _ in range(spec.nc_informative)
    ])
    channels = [informative]
    if spec.nc_noise:
        channels.append(rng.standard_normal((spec.nc_noise, n)))
    if spec.nc_redundant:
        source = informative[np.arange(spec.nc_redundant) % spec.nc_informative]
        channels.append(source + spec.noise_level * rng.standard_normal((spec.nc_redundant, n)))
    data = np.vstack(channels)
    cps = np.cumsum(lengths)[:-1].tolist()
    return LabeledSeries(TimeSeries(data), ChangePointSet(cps), 'test', f"synthetic-{spec.seed}")


def write_curve(path: PathLike, values: np.ndarray):
    """Two-column CSV (index,value), 17 significant digits so values read back exactly"""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    frame = pd.DataFrame({'index': np.arange(len(values)), 'value': values})
    frame.to_csv(path, index=False, float_format='%.17g', lineterminator='\n')


def read_curve(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DataError("curve file not found", path)
    frame = pd.read_csv(path, float_precision='round_trip')
    if list(frame.columns) != ['index', 'value']:
        raise DataError(f"expected columns index,value, got {','.join(map(str, frame.columns))}", path, 1)
    return frame['index'].to_numpy(dtype=np.int64), frame['value'].to_numpy(dtype=np.float64)


def write_change_points(path: PathLike, cps: ChangePointSet):
    Path(path).write_text(''.join(f"{i}\n" for i in cps.tolist()))


def write_results(path: PathLike, records):
    """JSON with sorted keys and fixed indentation so repeated runs give identical bytes"""
    Path(path).write_text(json.dumps(records, sort_keys=True, indent=2, allow_nan=False) + '\n')


def write_delimited(path: PathLike, labeled: LabeledSeries):
    """Series CSV with a ch0..chN header plus its .cps companion"""
    path = Path(path)
    names = [f"ch{c}" for c in range(labeled.series.nc)]
    frame = pd.DataFrame(labeled.series.data.T, columns=names)
    frame.to_csv(path, index=False, float_format='%.17g', lineterminator='\n')
    write_change_points(path.with_suffix(LABEL_SUFFIX), labeled.change_points)
