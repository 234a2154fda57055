import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from autoenc import AeModel, encode_batch
from core import SubsequenceSet
from errors import ShapeError, ValidationError
from matprof import BIDIRECTIONAL, FORWARD, NO_NEIGHBOR, DistanceProfile, ProfilePair, check_direction

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LatentSet:
    """One latent vector per window of the all-subsequence set"""
    vectors: np.ndarray
    m: int
    source_length: int

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ShapeError(f"latent vectors must form a 2-D array, got shape {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise ValidationError("latent vectors contain non-finite values")
        vectors.setflags(write=False)
        object.__setattr__(self, 'vectors', vectors)

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.count


def encode_all(model: AeModel, subs: SubsequenceSet) -> LatentSet:
    """Encode every window of a step-1 subsequence set, keeping window order"""
    if subs.step != 1:
        raise ValidationError(f"latent profiles need the all-subsequence set (step 1), got step {subs.step}")
    vectors = encode_batch(model, subs.windows)
    return LatentSet(vectors, subs.m, subs.source.n)


def latent_distance_profile(query: np.ndarray, latents: LatentSet, lo: int = 0,
                            hi: Optional[int] = None) -> DistanceProfile:
    """Plain Euclidean distance from query to latent vectors lo..hi-1"""
    hi = latents.count if hi is None else hi
    if not 0 <= lo <= hi <= latents.count:
        raise ValidationError(f"invalid range [{lo}, {hi}) for {latents.count} latent vectors")
    query = np.asarray(query, dtype=np.float64).reshape(1, -1)
    if query.shape[1] != latents.latent_dim:
        raise ShapeError(f"query has {query.shape[1]} dimensions, latent set has {latents.latent_dim}")
    if hi == lo:
        return DistanceProfile(np.empty(0))
    return DistanceProfile(cdist(query, latents.vectors[lo:hi])[0])


def pair_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean distance, accumulated dimension by dimension.

    Every row's value depends only on that pair of vectors, so the same pair
    gives the same bits whichever batch or update computes it.
    """
    diff = a - b
    acc = diff[:, 0] * diff[:, 0]
    for k in range(1, diff.shape[1]):
        acc += diff[:, k] * diff[:, k]
    return np.sqrt(acc)


def merge_candidates(profile: np.ndarray, index: np.ndarray, rows: np.ndarray,
                     values: np.ndarray, candidates: np.ndarray):
    """Keep (value, index) lexicographic minima in place: smaller distance, then smaller index"""
    current = profile[rows]
    better = (values < current) | ((values == current) & (candidates < index[rows]) & np.isfinite(values))
    profile[rows[better]] = values[better]
    index[rows[better]] = candidates[better]


def distance_band(vectors: np.ndarray, tc: int, exclusion: int) -> np.ndarray:
    """Upper band U[r, d-1] = dist(r, r + d) for d = 1..tc; +inf outside the block or exclusion zone"""
    n = len(vectors)
    band = np.full((n, tc), np.inf)
    for d in range(exclusion, min(tc, n - 1) + 1):
        band[:n - d, d - 1] = pair_distances(vectors[:n - d], vectors[d:])
    return band


def reduce_band(band: np.ndarray, exclusion: int, direction: str) -> Tuple[np.ndarray, np.ndarray]:
    """Row minima of a distance band: left candidates (bidirectional only) then right candidates"""
    n, tc = band.shape
    rows = np.arange(n)
    profile = np.full(n, np.inf)
    index = np.full(n, NO_NEIGHBOR, dtype=np.int64)
    for d in range(exclusion, tc + 1):
        if direction == BIDIRECTIONAL and d < n:
            merge_candidates(profile, index, rows[d:], band[:n - d, d - 1], rows[d:] - d)
        merge_candidates(profile, index, rows, band[:, d - 1], rows + d)
    return profile, index


def _check_collapse(latents: LatentSet, tc: Optional[int], direction: str, exclusion: int) -> int:
    check_direction(direction)
    if exclusion < 1:
        raise ValidationError(f"exclusion radius must be at least 1, got {exclusion}")
    if latents.count < 2 * exclusion + 2:
        raise ValidationError(
            f"{latents.count} latent vectors are too few for exclusion radius {exclusion}")
    if tc is None:
        return latents.count - 1
    if tc < 1:
        raise ValidationError(f"temporal constraint must be positive, got {tc}")
    return int(tc)


def collapse(latents: LatentSet, tc: Optional[int], direction: str = BIDIRECTIONAL,
             exclusion: int = 1) -> ProfilePair:
    """Collapse the temporally constrained latent distance matrix into (P_F, I_F).

    Admissible neighbours of i are j with exclusion <= |j - i| <= tc, and
    j > i when forward-only. Ties resolve to the smallest j; positions with
    no admissible neighbour keep +inf and index -1.
    """
    reach = _check_collapse(latents, tc, direction, exclusion)
    band = distance_band(latents.vectors, reach, exclusion)
    profile, index = reduce_band(band, exclusion, direction)
    return ProfilePair(profile, index, latents.m, tc, direction, exclusion)


def batched_collapse(latents: LatentSet, t_lim: int, tc: int, exclusion: int = 1,
                     direction: str = BIDIRECTIONAL, meter: Optional[Dict[str, int]] = None) -> ProfilePair:
    """Memory-bounded collapse over overlapping batches.

    Batch k holds positions [k*t_lim - (2*tc - 1), (k+1)*t_lim), so every
    admissible pair lands together in some batch. Batch minima are merged
    into the running profile with the same (distance, index) rule the
    unbatched collapse uses, which makes both results identical. When given,
    `meter` receives the batch count and the peak number of band entries held.
    """
    reach = _check_collapse(latents, tc, direction, exclusion)
    if t_lim <= 2 * reach:
        raise ValidationError(f"batch length t_lim={t_lim} must exceed 2*tc={2 * reach}")

    count = latents.count
    profile = np.full(count, np.inf)
    index = np.full(count, NO_NEIGHBOR, dtype=np.int64)
    overlap = 2 * reach - 1
    batches = 0
    peak = 0
    start = 0
    while start < count:
        lo = max(0, start - overlap)
        hi = min(start + t_lim, count)
        band = distance_band(latents.vectors[lo:hi], reach, exclusion)
        peak = max(peak, band.size)
        p, i = reduce_band(band, exclusion, direction)
        found = i >= 0
        rows = np.arange(lo, hi)[found]
        merge_candidates(profile, index, rows, p[found], i[found] + lo)
        batches += 1
        logger.debug(f"Batched collapse: batch {batches} covers [{lo}, {hi}), band entries {band.size}")
        del band
        start += t_lim

    if meter is not None:
        meter['batches'] = batches
        meter['peak_entries'] = peak
    return ProfilePair(profile, index, latents.m, tc, direction, exclusion)


class LsmpState:
    """Incrementally maintained latent matrix profile.

    Vectors arrive through append(); they are buffered until `batch_len`
    are pending. Each appended vector j is compared once with every earlier
    i in [j - tc, j - exclusion]: forward-only mode updates row i, the
    bidirectional mode updates rows i and j. A position is finalized once tc
    newer vectors exist. Only the last tc vectors are retained, and
    release() drops finalized rows from `profile` and `index`, which then
    start at row `base`.
    """

    def __init__(self, tc: int, direction: str = FORWARD, exclusion: int = 1, batch_len: int = 1,
                 m: int = 0):
        check_direction(direction)
        if tc is None or tc < 1:
            raise ValidationError("online latent profiles need a positive temporal constraint")
        if batch_len < 1:
            raise ValidationError(f"batch length must be at least 1, got {batch_len}")
        self.tc = int(tc)
        self.direction = direction
        self.exclusion = int(exclusion)
        self.batch_len = int(batch_len)
        self.m = m
        self.base = 0
        self.profile = np.empty(0)
        self.index = np.empty(0, dtype=np.int64)
        self.pending = []
        self._recent = None
        self._offset = 0

    @property
    def count(self) -> int:
        """Vectors already merged into the profile"""
        return self.base + len(self.profile)

    @property
    def processed(self) -> int:
        """Positions whose profile entries can no longer change"""
        return max(0, self.count - self.tc)

    @property
    def profile_pair(self) -> ProfilePair:
        return ProfilePair(self.profile.copy(), self.index.copy(), self.m, self.tc, self.direction, self.exclusion)

    def finalized_pair(self) -> ProfilePair:
        done = self.processed - self.base
        return ProfilePair(self.profile[:done].copy(), self.index[:done].copy(), self.m, self.tc,
                           self.direction, self.exclusion)

    def release(self, upto: int):
        """Forget the finalized rows before `upto`; indices keep their global numbering"""
        if upto > self.processed:
            raise ValidationError(f"cannot release rows up to {upto}: only {self.processed} are finalized")
        drop = upto - self.base
        if drop <= 0:
            return
        self.profile = self.profile[drop:]
        self.index = self.index[drop:]
        self.base = upto

    def append(self, vectors: np.ndarray) -> int:
        """Buffer vectors, merging whole pending batches; returns the number merged"""
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.size == 0:
            return 0
        if vectors.ndim == 1:
            vectors = vectors[np.newaxis, :]
        self.pending.extend(vectors)
        if len(self.pending) < self.batch_len:
            return 0
        return self.flush()

    def flush(self) -> int:
        """Merge everything pending regardless of batch length"""
        if not self.pending:
            return 0
        new = np.vstack(self.pending)
        self.pending = []
        self._merge(new)
        return len(new)

    def _merge(self, new: np.ndarray):
        c0 = self.count
        if self._recent is None:
            self._recent = new
        else:
            if new.shape[1] != self._recent.shape[1]:
                raise ShapeError(f"latent dimension changed from {self._recent.shape[1]} to {new.shape[1]}")
            self._recent = np.vstack([self._recent, new])
        c1 = c0 + len(new)
        self.profile = np.concatenate([self.profile, np.full(len(new), np.inf)])
        self.index = np.concatenate([self.index, np.full(len(new), NO_NEIGHBOR, dtype=np.int64)])

        off = self._offset
        base = self.base
        if len(new) <= self.tc - self.exclusion:
            # few new vectors: one pass per vector over its whole look-back range
            for j in range(c0, c1):
                i = np.arange(max(0, j - self.tc), j - self.exclusion + 1)
                if len(i) == 0:
                    continue
                dist = pair_distances(self._recent[i - off], self._recent[j - off][np.newaxis, :])
                merge_candidates(self.profile, self.index, i - base, dist, np.full(len(i), j))
                if self.direction == BIDIRECTIONAL:
                    k = int(np.argmin(dist))
                    merge_candidates(self.profile, self.index, np.array([j - base]), dist[k:k + 1], i[k:k + 1])
        else:
            for d in range(self.exclusion, self.tc + 1):
                j = np.arange(max(c0, d), c1)
                if len(j) == 0:
                    continue
                i = j - d
                dist = pair_distances(self._recent[i - off], self._recent[j - off])
                merge_candidates(self.profile, self.index, i - base, dist, j)
                if self.direction == BIDIRECTIONAL:
                    merge_candidates(self.profile, self.index, j - base, dist, i)

        keep_from = max(0, c1 - self.tc)
        self._recent = self._recent[keep_from - off:]
        self._offset = keep_from


def online_update(state: LsmpState, new_vectors: np.ndarray) -> LsmpState:
    """Forward-only online LSMP step: finalized positions are never revisited"""
    if state.direction != FORWARD:
        raise ValidationError("online_update requires a forward-only state; use LsmpState.append")
    state.append(new_vectors)
    return state
