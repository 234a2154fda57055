import numpy as np
import pytest

from autoenc import FULLY_CONNECTED, build_arch, encode_batch, init_model
from core import TimeSeries, window_all
from errors import ShapeError, ValidationError
from lsmp import (LatentSet, LsmpState, batched_collapse, collapse, encode_all, latent_distance_profile,
                  online_update)
from matprof import BIDIRECTIONAL, FORWARD, NO_NEIGHBOR


def random_latents(seed, count=600, dim=4):
    return LatentSet(np.random.default_rng(seed).normal(size=(count, dim)), m=8, source_length=count + 7)


def collapse_oracle(vectors, tc, direction, exclusion):
    """Quadratic scan over every admissible pair, ties to the smallest index"""
    n = len(vectors)
    tc = n - 1 if tc is None else tc
    profile = np.full(n, np.inf)
    index = np.full(n, NO_NEIGHBOR)
    for i in range(n):
        for j in range(n):
            gap = j - i if direction == FORWARD else abs(j - i)
            if gap < exclusion or gap > tc:
                continue
            d = np.sqrt(np.sum((vectors[i] - vectors[j]) ** 2))
            if d < profile[i]:
                profile[i], index[i] = d, j
    return profile, index


class TestLatentSet:
    def test_rejects_non_finite(self):
        with pytest.raises(ValidationError):
            LatentSet(np.array([[0.0, np.nan]]), m=4, source_length=4)

    def test_rejects_flat_vectors(self):
        with pytest.raises(ShapeError):
            LatentSet(np.zeros(5), m=4, source_length=8)

    def test_encode_all_count(self):
        ts = TimeSeries(np.sin(np.arange(200) / 5.0))
        model = init_model(build_arch(FULLY_CONNECTED, 1, 50), seed=0)
        subs = window_all(ts, 50)
        latents = encode_all(model, subs)
        assert latents.count == 151
        assert latents.latent_dim == model.arch.latent_dim
        np.testing.assert_array_equal(latents.vectors, encode_batch(model, subs.windows))

    def test_encode_all_needs_step_one(self):
        ts = TimeSeries(np.zeros(100))
        model = init_model(build_arch(FULLY_CONNECTED, 1, 10), seed=0)
        with pytest.raises(ValidationError):
            encode_all(model, window_all(ts, 10, step=2))


class TestLatentDistanceProfile:
    def test_worked_example(self):
        latents = LatentSet(np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]]), m=2, source_length=4)
        profile = latent_distance_profile(np.array([0.0, 0.0]), latents)
        np.testing.assert_array_equal(profile.values, [0.0, 3.0, 4.0])

    def test_range_matches_naive(self, rng):
        latents = LatentSet(rng.normal(size=(50, 6)), m=4, source_length=53)
        query = rng.normal(size=6)
        profile = latent_distance_profile(query, latents, lo=10, hi=30)
        naive = np.linalg.norm(latents.vectors[10:30] - query, axis=1)
        np.testing.assert_allclose(profile.values, naive, rtol=1e-12)

    def test_invalid_range(self, rng):
        latents = LatentSet(rng.normal(size=(5, 2)), m=2, source_length=6)
        with pytest.raises(ValidationError):
            latent_distance_profile(np.zeros(2), latents, lo=3, hi=2)

    def test_dimension_mismatch(self, rng):
        latents = LatentSet(rng.normal(size=(5, 2)), m=2, source_length=6)
        with pytest.raises(ShapeError):
            latent_distance_profile(np.zeros(3), latents)


class TestCollapse:
    def test_periodic_vectors_find_their_repeat(self, rng):
        base = rng.normal(size=(10, 3))
        latents = LatentSet(np.tile(base, (6, 1)), m=4, source_length=63)
        pair = collapse(latents, tc=None)
        np.testing.assert_array_equal(pair.profile, 0.0)
        rows = np.arange(60)
        expected = np.where(rows < 10, rows + 10, rows % 10)
        np.testing.assert_array_equal(pair.index, expected)

    @pytest.mark.parametrize('direction', [BIDIRECTIONAL, FORWARD])
    @pytest.mark.parametrize('tc,exclusion', [(None, 1), (20, 1), (20, 3), (5, 5)])
    def test_matches_quadratic_oracle(self, direction, tc, exclusion):
        latents = random_latents(4, count=120, dim=3)
        pair = collapse(latents, tc, direction, exclusion)
        profile, index = collapse_oracle(latents.vectors, tc, direction, exclusion)
        np.testing.assert_allclose(pair.profile, profile, rtol=1e-12)
        np.testing.assert_array_equal(pair.index, index)

    def test_neighbours_respect_constraint(self):
        pair = collapse(random_latents(5, count=300), tc=12, exclusion=2)
        found = pair.index >= 0
        gaps = np.abs(pair.index[found] - np.arange(300)[found])
        assert np.all((gaps >= 2) & (gaps <= 12))
        assert np.all(found)

    def test_forward_tail_has_no_neighbour(self):
        pair = collapse(random_latents(6, count=50), tc=10, direction=FORWARD)
        assert pair.index[-1] == NO_NEIGHBOR
        assert np.isinf(pair.profile[-1])

    def test_forward_never_below_bidirectional(self):
        latents = random_latents(7, count=400)
        fwd = collapse(latents, 30, FORWARD)
        bi = collapse(latents, 30, BIDIRECTIONAL)
        assert np.all(fwd.profile >= bi.profile)

    def test_too_few_vectors(self):
        with pytest.raises(ValidationError):
            collapse(random_latents(0, count=3), tc=2, exclusion=1)

    def test_rejects_bad_tc(self):
        with pytest.raises(ValidationError):
            collapse(random_latents(0, count=20), tc=0)


class TestBatchedCollapse:
    @pytest.mark.parametrize('direction', [BIDIRECTIONAL, FORWARD])
    @pytest.mark.parametrize('tc', [16, 64])
    def test_identical_to_collapse(self, tc, direction):
        latents = random_latents(8)
        reference = collapse(latents, tc, direction)
        for t_lim in (2 * tc + 1, 4 * tc, latents.count):
            meter = {}
            pair = batched_collapse(latents, t_lim, tc, direction=direction, meter=meter)
            assert np.array_equal(pair.profile, reference.profile)
            assert np.array_equal(pair.index, reference.index)
            assert meter['batches'] == -(-latents.count // t_lim)
            assert meter['peak_entries'] <= t_lim * (2 * tc + 1)

    def test_rejects_short_batches(self):
        with pytest.raises(ValidationError):
            batched_collapse(random_latents(1), t_lim=20, tc=10)

    @pytest.mark.slow
    def test_desk_scale(self):
        latents = random_latents(9, count=10400, dim=3)
        reference = collapse(latents, 500)
        for t_lim in (1001, 2600, 10400):
            pair = batched_collapse(latents, t_lim, 500)
            assert np.array_equal(pair.profile, reference.profile)
            assert np.array_equal(pair.index, reference.index)


class TestOnline:
    @pytest.mark.parametrize('chunk', [1, 7, 16])
    def test_forward_chunks_match_collapse(self, chunk):
        tc = 16
        latents = random_latents(10, count=300)
        reference = collapse(latents, tc, FORWARD)
        state = LsmpState(tc, FORWARD)
        for start in range(0, latents.count, chunk):
            online_update(state, latents.vectors[start:start + chunk])
            assert state.count - state.processed <= tc
        final = state.profile_pair
        assert np.array_equal(final.profile, reference.profile)
        assert np.array_equal(final.index, reference.index)
        done = state.finalized_pair()
        assert len(done) == latents.count - tc
        assert np.array_equal(done.profile, reference.profile[:len(done)])

    @pytest.mark.parametrize('chunk', [1, 5, 40])
    def test_bidirectional_append_matches_collapse(self, chunk):
        latents = random_latents(11, count=250)
        reference = collapse(latents, 20, BIDIRECTIONAL, exclusion=2)
        state = LsmpState(20, BIDIRECTIONAL, exclusion=2)
        for start in range(0, latents.count, chunk):
            state.append(latents.vectors[start:start + chunk])
        assert np.array_equal(state.profile_pair.profile, reference.profile)
        assert np.array_equal(state.profile_pair.index, reference.index)

    @pytest.mark.parametrize('direction', [FORWARD, BIDIRECTIONAL])
    def test_released_rows_keep_the_rest_exact(self, direction):
        latents = random_latents(14, count=400)
        reference = collapse(latents, 20, direction, exclusion=2)
        state = LsmpState(20, direction, exclusion=2)
        kept = []
        for start in range(0, latents.count, 9):
            state.append(latents.vectors[start:start + 9])
            done = state.finalized_pair()
            kept.append(done.index[:len(done) - 5] if len(done) > 5 else done.index[:0])
            state.release(state.base + len(kept[-1]))
            assert len(state.profile) <= 20 + 9 + 5
        kept.append(state.index)
        assert state.count == latents.count
        np.testing.assert_array_equal(np.concatenate(kept), reference.index)

    def test_release_refuses_live_rows(self):
        state = LsmpState(10, FORWARD)
        state.append(random_latents(15, count=30).vectors)
        with pytest.raises(ValidationError):
            state.release(25)

    def test_batch_length_buffers_until_flush(self):
        latents = random_latents(12, count=100)
        state = LsmpState(10, FORWARD, batch_len=25)
        assert state.append(latents.vectors[:10]) == 0
        assert state.count == 0
        assert state.append(latents.vectors[10:30]) == 30
        state.append(latents.vectors[30:])
        state.flush()
        reference = collapse(latents, 10, FORWARD)
        assert np.array_equal(state.profile_pair.profile, reference.profile)

    def test_empty_update_is_noop(self):
        latents = random_latents(13, count=50)
        state = online_update(LsmpState(8), latents.vectors)
        before = state.profile.copy()
        online_update(state, np.empty((0, latents.latent_dim)))
        assert state.count == 50
        np.testing.assert_array_equal(state.profile, before)

    def test_online_update_needs_forward(self):
        with pytest.raises(ValidationError):
            online_update(LsmpState(8, BIDIRECTIONAL), np.zeros((3, 2)))

    def test_dimension_change(self):
        state = LsmpState(4)
        state.append(np.zeros((3, 2)))
        with pytest.raises(ShapeError):
            state.append(np.zeros((3, 5)))
