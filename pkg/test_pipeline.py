from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import binomtest

from autoenc import CONVOLUTIONAL, FULLY_CONNECTED, TrainConfig, build_arch, init_model
from conftest import two_regime_series
from core import TimeSeries, fit_scaler
from datasets import SynthSpec, generate_synthetic
from errors import ShapeError, ValidationError
from evaluation import ModelCache, score_regimes
from extract import LREA, LTEA, REA, TRAILING, CENTERED
from matprof import BIDIRECTIONAL, FORWARD
from pipeline import (FLOSS, FLUSS, FLUSS_EPS, LFMD, LSUSS, LSUSS_EPS, LSUSS_ONLINE, PipelineConfig,
                      StreamingSegmenter, finalized_length, lsuss_profile, profile_cac, replay, run_floss, run_fluss,
                      run_lfmd, run_lsuss, run_lsuss_online, run_pipeline, stream_floss, stream_fluss)


@pytest.fixture
def small_model():
    return init_model(build_arch(FULLY_CONNECTED, 1, 16), seed=2)


def short_two_regimes(seed=3, n_each=200):
    return TimeSeries(two_regime_series(seed, n_each=n_each))


class TestPipelineConfig:
    def test_floss_needs_tc(self):
        with pytest.raises(ValidationError, match='temporal constraint'):
            PipelineConfig(FLOSS, nw=50, local_window=100)

    def test_conv_window_checked_for_model_runs(self):
        with pytest.raises(ValidationError, match='divisible by 4'):
            PipelineConfig(LSUSS, nw=50, tc=200, arch=CONVOLUTIONAL, k=2)
        assert PipelineConfig(FLUSS, nw=50, arch=CONVOLUTIONAL, k=2).nw == 50

    def test_batch_length_must_exceed_twice_tc(self):
        with pytest.raises(ValidationError, match='t_lim'):
            PipelineConfig(LSUSS, nw=16, tc=50, k=1, t_lim=100)

    @pytest.mark.parametrize('settings,expected', [
        ({'k': 2}, REA),
        ({'k': 2, 'local_window': 100}, LREA),
        ({'local_window': 100}, LTEA),
        ({'k': 2, 'local_window': 100, 'extractor': LTEA}, LTEA),
    ])
    def test_resolved_extractor(self, settings, expected):
        assert PipelineConfig(FLUSS, nw=50, **settings).resolved_extractor == expected

    def test_ltea_needs_local_window(self):
        with pytest.raises(ValidationError, match='local window'):
            PipelineConfig(FLUSS, nw=50)

    def test_rea_needs_k(self):
        with pytest.raises(ValidationError, match='k'):
            PipelineConfig(FLUSS, nw=50, extractor=REA)

    def test_directions_and_rolling_modes(self):
        assert PipelineConfig(FLOSS, nw=20, tc=40, local_window=30).direction == FORWARD
        assert PipelineConfig(LSUSS_ONLINE, nw=20, tc=40, local_window=30).direction == FORWARD
        assert PipelineConfig(LSUSS_EPS, nw=20, tc=40, local_window=30).direction == BIDIRECTIONAL
        assert PipelineConfig(FLOSS, nw=20, tc=40, local_window=30).rolling_params.mode == TRAILING
        assert PipelineConfig(FLUSS, nw=20, local_window=30).rolling_params.mode == CENTERED

    def test_lag(self):
        assert PipelineConfig(FLOSS, nw=20, tc=40, local_window=30).lag == 40
        assert PipelineConfig(LSUSS_EPS, nw=20, tc=40, local_window=30).lag == 80
        assert finalized_length(200, PipelineConfig(LSUSS_EPS, nw=20, tc=40, local_window=30)) == 100
        assert finalized_length(50, PipelineConfig(LSUSS_EPS, nw=20, tc=40, local_window=30)) == 0

    def test_dict_round_trip(self):
        cfg = PipelineConfig(LFMD, nw=32, step=8, k=3, scaler='robust')
        assert PipelineConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_setting(self):
        with pytest.raises(ValidationError, match='colour'):
            PipelineConfig.from_dict({'algorithm': FLUSS, 'nw': 10, 'k': 1, 'colour': 'red'})

    def test_unknown_algorithm(self):
        with pytest.raises(ValidationError):
            PipelineConfig('clasp', nw=10, k=1)


class TestFluss:
    def test_duplicated_channel_matches_single(self):
        x = two_regime_series(5, n_each=200)[0]
        cfg = PipelineConfig(FLUSS, nw=20, k=1)
        single, found_single = run_fluss(TimeSeries(x), cfg)
        double, found_double = run_fluss(TimeSeries(np.vstack([x, x])), cfg)
        np.testing.assert_array_equal(single.values, double.values)
        assert found_single.tolist() == found_double.tolist()

    def test_finds_the_boundary(self, two_regimes):
        ts, boundary = two_regimes
        cfg = PipelineConfig(FLUSS, nw=40, k=1)
        curve, found = run_fluss(ts, cfg)
        assert len(curve) == ts.n - cfg.nw + 1
        assert abs(found.tolist()[0] - boundary) <= cfg.nw
        assert np.all((curve.values >= 0) & (curve.values <= 1))

    def test_short_series_fails_fast(self):
        with pytest.raises(ValidationError, match='shorter than'):
            run_fluss(TimeSeries(np.random.default_rng(0).normal(size=70)), PipelineConfig(FLUSS, nw=40, k=1))

    def test_wrong_algorithm(self, two_regimes):
        with pytest.raises(ValidationError):
            run_fluss(two_regimes[0], PipelineConfig(FLOSS, nw=40, tc=100, local_window=50))

    def test_run_pipeline_returns_values(self, two_regimes):
        cfg = PipelineConfig(FLUSS, nw=40, k=1)
        values, found = run_pipeline(two_regimes[0], cfg)
        curve, again = run_fluss(two_regimes[0], cfg)
        np.testing.assert_array_equal(values, curve.values)
        assert found.tolist() == again.tolist()

    @pytest.mark.slow
    def test_three_channel_detection_rate(self):
        cfg = PipelineConfig(FLUSS, nw=40, k=1)
        hits = 0
        for seed in range(10):
            _, found = run_fluss(TimeSeries(two_regime_series(seed, nc=3)), cfg)
            hits += abs(found.tolist()[0] - 500) <= cfg.nw
        assert hits >= 8

    @pytest.mark.slow
    def test_noise_channels_have_no_boundary_preference(self):
        cfg = PipelineConfig(FLUSS, nw=40, k=1)
        hits = 0
        for seed in range(100):
            labeled = generate_synthetic(SynthSpec(nc_informative=1, nc_noise=2, seed=seed))
            boundary = labeled.change_points.tolist()[0]
            noise = TimeSeries(labeled.series.data[1:])
            curve, found = run_fluss(noise, cfg)
            hits += abs(found.tolist()[0] - boundary) <= cfg.nw
        # unpinned positions: everything but nw at either end
        chance = (2 * cfg.nw + 1) / (len(curve) - 2 * cfg.nw)
        assert binomtest(hits, 100, chance, alternative='greater').pvalue > 0.05


class TestFloss:
    def test_forward_curve(self):
        ts = short_two_regimes()
        cfg = PipelineConfig(FLOSS, nw=20, tc=60, local_window=40, n_trials=20)
        curve, found = run_floss(ts, cfg)
        assert curve.direction == FORWARD
        assert len(curve) == ts.n - cfg.nw + 1
        assert all(p < finalized_length(len(curve), cfg) for p in found.tolist())

    @pytest.mark.parametrize('chunk', [1, 37])
    def test_stream_matches_batch(self, chunk):
        ts = short_two_regimes()
        cfg = PipelineConfig(FLOSS, nw=20, tc=60, local_window=40, n_trials=20)
        curve, found = run_floss(ts, cfg)
        segmenter = StreamingSegmenter(cfg, ts.nc)
        updates = list(replay(segmenter, ts, chunk=chunk))
        settled = finalized_length(len(curve), cfg)
        streamed = np.concatenate([u.cac_values for u in updates])
        assert segmenter.settled == settled == len(streamed)
        np.testing.assert_array_equal(streamed, curve.values[:settled])
        assert segmenter.emitted.tolist() == found.tolist()
        assert updates[-1].finalized == settled

    def test_batch_size_does_not_change_output(self):
        ts = short_two_regimes(seed=8)
        cfg = PipelineConfig(FLOSS, nw=20, tc=60, local_window=40, n_trials=20)
        one = list(stream_floss(ts, cfg))
        many = list(stream_floss(ts, replace(cfg, epsilon_batch=64)))
        assert one[-1].emitted == many[-1].emitted
        np.testing.assert_array_equal(np.concatenate([u.cac_values for u in one]),
                                      np.concatenate([u.cac_values for u in many]))
        assert len(many) < len(one)

    def test_no_emission_before_finalization(self):
        ts = short_two_regimes(seed=4)
        cfg = PipelineConfig(FLOSS, nw=20, tc=60, local_window=40, n_trials=20)
        for update in stream_floss(ts, cfg):
            for p in update.new_points:
                assert update.samples_seen >= p + cfg.tc + cfg.local_window
            assert update.finalized <= max(0, update.samples_seen - cfg.tc - 2 * cfg.nw + 1)

    def test_chunk_iterable_needs_channel_count(self):
        cfg = PipelineConfig(FLOSS, nw=20, tc=60, local_window=40)
        with pytest.raises(ValidationError):
            list(stream_floss(iter([np.zeros((1, 10))]), cfg))

    @pytest.mark.slow
    def test_detection_rate(self):
        cfg = PipelineConfig(FLOSS, nw=40, tc=200, k=1)
        hits = 0
        for seed in range(50):
            _, found = run_floss(TimeSeries(two_regime_series(seed)), cfg)
            hits += abs(found.tolist()[0] - 500) <= 2 * cfg.nw
        assert hits >= 40


class TestFlussEps:
    cfg = PipelineConfig(FLUSS_EPS, nw=20, tc=60, local_window=40, n_trials=20)

    def test_bidirectional_with_double_lag(self):
        assert self.cfg.direction == BIDIRECTIONAL
        assert self.cfg.lag == 120
        assert self.cfg.rolling_params.mode == TRAILING
        with pytest.raises(ValidationError, match='temporal constraint'):
            PipelineConfig(FLUSS_EPS, nw=20, local_window=40)

    def test_batch_curve_is_constrained(self):
        ts = short_two_regimes()
        curve, found = run_fluss(ts, self.cfg)
        assert curve.tc == 60 and curve.direction == BIDIRECTIONAL
        assert all(p < finalized_length(len(curve), self.cfg) for p in found.tolist())

    @pytest.mark.parametrize('chunk', [1, 37])
    def test_stream_matches_batch(self, chunk):
        ts = short_two_regimes()
        curve, found = run_fluss(ts, self.cfg)
        updates = list(replay(StreamingSegmenter(self.cfg, ts.nc), ts, chunk=chunk))
        settled = finalized_length(len(curve), self.cfg)
        streamed = np.concatenate([u.cac_values for u in updates])
        assert len(streamed) == settled
        np.testing.assert_array_equal(streamed, curve.values[:settled])
        assert list(updates[-1].emitted) == found.tolist()

    def test_batch_size_does_not_change_output(self):
        ts = TimeSeries(two_regime_series(8, n_each=200, nc=2))
        one = list(stream_fluss(ts, self.cfg))
        many = list(stream_fluss(ts, replace(self.cfg, epsilon_batch=64)))
        assert one[-1].emitted == many[-1].emitted
        np.testing.assert_array_equal(np.concatenate([u.cac_values for u in one]),
                                      np.concatenate([u.cac_values for u in many]))
        assert len(many) < len(one)

    def test_other_algorithms_rejected(self):
        with pytest.raises(ValidationError):
            list(stream_fluss(short_two_regimes(), PipelineConfig(FLOSS, nw=20, tc=60, local_window=40)))
        with pytest.raises(ValidationError):
            list(stream_floss(short_two_regimes(), self.cfg))


class TestBoundedStreaming:
    @pytest.mark.parametrize('algorithm', [FLOSS, FLUSS_EPS])
    def test_state_stays_small_on_a_long_stream(self, algorithm):
        cfg = PipelineConfig(algorithm, nw=8, tc=30, local_window=30, n_trials=5)
        ts = TimeSeries(np.random.default_rng(21).normal(size=20000))
        segmenter = StreamingSegmenter(cfg, 1)
        for _ in replay(segmenter, ts, chunk=100):
            assert segmenter.retained_rows <= cfg.lag + cfg.nw + cfg.tc
            assert len(segmenter.profiles[0].samples) <= 2 * cfg.tc + cfg.nw
        assert segmenter.samples_seen == 20000
        assert segmenter.settled == finalized_length(20000 - 8 + 1, cfg)

    def test_latent_state_released(self, small_model):
        cfg = PipelineConfig(LSUSS_EPS, nw=16, tc=30, local_window=30, n_trials=5)
        ts = TimeSeries(np.random.default_rng(22).normal(size=3000))
        segmenter = StreamingSegmenter(cfg, 1, small_model)
        for _ in replay(segmenter, ts, chunk=50):
            assert segmenter.retained_rows <= cfg.lag + cfg.nw + cfg.tc
        assert segmenter.state.count == 3000 - 16 + 1


class TestStreamingSegmenter:
    def test_rejects_offline_algorithms(self):
        with pytest.raises(ValidationError, match='no streaming mode'):
            StreamingSegmenter(PipelineConfig(FLUSS, nw=20, local_window=40), 1)

    def test_rejects_count_based_extraction(self):
        with pytest.raises(ValidationError, match='LTEA'):
            StreamingSegmenter(PipelineConfig(FLOSS, nw=20, tc=40, k=2), 1)

    def test_rejects_centered_scaling(self):
        cfg = PipelineConfig(FLOSS, nw=20, tc=40, local_window=30, rolling_mode=CENTERED)
        with pytest.raises(ValidationError, match='trailing'):
            StreamingSegmenter(cfg, 1)

    def test_fitted_scaler_required(self):
        cfg = PipelineConfig(FLOSS, nw=20, tc=40, local_window=30, scaler='standard')
        with pytest.raises(ValidationError, match='fitted'):
            StreamingSegmenter(cfg, 1)
        scaler = fit_scaler('standard', short_two_regimes())
        assert StreamingSegmenter(cfg, 1, scaler=scaler).samples_seen == 0

    def test_channel_mismatch(self):
        segmenter = StreamingSegmenter(PipelineConfig(FLOSS, nw=20, tc=40, local_window=30), 2)
        with pytest.raises(ShapeError):
            segmenter.push(np.zeros((3, 5)))

    def test_non_finite_sample(self):
        segmenter = StreamingSegmenter(PipelineConfig(FLOSS, nw=20, tc=40, local_window=30), 1)
        with pytest.raises(ValidationError, match='non-finite'):
            segmenter.push(np.array([[1.0, np.nan]]))

    def test_buffers_until_epsilon(self):
        segmenter = StreamingSegmenter(PipelineConfig(FLOSS, nw=20, tc=40, local_window=30, epsilon_batch=10), 1)
        assert segmenter.push(np.zeros(4)) is None
        assert segmenter.samples_seen == 0
        update = segmenter.push(np.ones(6))
        assert update is not None and update.samples_seen == 10
        assert segmenter.flush() is None


class TestLsussStreaming:
    @pytest.mark.parametrize('algorithm', [LSUSS_ONLINE, LSUSS_EPS])
    def test_stream_matches_batch(self, small_model, algorithm):
        ts = short_two_regimes(seed=6, n_each=150)
        cfg = PipelineConfig(algorithm, nw=16, tc=30, local_window=30, n_trials=20)
        curve, found = run_lsuss(ts, cfg, small_model)
        updates = list(run_lsuss_online(ts, cfg, small_model))
        settled = finalized_length(len(curve), cfg)
        streamed = np.concatenate([u.cac_values for u in updates])
        assert len(streamed) == settled
        np.testing.assert_array_equal(streamed, curve.values[:settled])
        assert list(updates[-1].emitted) == found.tolist()

    def test_epsilon_batch_invariance(self, small_model):
        ts = short_two_regimes(seed=9, n_each=150)
        cfg = PipelineConfig(LSUSS_EPS, nw=16, tc=30, local_window=30, n_trials=20)
        one = list(run_lsuss_online(ts, cfg, small_model))
        hundred = list(run_lsuss_online(ts, replace(cfg, epsilon_batch=100), small_model))
        assert one[-1].emitted == hundred[-1].emitted
        np.testing.assert_array_equal(np.concatenate([u.cac_values for u in one]),
                                      np.concatenate([u.cac_values for u in hundred]))

    def test_wrong_algorithm(self, small_model):
        with pytest.raises(ValidationError):
            run_lsuss_online(short_two_regimes(), PipelineConfig(LSUSS, nw=16, tc=30, k=1), small_model)

    def test_model_shape_checked(self, small_model):
        cfg = PipelineConfig(LSUSS_ONLINE, nw=32, tc=30, local_window=30)
        with pytest.raises(ShapeError):
            StreamingSegmenter(cfg, 1, small_model)


class TestLsuss:
    def test_batched_matches_unbatched(self, small_model):
        ts = short_two_regimes(seed=2)
        cfg = PipelineConfig(LSUSS, nw=16, tc=40, k=1, n_trials=20)
        plain, found_plain = run_lsuss(ts, cfg, small_model)
        meter = {}
        batched, found_batched = run_lsuss(ts, replace(cfg, t_lim=100), small_model, meter=meter)
        np.testing.assert_array_equal(plain.values, batched.values)
        assert found_plain.tolist() == found_batched.tolist()
        assert meter['batches'] == -(-(ts.n - 16 + 1) // 100)

    def test_curve_shape_and_range(self, small_model):
        ts = short_two_regimes(seed=2)
        cfg = PipelineConfig(LSUSS, nw=16, tc=40, k=2, n_trials=20)
        curve, found = run_lsuss(ts, cfg, small_model)
        assert len(curve) == ts.n - 15
        assert curve.tc == 40 and curve.direction == BIDIRECTIONAL
        assert np.all((curve.values >= 0) & (curve.values <= 1))
        np.testing.assert_array_equal(curve.values[:16], 1.0)
        assert len(found) == 2

    def test_needs_model(self):
        with pytest.raises(ValidationError, match='autoencoder'):
            run_lsuss(short_two_regimes(), PipelineConfig(LSUSS, nw=16, tc=40, k=1), None)

    def test_architecture_kind_checked(self, small_model):
        cfg = PipelineConfig(LSUSS, nw=16, tc=40, k=1, arch=CONVOLUTIONAL)
        with pytest.raises(ValidationError, match="'fc'"):
            run_lsuss(short_two_regimes(), cfg, small_model)

    def test_deterministic(self, small_model):
        ts = short_two_regimes(seed=2)
        cfg = PipelineConfig(LSUSS, nw=16, tc=40, k=1, n_trials=20)
        a, _ = run_lsuss(ts, cfg, small_model)
        b, _ = run_lsuss(ts, cfg, small_model)
        np.testing.assert_array_equal(a.values, b.values)

    def test_no_arc_spans_duplicated_halves(self, small_model):
        half = two_regime_series(11, n_each=150)[0]
        ts = TimeSeries(np.concatenate([half, half]))
        cfg = PipelineConfig(LSUSS, nw=16, tc=100, k=1, n_trials=20)
        pair = lsuss_profile(ts, cfg, small_model)
        rows = np.arange(len(pair))
        assert np.all(pair.index >= 0)
        assert np.all(np.abs(pair.index - rows) <= cfg.tc)
        curve, _ = run_lsuss(ts, cfg, small_model)
        np.testing.assert_array_equal(curve.values, profile_cac(pair, cfg).values)

    @pytest.mark.slow
    def test_beats_fluss_on_mixed_channel_suite(self):
        fluss_scores, lsuss_scores = [], []
        for seed in range(20):
            labeled = generate_synthetic(SynthSpec(nc_informative=3, nc_redundant=3, nc_noise=3, regime_count=4,
                                                   seed=seed))
            ts, truth = labeled.series, labeled.change_points
            fluss_cfg = PipelineConfig(FLUSS, nw=40, k=len(truth))
            lsuss_cfg = PipelineConfig(LSUSS, nw=40, tc=400, k=len(truth), n_trials=50, seed=seed)
            model = ModelCache([labeled], TrainConfig(max_epochs=15, seed=seed))(lsuss_cfg, ts.nc, None)
            _, fluss_found = run_fluss(ts, fluss_cfg)
            _, lsuss_found = run_lsuss(ts, lsuss_cfg, model)
            fluss_scores.append(score_regimes(fluss_found, truth, ts.n).value)
            lsuss_scores.append(score_regimes(lsuss_found, truth, ts.n).value)
        wins = sum(a <= b for a, b in zip(lsuss_scores, fluss_scores))
        assert wins >= 12
        assert np.mean(lsuss_scores) < np.mean(fluss_scores)


class TestLfmd:
    def test_curve_length(self, small_model):
        ts = short_two_regimes()
        cfg = PipelineConfig(LFMD, nw=16, step=8, k=1)
        curve, found = run_lfmd(ts, cfg, small_model)
        windows = (ts.n - 16) // 8 + 1
        assert len(curve) == windows - 1
        assert len(found) == 1
        assert (found.tolist()[0] - 8) % 8 == 0

    def test_identical_windows_give_nothing(self, small_model):
        ts = TimeSeries(np.full(400, 0.25))
        cfg = PipelineConfig(LFMD, nw=16, step=8, local_window=40)
        curve, found = run_lfmd(ts, cfg, small_model)
        np.testing.assert_array_equal(curve, 0.0)
        assert len(found) == 0

    def test_default_step_is_half_window(self, small_model):
        cfg = PipelineConfig(LFMD, nw=16, k=1)
        assert cfg.lfmd_step == 8
        curve, _ = run_lfmd(short_two_regimes(), cfg, small_model)
        assert len(curve) == (400 - 16) // 8

    def test_too_few_windows(self, small_model):
        with pytest.raises(ValidationError):
            run_lfmd(TimeSeries(np.zeros(20)), PipelineConfig(LFMD, nw=16, step=8, k=1), small_model)
