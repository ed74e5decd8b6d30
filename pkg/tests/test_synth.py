"""Synthetic paired-data generator."""

import numpy as np
import pytest

from drumscribe.errors import ValidationError
from drumscribe.features import SAMPLE_RATE, extract_mel, mel_band_centers
from drumscribe.score import quantize_onsets
from drumscribe.synth import (
    SyntheticSpec,
    make_pattern_library,
    synth_dataset,
    synth_scores,
    write_dataset,
)


class TestSpecValidation:
    def test_rejects_bad_values(self):
        with pytest.raises(ValidationError):
            SyntheticSpec(period=12)
        with pytest.raises(ValidationError):
            SyntheticSpec(tempo_min=0)
        with pytest.raises(ValidationError):
            SyntheticSpec(pieces=0)

    def test_tatum_count_from_bars(self):
        assert SyntheticSpec(bars=4).num_tatums == 64  # 16 tatums per 4/4 bar


class TestGeneration:
    def test_zero_noise_single_pattern_identical_pieces(self):
        spec = SyntheticSpec(pieces=3, tempo_min=120, tempo_max=120,
                             pattern_count=1, noise=0.0, bars=2)
        pieces = synth_dataset(spec, np.random.default_rng(0))
        ref = pieces[0]
        for piece in pieces[1:]:
            np.testing.assert_array_equal(piece.score.activations,
                                          ref.score.activations)
            np.testing.assert_array_equal(piece.audio, ref.audio)
            np.testing.assert_array_equal(piece.grid.times, ref.grid.times)

    def test_round_trip_quantization_is_lossless(self):
        spec = SyntheticSpec(pieces=4, bars=3, noise=0.1)
        for piece in synth_dataset(spec, np.random.default_rng(1)):
            score, report = quantize_onsets(piece.events, piece.grid)
            assert report.union == 0
            np.testing.assert_array_equal(score.activations, piece.score.activations)

    def test_tempo_120_four_bars_has_64_tatums(self):
        spec = SyntheticSpec(pieces=1, tempo_min=120, tempo_max=120, bars=4)
        piece = synth_dataset(spec, np.random.default_rng(2))[0]
        assert piece.grid.num_tatums == 64
        # sixteenth spacing at 120 bpm is 125 ms
        np.testing.assert_allclose(np.diff(piece.grid.times), 0.125)

    def test_pattern_library_shape_and_periodicity(self):
        patterns = make_pattern_library(6, 16, np.random.default_rng(3))
        assert patterns.shape == (6, 3, 16)
        assert np.isin(patterns, (0, 1)).all()

    def test_scores_only_corpus(self):
        spec = SyntheticSpec(pieces=7, bars=2)
        scores = synth_scores(spec, np.random.default_rng(4))
        assert len(scores) == 7
        assert all(s.num_tatums == 32 for s in scores)

    def test_instruments_occupy_distinct_bands(self):
        """Each instrument's burst energy peaks in its own mel region."""
        spec = SyntheticSpec(pieces=1, tempo_min=120, tempo_max=120, bars=2)
        piece = synth_dataset(spec, np.random.default_rng(5))[0]
        centers = mel_band_centers()
        # render each instrument alone by silencing the others
        from drumscribe.synth import render_audio, render_burst_bank

        bursts = render_burst_bank(np.random.default_rng(5))
        from drumscribe.score import OnsetEvent

        peaks = []
        for m in range(3):
            audio = render_audio([OnsetEvent(m, 0.5)], 1.0, bursts)
            feat = extract_mel(audio, SAMPLE_RATE)
            band = int(feat.values[0, :, 50].argmax())
            peaks.append(centers[band])
        assert peaks[0] < 200          # kick: low band
        assert 150 < peaks[1] < 3000   # snare: mid band
        assert peaks[2] > 4000         # hats: high band


class TestDatasetFiles:
    def test_written_files_are_consistent(self, tmp_path):
        from drumscribe.dataset import load_train_piece, scan_dataset

        spec = SyntheticSpec(pieces=2, bars=2)
        pieces = synth_dataset(spec, np.random.default_rng(6))
        write_dataset(pieces, tmp_path)
        entries = scan_dataset(tmp_path)
        assert [e.name for e in entries] == ["piece_000", "piece_001"]
        loaded = load_train_piece(entries[0])
        np.testing.assert_array_equal(loaded.score.activations,
                                      pieces[0].score.activations)
        assert loaded.grid.num_tatums == pieces[0].grid.num_tatums
        assert loaded.feature.num_frames >= pieces[0].grid.frame_indices[-1] + 1
