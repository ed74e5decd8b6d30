"""Frame-level baseline and peak picking."""

import math

import numpy as np
import pytest
import torch

from drumscribe.baseline import (
    PeakPickConfig,
    build_frame_model,
    frame_loss,
    frame_targets,
    frames_to_tatums,
    peak_pick,
)
from drumscribe.errors import ValidationError
from drumscribe.features import MelFeature
from drumscribe.score import OnsetEvent, TatumGrid


def row(values):
    """Single-instrument probability matrix."""
    return np.asarray(values, dtype=np.float64)[None, :]


class TestFrameLoss:
    def test_perfect_prediction(self):
        y = torch.tensor(np.random.default_rng(0).integers(0, 2, (3, 30)),
                         dtype=torch.float64)
        assert float(frame_loss(y.clone(), y, (1.0, 1.0, 1.0))) < 1e-3

    def test_half_probability_closed_form(self):
        m, t = 3, 25
        phi = torch.full((m, t), 0.5, dtype=torch.float64)
        y = torch.tensor(np.random.default_rng(1).integers(0, 2, (m, t)),
                         dtype=torch.float64)
        assert float(frame_loss(phi, y, (1.0, 1.0, 1.0))) == \
            pytest.approx(m * t * math.log(2), abs=1e-9)

    def test_snare_weight_scales_linearly(self):
        phi = torch.full((3, 4), 0.5, dtype=torch.float64)
        y = torch.zeros(3, 4, dtype=torch.float64)
        y[1] = 1.0  # four snare onsets
        base = float(frame_loss(phi, y, (1.0, 1.0, 1.0)))
        double = float(frame_loss(phi, y, (1.0, 2.0, 1.0)))
        assert double - base == pytest.approx(4 * math.log(2), abs=1e-9)


class TestPeakPick:
    def test_flat_low_signal_has_no_onsets(self):
        picked = peak_pick(row([0.1] * 30))
        assert picked[0] == []

    def test_isolated_peak(self):
        values = [0.1] * 20
        values[10] = 0.9
        picked = peak_pick(row(values))
        assert picked[0] == [10]

    def test_twin_peaks_two_frames_apart(self):
        """The second equal peak fails the minimum-gap rule (needs a gap
        greater than w5 = 2)."""
        values = [0.0] * 20
        values[8] = values[10] = 0.9
        picked = peak_pick(row(values))
        assert picked[0] == [8]

    def test_peaks_three_frames_apart_both_kept(self):
        values = [0.0] * 20
        values[8] = values[11] = 0.9
        picked = peak_pick(row(values))
        assert picked[0] == [8, 11]

    def test_gap_rule_uses_accepted_onsets_only(self):
        # per-instrument independence: a pick on one row never blocks another
        values = np.zeros((3, 15))
        values[0, 5] = values[1, 6] = 0.9
        picked = peak_pick(values)
        assert picked[0] == [5] and picked[1] == [6]

    def test_mean_condition_needs_margin(self):
        # local max but only 0.15 above the window mean: rejected at 0.2
        values = [0.5] * 10
        values[5] = 0.65
        assert peak_pick(row(values))[0] == []

    def test_consecutive_gaps_exceed_w5(self):
        rng = np.random.default_rng(0)
        phi = rng.random((3, 300)) ** 3
        for picks in peak_pick(phi):
            gaps = np.diff(picks)
            assert (gaps > 2).all()

    def test_shift_moves_picks(self):
        rng = np.random.default_rng(1)
        base = rng.random(80) ** 3
        shifted = np.roll(base, 9)
        a = peak_pick(row(base))[0]
        b = peak_pick(row(shifted))[0]
        interior = [t + 9 for t in a if 10 <= t < 65]
        assert set(interior) <= set(b)

    def test_rejects_bad_shape(self):
        with pytest.raises(ValidationError):
            peak_pick(np.zeros(10))
        with pytest.raises(ValidationError):
            PeakPickConfig(w1=-1)


class TestFramesToTatums:
    def test_delegates_to_quantizer(self):
        grid = TatumGrid(np.arange(1, 6) * 0.2)
        # frames at 100 fps: tatum times map to frames 20, 40, ...
        score, report = frames_to_tatums([[20, 60], [], [40]], grid)
        assert score.activations[0, 0] == 1
        assert score.activations[0, 2] == 1
        assert score.activations[2, 1] == 1
        assert report.union == 0

    def test_far_frame_counted(self):
        grid = TatumGrid(np.arange(1, 6) * 0.2)
        _, report = frames_to_tatums([[30], [], []], grid)  # 0.30 s: 100 ms away
        assert report.far == 1

    def test_wrong_instrument_count_rejected(self):
        with pytest.raises(ValidationError):
            frames_to_tatums([[1], [2]], TatumGrid(np.array([0.5])))


class TestFrameModel:
    def test_probability_shape_matches_frames(self):
        torch.manual_seed(0)
        model = build_frame_model(d_f=8, hidden=6, layers=1)
        rng = np.random.default_rng(0)
        feat = MelFeature(rng.random((1, 80, 90), dtype=np.float32), ("music",))
        phi = model.frame_probabilities(feat)
        assert phi.shape == (3, 90)
        assert (phi > 0).all() and (phi < 1).all()

    def test_transcribe_is_rejected(self):
        model = build_frame_model(d_f=8, hidden=6, layers=1)
        with pytest.raises(ValidationError):
            model.transcribe(None, None)

    def test_checkpoint_round_trip(self, tmp_path):
        from drumscribe.transcriber import load_model, save_model

        torch.manual_seed(0)
        model = build_frame_model(d_f=8, hidden=6, layers=1)
        save_model(model, tmp_path / "frame.pt")
        again = load_model(tmp_path / "frame.pt")
        assert again.config["kind"] == "frame_bigru"

    def test_targets_from_events(self):
        events = [OnsetEvent(0, 0.10), OnsetEvent(2, 0.505)]
        y = frame_targets(events, num_frames=60, frame_rate=100.0)
        assert y[0, 10] == 1
        assert y[2, 51] == 1  # floor(50.5 + 0.5)
        assert y.sum() == 2

    def test_short_training_reduces_frame_loss(self):
        torch.manual_seed(0)
        rng = np.random.default_rng(0)
        model = build_frame_model(d_f=8, hidden=6, layers=1)
        feat = torch.tensor(rng.random((1, 1, 80, 60), dtype=np.float64).astype(np.float32))
        y = torch.tensor(frame_targets([OnsetEvent(0, 0.2), OnsetEvent(1, 0.4)],
                                       60, 100.0).astype(np.float32))
        opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
        model.train()
        losses = []
        for _ in range(40):
            opt.zero_grad()
            phi, _ = model(feat)
            loss = frame_loss(phi[0].T, y, (1.0, 1.0, 1.0))
            loss.backward()
            opt.step()
            losses.append(float(loss))
        assert losses[-1] < losses[0]
