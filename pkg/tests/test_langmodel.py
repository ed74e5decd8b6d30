"""Drum score language models."""

import numpy as np
import pytest
import torch

from drumscribe.errors import ValidationError
from drumscribe.langmodel import (
    BIGRAM_LAG,
    BigramLM,
    BigramParams,
    GRULanguageModel,
    LMScore,
    MaskedLanguageModel,
    MaskedLMConfig,
    bigram_fit,
    corpus_perplexity,
    load_lm,
    mask_count,
    masked_recovery_accuracy,
    mlm_pseudo_nll,
    mlm_train,
    save_lm,
    train_gru_lm,
    unidirectional_nll,
)
from drumscribe.score import DrumScore


def periodic_score(pattern: np.ndarray, n: int) -> DrumScore:
    reps = int(np.ceil(n / pattern.shape[1]))
    return DrumScore(np.tile(pattern, (1, reps))[:, :n])


def small_mlm_cfg(**kw):
    defaults = dict(heads=2, layers=2, d_f=32, d_ffn=128, encoding="sync")
    defaults.update(kw)
    return MaskedLMConfig(**defaults)


BASE_PATTERN = np.array([
    [1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 1, 0, 1, 0, 0, 0],
    [0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0],
    [1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 1],
], dtype=np.uint8)


class TestBigramFit:
    def test_periodic_corpus_saturates(self):
        corpus = [periodic_score(BASE_PATTERN, 256) for _ in range(8)]
        params = bigram_fit(corpus)
        assert params.pi11 > 0.99
        assert params.pi01 < 0.01

    def test_iid_coin_recovers_half(self):
        """Law of large numbers at ~1e4 transitions per state."""
        rng = np.random.default_rng(0)
        corpus = [DrumScore(rng.integers(0, 2, (3, 3400))) for _ in range(2)]
        params = bigram_fit(corpus)
        assert params.pi01 == pytest.approx(0.5, abs=0.02)
        assert params.pi11 == pytest.approx(0.5, abs=0.02)

    def test_all_zero_single_score_smoothing(self):
        n = 48
        corpus = [DrumScore(np.zeros((3, n), dtype=int))]
        params = bigram_fit(corpus)
        count = 3 * (n - BIGRAM_LAG)
        assert params.pi01 == pytest.approx(1 / (count + 2))
        assert params.pi11 == 0.5  # no from-1 transitions: pure smoothing

    def test_short_corpus_falls_back_with_warning(self):
        corpus = [DrumScore(np.ones((3, 10), dtype=int))]
        with pytest.warns(UserWarning):
            params = bigram_fit(corpus)
        assert (params.pi01, params.pi11) == (0.5, 0.5)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValidationError):
            bigram_fit([])


class TestBigramNLL:
    def test_uniform_model_costs_three_bits_per_tatum(self):
        lm = BigramLM(BigramParams(0.5, 0.5))
        rng = np.random.default_rng(1)
        score = DrumScore(rng.integers(0, 2, (3, 40)))
        s = unidirectional_nll(lm, score)
        np.testing.assert_allclose(s.per_tatum_bits, 3.0, atol=1e-9)
        assert s.perplexity == pytest.approx(8.0)

    def test_deterministic_model_on_its_own_score(self):
        """A model that generates a score with probability one scores it
        at perplexity 1 (the intro conditions on the all-zero history,
        so the score must be consistent with that convention)."""
        ones = DrumScore(np.ones((3, 64), dtype=np.uint8))
        s = unidirectional_nll(BigramLM(BigramParams(1.0, 1.0)), ones)
        assert s.perplexity == pytest.approx(1.0, abs=1e-5)
        zeros = DrumScore(np.zeros((3, 64), dtype=np.uint8))
        s = unidirectional_nll(BigramLM(BigramParams(0.0, 0.0)), zeros)
        assert s.perplexity == pytest.approx(1.0, abs=1e-5)

    def test_additive_over_instruments_and_tatums(self):
        lm = BigramLM(BigramParams(0.2, 0.9))
        rng = np.random.default_rng(2)
        score = DrumScore(rng.integers(0, 2, (3, 50)))
        s = unidirectional_nll(lm, score)
        probs = lm.column_probs(score.activations)
        y = score.activations
        per_cell = np.where(y == 1, -np.log2(probs), -np.log2(1 - probs))
        assert s.total_bits == pytest.approx(per_cell.sum())
        np.testing.assert_allclose(s.per_tatum_bits, per_cell.sum(axis=0))

    def test_history_resets_per_piece(self):
        lm = BigramLM(BigramParams(0.2, 0.9))
        rng = np.random.default_rng(3)
        a = DrumScore(rng.integers(0, 2, (3, 40)))
        b = DrumScore(rng.integers(0, 2, (3, 56)))
        assert corpus_perplexity(lm, [a, b]) == corpus_perplexity(lm, [b, a])

    def test_relaxed_binary_endpoints_match_nll(self):
        lm = BigramLM(BigramParams(0.2, 0.9))
        rng = np.random.default_rng(4)
        score = DrumScore(rng.integers(0, 2, (3, 40)))
        bits = lm.relaxed_nll_bits(torch.tensor(score.activations, dtype=torch.float64))
        assert float(bits) == pytest.approx(unidirectional_nll(lm, score).total_bits,
                                            rel=1e-5)

    def test_probabilities_are_proper(self):
        lm = BigramLM(BigramParams(0.2, 0.9))
        rng = np.random.default_rng(5)
        score = DrumScore(rng.integers(0, 2, (3, 30)))
        probs = lm.column_probs(score.activations)
        assert ((probs > 0) & (probs < 1)).all()
        s = unidirectional_nll(lm, score)
        assert (s.per_tatum_bits >= 0).all()  # column likelihood <= 1
        assert s.perplexity >= 1.0


class TestGRULanguageModel:
    def test_untrained_nll_is_finite_and_proper(self):
        torch.manual_seed(0)
        lm = GRULanguageModel(hidden=16, layers=1)
        rng = np.random.default_rng(0)
        score = DrumScore(rng.integers(0, 2, (3, 25)))
        s = lm.nll(score)
        assert np.isfinite(s.total_bits)
        assert (s.per_tatum_bits >= 0).all()

    def test_training_improves_perplexity_on_periodic_data(self):
        corpus = [periodic_score(BASE_PATTERN, 48) for _ in range(20)]
        torch.manual_seed(0)
        before = corpus_perplexity(GRULanguageModel(hidden=24, layers=1), corpus)
        lm = train_gru_lm(corpus, hidden=24, layers=1, epochs=20, seed=0)
        after = corpus_perplexity(lm, corpus)
        assert after < before

    def test_relaxed_endpoint_matches_nll(self):
        torch.manual_seed(1)
        lm = GRULanguageModel(hidden=12, layers=1).eval()
        rng = np.random.default_rng(1)
        score = DrumScore(rng.integers(0, 2, (3, 20)))
        bits = lm.relaxed_nll_bits(torch.tensor(score.activations, dtype=torch.float32))
        assert float(bits) == pytest.approx(lm.nll(score).total_bits, rel=1e-4)


class TestMaskCount:
    def test_fifteen_percent_of_100(self):
        assert mask_count(100, 0.15) == 15

    def test_small_n_clamps_to_one(self):
        assert mask_count(5, 0.15) == 1
        assert mask_count(6, 0.15) == 1
        assert mask_count(7, 0.15) == 1

    def test_floor_not_round(self):
        assert mask_count(19, 0.15) == 2  # floor(2.85)


class TestMaskedLanguageModel:
    def test_untrained_pseudo_perplexity_near_eight(self):
        """With a calibrated output bias and small head weights, an
        untrained model is near-uninformative: ~0.5 per cell, PPL ~ 8."""
        torch.manual_seed(0)
        model = MaskedLanguageModel(small_mlm_cfg())
        rng = np.random.default_rng(0)
        scores = [DrumScore(rng.integers(0, 2, (3, 32))) for _ in range(4)]
        ppl = corpus_perplexity(model, scores)
        assert ppl == pytest.approx(8.0, abs=1.0)

    def test_training_loss_decreases_in_smoothed_average(self):
        rng = np.random.default_rng(0)
        corpus = [periodic_score(BASE_PATTERN, 32) for _ in range(200)]
        losses = []
        mlm_train(corpus, small_mlm_cfg(), epochs=2, seed=0,
                  log=lambda e: losses.append(e["mlm_loss"]))
        thirds = np.array_split(np.asarray(losses), 3)
        means = [t.mean() for t in thirds]
        assert means[2] < means[1] < means[0]

    def test_masked_recovery_on_training_data(self):
        corpus = [periodic_score(BASE_PATTERN, 48) for _ in range(40)]
        model = mlm_train(corpus, small_mlm_cfg(), epochs=30, seed=0)
        acc = masked_recovery_accuracy(model, corpus, seed=1)
        assert acc > 0.95

    def test_trained_mlm_beats_bigram_on_heldout_periodic_scores(self):
        """Bidirectional context wins on the intro columns, where the
        lag-16 model has no history to condition on."""
        rng = np.random.default_rng(7)
        patterns = [BASE_PATTERN,
                    np.roll(BASE_PATTERN, 2, axis=1),
                    BASE_PATTERN[:, ::-1].copy()]
        def draw():
            return periodic_score(patterns[rng.integers(0, 3)], 48)
        train, held = [draw() for _ in range(60)], [draw() for _ in range(10)]
        mlm = mlm_train(train, small_mlm_cfg(), epochs=25, seed=0)
        bigram = BigramLM(bigram_fit(train))
        assert corpus_perplexity(mlm, held) < corpus_perplexity(bigram, held)

    def test_pseudo_nll_masks_each_position(self):
        """Predictions must not see the masked column's own value: on a
        score whose columns are i.i.d., flipping column n changes only
        that column's prediction target, not its prediction."""
        torch.manual_seed(0)
        model = MaskedLanguageModel(small_mlm_cfg()).eval()
        rng = np.random.default_rng(3)
        act = rng.integers(0, 2, (3, 12))
        flipped = act.copy()
        flipped[:, 5] = 1 - flipped[:, 5]
        cols = torch.tensor(act.T, dtype=torch.float32)
        cols_f = torch.tensor(flipped.T, dtype=torch.float32)
        mask = torch.zeros(1, 12, dtype=torch.bool)
        mask[0, 5] = True
        with torch.no_grad():
            p_a = model(cols[None], mask)[0, 5]
            p_b = model(cols_f[None], mask)[0, 5]
        torch.testing.assert_close(p_a, p_b)

    def test_relaxed_endpoint_matches_pseudo_nll(self):
        torch.manual_seed(2)
        model = MaskedLanguageModel(small_mlm_cfg())
        rng = np.random.default_rng(2)
        score = DrumScore(rng.integers(0, 2, (3, 10)))
        bits = model.relaxed_nll_bits(torch.tensor(score.activations, dtype=torch.float32))
        assert float(bits) == pytest.approx(mlm_pseudo_nll(model, score).total_bits,
                                            rel=1e-4)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            MaskedLMConfig(d_f=32, d_ffn=100)
        with pytest.raises(ValidationError):
            MaskedLMConfig(heads=5, d_f=32, d_ffn=128)


class TestLMCheckpoints:
    def test_bigram_round_trip(self, tmp_path):
        lm = BigramLM(BigramParams(0.25, 0.75))
        path = save_lm(lm, tmp_path / "lm")
        again = load_lm(path)
        assert isinstance(again, BigramLM)
        assert again.params == lm.params

    def test_gru_round_trip(self, tmp_path):
        torch.manual_seed(0)
        lm = GRULanguageModel(hidden=8, layers=1)
        rng = np.random.default_rng(0)
        score = DrumScore(rng.integers(0, 2, (3, 15)))
        before = lm.nll(score).total_bits
        path = save_lm(lm, tmp_path / "lm")
        again = load_lm(path)
        assert again.nll(score).total_bits == pytest.approx(before)

    def test_mlm_round_trip(self, tmp_path):
        torch.manual_seed(0)
        lm = MaskedLanguageModel(small_mlm_cfg())
        rng = np.random.default_rng(0)
        score = DrumScore(rng.integers(0, 2, (3, 9)))
        before = lm.pseudo_nll(score).total_bits
        path = save_lm(lm, tmp_path / "lm")
        again = load_lm(path)
        assert again.pseudo_nll(score).total_bits == pytest.approx(before)

    def test_missing_checkpoint_is_validation_error(self, tmp_path):
        with pytest.raises(ValidationError):
            load_lm(tmp_path / "nothing.pt")
