import numpy as np
import pytest
import torch
from data import ConditionVector, iterate_batches
from generate import SamplerConfig, ensemble_step, generate, generate_batch, reconstruct_teacher_forced
from model import MDVAE, ModelConfig
from smiles import VOCAB


def force_token(model, token_id, value):
    with torch.no_grad():
        for decoder in model.decoders:
            decoder.out.bias[token_id] = value


class TestEnsembleStep:
    def test_single_decoder_spaces_agree(self):
        logits = torch.randn(1, 4, 42, generator=torch.Generator().manual_seed(0))
        torch.testing.assert_close(ensemble_step(logits, "pre_softmax"), ensemble_step(logits, "post_softmax"))

    def test_identical_decoders_spaces_agree(self):
        logits = torch.randn(1, 4, 42, generator=torch.Generator().manual_seed(1)).expand(3, 4, 42)
        torch.testing.assert_close(ensemble_step(logits, "pre_softmax"), ensemble_step(logits, "post_softmax"))

    def test_two_token_example(self):
        logits = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=torch.float64)
        expected = torch.softmax(torch.tensor([2.0, 3.0], dtype=torch.float64), dim=-1)
        torch.testing.assert_close(ensemble_step(logits, "pre_softmax"), expected)
        torch.testing.assert_close(ensemble_step(logits, "post_softmax"), expected)

    def test_spaces_differ_on_disagreement(self):
        logits = torch.tensor([[5.0, 0.0, 0.0], [0.0, 5.0, 0.0]], dtype=torch.float64)
        pre = ensemble_step(logits, "pre_softmax")
        post = ensemble_step(logits, "post_softmax")
        assert pre[2].item() == pytest.approx(1.0 / (2.0 * np.exp(2.5) + 1.0))
        assert post[2].item() == pytest.approx(1.0 / (np.exp(5.0) + 2.0))

    def test_distribution_sums_to_one(self):
        logits = torch.randn(3, 5, 42, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
        for space in ("pre_softmax", "post_softmax"):
            for temperature in (0.5, 1.0, 2.0):
                probs = ensemble_step(logits, space, temperature)
                torch.testing.assert_close(probs.sum(-1), torch.ones(5, dtype=torch.float64))

    def test_unknown_space(self):
        with pytest.raises(ValueError):
            ensemble_step(torch.zeros(2, 3), "log_space")


class TestSamplerConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(AssertionError):
            SamplerConfig(temperature=0.0)
        with pytest.raises(AssertionError):
            SamplerConfig(decode_rule="beam")
        with pytest.raises(AssertionError):
            SamplerConfig(ensemble_space="median")


class TestGenerate:
    def y_norm(self, n=4, seed=0):
        return np.random.default_rng(seed).normal(size=(n, 3))

    def test_seeded_generation_reproducible(self, tiny_config):
        model = MDVAE(tiny_config)
        cfg = SamplerConfig(max_len=20)
        a = generate_batch(model, self.y_norm(), cfg, torch.Generator().manual_seed(3), shared_latent=False)
        b = generate_batch(model, self.y_norm(), cfg, torch.Generator().manual_seed(3), shared_latent=False)
        assert [r.smiles for r in a] == [r.smiles for r in b]

    def test_greedy_terminates_without_specials(self, tiny_config):
        model = MDVAE(tiny_config)
        cfg = SamplerConfig(max_len=20, decode_rule="greedy")
        results = generate_batch(model, self.y_norm(), cfg, torch.Generator().manual_seed(0))
        assert len(results) == 4
        for r in results:
            assert len(r.ids) <= 20
            assert not {VOCAB.pad_id, VOCAB.bos_id, VOCAB.eos_id} & set(r.ids)

    def test_truncated_without_eos(self, tiny_config):
        model = MDVAE(tiny_config)
        force_token(model, VOCAB.eos_id, -1e4)
        results = generate_batch(model, self.y_norm(2), SamplerConfig(max_len=6),
                                 torch.Generator().manual_seed(0))
        for r in results:
            assert r.truncated
            assert len(r.ids) == 6

    def test_immediate_eos_is_empty(self, tiny_config):
        model = MDVAE(tiny_config)
        force_token(model, VOCAB.eos_id, 1e4)
        results = generate_batch(model, self.y_norm(3), SamplerConfig(max_len=6),
                                 torch.Generator().manual_seed(0))
        for r in results:
            assert r.smiles == "" and r.ids == () and not r.truncated

    def test_low_temperature_matches_greedy(self, tiny_config):
        model = MDVAE(tiny_config)
        greedy = generate_batch(model, self.y_norm(), SamplerConfig(max_len=10, decode_rule="greedy"),
                                torch.Generator().manual_seed(5))
        cold = generate_batch(model, self.y_norm(), SamplerConfig(max_len=10, temperature=1e-6),
                              torch.Generator().manual_seed(5))
        assert [r.ids for r in greedy] == [r.ids for r in cold]

    def test_chunks_cover_every_row(self, tiny_config):
        model = MDVAE(tiny_config)
        results = generate_batch(model, self.y_norm(7), SamplerConfig(max_len=8, chunk_size=3),
                                 torch.Generator().manual_seed(0))
        assert len(results) == 7

    def test_single_condition(self, tiny_config, toy_stats):
        model = MDVAE(tiny_config)
        result = generate(ConditionVector(330.0, 2.5, 0.7), model, toy_stats,
                          SamplerConfig(max_len=12, decode_rule="greedy"), torch.Generator().manual_seed(0))
        assert len(result.ids) <= 12


class TestReconstruction:
    def test_counts_match_targets(self, tiny_config, toy_corpus, toy_stats):
        model = MDVAE(tiny_config)
        batch = next(iterate_batches(toy_corpus, toy_stats, 8))
        result = reconstruct_teacher_forced(model, batch.x, batch.y)
        targets = batch.x[:, 1:]
        mask = targets != VOCAB.pad_id
        assert result.tokens_total == int(mask.sum())
        assert result.tokens_correct == int(((result.predictions == targets) & mask).sum())
        expected = ((result.predictions == targets) | ~mask).all(dim=1)
        assert torch.equal(result.exact_match, expected)
        assert 0.0 <= result.token_accuracy <= 1.0

    def test_single_decoder_spaces_agree(self, toy_corpus, toy_stats):
        model = MDVAE(ModelConfig(d_model=16, n_layers=1, n_heads=2, d_z=4, n_decoders=1, max_len=48))
        batch = next(iterate_batches(toy_corpus, toy_stats, 8))
        pre = reconstruct_teacher_forced(model, batch.x, batch.y, "pre_softmax")
        post = reconstruct_teacher_forced(model, batch.x, batch.y, "post_softmax")
        assert torch.equal(pre.predictions, post.predictions)

    def test_eos_only_sequence_reconstructed(self, tiny_config):
        model = MDVAE(tiny_config)
        force_token(model, VOCAB.eos_id, 1e4)
        x = torch.tensor([[VOCAB.bos_id, VOCAB.eos_id, VOCAB.pad_id]])
        result = reconstruct_teacher_forced(model, x, torch.zeros(1, 3))
        assert bool(result.exact_match[0])
        assert result.token_accuracy == 1.0
