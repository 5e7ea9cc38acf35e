import json
import math
import numpy as np
import pandas as pd
import pytest
import torch
import constants
from data import ConditionStats
from metrics import (GenerationRecord, MetricsReport, NO_VALID_MOLECULE, annotate_records, anchor_key,
                     generative_efficiency, inter_decoder_kld, load_oracles, pairwise_symmetric_kld,
                     reconstruction_scores, reconstruction_success_rate, records_from_csv, regime_of,
                     top1_condition_mae)
from model import MDVAE, ModelConfig
from utils import EmptyCorpusError, SingleDecoderError

POOL = ["CCO", "c1ccccc1", "CC(=O)O", "CCN", "C(C", "c1cccc", "O", "CCCl", "CC)", "N#N"]


def brute_force_efficiency(smiles, training, valid_set):
    good = {s for s in smiles if s in valid_set and s not in training}
    return len(good) / len(smiles)


class TestGenerativeEfficiency:
    def test_duplicate_and_known(self):
        records = annotate_records(["CCO", "CCO", "c1ccccc1"], {"c1ccccc1"})
        assert [(r.valid, r.unique, r.novel) for r in records] == [
            (True, True, True), (True, False, True), (True, True, False)]
        assert generative_efficiency(records) == pytest.approx(1 / 3)

    def test_all_identical(self):
        for n in (1, 5, 20):
            assert generative_efficiency(annotate_records(["CCN"] * n, set())) == pytest.approx(1 / n)

    def test_invalid_never_counts(self):
        assert generative_efficiency(annotate_records(["C(C", "CC)"], set())) == 0.0

    def test_empty(self):
        assert generative_efficiency([]) == 0.0

    def test_random_fixtures(self):
        """Counted per record against a set-based recount."""
        valid_set = {"CCO", "c1ccccc1", "CC(=O)O", "CCN", "O", "CCCl", "N#N"}
        rng = np.random.default_rng(0)
        for _ in range(50):
            smiles = list(rng.choice(POOL, size=rng.integers(1, 40)))
            training = set(rng.choice(POOL, size=3))
            records = annotate_records(smiles, training)
            assert generative_efficiency(records) == pytest.approx(
                brute_force_efficiency(smiles, training, valid_set))


class TestTop1:
    def records(self, weights):
        return [GenerationRecord(smiles="C" * (i + 1), valid=True, properties={"molwt": w})
                for i, w in enumerate(weights)]

    def test_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            weights = rng.uniform(100, 600, size=10)
            anchor = rng.uniform(100, 600)
            expected = min(abs(w - anchor) for w in weights)
            assert top1_condition_mae(self.records(weights), "molwt", anchor) == pytest.approx(expected)

    def test_invalid_ignored(self):
        records = self.records([330.0, 500.0])
        records[0].valid = False
        assert top1_condition_mae(records, "molwt", 330.0) == pytest.approx(170.0)

    def test_no_valid_molecule(self):
        records = [GenerationRecord(smiles="C(C")]
        assert top1_condition_mae(records, "molwt", 330.0) is NO_VALID_MOLECULE

    def test_oracle_fills_properties(self):
        oracles = load_oracles(["molwt"])
        records = annotate_records(["C", "C(C", "O"], set(), "molwt", 17.0, oracles=oracles)
        assert records[0].properties["molwt"] == pytest.approx(16.043, abs=1e-3)
        assert records[1].properties == {}
        assert top1_condition_mae(records, "molwt", 17.0) == pytest.approx(0.957, abs=1e-3)


class TestOracles:
    def test_unknown_name_skipped(self):
        oracles = load_oracles(["molwt", "boiling_point"])
        assert len(oracles) == 1
        assert oracles[0].property_name == "molwt"
        assert oracles[0].compute("c1ccccc1") == pytest.approx(78.114, abs=1e-3)


class TestInterDecoderKLD:
    def test_known_distributions(self):
        p = torch.tensor([0.5, 0.5], dtype=torch.float64)
        q = torch.tensor([0.9, 0.1], dtype=torch.float64)
        kl_pq = float((p * (p / q).log()).sum())
        kl_qp = float((q * (q / p).log()).sum())
        value = pairwise_symmetric_kld(torch.stack([p, q]).log().unsqueeze(1))
        assert value.item() == pytest.approx(0.5 * (kl_pq + kl_qp))

    def test_three_decoders_average_pairs(self):
        rng = np.random.default_rng(2)
        probs = torch.as_tensor(rng.dirichlet(np.ones(5), size=3), dtype=torch.float64)
        pairs = []
        for i, j in [(0, 1), (0, 2), (1, 2)]:
            pairs.append(0.5 * float((probs[i] * (probs[i] / probs[j]).log()).sum()
                                     + (probs[j] * (probs[j] / probs[i]).log()).sum()))
        value = pairwise_symmetric_kld(probs.log().unsqueeze(1))
        assert value.item() == pytest.approx(np.mean(pairs))

    def test_identical_decoders_zero(self, tiny_config, toy_corpus, toy_stats):
        model = MDVAE(tiny_config)
        model.decoders[1].load_state_dict(model.decoders[0].state_dict())
        assert inter_decoder_kld(toy_corpus.subset(range(8)), model, toy_stats, 4) == pytest.approx(0.0, abs=1e-7)

    def test_distinct_decoders_positive(self, tiny_config, toy_corpus, toy_stats):
        model = MDVAE(tiny_config)
        assert inter_decoder_kld(toy_corpus.subset(range(8)), model, toy_stats, 4) > 0

    def test_single_decoder_rejected(self, toy_corpus, toy_stats):
        model = MDVAE(ModelConfig(d_model=16, n_layers=1, n_heads=2, d_z=4, n_decoders=1, max_len=48))
        with pytest.raises(SingleDecoderError):
            inter_decoder_kld(toy_corpus, model, toy_stats)


class TestReconstructionRate:
    def test_empty_corpus(self, tiny_config, toy_corpus, toy_stats):
        with pytest.raises(EmptyCorpusError):
            reconstruction_success_rate(toy_corpus.subset([]), MDVAE(tiny_config), toy_stats)

    def test_untrained_model_restores_nothing(self, tiny_config, toy_corpus, toy_stats):
        assert reconstruction_success_rate(toy_corpus, MDVAE(tiny_config), toy_stats) < 0.05

    def test_rates_in_unit_interval(self, tiny_config, toy_corpus, toy_stats):
        rate, token_acc = reconstruction_scores(toy_corpus, MDVAE(tiny_config), toy_stats, 10)
        assert 0.0 <= rate <= 1.0
        assert 0.0 <= token_acc <= 1.0

    def test_batch_size_invariant(self, tiny_config, toy_corpus, toy_stats):
        model = MDVAE(tiny_config)
        a = reconstruction_scores(toy_corpus, model, toy_stats, 4)
        b = reconstruction_scores(toy_corpus, model, toy_stats, 32)
        assert a[0] == pytest.approx(b[0])
        assert a[1] == pytest.approx(b[1])


def zinc_like_stats():
    std = np.array([63.2, 1.4, 0.13])
    return ConditionStats(mean=np.array([330.0, 2.457, 0.7318]), std=std, cov=np.diag(std ** 2))


class TestMetricsReport:
    def report(self):
        stats = zinc_like_stats()
        report = MetricsReport(l_recon=4.482, l_reg=15.068, n_parameters=1000)
        report.set_reconstruction(seen=(0.5, 0.9), unseen=(0.25, 0.8))
        records = annotate_records(["C", "CCO", "C(C"], set(), "molwt", 330.0, oracles=load_oracles(["molwt"]))
        report.add_generations([("molwt", 330.0, records),
                                ("molwt", 330.0 + 4 * 63.2, annotate_records(["C(C"], set(), "molwt", 582.8))],
                               stats)
        return report

    def test_reconstruction_mean(self):
        assert self.report().recon_success_rate_mean == pytest.approx(0.375)

    def test_keys_stable(self):
        a, b = self.report().to_flat(), self.report().to_flat()
        assert list(a) == list(b)
        assert list(a)[:3] == ["recon_success_rate_seen", "recon_success_rate_unseen", "recon_success_rate_mean"]
        assert "gen_efficiency.molwt@330.0000" in a
        assert a["gen_efficiency_average.in_domain"] == pytest.approx(2 / 3)
        assert a["gen_efficiency_average.ood"] == 0.0
        assert a["top1_mae.molwt@582.8000"] is None

    def test_regime_of(self):
        stats = zinc_like_stats()
        assert regime_of(stats, "molwt", 330.0 + 1.645 * 63.2) == "in_domain"
        assert regime_of(stats, "molwt", 330.0 - 4.0 * 63.2) == "ood"
        assert anchor_key("qed", 0.5) == "qed@0.5000"

    def test_write_text_and_json(self, tmp_path):
        report = self.report()
        text_path = tmp_path / "metrics.txt"
        json_path = tmp_path / "metrics.json"
        report.write_text(str(text_path))
        report.write_json(str(json_path))
        lines = dict(line.split(" = ") for line in text_path.read_text().splitlines())
        assert lines["recon_success_rate_seen"] == "0.500000"
        assert lines["inter_decoder_kld"] == "-"
        assert lines["n_parameters"] == "1000"
        loaded = json.loads(json_path.read_text())
        assert list(loaded) == list(report.to_flat())
        assert loaded["inter_decoder_kld"] is None


class TestRecordsFromCsv:
    def test_regroups_in_file_order(self, tmp_path):
        rows = [["CCO", "molwt", 400.0, True, True, True, 46.069],
                ["C(C", "molwt", 400.0, False, True, True, math.nan],
                ["O", "logp", 1.5, True, True, False, 18.015]]
        path = tmp_path / "generations.csv"
        pd.DataFrame(rows, columns=constants.generation_header).to_csv(path, index=False)
        groups = records_from_csv(str(path))
        assert [(p, a, len(r)) for p, a, r in groups] == [("molwt", 400.0, 2), ("logp", 1.5, 1)]
        first = groups[0][2]
        assert first[0].properties == {"molwt": pytest.approx(46.069)}
        assert first[1].properties == {} and not first[1].valid
        assert generative_efficiency(first) == 0.5
