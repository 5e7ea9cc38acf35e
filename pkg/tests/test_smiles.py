import numpy as np
import pytest
import constants
import smiles
from smiles import VOCAB, TokenSeq, check_validity, detokenize, molecular_weight, tokenize
from utils import InvalidSmilesError, UnknownTokenError, UnsupportedAtomError

FIG2 = "COc1ccc(N2CC(C(=O)Oc3cc(C)ccc3C)CC2=O)cc1"


class TestVocabulary:
    def test_size_and_dense_ids(self):
        assert len(VOCAB) == 42
        assert sorted(VOCAB.token_to_id.values()) == list(range(42))

    def test_special_ids(self):
        assert (VOCAB.pad_id, VOCAB.bos_id, VOCAB.eos_id) == (0, 1, 2)

    def test_multi_character_symbols_present(self):
        for symbol in ["Cl", "Br", "Si", "Sn", "@@"]:
            assert symbol in VOCAB.token_to_id


class TestTokenize:
    def test_longest_match_chlorine(self):
        assert tokenize("Clc1ccccc1").texts() == ["Cl", "c", "1", "c", "c", "c", "c", "c", "1"]

    def test_double_at_is_one_token(self):
        assert tokenize("N[C@@H](C)C(=O)O").texts()[2:4] == ["C", "@@"]

    def test_example_molecule_length(self):
        seq = tokenize(FIG2)
        assert len(seq) == 41
        framed = seq.frame()
        assert len(framed) == 43
        assert framed.ids[0] == VOCAB.bos_id and framed.ids[-1] == VOCAB.eos_id

    def test_unknown_symbol(self):
        with pytest.raises(UnknownTokenError) as info:
            tokenize("CCX")
        assert info.value.position == 2
        assert info.value.code == "UNKNOWN_TOKEN"

    def test_round_trip_fuzz(self):
        """detokenize(tokenize(s)) == s over random strings of vocabulary symbols."""
        rng = np.random.default_rng(0)
        symbols = constants.smiles_symbols
        for _ in range(10000):
            s = "".join(rng.choice(symbols, size=rng.integers(1, 30)))
            assert detokenize(tokenize(s)) == s

    def test_detokenize_strips_specials(self):
        assert detokenize(tokenize("Clc1").frame()) == "Clc1"
        assert detokenize(TokenSeq(())) == ""
        assert detokenize([VOCAB.bos_id, VOCAB.id_of("C"), VOCAB.eos_id, VOCAB.pad_id]) == "C"


class TestValidity:
    @pytest.mark.parametrize("s", [FIG2, "C", "c1ccccc1", "CC(=O)O", "c1ccc2[nH]ccc2c1", "C[Si](C)(C)Cl",
                                   "CSCC[C@H](N)C(=O)O", "C/C=C/C", "[NH4+]", "O=S(=O)(N)c1ccccc1"])
    def test_valid(self, s):
        assert check_validity(s).valid

    @pytest.mark.parametrize("s, reason", [
        ("C(C", smiles.UNBALANCED_PAREN),
        ("CC)", smiles.UNBALANCED_PAREN),
        ("c1ccccc", smiles.UNMATCHED_RING_BOND),
        ("C[NH4", smiles.UNBALANCED_BRACKET),
        ("", smiles.EMPTY),
        ("()", smiles.EMPTY),
        ("CCX", smiles.UNKNOWN_TOKEN),
        ("CC=", smiles.BAD_BOND),
        ("C==C", smiles.BAD_BOND),
        ("CH", smiles.BAD_ATOM),
    ])
    def test_invalid(self, s, reason):
        report = check_validity(s)
        assert not report.valid
        assert report.reasons[0] == reason

    @pytest.mark.parametrize("s", ["C(C", "CC=", "CH", "c1cc(", "[C", "C=(C)", "CCX", "", "C#1CC1=", "[CH5]"])
    def test_reasons_are_known_codes(self, s):
        report = check_validity(s, strict=True)
        assert set(report.reasons) <= set(smiles.failure_codes)

    def test_unknown_token_fails_first(self):
        assert check_validity("C(CX").reasons == (smiles.UNKNOWN_TOKEN,)

    def test_strict_valence(self):
        assert check_validity("C(C)(C)(C)(C)C").valid
        assert check_validity("C(C)(C)(C)(C)C", strict=True).reasons == (smiles.VALENCE_VIOLATION,)
        assert check_validity("O=S(=O)(N)c1ccccc1", strict=True).valid
        assert check_validity("c1cc[nH]c1", strict=True).valid


class TestMolecularWeight:
    @pytest.mark.parametrize("s, expected", [
        ("C", 16.043),
        ("O", 18.015),
        ("[H]", 1.008),
        ("c1ccccc1", 78.114),
        ("c1ccsc1", 84.136),
        ("CC(=O)O", 60.052),
        (FIG2, 339.391),
    ])
    def test_known_weights(self, s, expected):
        assert molecular_weight(s) == pytest.approx(expected, abs=1e-3)

    def test_invalid_raises(self):
        with pytest.raises(InvalidSmilesError):
            molecular_weight("C(C")

    def test_strict_unknown_bracket_element(self):
        assert molecular_weight("[Sn]") > 0
        with pytest.raises(UnsupportedAtomError):
            molecular_weight("[Sn]", strict=True)
