import os
import sys
import numpy as np
import pandas as pd
import pytest
import torch

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from data import ConditionStats, load_corpus  # noqa: E402
from model import ModelConfig  # noqa: E402
from smiles import molecular_weight, tokenize  # noqa: E402
from train import TrainConfig  # noqa: E402

DATA_DIR = os.path.join(ROOT, "tests", "data")
TOY_MAX_LEN = 48


@pytest.fixture
def toy_path():
    return os.path.join(DATA_DIR, "toy.csv")


@pytest.fixture
def unseen_path():
    return os.path.join(DATA_DIR, "unseen.csv")


@pytest.fixture
def toy_corpus(toy_path):
    return load_corpus(toy_path, max_len=TOY_MAX_LEN)


@pytest.fixture
def toy_stats(toy_corpus):
    return ConditionStats.fit(toy_corpus.properties)


@pytest.fixture
def tiny_config():
    return ModelConfig(d_model=16, n_layers=1, n_heads=2, d_z=4, n_decoders=2, max_len=TOY_MAX_LEN)


@pytest.fixture
def grad_config():
    return ModelConfig(d_model=8, n_layers=1, n_heads=2, d_z=4, n_decoders=2, max_len=TOY_MAX_LEN)


@pytest.fixture
def tiny_train_config():
    def make(variant="md_dif_col", **overrides):
        fields = dict(variant=variant, epochs=1, batch_size=8, seed=7, checkpoint_every=0, progress=False,
                      kld_sample_size=8)
        fields.update(overrides)
        return TrainConfig(**fields)
    return make


@pytest.fixture
def float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


# chain pieces that stay valid SMILES under any concatenation
FRAGMENTS = ["C", "CC", "C(C)", "N", "O", "S", "C(=O)", "C(F)", "C(Cl)", "C#C", "c1ccccc1", "c1ccncc1",
             "C1CCCCC1", "C1CCOC1"]
SYNTHETIC_MAX_LEN = 60


def synthetic_corpus_frame(n, seed=0):
    """`n` distinct SMILES strung together from FRAGMENTS with molecular weights from `smiles` and two
    made-up descriptors in the logp and qed columns (heavy-atom balance and a squashed weight)."""
    rng = np.random.default_rng(seed)
    rows = {}
    while len(rows) < n:
        s = "".join(rng.choice(FRAGMENTS, size=int(rng.integers(2, 8))))
        if s in rows or len(tokenize(s)) > SYNTHETIC_MAX_LEN:
            continue
        polar = sum(s.count(a) for a in "NOno")
        apolar = sum(s.count(a) for a in "Cc") - s.count("Cl") + 1.5 * (s.count("F") + s.count("Cl"))
        molwt = molecular_weight(s)
        rows[s] = (molwt, 0.5 * apolar - polar, 1.0 / (1.0 + np.exp((molwt - 250.0) / 60.0)))
    return pd.DataFrame([[s] + list(v) for s, v in rows.items()], columns=["smiles", "molwt", "logp", "qed"])


@pytest.fixture(scope="session")
def synthetic_corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("synthetic") / "synthetic5k.csv"
    synthetic_corpus_frame(5000).to_csv(path, index=False)
    return str(path)
