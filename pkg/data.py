import os
import re
import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence
import numpy as np
import pandas as pd
import torch
from scipy import stats as scipy_stats
import constants
import utils
from smiles import VOCAB, TokenSeq, Vocabulary, tokenize
from utils import CorpusIOError, EmptyCorpusError, MalformedRowError, UnknownTokenError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConditionVector:
    molwt: float
    logp: float
    qed: float

    def as_array(self) -> np.ndarray:
        return np.array([self.molwt, self.logp, self.qed], dtype=float)

    @classmethod
    def from_array(cls, values) -> "ConditionVector":
        molwt, logp, qed = (float(v) for v in values)
        return cls(molwt, logp, qed)


@dataclass(frozen=True, eq=False)
class ConditionStats:
    mean: np.ndarray
    std: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        assert np.all(self.std > 0), "Every property needs a positive standard deviation"
        assert np.allclose(self.cov, self.cov.T), "Property covariance must be symmetric"

    @classmethod
    def fit(cls, properties: np.ndarray) -> "ConditionStats":
        properties = np.asarray(properties, dtype=float)
        cov = np.atleast_2d(np.cov(properties, rowvar=False, bias=True))
        return cls(mean=properties.mean(axis=0), std=np.sqrt(np.diag(cov)), cov=cov)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionStats":
        return cls(mean=np.array(d["mean"], dtype=float), std=np.array(d["std"], dtype=float),
                   cov=np.array(d["cov"], dtype=float))


@dataclass(frozen=True, eq=False)
class Corpus:
    name: str
    smiles: tuple
    properties: np.ndarray
    tokens: tuple
    dropped: int = 0
    duplicates: int = 0

    def __len__(self):
        return len(self.smiles)

    @property
    def records(self):
        return [(s, ConditionVector.from_array(p)) for s, p in zip(self.smiles, self.properties)]

    def smiles_set(self) -> frozenset:
        return frozenset(self.smiles)

    def subset(self, indices, name=None) -> "Corpus":
        indices = [int(i) for i in indices]
        return Corpus(name=name or self.name, smiles=tuple(self.smiles[i] for i in indices),
                      properties=self.properties[indices], tokens=tuple(self.tokens[i] for i in indices))

    def without(self, other: "Corpus", name=None) -> "Corpus":
        """Drop every molecule that also appears in `other`."""
        seen = other.smiles_set()
        keep = [i for i, s in enumerate(self.smiles) if s not in seen]
        return self.subset(keep, name=name)


@dataclass
class ConditionAnchor:
    property_name: str
    value: float
    regime: str
    condition: ConditionVector


@dataclass
class Batch:
    x: torch.Tensor
    y: torch.Tensor
    smiles: List[str]

    def __len__(self):
        return self.x.size(0)


def parser_error_row(error) -> Optional[int]:
    """Data row index of a pandas tokenizing error; its "line N" counts the header as line 1."""
    match = re.search(r"line (\d+)", str(error))
    return int(match.group(1)) - 2 if match else None


def load_corpus(path: str, max_len: int = constants.max_len, name: Optional[str] = None,
                vocab: Vocabulary = VOCAB) -> Corpus:
    if not os.path.isfile(path):
        raise CorpusIOError("Corpus file not found: {}".format(path))
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise EmptyCorpusError("Corpus file is empty: {}".format(path))
    except pd.errors.ParserError as e:
        raise MalformedRowError(parser_error_row(e), "{} ({})".format(e, path))
    except (OSError, UnicodeDecodeError) as e:
        raise CorpusIOError("Cannot read corpus {}: {}".format(path, e))

    if list(df.columns) != constants.corpus_header:
        raise MalformedRowError(0, "header must be {}".format(",".join(constants.corpus_header)))
    if df.empty:
        raise EmptyCorpusError("Corpus has no rows: {}".format(path))

    properties = df[constants.property_names].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    bad = ~np.all(np.isfinite(properties), axis=1) | (df["smiles"].str.len() == 0).to_numpy()
    if bad.any():
        row = int(np.argmax(bad))
        raise MalformedRowError(row, "non-numeric property or empty SMILES {!r}".format(",".join(df.iloc[row])))

    keep = []
    tokens = []
    for i, s in enumerate(df["smiles"]):
        try:
            seq = tokenize(s, vocab)
        except UnknownTokenError:
            logger.debug("Dropping row {}: untokenizable {!r}".format(i, s))
            continue
        if len(seq) > max_len:
            logger.debug("Dropping row {}: {} tokens > max_len {}".format(i, len(seq), max_len))
            continue
        keep.append(i)
        tokens.append(seq)
    dropped = len(df) - len(keep)

    kept = df.iloc[keep]
    first = ~kept["smiles"].duplicated(keep="first").to_numpy()
    duplicates = int((~first).sum())
    smiles = tuple(s for s, f in zip(kept["smiles"], first) if f)
    tokens = tuple(t for t, f in zip(tokens, first) if f)
    properties = properties[keep][first]
    if not smiles:
        raise EmptyCorpusError("No usable molecules in {}".format(path))

    name = name or os.path.splitext(os.path.basename(path))[0]
    logger.info("Loaded corpus {} from {}: {} molecules, {} dropped, {} duplicates".format(
        name, path, len(smiles), dropped, duplicates))
    return Corpus(name=name, smiles=smiles, properties=properties, tokens=tokens, dropped=dropped,
                  duplicates=duplicates)


def normalize(y, stats: ConditionStats):
    if isinstance(y, ConditionVector):
        return ConditionVector.from_array((y.as_array() - stats.mean) / stats.std)
    return (np.asarray(y, dtype=float) - stats.mean) / stats.std


def denormalize(y, stats: ConditionStats):
    if isinstance(y, ConditionVector):
        return ConditionVector.from_array(y.as_array() * stats.std + stats.mean)
    return np.asarray(y, dtype=float) * stats.std + stats.mean


def conditional_gaussian(stats: ConditionStats, index: int, value: float):
    """Mean and covariance of the other properties given property `index` equals `value`."""
    others = [i for i in range(len(stats.mean)) if i != index]
    cov_oa = stats.cov[others, index]
    mean = stats.mean[others] + cov_oa * (value - stats.mean[index]) / stats.cov[index, index]
    cov = stats.cov[np.ix_(others, others)] - np.outer(cov_oa, cov_oa) / stats.cov[index, index]
    return others, mean, (cov + cov.T) / 2


def sample_conditions(stats: ConditionStats, property_name: str, value: float, n: int,
                      rng: np.random.Generator) -> np.ndarray:
    """n raw condition rows with `property_name` pinned to `value`."""
    index = constants.property_names.index(property_name)
    others, mean, cov = conditional_gaussian(stats, index, value)
    draws = scipy_stats.multivariate_normal(mean=mean, cov=cov, allow_singular=True).rvs(size=n, random_state=rng)
    out = np.empty((n, len(stats.mean)))
    out[:, index] = value
    out[:, others] = np.reshape(draws, (n, len(others)))
    return out


def anchor_values(stats: ConditionStats, index: int, regime: str) -> List[float]:
    mu, sigma = stats.mean[index], stats.std[index]
    if regime == "in_domain":
        return [mu, mu + constants.in_domain_z * sigma, mu - constants.in_domain_z * sigma]
    elif regime == "ood":
        return [mu + constants.ood_z * sigma, mu - constants.ood_z * sigma]
    raise ValueError("Unknown regime {}, expected one of {}".format(regime, constants.regimes))


def condition_grid(stats: ConditionStats, regime: str,
                   rng: Optional[np.random.Generator] = None) -> List[ConditionAnchor]:
    """Anchors per property; the unanchored properties are drawn from the conditional
    Gaussian when `rng` is given, otherwise set to its mean."""
    grid = []
    for index, property_name in enumerate(constants.property_names):
        for value in anchor_values(stats, index, regime):
            if rng is None:
                others, mean, _ = conditional_gaussian(stats, index, value)
                row = np.empty(len(stats.mean))
                row[index] = value
                row[others] = mean
            else:
                row = sample_conditions(stats, property_name, value, 1, rng)[0]
            grid.append(ConditionAnchor(property_name, float(value), regime, ConditionVector.from_array(row)))
    return grid


def make_batch(seqs: Sequence[TokenSeq], properties: np.ndarray, stats: ConditionStats,
               smiles: Optional[List[str]] = None, vocab: Vocabulary = VOCAB) -> Batch:
    framed = [seq.frame(vocab).ids for seq in seqs]
    width = max(len(ids) for ids in framed)
    x = torch.full((len(framed), width), vocab.pad_id, dtype=torch.long)
    for row, ids in enumerate(framed):
        x[row, :len(ids)] = torch.tensor(ids, dtype=torch.long)
    y = torch.as_tensor(normalize(np.atleast_2d(properties), stats), dtype=torch.get_default_dtype())
    return Batch(x=x, y=y, smiles=list(smiles) if smiles is not None else [])


def epoch_order(n: int, seed, epoch: int) -> np.ndarray:
    return utils.numpy_rng(seed, "data", epoch).permutation(n)


def iterate_batches(corpus: Corpus, stats: ConditionStats, batch_size: int,
                    order: Optional[Sequence[int]] = None, start: int = 0) -> Iterator[Batch]:
    """Yield batches over `order` (default: corpus order), skipping the first `start` batches."""
    order = np.arange(len(corpus)) if order is None else np.asarray(order)
    for b in range(start, (len(order) + batch_size - 1) // batch_size):
        idx = order[b * batch_size:(b + 1) * batch_size]
        yield make_batch([corpus.tokens[i] for i in idx], corpus.properties[idx], stats,
                         smiles=[corpus.smiles[i] for i in idx])
