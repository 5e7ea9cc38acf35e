import json
import logging
import itertools
import importlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence
import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
import constants
from data import ConditionStats, ConditionVector, Corpus, iterate_batches
from generate import reconstruct_teacher_forced
from model import MDVAE, sample_latents
from smiles import check_validity
from utils import EmptyCorpusError, MDVAEError, SingleDecoderError, atomic_path

logger = logging.getLogger(__name__)

# placeholder for conditions where no valid molecule was generated
NO_VALID_MOLECULE = None


@dataclass
class GenerationRecord:
    smiles: str
    condition: Optional[ConditionVector] = None
    valid: bool = False
    novel: bool = False
    unique: bool = False
    anchored_property: str = ""
    anchor: float = float("nan")
    truncated: bool = False
    properties: Dict[str, float] = field(default_factory=dict)


def load_oracles(names: Sequence[str]) -> list:
    """Instantiate oracles/<name>_oracle.py for every known name; unknown names are logged and skipped."""
    oracles = []
    for name in names:
        if name not in constants.possible_oracles:
            logger.error("Failed to load oracle {} since invalid oracle name provided.".format(name))
            continue
        module = importlib.import_module("oracles.{}_oracle".format(name))
        oracles.append(module.Oracle(logger=logging.getLogger("oracles.{}".format(name))))
    return oracles


def annotate_records(smiles: Sequence[str], training_smiles, anchored_property: str = "", anchor: float = float("nan"),
                     conditions: Optional[Sequence[ConditionVector]] = None,
                     truncated: Optional[Sequence[bool]] = None, oracles=()) -> List[GenerationRecord]:
    """Validity, first-occurrence uniqueness within this batch, novelty against `training_smiles`."""
    seen = set()
    records = []
    for i, s in enumerate(smiles):
        valid = check_validity(s).valid
        record = GenerationRecord(smiles=s, condition=conditions[i] if conditions is not None else None,
                                  valid=valid, novel=s not in training_smiles, unique=s not in seen,
                                  anchored_property=anchored_property, anchor=anchor,
                                  truncated=bool(truncated[i]) if truncated is not None else False)
        seen.add(s)
        if valid:
            for oracle in oracles:
                try:
                    record.properties[oracle.property_name] = oracle.compute(s)
                except MDVAEError as e:
                    logger.debug("Oracle {} failed on {!r}: {}".format(oracle.property_name, s, e))
        records.append(record)
    return records


def generative_efficiency(records: Sequence[GenerationRecord]) -> float:
    if not records:
        return 0.0
    return sum(r.valid and r.unique and r.novel for r in records) / len(records)


def top1_record(records: Sequence[GenerationRecord], anchored_property: str,
                anchor_value: float) -> Optional[GenerationRecord]:
    candidates = [r for r in records if r.valid and anchored_property in r.properties]
    if not candidates:
        return None
    return min(candidates, key=lambda r: abs(r.properties[anchored_property] - anchor_value))


def top1_condition_mae(records: Sequence[GenerationRecord], anchored_property: str, anchor_value: float):
    best = top1_record(records, anchored_property, anchor_value)
    if best is None:
        return NO_VALID_MOLECULE
    return abs(best.properties[anchored_property] - anchor_value)


def reconstruction_scores(corpus: Corpus, model: MDVAE, stats: ConditionStats,
                          batch_size: int = constants.batch_size, ensemble_space: str = "pre_softmax"):
    """(molecule-level exact-match rate, token accuracy) under teacher forcing with z = mu."""
    if len(corpus) == 0:
        raise EmptyCorpusError("Cannot score reconstruction on an empty corpus")
    exact = 0
    correct = 0
    total = 0
    for batch in iterate_batches(corpus, stats, batch_size):
        result = reconstruct_teacher_forced(model, batch.x, batch.y.to(model.dtype), ensemble_space)
        exact += int(result.exact_match.sum())
        correct += result.tokens_correct
        total += result.tokens_total
    return exact / len(corpus), correct / max(1, total)


def reconstruction_success_rate(corpus: Corpus, model: MDVAE, stats: ConditionStats,
                                batch_size: int = constants.batch_size) -> float:
    return reconstruction_scores(corpus, model, stats, batch_size)[0]


def pairwise_symmetric_kld(log_probs: torch.Tensor) -> torch.Tensor:
    """Per-row symmetrized KL averaged over unordered decoder pairs; log_probs (K, N, V) -> (N,)."""
    pairs = list(itertools.combinations(range(log_probs.size(0)), 2))
    total = torch.zeros(log_probs.shape[1:-1], dtype=log_probs.dtype)
    for i, j in pairs:
        diff = log_probs[i] - log_probs[j]
        total += 0.5 * ((log_probs[i].exp() * diff).sum(-1) - (log_probs[j].exp() * diff).sum(-1))
    return total / len(pairs)


@torch.no_grad()
def inter_decoder_kld(corpus_sample: Corpus, model: MDVAE, stats: ConditionStats,
                      batch_size: int = constants.batch_size) -> float:
    """Symmetrized pairwise KLD between decoders' teacher-forced next-token distributions,
    averaged over every non-PAD position of every molecule."""
    if model.n_decoders < 2:
        raise SingleDecoderError("Inter-decoder KLD needs K >= 2, model has K={}".format(model.n_decoders))
    if len(corpus_sample) == 0:
        raise EmptyCorpusError("Cannot measure inter-decoder KLD on an empty corpus")
    model.eval()
    total = 0.0
    count = 0
    for batch in iterate_batches(corpus_sample, stats, batch_size):
        y = batch.y.to(model.dtype)
        enc = model.encode(batch.x, y)
        logits = model.decode_all(sample_latents(enc, "deterministic", model.n_decoders), y, batch.x[:, :-1])
        mask = batch.x[:, 1:] != 0
        per_position = pairwise_symmetric_kld(F.log_softmax(logits, dim=-1))
        total += float(per_position[mask].sum())
        count += int(mask.sum())
    return total / count


def regime_of(stats: ConditionStats, property_name: str, anchor: float) -> str:
    index = constants.property_names.index(property_name)
    z = abs(anchor - stats.mean[index]) / stats.std[index]
    return "ood" if z > (constants.in_domain_z + constants.ood_z) / 2 else "in_domain"


def anchor_key(property_name: str, anchor: float) -> str:
    return "{}@{:.4f}".format(property_name, anchor)


@dataclass
class MetricsReport:
    recon_success_rate_seen: Optional[float] = None
    recon_success_rate_unseen: Optional[float] = None
    recon_success_rate_mean: Optional[float] = None
    token_accuracy_seen: Optional[float] = None
    token_accuracy_unseen: Optional[float] = None
    l_recon: Optional[float] = None
    l_reg: Optional[float] = None
    inter_decoder_kld: Optional[float] = None
    n_parameters: Optional[int] = None
    model_size_mb: Optional[float] = None
    gen_efficiency: Dict[str, float] = field(default_factory=OrderedDict)
    gen_efficiency_average: Dict[str, float] = field(default_factory=OrderedDict)
    top1_mae: Dict[str, Optional[float]] = field(default_factory=OrderedDict)
    top1_smiles: Dict[str, Optional[str]] = field(default_factory=OrderedDict)
    top1_value: Dict[str, Optional[float]] = field(default_factory=OrderedDict)
    top1_mae_in_domain_mean: Dict[str, Optional[float]] = field(default_factory=OrderedDict)

    def set_reconstruction(self, seen=None, unseen=None) -> None:
        if seen is not None:
            self.recon_success_rate_seen, self.token_accuracy_seen = seen
        if unseen is not None:
            self.recon_success_rate_unseen, self.token_accuracy_unseen = unseen
        rates = [r for r in (self.recon_success_rate_seen, self.recon_success_rate_unseen) if r is not None]
        self.recon_success_rate_mean = float(np.mean(rates)) if rates else None

    def add_generations(self, records_by_anchor, stats: ConditionStats) -> None:
        """`records_by_anchor`: ordered (property, anchor, records) triples."""
        per_regime = OrderedDict()
        in_domain_mae = OrderedDict()
        for property_name, anchor, records in records_by_anchor:
            key = anchor_key(property_name, anchor)
            regime = regime_of(stats, property_name, anchor)
            efficiency = generative_efficiency(records)
            self.gen_efficiency[key] = efficiency
            per_regime.setdefault(regime, []).append(efficiency)
            best = top1_record(records, property_name, anchor)
            self.top1_mae[key] = top1_condition_mae(records, property_name, anchor)
            self.top1_smiles[key] = best.smiles if best is not None else None
            self.top1_value[key] = best.properties[property_name] if best is not None else None
            if regime == "in_domain" and self.top1_mae[key] is not None:
                in_domain_mae.setdefault(property_name, []).append(self.top1_mae[key])
        for regime, values in per_regime.items():
            self.gen_efficiency_average[regime] = float(np.mean(values))
        for property_name, values in in_domain_mae.items():
            self.top1_mae_in_domain_mean[property_name] = float(np.mean(values))

    def to_flat(self) -> "OrderedDict[str, object]":
        flat = OrderedDict()
        for name in ["recon_success_rate_seen", "recon_success_rate_unseen", "recon_success_rate_mean",
                     "token_accuracy_seen", "token_accuracy_unseen", "l_recon", "l_reg", "inter_decoder_kld",
                     "n_parameters", "model_size_mb"]:
            flat[name] = getattr(self, name)
        for name in ["gen_efficiency", "gen_efficiency_average", "top1_mae", "top1_smiles", "top1_value",
                     "top1_mae_in_domain_mean"]:
            for key, value in getattr(self, name).items():
                flat["{}.{}".format(name, key)] = value
        return flat

    def write_text(self, path: str) -> None:
        with atomic_path(path) as tmp, open(tmp, "w", encoding="utf-8") as f:
            for key, value in self.to_flat().items():
                if value is None:
                    value = "-"
                elif isinstance(value, float):
                    value = "{:.6f}".format(value)
                f.write("{} = {}\n".format(key, value))

    def write_json(self, path: str) -> None:
        with atomic_path(path) as tmp, open(tmp, "w", encoding="utf-8") as f:
            json.dump(self.to_flat(), f, indent=2)


def records_from_csv(path: str) -> list:
    """Regroup a generation CSV into ordered (property, anchor, records) triples."""
    df = pd.read_csv(path, dtype={"smiles": str}, encoding="utf-8")
    missing = set(constants.generation_header) - set(df.columns)
    if missing:
        raise MDVAEError("Generation file {} lacks columns {}".format(path, sorted(missing)))
    grouped = []
    for (property_name, anchor), rows in df.groupby(["anchored_property", "anchor"], sort=False):
        records = []
        for row in rows.itertuples(index=False):
            properties = {}
            if not pd.isna(row.molwt):
                properties["molwt"] = float(row.molwt)
            records.append(GenerationRecord(smiles="" if pd.isna(row.smiles) else str(row.smiles),
                                            valid=bool(row.valid), unique=bool(row.unique), novel=bool(row.novel),
                                            anchored_property=property_name, anchor=float(anchor),
                                            properties=properties))
        grouped.append((property_name, float(anchor), records))
    return grouped
