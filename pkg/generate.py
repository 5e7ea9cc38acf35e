import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple
import numpy as np
import torch
import torch.nn.functional as F
import constants
from data import ConditionStats, ConditionVector, normalize
from model import MDVAE, prior_latents, sample_latents
from smiles import VOCAB, Vocabulary, detokenize

logger = logging.getLogger(__name__)


@dataclass
class SamplerConfig:
    max_len: int = constants.max_len
    decode_rule: str = "multinomial"
    temperature: float = constants.temperature
    ensemble_space: str = "pre_softmax"
    chunk_size: int = 500

    def __post_init__(self):
        assert self.temperature > 0, "temperature must be positive"
        assert self.decode_rule in constants.decode_rules, "Unknown decode rule {}".format(self.decode_rule)
        assert self.ensemble_space in constants.ensemble_spaces, \
            "Unknown ensemble space {}".format(self.ensemble_space)


@dataclass
class GenerationResult:
    smiles: str
    ids: Tuple[int, ...]
    truncated: bool = False


@dataclass
class ReconstructionResult:
    predictions: torch.Tensor
    exact_match: torch.Tensor
    tokens_correct: int
    tokens_total: int

    @property
    def token_accuracy(self) -> float:
        return self.tokens_correct / max(1, self.tokens_total)


def ensemble_step(logit_sets: torch.Tensor, ensemble_space: str = "pre_softmax",
                  temperature: float = constants.temperature) -> torch.Tensor:
    """Combine per-decoder scores (K, ..., V) into one next-token distribution (..., V)."""
    if ensemble_space == "pre_softmax":
        return F.softmax(logit_sets.mean(dim=0) / temperature, dim=-1)
    elif ensemble_space == "post_softmax":
        return F.softmax(logit_sets / temperature, dim=-1).mean(dim=0)
    raise ValueError("Unknown ensemble space {}, expected one of {}".format(ensemble_space,
                                                                            constants.ensemble_spaces))


def _choose(probs: torch.Tensor, rule: str, generator: Optional[torch.Generator]) -> torch.Tensor:
    if rule == "greedy":
        return probs.argmax(dim=-1)
    return torch.multinomial(probs, 1, generator=generator).squeeze(-1)


@torch.no_grad()
def _generate_chunk(model: MDVAE, y: torch.Tensor, cfg: SamplerConfig, generator, shared_latent: bool,
                    vocab: Vocabulary) -> List[GenerationResult]:
    n = y.size(0)
    k = model.n_decoders
    z = prior_latents(k, n, model.config.d_z, shared_latent, generator, dtype=model.dtype)
    seq = torch.full((n, 1), vocab.bos_id, dtype=torch.long)
    finished = torch.zeros(n, dtype=torch.bool)
    for _ in range(cfg.max_len + 1):
        logits = torch.stack([model.decode_logits(i, z[i], y, seq)[:, -1] for i in range(k)])
        # PAD and BOS are never sampled
        logits[..., [vocab.pad_id, vocab.bos_id]] = float("-inf")
        probs = ensemble_step(logits, cfg.ensemble_space, cfg.temperature)
        nxt = _choose(probs, cfg.decode_rule, generator)
        nxt = torch.where(finished, torch.full_like(nxt, vocab.pad_id), nxt)
        seq = torch.cat([seq, nxt.unsqueeze(1)], dim=1)
        finished |= nxt == vocab.eos_id
        if bool(finished.all()):
            break

    results = []
    for row in seq[:, 1:].tolist():
        if vocab.eos_id in row:
            ids, truncated = row[:row.index(vocab.eos_id)], False
        else:
            ids, truncated = row[:cfg.max_len], True
        results.append(GenerationResult(smiles=detokenize(ids, vocab), ids=tuple(ids), truncated=truncated))
    return results


def generate_batch(model: MDVAE, y_norm, cfg: SamplerConfig, generator: Optional[torch.Generator] = None,
                   shared_latent: bool = True, vocab: Vocabulary = VOCAB) -> List[GenerationResult]:
    """Sample one molecule per row of the normalized condition matrix `y_norm`."""
    model.eval()
    y = torch.as_tensor(np.atleast_2d(y_norm), dtype=model.dtype)
    results = []
    for start in range(0, y.size(0), cfg.chunk_size):
        results.extend(_generate_chunk(model, y[start:start + cfg.chunk_size], cfg, generator, shared_latent, vocab))
    n_truncated = sum(r.truncated for r in results)
    if n_truncated:
        logger.debug("{} of {} generations hit max_len without EOS".format(n_truncated, len(results)))
    return results


def generate(y: ConditionVector, model: MDVAE, stats: ConditionStats, cfg: Optional[SamplerConfig] = None,
             generator: Optional[torch.Generator] = None, shared_latent: bool = True) -> GenerationResult:
    cfg = cfg or SamplerConfig(max_len=model.config.max_len)
    return generate_batch(model, normalize(y, stats).as_array(), cfg, generator, shared_latent)[0]


@torch.no_grad()
def reconstruct_teacher_forced(model: MDVAE, x: torch.Tensor, y_norm: torch.Tensor,
                               ensemble_space: str = "pre_softmax", pad_id: int = 0) -> ReconstructionResult:
    """Decode with z = mu and gold prefixes; predictions are the ensemble argmax per position."""
    model.eval()
    enc = model.encode(x, y_norm, pad_id)
    z = sample_latents(enc, "deterministic", model.n_decoders)
    logits = model.decode_all(z, y_norm, x[:, :-1])
    predictions = ensemble_step(logits, ensemble_space).argmax(dim=-1)
    targets = x[:, 1:]
    mask = targets != pad_id
    hits = (predictions == targets) & mask
    exact = (hits | ~mask).all(dim=1)
    return ReconstructionResult(predictions=predictions, exact_match=exact, tokens_correct=int(hits.sum()),
                                tokens_total=int(mask.sum()))
