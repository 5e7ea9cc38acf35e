import os
import math
import time
import logging
from collections import namedtuple
from dataclasses import asdict, dataclass, replace
from typing import Optional, Tuple
import numpy as np
import pandas as pd
import torch
from tqdm import tqdm
import constants
import utils
from data import Batch, ConditionStats, Corpus, epoch_order, iterate_batches
from losses import (LossConfig, k_anneal_beta, kld_regularizer, recon_loss_collaborative, recon_loss_md,
                    recon_losses_individual, total_loss)
from metrics import inter_decoder_kld
from model import MDVAE, ModelConfig, count_parameters
from utils import CheckpointError, NonFiniteLossError

logger = logging.getLogger(__name__)

VariantSpec = namedtuple("VariantSpec", ["latent_mode", "objective", "schedule", "single_decoder", "n_draws"])

# objective: "individual" mean over decoders, pure "collaborative", or "interpolated" alpha mix of both
VARIANTS = {
    "base": VariantSpec("shared", "individual", "k_anneal", True, 1),
    "controlvae": VariantSpec("shared", "individual", "controller", True, 1),
    "sd_dif_col": VariantSpec("per_decoder", "collaborative", "controller", True, constants.sd_draws),
    "md": VariantSpec("shared", "individual", "controller", False, None),
    "md_col": VariantSpec("shared", "interpolated", "controller", False, None),
    "md_dif": VariantSpec("per_decoder", "individual", "controller", False, None),
    "md_dif_col": VariantSpec("per_decoder", "interpolated", "controller", False, None),
}

StepResult = namedtuple("StepResult", ["l_recon", "l_reg", "beta", "l_objective"])


@dataclass
class TrainConfig:
    variant: str = "md_dif_col"
    epochs: int = constants.epochs
    batch_size: int = constants.batch_size
    lr: float = constants.lr
    adam_betas: Tuple[float, float] = constants.adam_betas
    adam_eps: float = constants.adam_eps
    seed: int = constants.seed
    checkpoint_every: int = constants.checkpoint_every
    grad_clip: float = constants.grad_clip
    alpha: float = constants.alpha
    kld_target: float = constants.kld_target
    kp: float = constants.kp
    ki: float = constants.ki
    kld_ema: float = constants.kld_ema
    anneal_steps: Optional[int] = None
    max_steps: Optional[int] = None
    kld_sample_size: int = constants.kld_sample_size
    progress: bool = True

    def __post_init__(self):
        assert self.variant in VARIANTS, "Unknown variant {}, expected one of {}".format(self.variant,
                                                                                          constants.variants)
        assert self.epochs >= 1, "epochs must be at least 1"
        assert self.batch_size >= 1, "batch_size must be at least 1"
        assert self.lr > 0, "lr must be positive"
        self.adam_betas = tuple(self.adam_betas)
        self.loss_config()

    @property
    def spec(self) -> VariantSpec:
        return VARIANTS[self.variant]

    def loss_config(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, kld_target=self.kld_target, beta_schedule=self.spec.schedule, kp=self.kp,
                          ki=self.ki, kld_ema=self.kld_ema, anneal_steps=self.anneal_steps)

    def to_dict(self) -> dict:
        return asdict(self)


def variant_model_config(model_config: ModelConfig, variant: str) -> ModelConfig:
    """Single-decoder variants keep the full width; MD variants use K matched-width decoders."""
    if VARIANTS[variant].single_decoder:
        return replace(model_config, n_decoders=1, decoder_width=None)
    return model_config


def shares_latent(variant: str, n_decoders: int) -> bool:
    """Whether generation draws one prior z for every decoder."""
    return VARIANTS[variant].latent_mode != "per_decoder" or n_decoders == 1


def reconstruction_terms(spec: VariantSpec, logit_sets: torch.Tensor, targets: torch.Tensor, alpha: float,
                         pad_id: int = 0):
    """(training objective, reported L_recon); the reported value is the ensemble loss whenever
    several decoders contribute."""
    if spec.objective == "collaborative":
        objective = recon_loss_collaborative(logit_sets, targets, pad_id)
        return objective, objective
    individual = recon_losses_individual(logit_sets, targets, pad_id).mean()
    if logit_sets.size(0) == 1:
        return individual, individual
    if spec.objective == "interpolated":
        objective = recon_loss_md(logit_sets, targets, alpha, pad_id)
    else:
        objective = individual
    return objective, recon_loss_collaborative(logit_sets, targets, pad_id)


class TrainState:
    def __init__(self, model_config: ModelConfig, train_config: TrainConfig, stats: ConditionStats,
                 corpus_path: Optional[str] = None, logger: logging.Logger = logger) -> None:
        self.train_config = train_config
        self.model_config = variant_model_config(model_config, train_config.variant)
        self.stats = stats
        self.corpus_path = corpus_path
        self.logger = logger
        self.model = MDVAE(self.model_config, seed=train_config.seed)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=train_config.lr, betas=train_config.adam_betas,
                                          eps=train_config.adam_eps)
        self.controller = train_config.loss_config().controller()
        self.latent_generator = utils.torch_generator(train_config.seed, "latent")
        self.step = 0
        self.epoch = 0
        self.batch_in_epoch = 0
        self.anneal_steps = train_config.anneal_steps
        self.epoch_sums = {"l_recon": 0.0, "l_reg": 0.0, "n": 0}
        self.history = []

    @property
    def spec(self) -> VariantSpec:
        return self.train_config.spec

    def current_beta(self) -> float:
        if self.spec.schedule == "k_anneal":
            return k_anneal_beta(self.step, self.anneal_steps or 1)
        return self.controller.beta

    def state_dict(self) -> dict:
        return {
            "format_version": constants.checkpoint_version,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "stats": self.stats.to_dict(),
            "corpus_path": self.corpus_path,
            "model_state_dict": self.model.state_dict(),
            "optimizer_state_dict": self.optimizer.state_dict(),
            "controller": self.controller.state_dict(),
            "latent_rng_state": self.latent_generator.get_state(),
            "step": self.step,
            "epoch": self.epoch,
            "batch_in_epoch": self.batch_in_epoch,
            "anneal_steps": self.anneal_steps,
            "epoch_sums": dict(self.epoch_sums),
            "history": list(self.history),
        }

    def save(self, path: str) -> None:
        with utils.atomic_path(path) as tmp_path:
            torch.save(self.state_dict(), tmp_path)
        self.logger.debug("Saved checkpoint at step {} to {}".format(self.step, path))

    @classmethod
    def load(cls, path: str, logger: logging.Logger = logger) -> "TrainState":
        if not path or not os.path.isfile(path):
            raise CheckpointError("Checkpoint not found: {}".format(path))
        try:
            checkpoint = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as e:
            raise CheckpointError("Cannot read checkpoint {}: {}".format(path, e))
        if checkpoint.get("format_version") != constants.checkpoint_version:
            raise CheckpointError("Checkpoint {} has format {}, expected {}".format(
                path, checkpoint.get("format_version"), constants.checkpoint_version))

        train_config = TrainConfig(**checkpoint["train_config"])
        model_config = ModelConfig(**checkpoint["model_config"])
        state = cls(model_config, train_config, ConditionStats.from_dict(checkpoint["stats"]),
                    corpus_path=checkpoint["corpus_path"], logger=logger)
        state.model.load_state_dict(checkpoint["model_state_dict"])
        state.optimizer.load_state_dict(checkpoint["optimizer_state_dict"])
        state.controller.load_state_dict(checkpoint["controller"])
        state.latent_generator.set_state(checkpoint["latent_rng_state"])
        state.step = checkpoint["step"]
        state.epoch = checkpoint["epoch"]
        state.batch_in_epoch = checkpoint["batch_in_epoch"]
        state.anneal_steps = checkpoint["anneal_steps"]
        state.epoch_sums = dict(checkpoint["epoch_sums"])
        state.history = list(checkpoint["history"])
        logger.info("Loaded checkpoint {} at epoch {} step {}".format(path, state.epoch, state.step))
        return state


def train_step(state: TrainState, batch: Batch) -> StepResult:
    spec = state.spec
    cfg = state.train_config
    model = state.model
    model.train()
    n_slots = spec.n_draws or model.n_decoders
    y = batch.y.to(model.dtype)
    enc, logit_sets = model(batch.x, y, spec.latent_mode, n_slots, state.latent_generator)
    objective, reported = reconstruction_terms(spec, logit_sets, batch.x[:, 1:], cfg.alpha)
    kld = kld_regularizer(enc)
    beta = state.current_beta()
    loss = total_loss(objective, kld, beta)

    if not torch.isfinite(loss):
        raise NonFiniteLossError("Non-finite loss at step {}".format(state.step), diagnostics={
            "step": state.step, "epoch": state.epoch, "batch_in_epoch": state.batch_in_epoch,
            "l_objective": float(objective), "l_reg": float(kld), "beta": beta, "smiles": list(batch.smiles),
            "mu_abs_max": float(enc.mu.abs().max()), "log_sigma_max": float(enc.log_sigma.max()),
        })

    state.optimizer.zero_grad()
    loss.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    state.optimizer.step()

    l_reg = float(kld.detach())
    if spec.schedule == "controller":
        state.controller.step(l_reg)
    state.step += 1
    return StepResult(l_recon=float(reported.detach()), l_reg=l_reg, beta=beta, l_objective=float(objective.detach()))


@torch.no_grad()
def evaluate_losses(state: TrainState, corpus: Corpus, batch_size: int = constants.batch_size) -> Tuple[float, float]:
    """Batch-size weighted (L_recon, L_reg) over `corpus` with a fresh latent stream."""
    spec = state.spec
    model = state.model
    model.eval()
    generator = utils.torch_generator(state.train_config.seed, "latent", 1)
    n_slots = spec.n_draws or model.n_decoders
    recon_sum = 0.0
    reg_sum = 0.0
    for batch in iterate_batches(corpus, state.stats, batch_size):
        enc, logit_sets = model(batch.x, batch.y.to(model.dtype), spec.latent_mode, n_slots, generator)
        _, reported = reconstruction_terms(spec, logit_sets, batch.x[:, 1:], state.train_config.alpha)
        recon_sum += float(reported) * len(batch)
        reg_sum += float(kld_regularizer(enc)) * len(batch)
    return recon_sum / len(corpus), reg_sum / len(corpus)


def _append_rows(path: str, rows: list) -> None:
    if rows:
        pd.DataFrame(rows, columns=constants.metrics_log_header).to_csv(path, mode="a", header=False, index=False)
        rows.clear()


def fit(train_config: TrainConfig, model_config: ModelConfig, corpus: Corpus, out_dir: str,
        stats: Optional[ConditionStats] = None, resume: Optional[str] = None, corpus_path: Optional[str] = None,
        logger: logging.Logger = logger) -> Tuple[TrainState, pd.DataFrame]:
    """Train for `train_config.epochs` epochs (or until `max_steps`), writing the step metrics log
    and checkpoints under `out_dir`. Returns the final state and one row per finished epoch."""
    os.makedirs(out_dir, exist_ok=True)
    checkpoint_path = os.path.join(out_dir, constants.checkpoint_name)
    log_path = os.path.join(out_dir, constants.metrics_log_name)

    if resume:
        state = TrainState.load(resume, logger=logger)
        if state.train_config.variant != train_config.variant:
            raise CheckpointError("Checkpoint variant {} does not match requested {}".format(
                state.train_config.variant, train_config.variant))
        state.train_config = replace(state.train_config, epochs=train_config.epochs,
                                     max_steps=train_config.max_steps, progress=train_config.progress)
        if not os.path.isfile(log_path):
            pd.DataFrame([], columns=constants.metrics_log_header).to_csv(log_path, index=False)
    else:
        state = TrainState(model_config, train_config, stats or ConditionStats.fit(corpus.properties),
                           corpus_path=corpus_path, logger=logger)
        pd.DataFrame([], columns=constants.metrics_log_header).to_csv(log_path, index=False)
    cfg = state.train_config

    batches_per_epoch = math.ceil(len(corpus) / cfg.batch_size)
    if state.anneal_steps is None:
        state.anneal_steps = max(1, int(constants.anneal_fraction * cfg.epochs * batches_per_epoch))
    kld_sample = corpus.subset(range(min(len(corpus), cfg.kld_sample_size)))

    logger.info("Training {} with K={} ({} parameters) on {} molecules, {} batches per epoch".format(
        cfg.variant, state.model.n_decoders, count_parameters(state.model), len(corpus), batches_per_epoch))

    rows = []
    stopped = False
    try:
        while state.epoch < cfg.epochs and not stopped:
            start_time = time.time()
            order = epoch_order(len(corpus), cfg.seed, state.epoch)
            batches = iterate_batches(corpus, state.stats, cfg.batch_size, order, start=state.batch_in_epoch)
            for batch in tqdm(batches, total=batches_per_epoch - state.batch_in_epoch, disable=not cfg.progress,
                              desc="epoch {}".format(state.epoch + 1)):
                result = train_step(state, batch)
                state.batch_in_epoch += 1
                state.epoch_sums["l_recon"] += result.l_recon
                state.epoch_sums["l_reg"] += result.l_reg
                state.epoch_sums["n"] += 1
                rows.append([state.step, state.epoch + 1, cfg.variant, result.l_recon, result.l_reg, result.beta, ""])
                logger.debug("step {} l_recon {:.4f} l_reg {:.4f} beta {:.6f}".format(
                    state.step, result.l_recon, result.l_reg, result.beta))
                if cfg.max_steps is not None and state.step >= cfg.max_steps:
                    stopped = True
                    break
                if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                    _append_rows(log_path, rows)
                    state.save(checkpoint_path)
            if stopped and state.batch_in_epoch < batches_per_epoch:
                break

            inter_kld = None
            if state.model.n_decoders >= 2:
                inter_kld = inter_decoder_kld(kld_sample, state.model, state.stats, cfg.batch_size)
                if rows:
                    rows[-1][-1] = inter_kld
            n = max(1, state.epoch_sums["n"])
            summary = {"epoch": state.epoch + 1, "step": state.step, "l_recon": state.epoch_sums["l_recon"] / n,
                       "l_reg": state.epoch_sums["l_reg"] / n, "beta": state.current_beta(), "inter_kld": inter_kld}
            state.history.append(summary)
            logger.info("Epoch {} step {}: l_recon {:.4f} l_reg {:.4f} beta {:.6f} inter_kld {} ({:.1f}s)".format(
                summary["epoch"], state.step, summary["l_recon"], summary["l_reg"], summary["beta"],
                "-" if inter_kld is None else "{:.4f}".format(inter_kld), time.time() - start_time))
            state.epoch += 1
            state.batch_in_epoch = 0
            state.epoch_sums = {"l_recon": 0.0, "l_reg": 0.0, "n": 0}
            _append_rows(log_path, rows)
            state.save(checkpoint_path)
    except NonFiniteLossError as e:
        _append_rows(log_path, rows)
        dump_path = os.path.join(out_dir, "nonfinite_step{}.pt".format(state.step))
        torch.save({"diagnostics": e.diagnostics, "state": state.state_dict()}, dump_path)
        logger.error("{}; diagnostics written to {}".format(e, dump_path))
        raise

    _append_rows(log_path, rows)
    state.save(checkpoint_path)
    return state, pd.DataFrame(state.history, columns=["epoch", "step", "l_recon", "l_reg", "beta", "inter_kld"])
