import math
import logging
from dataclasses import dataclass
from typing import Optional
import torch
import torch.nn.functional as F
from scipy.special import expit
import constants

logger = logging.getLogger(__name__)

beta_schedules = ["k_anneal", "controller"]


@dataclass
class LossConfig:
    alpha: float = constants.alpha
    kld_target: float = constants.kld_target
    beta_schedule: str = "controller"
    kp: float = constants.kp
    ki: float = constants.ki
    kld_ema: float = constants.kld_ema
    anneal_steps: Optional[int] = None

    def __post_init__(self):
        assert 0.0 <= self.alpha <= 1.0, "alpha must lie in [0, 1]"
        assert self.kld_target > 0, "kld_target must be positive"
        assert self.beta_schedule in beta_schedules, "Unknown beta schedule {}".format(self.beta_schedule)
        assert 0.0 <= self.kld_ema < 1.0, "kld_ema must lie in [0, 1)"

    def controller(self) -> "BetaController":
        return BetaController(kld_target=self.kld_target, kp=self.kp, ki=self.ki, ema=self.kld_ema)


def token_log_probs(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """log p(target token) per position; logits (..., B, L, V), targets (B, L) -> (..., B, L)."""
    log_probs = F.log_softmax(logits, dim=-1)
    index = targets.expand(log_probs.shape[:-1]).unsqueeze(-1)
    return log_probs.gather(-1, index).squeeze(-1)


def _sequence_nll(log_probs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    # sum over non-PAD positions, mean over the batch
    return -(log_probs * mask).sum(dim=-1).mean(dim=-1)


def recon_loss_individual(logits_k: torch.Tensor, targets: torch.Tensor, pad_id: int = 0) -> torch.Tensor:
    mask = (targets != pad_id).to(logits_k.dtype)
    return _sequence_nll(token_log_probs(logits_k, targets), mask)


def recon_losses_individual(logit_sets: torch.Tensor, targets: torch.Tensor, pad_id: int = 0) -> torch.Tensor:
    """One individual loss per decoder slot, shape (K,)."""
    return recon_loss_individual(logit_sets, targets, pad_id)


def recon_loss_collaborative(logit_sets: torch.Tensor, targets: torch.Tensor, pad_id: int = 0) -> torch.Tensor:
    """-log of the decoder-averaged likelihood, mixed per position with log-mean-exp."""
    mask = (targets != pad_id).to(logit_sets.dtype)
    lp = token_log_probs(logit_sets, targets)
    mixed = torch.logsumexp(lp, dim=0) - math.log(logit_sets.size(0))
    return _sequence_nll(mixed, mask)


def recon_loss_md(logit_sets: torch.Tensor, targets: torch.Tensor, alpha: float = constants.alpha,
                  pad_id: int = 0) -> torch.Tensor:
    collaborative = recon_loss_collaborative(logit_sets, targets, pad_id)
    individual = recon_losses_individual(logit_sets, targets, pad_id).mean()
    return alpha * collaborative + (1.0 - alpha) * individual


def kld_regularizer(enc) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over latent dims, averaged over the batch."""
    mu, log_sigma = enc.mu, enc.log_sigma
    return 0.5 * (mu.pow(2) + torch.exp(2 * log_sigma) - 2 * log_sigma - 1).sum(dim=-1).mean()


def total_loss(recon, kld, beta):
    return recon + beta * kld


def k_anneal_beta(step: int, anneal_steps: int) -> float:
    return min(1.0, step / max(1, anneal_steps))


class BetaController:
    """PI feedback on e(t) = kld_target - observed KLD.

    beta(t) = Kp / (1 + exp(e(t))) - Ki * sum(e), clamped to [beta_min, beta_max];
    the integrator stops accumulating while the output is clamped. Errors enter the
    integral clipped to +-error_clip (default kld_target).
    """

    def __init__(self, kld_target=constants.kld_target, kp=constants.kp, ki=constants.ki, ema=constants.kld_ema,
                 beta_min=0.0, beta_max=1.0, error_clip: Optional[float] = None) -> None:
        self.kld_target = kld_target
        self.kp = kp
        self.ki = ki
        self.ema = ema
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.error_clip = kld_target if error_clip is None else error_clip
        self.beta = beta_min
        self.integral = 0.0
        self.smoothed = None

    def step(self, observed_kld: float) -> float:
        if self.smoothed is None or self.ema <= 0:
            self.smoothed = float(observed_kld)
        else:
            self.smoothed = self.ema * self.smoothed + (1.0 - self.ema) * float(observed_kld)
        error = self.kld_target - self.smoothed
        p_term = self.kp * float(expit(-error))
        # the integral only sees the error clipped to +-error_clip
        clipped = min(max(error, -self.error_clip), self.error_clip)
        beta = p_term - self.ki * (self.integral + clipped)
        if beta > self.beta_max:
            beta = self.beta_max
        elif beta < self.beta_min:
            beta = self.beta_min
        else:
            self.integral += clipped
        self.beta = beta
        return beta

    def state_dict(self) -> dict:
        return {"beta": self.beta, "integral": self.integral, "smoothed": self.smoothed}

    def load_state_dict(self, state: dict) -> None:
        self.beta = state["beta"]
        self.integral = state["integral"]
        self.smoothed = state["smoothed"]


def step_beta(ctrl: BetaController, observed_kld: float) -> float:
    return ctrl.step(observed_kld)
