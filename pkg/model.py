import math
import logging
from dataclasses import asdict, dataclass
from typing import Optional
import torch
import torch.nn as nn
import constants
import utils
from utils import ShapeMismatchError

logger = logging.getLogger(__name__)

latent_modes = ["shared", "per_decoder", "deterministic"]


@dataclass
class ModelConfig:
    d_model: int = constants.d_model
    n_layers: int = constants.n_layers
    n_heads: int = constants.n_heads
    d_z: int = constants.d_z
    d_cond: int = len(constants.property_names)
    n_decoders: int = constants.n_decoders
    max_len: int = constants.max_len
    vocab_size: int = constants.vocab_size
    ff_mult: int = constants.ff_mult
    dropout: float = constants.dropout
    decoder_width: Optional[int] = None

    def __post_init__(self):
        assert self.n_decoders >= 1, "Need at least one decoder"
        assert self.d_z > 0, "Latent dimension must be positive"
        assert self.d_model % self.n_heads == 0, "d_model must be divisible by n_heads"
        if self.decoder_width is None:
            self.decoder_width = matched_decoder_width(self)
        assert self.decoder_width % self.n_heads == 0, "decoder width must be divisible by n_heads"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderOutput:
    mu: torch.Tensor
    log_sigma: torch.Tensor

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(self.log_sigma)


def layer_parameter_count(width: int, ff_mult: int) -> int:
    ff = ff_mult * width
    # attention in/out projections, two feed-forward linears, two layer norms
    return 4 * width * width + 4 * width + 2 * width * ff + ff + width + 4 * width


def decoder_parameter_count(width: int, config: ModelConfig) -> int:
    v = config.vocab_size
    n = v * width
    n += (width + config.d_z + config.d_cond) * width + width
    n += config.n_layers * layer_parameter_count(width, config.ff_mult)
    n += 2 * width
    n += width * v + v
    return n


def matched_decoder_width(config: ModelConfig) -> int:
    """Decoder width whose K copies hold as many parameters as one full-width decoder."""
    if config.n_decoders == 1:
        return config.d_model
    target = decoder_parameter_count(config.d_model, config)
    widths = range(config.n_heads, config.d_model + 1, config.n_heads)
    return min(widths, key=lambda w: abs(config.n_decoders * decoder_parameter_count(w, config) - target))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def model_size_mb(module: nn.Module) -> float:
    return count_parameters(module) * 4 / 2 ** 20


class SinusoidalPositions(nn.Module):
    def __init__(self, width: int, max_positions: int) -> None:
        super().__init__()
        pe = torch.zeros(max_positions, width)
        position = torch.arange(0, max_positions, dtype=torch.float).unsqueeze(1)
        div_term = torch.exp(torch.arange(0, width, 2).float() * (-math.log(10000.0) / width))
        pe[:, 0::2] = torch.sin(position * div_term)
        pe[:, 1::2] = torch.cos(position * div_term[:width // 2])
        self.register_buffer('pe', pe)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.pe[:x.size(1)].to(x.dtype)


def _stack(width: int, config: ModelConfig) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(d_model=width, nhead=config.n_heads, dim_feedforward=config.ff_mult * width,
                                       dropout=config.dropout, activation="gelu", batch_first=True, norm_first=True)
    return nn.TransformerEncoder(layer, num_layers=config.n_layers, norm=nn.LayerNorm(width),
                                 enable_nested_tensor=False)


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """Fan-in scaled uniform projections, N(0, 0.02^2) embeddings, drawn from `generator`."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Embedding):
                m.weight.normal_(0.0, constants.embedding_std, generator=generator)
            elif isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.MultiheadAttention):
                bound = 1.0 / math.sqrt(m.embed_dim)
                m.in_proj_weight.uniform_(-bound, bound, generator=generator)
                m.in_proj_bias.zero_()
            elif isinstance(m, nn.LayerNorm):
                m.reset_parameters()


class Encoder(nn.Module):
    """Shared posterior network q(z | x, y)."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        d = config.d_model
        self.token_embedding = nn.Embedding(config.vocab_size, d)
        self.input_proj = nn.Linear(d + config.d_cond, d)
        self.positions = SinusoidalPositions(d, config.max_len + 2)
        self.stack = _stack(d, config)
        self.head = nn.Linear(d, 2 * config.d_z)

    def forward(self, x: torch.Tensor, y: torch.Tensor, pad_mask: torch.Tensor) -> EncoderOutput:
        h = self.token_embedding(x)
        h = torch.cat([h, y.unsqueeze(1).expand(-1, x.size(1), -1)], dim=-1)
        h = self.positions(self.input_proj(h))
        h = self.stack(h, src_key_padding_mask=pad_mask)
        keep = (~pad_mask).unsqueeze(-1).to(h.dtype)
        pooled = (h * keep).sum(dim=1) / keep.sum(dim=1)
        mu, log_sigma = self.head(pooled).chunk(2, dim=-1)
        return EncoderOutput(mu=mu, log_sigma=log_sigma)


class Decoder(nn.Module):
    """Autoregressive p(x | y, z); z and y are concatenated to every token embedding."""

    def __init__(self, config: ModelConfig, width: int) -> None:
        super().__init__()
        self.width = width
        self.token_embedding = nn.Embedding(config.vocab_size, width)
        self.input_proj = nn.Linear(width + config.d_z + config.d_cond, width)
        self.positions = SinusoidalPositions(width, config.max_len + 2)
        self.stack = _stack(width, config)
        self.out = nn.Linear(width, config.vocab_size)

    def forward(self, z: torch.Tensor, y: torch.Tensor, prefix: torch.Tensor) -> torch.Tensor:
        length = prefix.size(1)
        h = self.token_embedding(prefix)
        cond = torch.cat([z, y], dim=-1).unsqueeze(1).expand(-1, length, -1)
        h = self.positions(self.input_proj(torch.cat([h, cond], dim=-1)))
        causal = torch.triu(torch.ones(length, length, dtype=torch.bool, device=prefix.device), diagonal=1)
        h = self.stack(h, mask=causal)
        return self.out(h)


class MDVAE(nn.Module):
    def __init__(self, config: ModelConfig, seed=constants.seed) -> None:
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoders = nn.ModuleList([Decoder(config, config.decoder_width) for _ in range(config.n_decoders)])
        self.reset_parameters(seed)

    def reset_parameters(self, seed) -> None:
        # one seed stream per component so decoders start distinct
        init_weights(self.encoder, utils.torch_generator(seed, "init", 0))
        for k, decoder in enumerate(self.decoders):
            init_weights(decoder, utils.torch_generator(seed, "init", k + 1))

    @property
    def n_decoders(self) -> int:
        return len(self.decoders)

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder.head.weight.dtype

    def _check_inputs(self, tokens: torch.Tensor, y: torch.Tensor) -> None:
        if tokens.dim() != 2:
            raise ShapeMismatchError("Token batch must be 2-D (batch, length), got {}".format(tuple(tokens.shape)))
        if y.dim() != 2 or y.size(0) != tokens.size(0) or y.size(1) != self.config.d_cond:
            raise ShapeMismatchError("Condition batch must be ({}, {}), got {}".format(
                tokens.size(0), self.config.d_cond, tuple(y.shape)))
        if tokens.size(1) > self.config.max_len + 2:
            raise ShapeMismatchError("Sequence length {} exceeds max_len + 2 = {}".format(
                tokens.size(1), self.config.max_len + 2))

    def encode(self, x: torch.Tensor, y: torch.Tensor, pad_id: int = 0) -> EncoderOutput:
        self._check_inputs(x, y)
        return self.encoder(x, y.to(self.dtype), x == pad_id)

    def decode_logits(self, k: int, z: torch.Tensor, y: torch.Tensor, prefix: torch.Tensor) -> torch.Tensor:
        """Pre-softmax scores (batch, length, vocab); position t sees prefix[:, :t+1] only."""
        if not 0 <= k < self.n_decoders:
            raise ShapeMismatchError("Decoder index {} out of range for K={}".format(k, self.n_decoders))
        self._check_inputs(prefix, y)
        if z.dim() != 2 or z.size(0) != prefix.size(0) or z.size(1) != self.config.d_z:
            raise ShapeMismatchError("Latent batch must be ({}, {}), got {}".format(
                prefix.size(0), self.config.d_z, tuple(z.shape)))
        return self.decoders[k](z.to(self.dtype), y.to(self.dtype), prefix)

    def decode_all(self, z_slots: torch.Tensor, y: torch.Tensor, prefix: torch.Tensor) -> torch.Tensor:
        """Logits for every latent slot, stacked (slots, batch, length, vocab).

        With one decoder every slot goes through it; otherwise slot k uses decoder k.
        """
        if self.n_decoders > 1 and z_slots.size(0) != self.n_decoders:
            raise ShapeMismatchError("Got {} latent slots for {} decoders".format(z_slots.size(0), self.n_decoders))
        k_of = (lambda s: 0) if self.n_decoders == 1 else (lambda s: s)
        return torch.stack([self.decode_logits(k_of(s), z_slots[s], y, prefix) for s in range(z_slots.size(0))])

    def forward(self, x: torch.Tensor, y: torch.Tensor, mode: str, n_slots: int,
                generator: Optional[torch.Generator] = None, pad_id: int = 0):
        """Teacher-forced pass: returns (EncoderOutput, logits for x[:, 1:])."""
        enc = self.encode(x, y, pad_id)
        z = sample_latents(enc, mode, n_slots, generator)
        return enc, self.decode_all(z, y, x[:, :-1])


def sample_latents(enc: EncoderOutput, mode: str, n_slots: int,
                   generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Reparameterized latents, shape (n_slots, batch, d_z)."""
    assert n_slots >= 1, "Need at least one latent slot"
    mu = enc.mu
    if mode == "deterministic":
        return mu.unsqueeze(0).expand(n_slots, *mu.shape)
    if mode == "shared":
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
        return (mu + enc.sigma * eps).unsqueeze(0).expand(n_slots, *mu.shape)
    if mode == "per_decoder":
        eps = torch.randn((n_slots,) + tuple(mu.shape), generator=generator, dtype=mu.dtype, device=mu.device)
        return mu.unsqueeze(0) + enc.sigma.unsqueeze(0) * eps
    raise ValueError("Unknown latent mode {}, expected one of {}".format(mode, latent_modes))


def prior_latents(n_slots: int, batch: int, d_z: int, shared: bool, generator: Optional[torch.Generator] = None,
                  dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """z ~ N(0, I) per slot, or one draw repeated over slots when `shared`."""
    if shared:
        z = torch.randn((batch, d_z), generator=generator, dtype=dtype)
        return z.unsqueeze(0).expand(n_slots, batch, d_z)
    return torch.randn((n_slots, batch, d_z), generator=generator, dtype=dtype)
