"""Tiny trainable sequence models: a bidirectional encoder yielding
per-position hidden states and a causal decoder yielding next-token logits.

Both are deliberately small transformers behind narrow contracts, so a real
pre-trained model could replace them without touching anything downstream.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn

CHECKPOINT_MAGIC = "mtlaffect-checkpoint-v1"

ENCODER_KIND = "encoder"
DECODER_KIND = "decoder"


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int
    hidden_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 128
    dropout_rate: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if self.hidden_dim < 1 or self.hidden_dim % self.n_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} must be a positive multiple of "
                f"n_heads {self.n_heads}"
            )
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


EncoderConfig = BackboneConfig
DecoderConfig = BackboneConfig


@dataclass
class HiddenStates:
    """Per-position hidden vectors plus the mask they were computed under.
    Downstream pooling must not read masked positions."""

    hidden: torch.Tensor  # (batch, seq, hidden_dim)
    attention_mask: torch.Tensor  # (batch, seq) of {0,1}


class TransformerLayer(nn.Module):
    """Post-norm block: self-attention then position-wise FFN."""

    def __init__(self, hidden_dim: int, n_heads: int, dropout_rate: float):
        super().__init__()
        self.attn = nn.MultiheadAttention(
            hidden_dim, n_heads, dropout=dropout_rate, batch_first=True
        )
        self.norm_attn = nn.LayerNorm(hidden_dim)
        self.ff = nn.Sequential(
            nn.Linear(hidden_dim, 4 * hidden_dim),
            nn.GELU(),
            nn.Linear(4 * hidden_dim, hidden_dim),
        )
        self.norm_ff = nn.LayerNorm(hidden_dim)
        self.dropout = nn.Dropout(dropout_rate)

    def forward(self, x, attn_mask=None, key_padding_mask=None):
        attended, _ = self.attn(
            x, x, x,
            attn_mask=attn_mask,
            key_padding_mask=key_padding_mask,
            need_weights=False,
        )
        x = self.norm_attn(x + self.dropout(attended))
        x = self.norm_ff(x + self.dropout(self.ff(x)))
        return x


class _SequenceModel(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.hidden_dim)
        self.position_embedding = nn.Embedding(config.max_seq_len, config.hidden_dim)
        self.layers = nn.ModuleList(
            TransformerLayer(config.hidden_dim, config.n_heads, config.dropout_rate)
            for _ in range(config.n_layers)
        )

    def _check_inputs(self, input_ids: torch.Tensor) -> None:
        if input_ids.dim() != 2:
            raise ValueError(f"input_ids must be (batch, seq), got {tuple(input_ids.shape)}")
        if input_ids.size(1) > self.config.max_seq_len:
            raise ValueError(
                f"sequence length {input_ids.size(1)} exceeds max_seq_len "
                f"{self.config.max_seq_len}"
            )

    def _embed(self, input_ids: torch.Tensor) -> torch.Tensor:
        positions = torch.arange(input_ids.size(1), device=input_ids.device)
        return self.token_embedding(input_ids) + self.position_embedding(positions)


class SequenceEncoder(_SequenceModel):
    """Bidirectional encoder: every unmasked position may attend to every
    other unmasked position."""

    def forward(self, input_ids: torch.Tensor, attention_mask: torch.Tensor | None = None):
        self._check_inputs(input_ids)
        if attention_mask is None:
            attention_mask = torch.ones_like(input_ids)
        key_padding = attention_mask == 0
        x = self._embed(input_ids)
        for layer in self.layers:
            x = layer(x, key_padding_mask=key_padding)
        return x


class CausalDecoder(_SequenceModel):
    """Left-to-right decoder with an untied output projection over the
    vocabulary; logits at position t depend only on ids at positions <= t."""

    def __init__(self, config: BackboneConfig):
        super().__init__(config)
        self.lm_head = nn.Linear(config.hidden_dim, config.vocab_size)

    def forward(self, input_ids: torch.Tensor, attention_mask: torch.Tensor | None = None):
        self._check_inputs(input_ids)
        seq_len = input_ids.size(1)
        causal = torch.triu(
            torch.ones(seq_len, seq_len, dtype=torch.bool, device=input_ids.device),
            diagonal=1,
        )
        key_padding = None
        if attention_mask is not None:
            key_padding = attention_mask == 0
        x = self._embed(input_ids)
        for layer in self.layers:
            x = layer(x, attn_mask=causal, key_padding_mask=key_padding)
        return self.lm_head(x)


def encoder_forward(
    encoder: SequenceEncoder,
    input_ids: torch.Tensor,
    attention_mask: torch.Tensor | None = None,
) -> HiddenStates:
    if attention_mask is None:
        attention_mask = torch.ones_like(input_ids)
    hidden = encoder(input_ids, attention_mask)
    return HiddenStates(hidden=hidden, attention_mask=attention_mask)


def decoder_forward(
    decoder: CausalDecoder,
    input_ids: torch.Tensor,
    attention_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    return decoder(input_ids, attention_mask)


def _seeded_init(model: _SequenceModel, config: BackboneConfig) -> None:
    torch.manual_seed(config.seed)
    for module in model.modules():
        if isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
        elif isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
            nn.init.zeros_(module.bias)
        elif isinstance(module, nn.MultiheadAttention):
            nn.init.normal_(module.in_proj_weight, mean=0.0, std=0.02)
            nn.init.zeros_(module.in_proj_bias)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)


def build_encoder(config: BackboneConfig) -> SequenceEncoder:
    # fork_rng keeps both construction and re-init off the caller's RNG stream
    with torch.random.fork_rng():
        model = SequenceEncoder(config)
        _seeded_init(model, config)
    return model


def build_decoder(config: BackboneConfig) -> CausalDecoder:
    with torch.random.fork_rng():
        model = CausalDecoder(config)
        _seeded_init(model, config)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def state_hash(model: nn.Module) -> str:
    """Stable digest of every parameter and buffer, for checkpoint and
    phase-handoff bookkeeping."""
    import hashlib

    digest = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(bytes(tensor.view(torch.uint8).flatten().tolist()))
    return digest.hexdigest()


def save_checkpoint(
    path: str | Path,
    kind: str,
    config: BackboneConfig,
    model: nn.Module,
    extra: dict | None = None,
) -> None:
    record = {
        "magic": CHECKPOINT_MAGIC,
        "kind": kind,
        "config": asdict(config),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(record, path)


def load_checkpoint(path: str | Path) -> dict:
    record = torch.load(path, weights_only=False)
    if not isinstance(record, dict) or record.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a recognized checkpoint file")
    return record
