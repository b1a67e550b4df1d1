"""Decoder-only pre-LN transformer with three positional schemes.

    h^0     = e_tok[x] + e_pos
    a^l     = h^{l-1} + MHA_l(LN^A_l(h^{l-1}))
    h^l     = a^l + MLP_l(LN^F_l(a^l))
    logits  = W · LN(h^L)

``e_pos`` is a learned absolute table (``learned_absolute``), absent
(``relative_bias``: a learned per-head scalar bias indexed by the clipped
displacement i - j is added to attention logits), or a digit-significance
table (``abacus``: a digit gets the index of its place value inside its
field, plus a random shift during training; other tokens get index 0).

Dropout draws come from an explicit ``torch.Generator`` so a training step is
a pure function of (parameters, batch, seed, step).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .tokenizer import SEMI, VOCAB_SIZE, LineLayout


class PEKind(str, Enum):
    LEARNED_ABSOLUTE = "learned_absolute"
    RELATIVE_BIAS = "relative_bias"
    ABACUS = "abacus"


PRESETS = {
    "nano": (3, 3, 48),
    "micro": (4, 4, 128),
    "mini": (6, 6, 384),
}


class ConfigError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in {name}")
        self.name = name


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 3
    num_heads: int = 3
    embed_dim: int = 48
    vocab_size: int = VOCAB_SIZE
    context_window: int = 256
    dropout: float = 0.2
    pe_kind: PEKind = PEKind.LEARNED_ABSOLUTE
    abacus_max_offset: int = 100
    rel_max_distance: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pe_kind", PEKind(self.pe_kind))
        if min(self.num_layers, self.num_heads, self.embed_dim, self.context_window) < 1:
            raise ConfigError("layer count, heads, width and context must be positive")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.vocab_size != VOCAB_SIZE:
            raise ConfigError(f"vocab_size must be {VOCAB_SIZE}")
        if self.abacus_max_offset < 0 or self.rel_max_distance < 1:
            raise ConfigError("abacus_max_offset must be >= 0 and rel_max_distance >= 1")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        try:
            layers, heads, width = PRESETS[name.lower()]
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        fields = {"num_layers": layers, "num_heads": heads, "embed_dim": width}
        fields.update(overrides)
        return cls(**fields)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pe_kind"] = self.pe_kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# --- positions -------------------------------------------------------------------


def digit_significance(layout: LineLayout) -> np.ndarray:
    """Place value (1 = units) of every slot in a line; 0 for non-digit slots."""
    w, wc = layout.operand_width, layout.answer_width
    sig = np.zeros(layout.seq_len, dtype=np.int64)
    sig[1 : 1 + w] = np.arange(w, 0, -1)
    sig[2 + w : 2 + 2 * w] = np.arange(w, 0, -1)
    sig[layout.answer_slice] = np.arange(1, wc + 1)
    return sig


def assign_positions(layout: LineLayout, pe_kind: PEKind, offsets=None) -> Optional[np.ndarray]:
    """Positional indices for whole lines of ``layout``.

    Returns ``None`` for ``relative_bias`` (no index lookup), a ``(seq_len,)``
    array when ``offsets`` is None, and a ``(len(offsets), seq_len)`` array
    otherwise. Abacus offsets shift digit slots only.
    """
    pe_kind = PEKind(pe_kind)
    if pe_kind is PEKind.RELATIVE_BIAS:
        return None
    if pe_kind is PEKind.LEARNED_ABSOLUTE:
        base = np.arange(layout.seq_len, dtype=np.int64)
        if offsets is None:
            return base
        return np.broadcast_to(base, (len(offsets), layout.seq_len)).copy()
    sig = digit_significance(layout)
    if offsets is None:
        return sig
    offsets = np.asarray(offsets, dtype=np.int64)
    return np.where(sig > 0, sig[None, :] + offsets[:, None], 0)


def position_table_rows(config: ModelConfig) -> int:
    if config.pe_kind is PEKind.ABACUS:
        return config.abacus_max_offset + config.context_window
    return config.context_window


# --- network ---------------------------------------------------------------------


def _dropout(x: torch.Tensor, p: float, gen: Optional[torch.Generator]) -> torch.Tensor:
    if p == 0 or gen is None:
        return x
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p
    return x * keep / (1 - p)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.ln_a = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln_f = nn.LayerNorm(d)
        self.fc = nn.Linear(d, 4 * d)
        self.mlp_proj = nn.Linear(4 * d, d)
        self.heads = cfg.num_heads
        self.p = cfg.dropout

    def attention(self, x, bias, gen):
        bsz, t, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=2)
        shape = (bsz, t, self.heads, d // self.heads)
        q, k, v = (z.view(shape).transpose(1, 2) for z in (q, k, v))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(d // self.heads)
        if bias is not None:
            att = att + bias
        causal = torch.ones(t, t, dtype=torch.bool).tril()
        att = att.masked_fill(~causal, float("-inf")).softmax(dim=-1)
        att = _dropout(att, self.p, gen)
        y = (att @ v).transpose(1, 2).reshape(bsz, t, d)
        return _dropout(self.proj(y), self.p, gen)

    def forward(self, x, bias, gen):
        x = x + self.attention(self.ln_a(x), bias, gen)
        h = self.mlp_proj(F.gelu(self.fc(self.ln_f(x))))
        return x + _dropout(h, self.p, gen)


class GPT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        d = cfg.embed_dim
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)
        if cfg.pe_kind is PEKind.RELATIVE_BIAS:
            self.rel_bias = nn.Parameter(torch.zeros(cfg.num_heads, 2 * cfg.rel_max_distance + 1))
        else:
            self.pos_emb = nn.Embedding(position_table_rows(cfg), d)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.num_layers))
        self.ln_out = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, cfg.vocab_size, bias=False)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        gen = torch.Generator().manual_seed(self.config.seed)
        resid_std = 0.02 / math.sqrt(2 * self.config.num_layers)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias") or name == "rel_bias":
                    p.zero_()
                elif ".ln_" in name or name.startswith("ln_"):
                    p.fill_(1.0)
                else:
                    std = resid_std if name.endswith("proj.weight") else 0.02
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _relative_bias(self, t: int) -> torch.Tensor:
        r = self.config.rel_max_distance
        i = torch.arange(t)
        delta = (i[:, None] - i[None, :]).clamp(-r, r) + r
        return self.rel_bias[:, delta].unsqueeze(0)

    def forward(self, tokens, positions=None, gen: Optional[torch.Generator] = None) -> torch.Tensor:
        """Logits of shape (B, T, vocab). ``gen`` switches dropout on (train mode)."""
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        t = tokens.shape[1]
        cfg = self.config
        if t > cfg.context_window:
            raise ValueError(f"sequence length {t} exceeds context window {cfg.context_window}")
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise ValueError("token id out of range")
        x = self.tok_emb(tokens)
        bias = None
        if cfg.pe_kind is PEKind.RELATIVE_BIAS:
            bias = self._relative_bias(t)
        else:
            if positions is None:
                if cfg.pe_kind is PEKind.ABACUS:
                    raise ValueError("abacus embeddings need explicit positions")
                positions = torch.arange(t)
            positions = torch.as_tensor(positions, dtype=torch.long)
            if positions.shape[-1] != t:
                positions = positions[..., :t]
            if positions.numel() and positions.max() >= self.pos_emb.num_embeddings:
                raise ValueError("position index beyond the embedding table")
            x = x + self.pos_emb(positions)
        x = _dropout(x, cfg.dropout, gen)
        for block in self.blocks:
            x = block(x, bias, gen)
        return self.lm_head(self.ln_out(x))


# --- operations ------------------------------------------------------------------


def init(config: ModelConfig) -> GPT:
    """Fresh model; parameters depend only on ``config`` (including its seed)."""
    return GPT(config)


def decay_mask(model: GPT) -> dict[str, bool]:
    """Which tensors receive weight decay: matrix weights of linear maps only."""
    out = {}
    for name, p in model.named_parameters():
        is_linear = name.endswith(".weight") and p.dim() == 2 and "emb" not in name
        out[name] = is_linear
    return out


def loss_mask(layout: LineLayout, policy: str = "full_sequence") -> np.ndarray:
    """Boolean mask over the T-1 next-token targets tokens[1:]."""
    mask = np.zeros(layout.seq_len - 1, dtype=bool)
    if policy == "full_sequence":
        mask[:] = True
    elif policy == "answer_only":
        # targets are shifted by one: target j is token j+1
        start = layout.prompt_len - 1
        mask[start : start + layout.answer_width + 1] = True  # digits and ';'
    else:
        raise ValueError(f"unknown loss mask policy {policy!r}")
    return mask


def loss(logits: torch.Tensor, targets: torch.Tensor, mask=None) -> torch.Tensor:
    """Mean cross-entropy over masked target positions."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} disagree")
    flat = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
    flat = flat.view(targets.shape)
    if mask is None:
        return flat.mean()
    mask = torch.as_tensor(np.broadcast_to(np.asarray(mask), targets.shape).copy(), dtype=torch.bool)
    if not mask.any():
        raise ValueError("loss mask selects no positions")
    return flat[mask].mean()


def sequence_loss(model: GPT, tokens, positions=None, mask=None, gen=None) -> torch.Tensor:
    tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    if positions is not None:
        positions = torch.as_tensor(np.asarray(positions), dtype=torch.long)[..., :-1]
    logits = model(tokens[:, :-1], positions, gen)
    return loss(logits, tokens[:, 1:], mask)


def backward(model: GPT, tokens, positions=None, mask=None, gen=None) -> tuple[float, dict[str, torch.Tensor]]:
    """Loss and gradient for every named tensor; raises on a non-finite gradient."""
    model.zero_grad(set_to_none=True)
    value = sequence_loss(model, tokens, positions, mask, gen)
    value.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(name)
        grads[name] = g
    return value.item(), grads


@torch.no_grad()
def generate_greedy(model, prompts, positions=None, max_new: int = 1, stop_token: int = SEMI) -> np.ndarray:
    """Append argmax tokens to each prompt row until ``stop_token`` or ``max_new``.

    ``positions`` may cover the full line; it is sliced to the current length.
    Ties go to the lowest token id. Rows that already stopped are padded with
    ``stop_token``. Returns only the generated part, shape (B, <= max_new).
    """
    seq = torch.as_tensor(np.asarray(prompts), dtype=torch.long)
    if seq.dim() == 1:
        seq = seq.unsqueeze(0)
    pos = None if positions is None else torch.as_tensor(np.asarray(positions), dtype=torch.long)
    start = seq.shape[1]
    done = torch.zeros(seq.shape[0], dtype=torch.bool)
    for _ in range(max_new):
        p = None if pos is None else pos[..., : seq.shape[1]]
        nxt = model(seq, p)[:, -1, :].argmax(dim=-1)
        nxt = torch.where(done, torch.full_like(nxt, stop_token), nxt)
        seq = torch.cat([seq, nxt[:, None]], dim=1)
        done |= nxt == stop_token
        if bool(done.all()):
            break
    return seq[:, start:].numpy()
