"""Miniature transformer regressors.

Two flavors share one skeleton of pre-norm residual blocks:

* ``encoder``: learned absolute positions, LayerNorm, GELU feed-forward,
  bidirectional attention, biased projections.
* ``decoder``: rotary positions, RMSNorm, SwiGLU feed-forward, causal
  attention, bias-free projections.

The regression head is ``Linear(d, d) -> tanh -> Linear(d, 1)`` applied to the
final-normed hidden state at the pooling position. Attention weights of every
layer are returned by :meth:`RegressorModel.forward`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .tokenizer import PAD_ID, TokenSeq

ENCODER = "encoder"
DECODER = "decoder"
FIRST_TOKEN = "first_token"
LAST_TOKEN = "last_token"

CHECKPOINT_FORMAT = "gaptext-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    flavor: str = ENCODER
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    vocab_size: int = 256
    max_len: int = 96
    pooling: str = ""  # "" selects the flavor default
    seed: int = 0
    init_std: float = 0.02
    norm_eps: float = 1e-5
    rope_base: float = 10000.0

    def __post_init__(self):
        if not self.pooling:
            self.pooling = FIRST_TOKEN if self.flavor == ENCODER else LAST_TOKEN
        self.validate()

    def validate(self):
        if self.flavor not in (ENCODER, DECODER):
            raise ConfigError(f"unknown flavor {self.flavor!r}")
        if self.pooling not in (FIRST_TOKEN, LAST_TOKEN):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.flavor == DECODER and (self.d_model // self.n_heads) % 2:
            raise ConfigError("rotary embeddings need an even head dimension")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2")
        if self.d_ff < 1 or self.vocab_size < 3:
            raise ConfigError("d_ff and vocab_size must be positive")

    @property
    def d_head(self):
        return self.d_model // self.n_heads


def expected_param_count(cfg: ModelConfig) -> dict[str, int]:
    """Closed-form parameter count per freeze group."""
    d, f, V, L = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_layers
    if cfg.flavor == ENCODER:
        emb = V * d + cfg.max_len * d
        layer = 4 * (d * d + d) + 2 * (2 * d) + (d * f + f) + (f * d + d)
        final_norm = 2 * d
    else:
        emb = V * d
        layer = 4 * d * d + 2 * d + 3 * d * f
        final_norm = d
    groups = {"embeddings": emb}
    for i in range(1, L + 1):
        groups[f"layer.{i}"] = layer
    groups["final_norm"] = final_norm
    groups["head"] = d * d + d + d + 1
    return groups


class RMSNorm(nn.Module):
    def __init__(self, d, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(d))

    def forward(self, x):
        return self.weight * x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)


def rope_tables(T, d_head, base, dtype, device=None):
    inv = base ** (-torch.arange(0, d_head, 2, dtype=torch.float64, device=device) / d_head)
    ang = torch.arange(T, dtype=torch.float64, device=device)[:, None] * inv[None, :]
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def apply_rope(x, cos, sin):
    """Rotate interleaved pairs (x[2i], x[2i+1]) of the last axis by position."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


def attention(q, k, v, mask=None):
    """Scaled dot-product attention returning (output, weights).

    ``mask`` is boolean, broadcastable to (..., Tq, Tk), True where a key may
    be attended. Masked logits are set to -inf before the softmax.
    """
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool, device=scores.device)
        if not bool(mask.expand(scores.shape).any(-1).all()):
            raise ValueError("attention row with every key masked (degenerate sequence)")
        scores = scores.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, f = cfg.d_model, cfg.d_ff
        enc = cfg.flavor == ENCODER
        self.cfg = cfg
        self.norm1 = nn.LayerNorm(d, eps=cfg.norm_eps) if enc else RMSNorm(d, cfg.norm_eps)
        self.q = nn.Linear(d, d, bias=enc)
        self.k = nn.Linear(d, d, bias=enc)
        self.v = nn.Linear(d, d, bias=enc)
        self.o = nn.Linear(d, d, bias=enc)
        self.norm2 = nn.LayerNorm(d, eps=cfg.norm_eps) if enc else RMSNorm(d, cfg.norm_eps)
        if enc:
            self.ff_in = nn.Linear(d, f)
            self.ff_out = nn.Linear(f, d)
        else:
            self.ff_gate = nn.Linear(d, f, bias=False)
            self.ff_up = nn.Linear(d, f, bias=False)
            self.ff_down = nn.Linear(f, d, bias=False)

    def _heads(self, x):
        B, T, _ = x.shape
        return x.view(B, T, self.cfg.n_heads, self.cfg.d_head).transpose(1, 2)

    def forward(self, x, mask, rope=None):
        B, T, d = x.shape
        h = self.norm1(x)
        q, k, v = self._heads(self.q(h)), self._heads(self.k(h)), self._heads(self.v(h))
        if rope is not None:
            q, k = apply_rope(q, *rope), apply_rope(k, *rope)
        out, weights = attention(q, k, v, mask)
        x = x + self.o(out.transpose(1, 2).reshape(B, T, d))
        h = self.norm2(x)
        if self.cfg.flavor == ENCODER:
            h = self.ff_out(nn.functional.gelu(self.ff_in(h)))
        else:
            h = self.ff_down(nn.functional.silu(self.ff_gate(h)) * self.ff_up(h))
        return x + h, weights


@dataclass
class Batch:
    ids: torch.Tensor  # (B, T) long
    mask: torch.Tensor  # (B, T) long, 1 = real token

    def __len__(self):
        return self.ids.shape[0]


def collate(seqs, pad_to: int | None = None) -> Batch:
    """Right-pad token sequences with PAD into one batch."""
    seqs = list(seqs)
    if not seqs:
        raise ValueError("empty batch")
    T = max(len(s) for s in seqs) if pad_to is None else pad_to
    ids = torch.full((len(seqs), T), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(seqs), T), dtype=torch.long)
    for i, s in enumerate(seqs):
        n = len(s.ids)
        ids[i, :n] = torch.tensor(s.ids, dtype=torch.long)
        mask[i, :n] = torch.tensor(s.mask, dtype=torch.long)
    return Batch(ids, mask)


@dataclass
class ForwardOutput:
    predictions: torch.Tensor  # (B,)
    attentions: list  # L tensors (B, H, T, T)
    hidden: torch.Tensor  # (B, L+1, d): pooled state after each layer, 0 = embeddings
    pool_pos: torch.Tensor  # (B,)

    def attention_of(self, i: int) -> torch.Tensor:
        """AttentionTensor of sequence i as (L, H, T, T)."""
        return torch.stack([a[i] for a in self.attentions])


class RegressorModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)
        self.pos_emb = nn.Embedding(cfg.max_len, d) if cfg.flavor == ENCODER else None
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(d, eps=cfg.norm_eps) if cfg.flavor == ENCODER else RMSNorm(d, cfg.norm_eps)
        self.head_dense = nn.Linear(d, d)
        self.head_out = nn.Linear(d, 1)

    # -- parameter groups ---------------------------------------------------
    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {"embeddings": list(self.tok_emb.parameters())}
        if self.pos_emb is not None:
            groups["embeddings"] += list(self.pos_emb.parameters())
        for i, blk in enumerate(self.blocks, start=1):
            groups[f"layer.{i}"] = list(blk.parameters())
        groups["final_norm"] = list(self.final_norm.parameters())
        groups["head"] = list(self.head_dense.parameters()) + list(self.head_out.parameters())
        return groups

    def set_trainable(self, flags: dict[str, bool]) -> None:
        for name, params in self.param_groups().items():
            for p in params:
                p.requires_grad_(bool(flags.get(name, True)))

    def trainable_flags(self) -> dict[str, bool]:
        return {name: all(p.requires_grad for p in ps) for name, ps in self.param_groups().items()}

    # -- forward --------------------------------------------------------------
    def pool_positions(self, mask, pooling=None):
        pooling = pooling or self.cfg.pooling
        if pooling == FIRST_TOKEN:
            return torch.zeros(mask.shape[0], dtype=torch.long)
        return mask.long().sum(-1) - 1

    def _context(self, mask, dtype):
        T = mask.shape[1]
        key_ok = mask.bool()[:, None, None, :]
        if self.cfg.flavor == ENCODER:
            return key_ok, None
        causal = torch.ones(T, T, dtype=torch.bool).tril()
        return key_ok & causal[None, None], rope_tables(T, self.cfg.d_head, self.cfg.rope_base, dtype)

    def embed(self, batch: Batch) -> torch.Tensor:
        ids = batch.ids
        if ids.shape[0] == 0:
            raise ValueError("empty batch")
        T = ids.shape[1]
        if T > self.cfg.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {self.cfg.max_len}")
        if int(ids.max()) >= self.cfg.vocab_size or int(ids.min()) < 0:
            raise ValueError("token id outside the model vocabulary")
        x = self.tok_emb(ids)
        if self.cfg.flavor == ENCODER:
            x = x + self.pos_emb(torch.arange(T))[None]
        return x

    def run_blocks(self, x, mask, start: int = 0, stop: int | None = None) -> torch.Tensor:
        """Residual stream after blocks start+1..stop, given the stream after `start`."""
        allowed, rope = self._context(mask, x.dtype)
        for blk in self.blocks[start:stop]:
            x, _ = blk(x, allowed, rope)
        return x

    def forward(self, batch: Batch, pooling: str | None = None, start_layer: int = 0,
                x: torch.Tensor | None = None) -> ForwardOutput:
        """Full forward pass. With `start_layer` = k > 0, `x` must hold the
        residual stream after block k; earlier hidden/attention entries are
        then NaN / absent."""
        mask = batch.mask
        B = mask.shape[0]
        if B == 0:
            raise ValueError("empty batch")
        if start_layer == 0 and x is None:
            x = self.embed(batch)
        allowed, rope = self._context(mask, x.dtype)
        pos = self.pool_positions(mask, pooling)
        rows = torch.arange(B)
        hidden = [torch.full_like(x[:, 0], float("nan"))] * start_layer + [x[rows, pos]]
        attns = []
        for i in range(start_layer, len(self.blocks)):
            x, w = self.blocks[i](x, allowed, rope)
            attns.append(w)
            if i < len(self.blocks) - 1:
                hidden.append(x[rows, pos])
        x = self.final_norm(x)
        pooled = x[rows, pos]
        hidden.append(pooled)
        pred = self.head_out(torch.tanh(self.head_dense(pooled))).squeeze(-1)
        return ForwardOutput(pred, attns, torch.stack(hidden, dim=1), pos)


def init_model(cfg: ModelConfig) -> RegressorModel:
    """Normal(0, init_std) for embeddings and projection weights, zero biases,
    unit norm gains; parameters filled in registration order from a
    generator seeded with cfg.seed."""
    m = RegressorModel(cfg)
    g = torch.Generator().manual_seed(cfg.seed)
    with torch.no_grad():
        for name, p in m.named_parameters():
            if "norm" in name:
                p.fill_(1.0) if name.endswith("weight") else p.zero_()
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.normal_(0.0, cfg.init_std, generator=g)
    return m


def count_params(m: RegressorModel, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in m.parameters() if p.requires_grad or not trainable_only)


def group_param_counts(m: RegressorModel) -> dict[str, int]:
    return {name: sum(p.numel() for p in ps) for name, ps in m.param_groups().items()}


@torch.no_grad()
def pooled_embedding(m: RegressorModel, ts: TokenSeq, layer: int, pooling: str | None = None) -> torch.Tensor:
    """Hidden state at the pooling position after `layer` blocks (0 = embedding
    output; layer L is the final-normed vector the regression head reads)."""
    if not 0 <= layer <= m.cfg.n_layers:
        raise ValueError(f"layer {layer} outside [0, {m.cfg.n_layers}]")
    out = m(collate([ts]), pooling=pooling)
    return out.hidden[0, layer].clone()


def save_checkpoint(path, m: RegressorModel, vocab_tokens=None, meta=None) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(m.cfg),
            "trainable": m.trainable_flags(),
            "vocab": list(vocab_tokens) if vocab_tokens is not None else None,
            "state": {k: v.detach().clone() for k, v in m.state_dict().items()},
            "meta": meta or {},
        },
        path,
    )


def load_checkpoint(path):
    """Returns (model, vocab tokens or None, meta)."""
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a gaptext checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    cfg = ModelConfig(**blob["config"])
    m = RegressorModel(cfg)
    state = blob["state"]
    dtype = next(iter(state.values())).dtype
    m.to(dtype)
    m.load_state_dict(state)
    m.set_trainable(blob["trainable"])
    return m, blob["vocab"], blob["meta"]
