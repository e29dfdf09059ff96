"""Autoregressive transformer built from dual-constrained attention blocks.

Each block runs masked self-attention over the latent stream, masked
cross-attention over the condition stream ``[pooled text, words, motion
tokens]`` and a feed-forward layer, all pre-normalised with residuals.  The
per-position outputs condition the diffusion head.

The text encoder is a small hash-bucketed bag of word embeddings trained
jointly with the transformer.  It exposes the same surface a frozen
sentence encoder would: one pooled vector plus one vector per word.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .diffusion import DiffMLP, DiffMLPConfig, DiffusionSchedule, diffusion_loss
from .errors import ConfigError, DimensionError, TrainingError, ValidationError
from .masks import MASK_KINDS, _kind_t, masked_attention


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    ffn: int = 128
    dropout: float = 0.1
    latent_dim: int = 8
    max_len: int = 64
    vocab_buckets: int = 512
    codebook_size: int = 64
    token_levels: int = 4
    diff_blocks: int = 3
    diff_width: int = 64
    diffusion_batch_mul: int = 4

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")


@dataclass(frozen=True)
class PerturbationConfig:
    drop_prob: float = 0.70
    noise_frac: float = 0.10
    mask_frac: float = 0.88
    keep_frac: float = 0.02

    def __post_init__(self):
        if not 0 <= self.drop_prob <= 1:
            raise ConfigError("drop_prob must lie in [0, 1]")
        fracs = (self.noise_frac, self.mask_frac, self.keep_frac)
        if min(fracs) < 0 or abs(sum(fracs) - 1) > 1e-9:
            raise ConfigError(f"noise/mask/keep fractions must be non-negative and sum to 1, got {fracs}")


@dataclass
class TextCondition:
    prompt: str
    embedding: np.ndarray
    token_embeddings: np.ndarray

    @property
    def n_tokens(self):
        return self.token_embeddings.shape[0]


@dataclass
class ConditioningOutput:
    z: torch.Tensor  # (l, hidden) or (B, l, hidden)
    text: torch.Tensor | None = None


# --------------------------------------------------------------------------
# text


def tokenize(prompt: str):
    words = prompt.lower().split()
    if not words:
        raise ValidationError("prompt must contain at least one word")
    return words


def word_bucket(word: str, buckets: int) -> int:
    return zlib.crc32(word.encode("utf-8")) % buckets


class TextEncoder(nn.Module):
    def __init__(self, buckets: int, hidden: int):
        super().__init__()
        self.buckets = buckets
        self.embed = nn.Embedding(buckets, hidden)
        nn.init.normal_(self.embed.weight, std=0.02)

    def forward(self, prompts):
        """Returns ``(pooled (B, h), words (B, N, h), word_valid (B, N))``."""
        ids = [[word_bucket(w, self.buckets) for w in tokenize(p)] for p in prompts]
        N = max(len(x) for x in ids)
        idx = torch.zeros(len(ids), N, dtype=torch.long)
        valid = torch.zeros(len(ids), N, dtype=torch.bool)
        for b, row in enumerate(ids):
            idx[b, : len(row)] = torch.tensor(row)
            valid[b, : len(row)] = True
        words = self.embed(idx)
        w = valid.unsqueeze(-1).to(words.dtype)
        pooled = (words * w).sum(1) / w.sum(1)
        return pooled, words, valid


@torch.no_grad()
def encode_text(prompt: str, encoder: TextEncoder) -> TextCondition:
    pooled, words, valid = encoder([prompt])
    return TextCondition(prompt, pooled[0].numpy().copy(), words[0][valid[0]].numpy().copy())


# --------------------------------------------------------------------------
# masking and perturbation


def cosine_mask_schedule(u: float, l: int) -> int:
    """Number of masked positions, ``clamp(ceil(cos(pi u / 2) l), 1, l)``."""
    if not 0 <= u <= 1:
        raise ValidationError(f"u must lie in [0, 1], got {u}")
    if l < 1:
        raise ValidationError("l must be >= 1")
    # cos(pi/3) is 0.5000000000000001 in floating point; round away that ulp
    frac = round(math.cos(math.pi * u / 2), 12)
    return int(min(max(math.ceil(frac * l), 1), l))


def sample_mask_positions(valid, generator):
    """Cosine-scheduled random subset of the valid positions of each row."""
    B, L = valid.shape
    lengths = valid.sum(1).tolist()
    u = torch.rand(B, generator=generator, dtype=torch.float64).tolist()
    scores = torch.rand(B, L, generator=generator).masked_fill(~valid, 2.0)
    ranks = scores.argsort(1).argsort(1)
    counts = torch.tensor([cosine_mask_schedule(ub, max(n, 1)) if n else 0 for ub, n in zip(u, lengths)])
    return (ranks < counts[:, None]) & valid


def replace_masked(x, masked, mask_embedding, cfg: PerturbationConfig, generator):
    """Swap masked slots for Gaussian noise, the [MASK] embedding, or keep them."""
    r = torch.rand(masked.shape, generator=generator)
    use_noise = masked & (r < cfg.noise_frac)
    use_mask = masked & (r >= cfg.noise_frac) & (r < cfg.noise_frac + cfg.mask_frac)
    noise = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    out = torch.where(use_noise.unsqueeze(-1), noise, x)
    out = torch.where(use_mask.unsqueeze(-1), mask_embedding.to(x.dtype).expand_as(x), out)
    return out, use_noise, use_mask


def perturb_conditions(emb, cfg: PerturbationConfig, mask_embedding, generator, valid=None):
    """Hybrid-condition perturbation of a token-embedding stream ``emb (B, l, h)``.

    Returns ``(perturbed, kept (B,), masked (B, l), kinds)``; ``kept`` is False
    for rows whose whole stream was dropped, ``kinds`` holds the noise/[MASK]
    selection masks.
    """
    B, L = emb.shape[:2]
    if valid is None:
        valid = torch.ones(B, L, dtype=torch.bool)
    kept = torch.rand(B, generator=generator) >= cfg.drop_prob
    masked = sample_mask_positions(valid, generator) & kept[:, None]
    out, use_noise, use_mask = replace_masked(emb, masked, mask_embedding, cfg, generator)
    return out, kept, masked, {"noise": use_noise, "mask": use_mask}


# --------------------------------------------------------------------------
# blocks


class MaskedMultiheadAttention(nn.Module):
    def __init__(self, hidden, heads, dropout):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(hidden, hidden)
        self.kv = nn.Linear(hidden, 2 * hidden)
        self.proj = nn.Linear(hidden, hidden)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, context, mask):
        B, L, H = x.shape
        h = self.heads
        q = self.q(x).view(B, L, h, H // h).transpose(1, 2)
        k, v = self.kv(context).view(B, context.shape[1], 2, h, H // h).permute(2, 0, 3, 1, 4)
        out = masked_attention(q, k, v, mask.unsqueeze(1))
        return self.drop(self.proj(out.transpose(1, 2).reshape(B, L, H)))


class DCCABlock(nn.Module):
    """Self-attention (DCCA-S), cross-attention (DCCA-C) and feed-forward."""

    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        H = cfg.hidden
        self.norm1 = nn.LayerNorm(H)
        self.self_attn = MaskedMultiheadAttention(H, cfg.heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(H)
        self.norm_ctx = nn.LayerNorm(H)
        self.cross_attn = MaskedMultiheadAttention(H, cfg.heads, cfg.dropout)
        self.norm3 = nn.LayerNorm(H)
        self.ffn = nn.Sequential(nn.Linear(H, cfg.ffn), nn.GELU(), nn.Dropout(cfg.dropout), nn.Linear(cfg.ffn, H))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, context, self_mask, cross_mask):
        h = self.norm1(x)
        x = x + self.self_attn(h, h, self_mask)
        x = x + self.cross_attn(self.norm2(x), self.norm_ctx(context), cross_mask)
        return x + self.drop(self.ffn(self.norm3(x)))


class CDAMDTransformer(nn.Module):
    """Transformer backbone plus the per-position diffusion head."""

    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.cfg = cfg
        H = cfg.hidden
        self.text = TextEncoder(cfg.vocab_buckets, H)
        self.latent_in = nn.Linear(cfg.latent_dim, H)
        self.mask_latent = nn.Parameter(torch.zeros(cfg.latent_dim))
        self.pos = nn.Parameter(torch.randn(cfg.max_len, H) * 0.02)
        self.token_embed = nn.ModuleList(nn.Embedding(cfg.codebook_size, H) for _ in range(cfg.token_levels))
        self.mask_token = nn.Parameter(torch.zeros(H))
        self.blocks = nn.ModuleList(DCCABlock(cfg) for _ in range(cfg.layers))
        self.final_norm = nn.LayerNorm(H)
        self.text_to_head = nn.Linear(H, H)
        self.head = DiffMLP(DiffMLPConfig(cfg.diff_blocks, cfg.diff_width, cfg.latent_dim, H))
        for emb in self.token_embed:
            nn.init.normal_(emb.weight, std=0.02)

    # -- inputs --------------------------------------------------------------

    def embed_tokens(self, indices, levels=None):
        """Sum of per-level embeddings of RVQ indices ``(B, l, R)``."""
        R = indices.shape[-1] if levels is None else min(levels, indices.shape[-1])
        out = 0
        for r in range(R):
            out = out + self.token_embed[r](indices[..., r])
        return out + self.pos[: indices.shape[1]]

    def forward(self, latents, prompts=None, text=None, tokens=None, token_kept=None, flags=None,
                mask_kind="DCCM"):
        """Per-position condition vectors ``z (B, l, hidden)``.

        ``latents`` already carry [MASK]/noise substitutions.  ``flags (B, l)``
        marks condition positions.  ``tokens (B, l, hidden)`` is the embedded
        motion-prior stream; rows with ``token_kept`` False ignore it.
        """
        if mask_kind not in MASK_KINDS:
            raise ValidationError(f"unknown mask kind {mask_kind!r}; expected one of {MASK_KINDS}")
        B, L, d = latents.shape
        if d != self.cfg.latent_dim:
            raise DimensionError(f"latent dim {d} does not match model dim {self.cfg.latent_dim}")
        if L > self.cfg.max_len:
            raise DimensionError(f"sequence length {L} exceeds max_len {self.cfg.max_len}")
        if text is None:
            text = self.text(prompts)
        pooled, words, word_valid = text
        if pooled.shape[0] != B:
            raise DimensionError(f"{pooled.shape[0]} prompts for a batch of {B}")
        if flags is None:
            flags = torch.zeros(B, L, dtype=torch.bool)
        if flags.shape != (B, L):
            raise DimensionError(f"flags shape {tuple(flags.shape)} does not match latents {(B, L)}")
        x = self.latent_in(latents) + self.pos[:L]

        latent_mask = _kind_t(mask_kind, flags)
        if latent_mask.ndim == 2:
            latent_mask = latent_mask.expand(B, L, L)
        ctx = [pooled.unsqueeze(1), words]
        cross = [torch.ones(B, L, 1, dtype=torch.bool), word_valid.unsqueeze(1).expand(B, L, -1)]
        if tokens is not None:
            if tokens.shape[:2] != (B, L):
                raise DimensionError(f"motion tokens {tuple(tokens.shape[:2])} must align with latents {(B, L)}")
            kept = torch.ones(B, dtype=torch.bool) if token_kept is None else token_kept
            ctx.append(tokens)
            cross.append(latent_mask & kept[:, None, None])
        context = torch.cat(ctx, dim=1)
        cross_mask = torch.cat(cross, dim=2)
        for blk in self.blocks:
            x = blk(x, context, latent_mask, cross_mask)
        return self.final_norm(x)

    def head_condition(self, z, pooled):
        """Condition vector for the diffusion head: z^i plus the projected text embedding."""
        return z + self.text_to_head(pooled).unsqueeze(1)

    def conditioning(self, latents, prompts, **kw) -> ConditioningOutput:
        text = self.text(prompts)
        z = self.forward(latents, text=text, **kw)
        return ConditioningOutput(z, text[0])


# --------------------------------------------------------------------------
# training objective


@dataclass
class Batch:
    latents: torch.Tensor  # (B, l, d), standardised
    valid: torch.Tensor  # (B, l) bool
    prompts: list
    tokens: torch.Tensor | None = None  # (B, l, R) int64


def compute_loss(model: CDAMDTransformer, batch: Batch, schedule: DiffusionSchedule, pert: PerturbationConfig,
                 generator, mask_kind="DCCM", token_levels=None, gen_mask=None):
    """Diffusion loss over the positions chosen for generation.

    Returns ``(loss, gen_mask)``.  ``gen_mask`` overrides the cosine-scheduled
    choice of positions to generate.
    """
    x0 = batch.latents
    B, L, d = x0.shape
    if gen_mask is None:
        gen_mask = sample_mask_positions(batch.valid, generator)
    gen_mask = gen_mask & batch.valid
    if not bool(gen_mask.any()):
        return x0.new_zeros(()), gen_mask
    x_in, _, _ = replace_masked(x0, gen_mask, model.mask_latent, pert, generator)
    flags = batch.valid & ~gen_mask

    tokens = kept = None
    if batch.tokens is not None:
        tok = model.embed_tokens(batch.tokens, token_levels)
        tokens, kept, _, _ = perturb_conditions(tok, pert, model.mask_token, generator, batch.valid)

    text = model.text(batch.prompts)
    z = model(x_in, text=text, tokens=tokens, token_kept=kept, flags=flags, mask_kind=mask_kind)
    cond = model.head_condition(z, text[0])[gen_mask]
    target = x0[gen_mask]
    k = model.cfg.diffusion_batch_mul
    loss = diffusion_loss(model.head, target.repeat(k, 1), cond.repeat(k, 1), schedule, generator)
    return loss, gen_mask


def train_step(model, optimizer, batch: Batch, schedule, pert, generator, mask_kind="DCCM", token_levels=None,
               gen_mask=None):
    """One optimisation step; skips the update when nothing is to be generated."""
    model.train()
    loss, used = compute_loss(model, batch, schedule, pert, generator, mask_kind, token_levels, gen_mask)
    if not bool(used.any()):
        return 0.0
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite transformer loss {float(loss.detach())} (batch of {len(batch.prompts)})")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def config_dict(cfg) -> dict:
    return asdict(cfg)
