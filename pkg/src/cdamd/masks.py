"""Attention masks for dual-constrained causal attention and its baselines.

Conventions: a mask entry of 1 (True) means "query row i may attend to key
column j".  Condition flags mark latent positions whose values are known
(flag 1) versus positions still to be generated (flag 0); for an edit mask
``m`` the flags are ``1 - m``.

Mask builders accept lists, numpy arrays or torch tensors.  Torch inputs may
carry leading batch dimensions and give torch bool tensors back; everything
else gives a numpy ``uint8`` matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DimensionError, MaskContractError, ValidationError

MASK_KINDS = ("DCCM", "BCM", "CM")
NEG_INF = -1e9


@dataclass(frozen=True)
class SequenceLayout:
    n_text: int
    n_motion_tokens: int
    n_latent: int
    condition_flags: tuple = None

    def __post_init__(self):
        if self.n_text < 0 or self.n_motion_tokens < 0 or self.n_latent < 1:
            raise ValidationError(
                f"need N >= 0, M >= 0, L >= 1; got {self.n_text}, {self.n_motion_tokens}, {self.n_latent}"
            )
        flags = self.condition_flags
        flags = (0,) * self.n_latent if flags is None else tuple(int(f) for f in np.asarray(flags).ravel())
        if len(flags) != self.n_latent:
            raise DimensionError(f"{len(flags)} condition flags for {self.n_latent} latent positions")
        if any(f not in (0, 1) for f in flags):
            raise ValidationError("condition flags must be binary")
        object.__setattr__(self, "condition_flags", flags)

    @classmethod
    def from_edit_mask(cls, m, n_text=1, n_motion_tokens=0):
        m = np.asarray(m).astype(int)
        return cls(n_text, n_motion_tokens, len(m), tuple(1 - m))


def _as_flags(flags):
    is_torch = isinstance(flags, torch.Tensor)
    t = flags if is_torch else torch.as_tensor(np.asarray(flags))
    if t.dtype != torch.bool:
        if t.numel() and not bool(((t == 0) | (t == 1)).all()):
            raise ValidationError("condition flags must be binary")
        t = t != 0
    if t.ndim < 1 or t.shape[-1] < 1:
        raise ValidationError("condition flags need at least one position")
    return t, is_torch


def _out(mask, is_torch):
    return mask if is_torch else mask.numpy().astype(np.uint8)


def _lower(L, device=None):
    return torch.ones(L, L, dtype=torch.bool, device=device).tril()


def _cond_t(flags):
    L = flags.shape[-1]
    col = flags.unsqueeze(-2)  # (..., 1, L)
    row = flags.unsqueeze(-1)  # (..., L, 1)
    visible = col | _lower(L, flags.device)
    # condition rows never look at generative columns
    return visible & ~(row & ~col)


def _self_t(flags):
    return _lower(flags.shape[-1], flags.device) & _cond_t(flags)


def _bcm_t(flags):
    return _lower(flags.shape[-1], flags.device) | flags.unsqueeze(-2)


def _kind_t(kind, flags):
    if kind == "DCCM":
        return _self_t(flags)
    if kind == "CM":
        return _lower(flags.shape[-1], flags.device).expand(*flags.shape, flags.shape[-1])
    if kind == "BCM":
        return _bcm_t(flags)
    raise ValidationError(f"unknown mask kind {kind!r}; expected one of {MASK_KINDS}")


def build_temporal_mask(L: int):
    if L < 1:
        raise ValidationError("L must be >= 1")
    return _lower(L).numpy().astype(np.uint8)


def build_conditional_mask(flags):
    f, is_torch = _as_flags(flags)
    return _out(_cond_t(f), is_torch)


def build_self_mask(layout_or_flags):
    flags = layout_or_flags.condition_flags if isinstance(layout_or_flags, SequenceLayout) else layout_or_flags
    f, is_torch = _as_flags(flags)
    mask = _self_t(f)
    if not bool(mask.any(-1).all()):
        raise MaskContractError("self mask has a row with no visible entry")
    return _out(mask, is_torch)


def build_baseline_mask(kind: str, layout_or_flags):
    if kind not in ("BCM", "CM"):
        raise ValidationError(f"unknown baseline mask kind {kind!r}; expected 'BCM' or 'CM'")
    flags = layout_or_flags.condition_flags if isinstance(layout_or_flags, SequenceLayout) else layout_or_flags
    f, is_torch = _as_flags(flags)
    return _out(_kind_t(kind, f), is_torch)


def build_latent_mask(kind: str, flags):
    """Latent-to-latent mask for any kind: DCCM, BCM or CM."""
    f, is_torch = _as_flags(flags)
    return _out(_kind_t(kind, f), is_torch)


def build_cross_mask(layout: SequenceLayout, kind: str = "DCCM"):
    """``L x (N + M)``: text columns always visible, motion-token columns follow the latent rule."""
    L, N, M = layout.n_latent, layout.n_text, layout.n_motion_tokens
    if M not in (0, L):
        raise ValidationError(f"motion tokens must align with latents: M={M}, L={L}")
    f, _ = _as_flags(layout.condition_flags)
    text = torch.ones(L, N, dtype=torch.bool)
    if M == 0:
        mask = text
    else:
        mask = torch.cat([text, _kind_t(kind, f)], dim=-1)
    return mask.numpy().astype(np.uint8)


def build_mask_set(layout: SequenceLayout) -> dict:
    """Every DCCM mask for one layout: ``temp``, ``cond``, ``self_mask``, ``cross``."""
    return {
        "temp": build_temporal_mask(layout.n_latent),
        "cond": build_conditional_mask(layout.condition_flags),
        "self_mask": build_self_mask(layout),
        "cross": build_cross_mask(layout),
    }


def masked_attention(q, k, v, mask):
    """``softmax(q k^T / sqrt(d) + log mask) v`` with log 0 realised as -1e9.

    ``mask`` broadcasts against the ``(..., Lq, Lk)`` score matrix.  Every
    query row must see at least one key.
    """
    mask = torch.as_tensor(mask, device=q.device)
    if mask.dtype != torch.bool:
        mask = mask != 0
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"incompatible q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}")
    try:
        torch.broadcast_shapes(mask.shape, (*q.shape[:-1], k.shape[-2]))
    except RuntimeError as exc:
        raise DimensionError(f"mask {tuple(mask.shape)} does not fit scores {(*q.shape[:-1], k.shape[-2])}") from exc
    if not bool(mask.any(-1).all()):
        raise MaskContractError("attention mask has a query row with no visible key")
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    bias = torch.where(mask, 0.0, NEG_INF).to(scores.dtype)
    weights = torch.softmax(scores + bias, dim=-1)
    return weights @ v


# --------------------------------------------------------------------------
# export


def export_mask(mask, path, fmt=None):
    """Write a binary mask as plain PGM (visible = white) or CSV."""
    mask = np.asarray(mask).astype(np.uint8)
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt == "pgm":
        rows = [" ".join(str(255 * int(x)) for x in row) for row in mask]
        path.write_text(f"P2\n{mask.shape[1]} {mask.shape[0]}\n255\n" + "\n".join(rows) + "\n")
    elif fmt == "csv":
        np.savetxt(path, mask, fmt="%d", delimiter=",")
    else:
        raise ValidationError(f"unknown mask export format {fmt!r}; use 'pgm' or 'csv'")
    return path
