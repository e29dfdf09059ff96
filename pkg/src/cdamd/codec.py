"""Motion codecs: a deterministic convolutional AE and a residual-VQ VAE.

Both share the same 1-D convolutional encoder/decoder with a temporal
downsampling factor of 4.  The AE gives the continuous latents the
generator is trained on; the RVQ-VAE gives discrete tokens used as a
training-time motion prior.

Codecs carry the corpus normalisation statistics as buffers, so their
``encode`` takes raw coordinates and ``decode`` returns raw coordinates.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError, ValidationError
from .motion import MotionSequence, MotionStats, compute_stats
from .training import batches, check_loss, snapshot, substream_seed, torch_generator


@dataclass(frozen=True)
class AEConfig:
    joints: int = 8
    hidden_width: int = 64
    depth: int = 3
    dilation_growth: int = 3
    downsample_factor: int = 4
    latent_dim: int = 8

    def __post_init__(self):
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ConfigError(f"downsample_factor must be a power of two, got {f}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")

    @property
    def input_dim(self):
        return self.joints * 3

    @property
    def stages(self):
        return int(math.log2(self.downsample_factor))


@dataclass(frozen=True)
class LatentSequence:
    tokens: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.float32)
        if t.ndim != 2 or t.shape[0] < 1:
            raise DimensionError(f"latents must be l x d with l >= 1, got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValidationError("latents must be finite")
        object.__setattr__(self, "tokens", t)

    @property
    def l(self):
        return self.tokens.shape[0]

    @property
    def d(self):
        return self.tokens.shape[1]


def latent_length(frames: int, factor: int = 4) -> int:
    return -(-frames // factor)


# --------------------------------------------------------------------------
# conv backbone


class ResConv1D(nn.Module):
    def __init__(self, width, dilation):
        super().__init__()
        self.conv1 = nn.Conv1d(width, width, 3, padding=dilation, dilation=dilation)
        self.conv2 = nn.Conv1d(width, width, 1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(F.relu(x))))


def _resnet(cfg: AEConfig, reverse=False):
    dilations = [cfg.dilation_growth**i for i in range(cfg.depth)]
    if reverse:
        dilations = dilations[::-1]
    return nn.Sequential(*(ResConv1D(cfg.hidden_width, d) for d in dilations))


class ConvEncoder(nn.Module):
    def __init__(self, cfg: AEConfig):
        super().__init__()
        w = cfg.hidden_width
        layers = [nn.Conv1d(cfg.input_dim, w, 3, padding=1), nn.ReLU()]
        for _ in range(cfg.stages):
            layers += [nn.Conv1d(w, w, 4, stride=2, padding=1), _resnet(cfg)]
        layers += [nn.Conv1d(w, cfg.latent_dim, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):  # (B, C, T) -> (B, d, l)
        return self.net(x)


class ConvDecoder(nn.Module):
    def __init__(self, cfg: AEConfig):
        super().__init__()
        w = cfg.hidden_width
        layers = [nn.Conv1d(cfg.latent_dim, w, 3, padding=1), nn.ReLU()]
        for _ in range(cfg.stages):
            layers += [_resnet(cfg, reverse=True), nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv1d(w, w, 3, padding=1)]
        layers += [nn.Conv1d(w, w, 3, padding=1), nn.ReLU(), nn.Conv1d(w, cfg.input_dim, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, z):  # (B, d, l) -> (B, C, l * factor)
        return self.net(z)


class _NormalizedCodec(nn.Module):
    def __init__(self, cfg: AEConfig, stats: MotionStats | None = None):
        super().__init__()
        self.cfg = cfg
        mean = np.zeros((cfg.joints, 3), np.float32) if stats is None else stats.mean
        std = np.ones((cfg.joints, 3), np.float32) if stats is None else stats.std
        self.register_buffer("motion_mean", torch.as_tensor(mean).reshape(-1).clone())
        self.register_buffer("motion_std", torch.as_tensor(std).reshape(-1).clone())
        self.encoder = ConvEncoder(cfg)
        self.decoder = ConvDecoder(cfg)

    @property
    def stats(self) -> MotionStats:
        J = self.cfg.joints
        return MotionStats(self.motion_mean.reshape(J, 3).numpy(), self.motion_std.reshape(J, 3).numpy())

    def normalize(self, coords):  # (B, T, J, 3) -> (B, T, C)
        B, T = coords.shape[:2]
        return (coords.reshape(B, T, -1) - self.motion_mean) / self.motion_std

    def denormalize(self, x):  # (B, T, C) -> (B, T, J, 3)
        B, T = x.shape[:2]
        return (x * self.motion_std + self.motion_mean).reshape(B, T, self.cfg.joints, 3)

    def pad_frames(self, x):
        """Replicate the last frame so T is a multiple of the downsampling factor."""
        f = self.cfg.downsample_factor
        T = x.shape[1]
        if T < f:
            raise ValidationError(f"motion has {T} frames, needs at least {f}")
        extra = (-T) % f
        if extra:
            x = torch.cat([x, x[:, -1:].expand(-1, extra, -1)], dim=1)
        return x

    def encode_normalized(self, x):  # (B, T, C) -> (B, l, d)
        x = self.pad_frames(x)
        return self.encoder(x.transpose(1, 2)).transpose(1, 2)

    def decode_normalized(self, z):  # (B, l, d) -> (B, l * f, C)
        if z.shape[-1] != self.cfg.latent_dim:
            raise DimensionError(f"latent dim {z.shape[-1]} does not match codec dim {self.cfg.latent_dim}")
        if z.shape[1] < 1:
            raise ValidationError("cannot decode an empty latent sequence")
        return self.decoder(z.transpose(1, 2)).transpose(1, 2)

    def encode(self, coords):
        return self.encode_normalized(self.normalize(coords))

    def decode(self, z):
        return self.denormalize(self.decode_normalized(z))


class MotionAE(_NormalizedCodec):
    """Deterministic autoencoder; latents are the generator's target space."""

    def __init__(self, cfg: AEConfig, stats: MotionStats | None = None):
        super().__init__(cfg, stats)
        # per-channel latent statistics, filled after training
        self.register_buffer("latent_mean", torch.zeros(cfg.latent_dim))
        self.register_buffer("latent_std", torch.ones(cfg.latent_dim))

    def standardize(self, z):
        return (z - self.latent_mean) / self.latent_std

    def unstandardize(self, z):
        return z * self.latent_std + self.latent_mean


def _motion_tensor(m: MotionSequence):
    return torch.from_numpy(m.coords).unsqueeze(0)


@torch.no_grad()
def ae_encode(m: MotionSequence, ae: MotionAE) -> LatentSequence:
    ae.eval()
    if m.joints != ae.cfg.joints:
        raise DimensionError(f"motion has {m.joints} joints, codec expects {ae.cfg.joints}")
    if m.frames < ae.cfg.downsample_factor:
        raise ValidationError(f"motion has {m.frames} frames, needs at least {ae.cfg.downsample_factor}")
    return LatentSequence(ae.encode(_motion_tensor(m))[0].numpy())


@torch.no_grad()
def ae_decode(z: LatentSequence, ae: MotionAE, fps: float = 20.0) -> MotionSequence:
    ae.eval()
    if z.d != ae.cfg.latent_dim:
        raise DimensionError(f"latent dim {z.d} does not match codec dim {ae.cfg.latent_dim}")
    coords = ae.decode(torch.from_numpy(z.tokens).unsqueeze(0))[0]
    return MotionSequence(coords.numpy(), fps)


def ae_loss(x, x_hat):
    """Mean absolute elementwise difference (L1 reconstruction)."""
    if isinstance(x, MotionSequence):
        x = x.coords
    if isinstance(x_hat, MotionSequence):
        x_hat = x_hat.coords
    if tuple(x.shape) != tuple(x_hat.shape):
        raise DimensionError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if isinstance(x, torch.Tensor):
        return (x - x_hat).abs().mean()
    return float(np.mean(np.abs(np.asarray(x, np.float64) - np.asarray(x_hat, np.float64))))


# --------------------------------------------------------------------------
# residual vector quantisation


@dataclass(frozen=True)
class Codebook:
    entries: np.ndarray  # (R, K, d)
    beta: float = 0.25

    def __post_init__(self):
        e = np.asarray(self.entries)
        if e.ndim != 3 or e.shape[1] < 2:
            raise DimensionError(f"codebook must be R x K x d with K >= 2, got {e.shape}")
        if not self.beta > 0:
            raise ConfigError("commitment weight beta must be positive")
        object.__setattr__(self, "entries", e)

    @property
    def levels(self):
        return self.entries.shape[0]

    @property
    def size(self):
        return self.entries.shape[1]


@dataclass(frozen=True)
class TokenSequence:
    indices: np.ndarray  # (R, l) int64

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int64))


def _nearest(residual, codes):
    """Index of the nearest codeword by exact squared distance; first index wins ties."""
    dist = ((residual.unsqueeze(-2) - codes) ** 2).sum(-1)
    return dist.argmin(-1)


def quantize_tensor(z, codebooks, levels=None):
    """Residual quantisation of ``z (..., d)`` against ``codebooks (R, K, d)``.

    Returns ``(indices (..., R), quantized sum, residuals)`` where residuals
    holds z^0 .. z^R.
    """
    R = codebooks.shape[0] if levels is None else levels
    residual = z
    residuals = [z]
    quantized = torch.zeros_like(z)
    indices = []
    for r in range(R):
        idx = _nearest(residual, codebooks[r])
        e = codebooks[r][idx]
        quantized = quantized + e
        residual = residual - e
        residuals.append(residual)
        indices.append(idx)
    return torch.stack(indices, -1), quantized, residuals


def rvq_quantize(z, cb: Codebook):
    """Quantise a latent sequence; returns ``(TokenSequence, residuals)``."""
    tokens = z.tokens if isinstance(z, LatentSequence) else np.asarray(z)
    if tokens.shape[-1] != cb.entries.shape[-1]:
        raise DimensionError(f"latent dim {tokens.shape[-1]} does not match codebook dim {cb.entries.shape[-1]}")
    zt = torch.from_numpy(np.asarray(tokens))
    codes = torch.from_numpy(cb.entries).to(zt.dtype)
    idx, _, residuals = quantize_tensor(zt, codes)
    return TokenSequence(idx.T.numpy()), [r.numpy() for r in residuals]


def rvq_dequantize(h: TokenSequence, cb: Codebook, levels=None):
    idx = h.indices
    R = idx.shape[0] if levels is None else levels
    if R > cb.levels:
        raise ValidationError(f"tokens have {R} levels, codebook has {cb.levels}")
    if np.any(idx < 0) or np.any(idx >= cb.size):
        raise ValidationError(f"token indices must lie in [0, {cb.size})")
    out = np.zeros((idx.shape[1], cb.entries.shape[-1]), dtype=cb.entries.dtype)
    for r in range(R):
        out = out + cb.entries[r][idx[r]]
    return LatentSequence(out)


def vq_loss(z, e, beta: float):
    """Codebook term ``||sg(z) - e||^2`` plus commitment ``beta ||z - sg(e)||^2``.

    Squared norms are summed over the feature axis and averaged over the rest.
    """
    if not beta > 0:
        raise ConfigError("commitment weight beta must be positive")
    if isinstance(z, LatentSequence):
        z = torch.from_numpy(z.tokens)
    if isinstance(e, LatentSequence):
        e = torch.from_numpy(e.tokens)
    z, e = torch.as_tensor(z), torch.as_tensor(e)
    if z.shape != e.shape:
        raise DimensionError(f"shape mismatch {tuple(z.shape)} vs {tuple(e.shape)}")
    codebook = ((z.detach() - e) ** 2).sum(-1).mean()
    commit = ((z - e.detach()) ** 2).sum(-1).mean()
    return codebook + beta * commit


class ResidualQuantizer(nn.Module):
    """R codebooks updated by exponential moving averages.

    Codeword 0 of every level is the zero vector and is never updated, so a
    level can never increase the residual norm.  Codewords unused for a whole
    epoch are reassigned to random encoder residuals by ``reinit_dead_codes``.
    """

    def __init__(self, levels=4, size=64, dim=8, beta=0.25, decay=0.99, seed=0):
        super().__init__()
        if size < 2:
            raise ConfigError("codebook size must be >= 2")
        self.levels, self.size, self.dim = levels, size, dim
        self.beta, self.decay = beta, decay
        self.register_buffer("codebooks", torch.zeros(levels, size, dim))
        self.register_buffer("ema_sum", torch.zeros(levels, size, dim))
        self.register_buffer("ema_count", torch.zeros(levels, size))
        self.register_buffer("usage", torch.zeros(levels, size))
        self.register_buffer("initialized", torch.zeros(()))
        self._gen = torch_generator(seed, "codebook")
        self._recent = [None] * levels

    def codebook(self) -> Codebook:
        return Codebook(self.codebooks.detach().numpy().copy(), self.beta)

    @torch.no_grad()
    def _data_init(self, residuals):
        for r in range(self.levels):
            pool = residuals[r]
            n = pool.shape[0]
            pick = torch.randperm(n, generator=self._gen)[: self.size - 1]
            if pick.numel() < self.size - 1:
                pick = torch.randint(n, (self.size - 1,), generator=self._gen)
            jitter = 1e-3 * torch.randn(self.size - 1, self.dim, generator=self._gen)
            self.codebooks[r, 1:] = pool[pick] + jitter
            self.ema_sum[r, 1:] = self.codebooks[r, 1:]
            self.ema_count[r, 1:] = 1.0
            # later levels see residuals of the freshly initialised level
            if r + 1 < self.levels:
                idx = _nearest(pool, self.codebooks[r])
                residuals[r + 1] = pool - self.codebooks[r][idx]
        self.initialized.fill_(1.0)

    @torch.no_grad()
    def _ema_update(self, r, residual, idx):
        onehot = F.one_hot(idx, self.size).to(residual.dtype)
        counts = onehot.sum(0)
        sums = onehot.T @ residual
        self.usage[r] += counts
        self.ema_count[r] = self.decay * self.ema_count[r] + (1 - self.decay) * counts
        self.ema_sum[r] = self.decay * self.ema_sum[r] + (1 - self.decay) * sums
        n = self.ema_count[r].sum()
        smoothed = (self.ema_count[r] + 1e-5) / (n + self.size * 1e-5) * n
        self.codebooks[r, 1:] = (self.ema_sum[r] / smoothed.unsqueeze(-1))[1:]
        self.codebooks[r, 0] = 0.0

    @torch.no_grad()
    def reinit_dead_codes(self):
        """Reassign codewords unused since the last call; returns how many moved."""
        moved = 0
        for r in range(self.levels):
            pool = self._recent[r]
            dead = (self.usage[r] == 0).nonzero().flatten()
            dead = dead[dead != 0]
            if pool is None or dead.numel() == 0:
                continue
            pick = torch.randint(pool.shape[0], (dead.numel(),), generator=self._gen)
            self.codebooks[r, dead] = pool[pick]
            self.ema_sum[r, dead] = pool[pick]
            self.ema_count[r, dead] = 1.0
            moved += dead.numel()
        self.usage.zero_()
        return moved

    def forward(self, z, levels=None):
        """Quantise ``z (N, d)``; returns ``(straight-through output, indices (N, R), vq loss)``."""
        flat = z.detach()
        if self.training and not bool(self.initialized):
            residuals = [flat] + [None] * (self.levels - 1)
            self._data_init(residuals)
        idx, quantized, residuals = quantize_tensor(flat, self.codebooks, levels)
        if self.training:
            for r in range(idx.shape[-1]):
                self._recent[r] = residuals[r]
                self._ema_update(r, residuals[r], idx[..., r])
            # recompute with the updated codebooks so the loss matches the output
            idx, quantized, _ = quantize_tensor(flat, self.codebooks, levels)
        loss = vq_loss(z, quantized, self.beta)
        out = z + (quantized - z).detach()
        return out, idx, loss


class RVQVAE(_NormalizedCodec):
    def __init__(self, cfg: AEConfig, stats: MotionStats | None = None, levels=4, codebook_size=64,
                 beta=0.25, decay=0.99, seed=0):
        super().__init__(cfg, stats)
        self.quantizer = ResidualQuantizer(levels, codebook_size, cfg.latent_dim, beta, decay, seed)

    def tokenize(self, coords, levels=None):
        """Raw coordinates ``(B, T, J, 3)`` -> token indices ``(B, l, R)``."""
        z = self.encode(coords)
        idx, _, _ = quantize_tensor(z, self.quantizer.codebooks, levels)
        return idx

    def forward(self, x_norm):
        z = self.encode_normalized(x_norm)
        B, l, d = z.shape
        zq, idx, loss = self.quantizer(z.reshape(-1, d))
        recon = self.decode_normalized(zq.reshape(B, l, d))
        return recon, idx.reshape(B, l, -1), loss


# --------------------------------------------------------------------------
# training


def _pad_batch(motions, factor):
    T = max(m.frames for m in motions)
    T += (-T) % factor
    x = np.empty((len(motions), T, motions[0].joints, 3), np.float32)
    valid = np.zeros((len(motions), T), bool)
    for i, m in enumerate(motions):
        x[i, : m.frames] = m.coords
        x[i, m.frames :] = m.coords[-1]
        valid[i, : m.frames] = True
    return torch.from_numpy(x), torch.from_numpy(valid)


def _masked_l1(recon, target, valid):
    w = valid.unsqueeze(-1).to(recon.dtype)
    return ((recon - target).abs() * w).sum() / (w.sum() * recon.shape[-1])


def _optimizer(model, lr):
    return torch.optim.AdamW(model.parameters(), lr=lr, betas=(0.9, 0.99), weight_decay=0.0)


def train_ae(motions, cfg: AEConfig = AEConfig(), epochs=30, batch_size=32, lr=2e-3, seed=0, log=None):
    """Fit the AE with an L1 reconstruction loss; returns ``(model, per-epoch losses)``."""
    motions = list(motions)
    if not motions:
        raise ValidationError("cannot train on an empty corpus")
    torch.manual_seed(substream_seed(seed, "ae-init"))
    ae = MotionAE(cfg, compute_stats(motions))
    gen = torch_generator(seed, "ae-batches")
    opt = _optimizer(ae, lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(epochs, 1), eta_min=lr * 0.05)
    losses = []
    last_good = snapshot(ae)
    for epoch in range(epochs):
        ae.train()
        total, count = 0.0, 0
        for idx in batches(len(motions), batch_size, gen):
            x, valid = _pad_batch([motions[i] for i in idx], cfg.downsample_factor)
            xn = ae.normalize(x)
            recon = ae.decode_normalized(ae.encode_normalized(xn))
            loss = _masked_l1(recon, xn, valid)
            check_loss(loss, ae, last_good, "AE training")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        sched.step()
        losses.append(total / count)
        last_good = snapshot(ae)
        if log:
            log({"stage": "ae", "epoch": epoch, "loss": losses[-1]})
    fit_latent_stats(ae, motions)
    ae.eval()
    return ae, losses


@torch.no_grad()
def fit_latent_stats(ae: MotionAE, motions):
    ae.eval()
    zs = torch.cat([ae.encode(_motion_tensor(m))[0] for m in motions], dim=0)
    ae.latent_mean.copy_(zs.mean(0))
    ae.latent_std.copy_(zs.std(0).clamp_min(1e-4))


def train_rvq(motions, cfg: AEConfig = AEConfig(), epochs=30, batch_size=32, lr=2e-3, seed=0,
              levels=4, codebook_size=64, beta=0.25, log=None):
    """Fit the RVQ-VAE: L1 reconstruction plus the VQ/commitment loss, EMA codebooks."""
    motions = list(motions)
    if not motions:
        raise ValidationError("cannot train on an empty corpus")
    torch.manual_seed(substream_seed(seed, "rvq-init"))
    model = RVQVAE(cfg, compute_stats(motions), levels, codebook_size, beta, seed=seed)
    gen = torch_generator(seed, "rvq-batches")
    opt = _optimizer(model, lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(epochs, 1), eta_min=lr * 0.05)
    losses = []
    last_good = snapshot(model)
    for epoch in range(epochs):
        model.train()
        total, count = 0.0, 0
        for idx in batches(len(motions), batch_size, gen):
            x, valid = _pad_batch([motions[i] for i in idx], cfg.downsample_factor)
            xn = model.normalize(x)
            recon, _, vq = model(xn)
            loss = _masked_l1(recon, xn, valid) + vq
            check_loss(loss, model, last_good, "RVQ-VAE training")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        sched.step()
        model.quantizer.reinit_dead_codes()
        losses.append(total / count)
        last_good = snapshot(model)
        if log:
            log({"stage": "rvq", "epoch": epoch, "loss": losses[-1]})
    model.eval()
    return model, losses


def ae_config_dict(cfg: AEConfig):
    return asdict(cfg)
