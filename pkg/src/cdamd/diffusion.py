"""Per-position diffusion head: corruption, the two training losses and samplers.

Two parameterisations are supported:

``velocity``
    continuous linear path ``x_t = (1 - t) x0 + t eps`` with target
    ``eps - x0``, sampled by Euler integration from t=1 down to t=0.
``noise``
    discrete DDPM chain ``x_s = sqrt(abar_s) x0 + sqrt(1 - abar_s) eps``
    with an epsilon-predicting network and ancestral sampling.

Samplers take ``model(x, t, cond) -> prediction`` so analytic fields can be
plugged in place of the network.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ValidationError

MODES = ("velocity", "noise")
REFERENCE_STEPS = 1000


@dataclass(frozen=True)
class DiffusionSchedule:
    mode: str = "velocity"
    steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    alphas: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bars: np.ndarray = field(init=False, repr=False, compare=False)
    betas: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"diffusion mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        # the beta range is quoted for a 1000-step chain; stretch it so a
        # short chain still ends close to pure noise
        scale = REFERENCE_STEPS / self.steps
        betas = np.linspace(self.beta_start * scale, self.beta_end * scale, self.steps, dtype=np.float64)
        betas = np.clip(betas, 1e-8, 0.999)
        alphas = 1.0 - betas
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", np.cumprod(alphas))

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    @staticmethod
    def alpha(t):
        return 1.0 - t

    @staticmethod
    def sigma(t):
        return t

    def posterior_std(self, s: int) -> float:
        """Std of the ancestral noise added when stepping from s to s-1 (1-based)."""
        if s <= 1:
            return 0.0
        abar, abar_prev = self.alpha_bars[s - 1], self.alpha_bars[s - 2]
        return float(math.sqrt((1 - abar_prev) / (1 - abar) * self.betas[s - 1]))

    def to_dict(self):
        return {"mode": self.mode, "steps": self.steps, "beta_start": self.beta_start, "beta_end": self.beta_end}


def forward_diffuse(x0, eps, t):
    """Point on the linear path between data (t=0) and noise (t=1)."""
    t_arr = np.asarray(t.detach().cpu() if isinstance(t, torch.Tensor) else t)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValidationError(f"t must lie in [0, 1], got {t}")
    return (1 - t) * x0 + t * eps


def velocity_target(x0, eps):
    # d alpha/dt = -1, d sigma/dt = 1
    return eps - x0


def discrete_diffuse(x0, eps, schedule: DiffusionSchedule, s):
    """DDPM corruption at integer step(s) ``s`` in 1..S."""
    abar = torch.as_tensor(schedule.alpha_bars, dtype=x0.dtype)[torch.as_tensor(s) - 1]
    while abar.ndim < x0.ndim:
        abar = abar.unsqueeze(-1)
    return abar.sqrt() * x0 + (1 - abar).sqrt() * eps


# --------------------------------------------------------------------------
# network


class TimestepEmbedder(nn.Module):
    def __init__(self, width, freq_dim=64):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, t):
        half = self.freq_dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
        args = (1000.0 * t)[:, None] * freqs[None]
        return self.mlp(torch.cat([torch.cos(args), torch.sin(args)], dim=-1))


class ResBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(width, 3 * width))

    def forward(self, x, c):
        shift, scale, gate = self.modulation(c).chunk(3, dim=-1)
        h = self.norm(x) * (1 + scale) + shift
        return x + gate * self.mlp(h)


@dataclass(frozen=True)
class DiffMLPConfig:
    blocks: int = 3
    width: int = 64
    latent_dim: int = 8
    cond_dim: int = 64

    def __post_init__(self):
        if self.blocks < 1:
            raise ConfigError("DiffMLP needs at least one block")


class DiffMLP(nn.Module):
    """Residual MLP denoiser with scale-and-shift conditioning on ``cond`` and time."""

    def __init__(self, cfg: DiffMLPConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.time_embed = TimestepEmbedder(w)
        self.cond_embed = nn.Linear(cfg.cond_dim, w)
        self.input_proj = nn.Linear(cfg.latent_dim, w)
        self.blocks = nn.ModuleList(ResBlock(w) for _ in range(cfg.blocks))
        self.final_norm = nn.LayerNorm(w, elementwise_affine=False, eps=1e-6)
        self.final_modulation = nn.Sequential(nn.SiLU(), nn.Linear(w, 2 * w))
        self.out = nn.Linear(w, cfg.latent_dim)
        for blk in self.blocks:
            nn.init.zeros_(blk.modulation[-1].weight)
            nn.init.zeros_(blk.modulation[-1].bias)

    def forward(self, x, t, cond):
        if not isinstance(t, torch.Tensor) or t.ndim == 0:
            t = torch.full((x.shape[0],), float(t), dtype=x.dtype, device=x.device)
        c = self.time_embed(t) + self.cond_embed(cond)
        h = self.input_proj(x)
        for blk in self.blocks:
            h = blk(h, c)
        shift, scale = self.final_modulation(c).chunk(2, dim=-1)
        return self.out(self.final_norm(h) * (1 + scale) + shift)


# --------------------------------------------------------------------------
# losses


def _randn(shape, like, generator):
    return torch.randn(shape, dtype=like.dtype, device=like.device, generator=generator)


def loss_noise(model, x0, cond, schedule: DiffusionSchedule, generator=None, eps=None, s=None):
    """Mean over the batch of ``||eps - eps_model(x_s | s, cond)||^2``."""
    B = x0.shape[0]
    if eps is None:
        eps = _randn(x0.shape, x0, generator)
    if s is None:
        s = torch.randint(1, schedule.steps + 1, (B,), generator=generator, device=x0.device)
    x_s = discrete_diffuse(x0, eps, schedule, s)
    pred = model(x_s, s.to(x0.dtype) / schedule.steps, cond)
    return ((eps - pred) ** 2).sum(-1).mean()


def loss_velocity(model, x0, cond, generator=None, eps=None, t=None):
    """Mean over the batch of ``||v_model(x_t | t, cond) - (eps - x0)||^2`` with t ~ U(0, 1)."""
    B = x0.shape[0]
    if eps is None:
        eps = _randn(x0.shape, x0, generator)
    if t is None:
        t = torch.rand((B,), dtype=x0.dtype, device=x0.device, generator=generator)
    x_t = forward_diffuse(x0, eps, t[:, None])
    pred = model(x_t, t, cond)
    return ((pred - velocity_target(x0, eps)) ** 2).sum(-1).mean()


def diffusion_loss(model, x0, cond, schedule: DiffusionSchedule, generator=None):
    if schedule.mode == "velocity":
        return loss_velocity(model, x0, cond, generator)
    return loss_noise(model, x0, cond, schedule, generator)


# --------------------------------------------------------------------------
# samplers


def ddpm_step(model, x, s, cond, schedule: DiffusionSchedule, z=None):
    """One ancestral update from step s to s-1 (1-based s)."""
    alpha, abar = schedule.alphas[s - 1], schedule.alpha_bars[s - 1]
    eps_hat = model(x, torch.full((x.shape[0],), s / schedule.steps, dtype=x.dtype, device=x.device), cond)
    mean = (x - (1 - alpha) / math.sqrt(1 - abar) * eps_hat) / math.sqrt(alpha)
    sigma = schedule.posterior_std(s)
    if sigma > 0 and z is not None:
        mean = mean + sigma * z
    return mean


@torch.no_grad()
def sample_ddpm(model, cond, schedule: DiffusionSchedule, x_init, step_noise=None, generator=None):
    """Run the ancestral chain from ``x_init`` (x_S) down to x_0.

    ``step_noise[k]`` is the standard normal draw used when leaving step
    ``S - k``; it is drawn from ``generator`` when omitted.
    """
    if schedule.mode != "noise":
        raise ConfigError("sample_ddpm needs a noise-mode schedule")
    x = x_init
    for k, s in enumerate(range(schedule.steps, 0, -1)):
        if step_noise is not None:
            z = step_noise[k]
        else:
            z = _randn(x.shape, x, generator)
        x = ddpm_step(model, x, s, cond, schedule, z)
    return x


@torch.no_grad()
def sample_ode(model, cond, schedule: DiffusionSchedule, x_init, literal_sign=False):
    """Euler integration of dx/dt = v from t=1 to t=0.

    The default update ``x <- x - dt * v`` matches a field trained on
    ``eps - x0``.  ``literal_sign=True`` uses ``x <- x + dt * v`` instead.
    """
    x = x_init
    dt = schedule.dt
    sign = 1.0 if literal_sign else -1.0
    for k in range(schedule.steps):
        t = 1.0 - k * dt
        v = model(x, torch.full((x.shape[0],), t, dtype=x.dtype, device=x.device), cond)
        x = x + sign * dt * v
    return x


def sample(model, cond, schedule: DiffusionSchedule, x_init, step_noise=None, literal_sign=False):
    if schedule.mode == "velocity":
        return sample_ode(model, cond, schedule, x_init, literal_sign=literal_sign)
    return sample_ddpm(model, cond, schedule, x_init, step_noise)
