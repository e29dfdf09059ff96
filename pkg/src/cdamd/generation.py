"""Autoregressive latent generation and temporal editing.

Generation fills the positions marked for generation strictly left to
right.  Each step runs the transformer under the configured mask, samples
the next latent(s) with the diffusion head conditioned on that position's
output, and writes the result back before the next step.  Condition
positions (edit sources) are pinned to the encoded source latents.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .codec import MotionAE, latent_length
from .diffusion import DiffusionSchedule, sample_ddpm, sample_ode
from .errors import ConfigError, GenerationError, ValidationError
from .motion import MotionSequence
from .transformer import CDAMDTransformer

EDIT_TASKS = ("none", "inpaint", "outpaint", "prefix", "suffix")
SAMPLERS = {"ode": "velocity", "ddpm": "noise"}


@dataclass(frozen=True)
class EditMask:
    m: np.ndarray
    task: str = "none"

    def __post_init__(self):
        m = np.asarray(self.m).astype(np.uint8)
        if m.ndim != 1 or not np.isin(m, (0, 1)).all():
            raise ValidationError("edit mask must be a binary vector")
        if self.task not in EDIT_TASKS:
            raise ValidationError(f"unknown edit task {self.task!r}; expected one of {EDIT_TASKS}")
        if not m.any():
            raise ValidationError("edit mask marks nothing to generate")
        if self.task == "none" and not m.all():
            raise ValidationError("task 'none' generates every position")
        object.__setattr__(self, "m", m)

    @property
    def condition_flags(self):
        return 1 - self.m


def build_edit_mask(task: str, l: int) -> EditMask:
    """Positions to generate (1) versus keep (0) for one of the temporal editing tasks."""
    if task not in EDIT_TASKS:
        raise ValidationError(f"unknown edit task {task!r}; expected one of {EDIT_TASKS}")
    if l < 4:
        raise ValidationError(f"editing needs at least 4 latent positions, got {l}")
    m = np.zeros(l, np.uint8)
    if task == "none":
        m[:] = 1
    elif task == "inpaint":
        m[l // 4 : (3 * l) // 4] = 1
    elif task == "outpaint":
        m[:] = 1
        m[l // 4 : (3 * l) // 4] = 0
    elif task == "prefix":
        m[l // 2 :] = 1
    elif task == "suffix":
        m[: l - l // 2] = 1
    return EditMask(m, task)


@dataclass
class Models:
    ae: MotionAE
    transformer: CDAMDTransformer
    schedule: DiffusionSchedule
    mask_kind: str = "DCCM"


@dataclass
class GenerationRequest:
    prompt: str
    target_frames: int
    edit: tuple | None = None  # (MotionSequence, EditMask)
    sampler: str = "ode"
    steps: int = 50
    seed: int = 0


@dataclass
class Generated:
    motion: MotionSequence
    latents: np.ndarray  # (l, d), unstandardised
    source_latents: np.ndarray | None = None
    edit_mask: np.ndarray | None = None


def position_noise(seed: int, position: int, steps: int, dim: int) -> np.ndarray:
    """Counter-based standard normals for one latent position: row 0 starts the chain."""
    rng = np.random.Generator(np.random.Philox(key=[int(seed) & 0xFFFFFFFFFFFFFFFF, int(position)]))
    return rng.standard_normal((steps + 1, dim)).astype(np.float32)


def _sampling_schedule(models: Models, sampler: str, steps: int) -> DiffusionSchedule:
    if sampler not in SAMPLERS:
        raise ConfigError(f"unknown sampler {sampler!r}; expected one of {sorted(SAMPLERS)}")
    trained = models.schedule
    if SAMPLERS[sampler] != trained.mode:
        raise ConfigError(f"sampler {sampler!r} needs a {SAMPLERS[sampler]}-mode head; this model is {trained.mode}")
    if sampler == "ddpm" and steps != trained.steps:
        raise ConfigError(f"ddpm sampling must use the trained chain length {trained.steps}, got {steps}")
    return DiffusionSchedule(trained.mode, steps, trained.beta_start, trained.beta_end)


@torch.no_grad()
def generate_latents(models: Models, prompts, lengths, seeds, sampler="ode", steps=50, source=None,
                     edit_masks=None, chunk=1, stop_after=None, literal_ode_sign=False):
    """Batched left-to-right latent generation.

    ``source`` holds unstandardised latents ``(B, L, d)`` for edits and
    ``edit_masks (B, L)`` marks positions to generate.  Returns a list of
    ``(l_b, d)`` unstandardised latent arrays.
    """
    model, ae = models.transformer, models.ae
    model.eval()
    schedule = _sampling_schedule(models, sampler, steps)
    B = len(prompts)
    lengths = [int(n) for n in lengths]
    L, d = max(lengths), model.cfg.latent_dim
    if chunk < 1:
        raise ValidationError("chunk must be >= 1")
    valid = torch.arange(L)[None, :] < torch.tensor(lengths)[:, None]
    gen = valid.clone()
    if edit_masks is not None:
        gen &= torch.as_tensor(np.asarray(edit_masks)).bool()
    x = torch.zeros(B, L, d)
    src = None
    if source is not None:
        src = torch.as_tensor(np.asarray(source, np.float32))
        x = ae.standardize(src)
    x = torch.where(gen.unsqueeze(-1), model.mask_latent.detach().expand(B, L, d), x)
    flags = valid & ~gen
    text = model.text(list(prompts))
    seeds = [int(s) for s in seeds]

    steps_done = 0
    for start in range(0, L, chunk):
        cols = list(range(start, min(start + chunk, L)))
        todo = [(b, i) for i in cols for b in range(B) if gen[b, i]]
        if not todo:
            continue
        if stop_after is not None and steps_done >= stop_after:
            break
        z = model(x, text=text, flags=flags, mask_kind=models.mask_kind)
        cond_all = model.head_condition(z, text[0])
        bs = torch.tensor([b for b, _ in todo])
        ps = torch.tensor([i for _, i in todo])
        cond = cond_all[bs, ps]
        noise = torch.from_numpy(np.stack([position_noise(seeds[b], i, schedule.steps, d) for b, i in todo], axis=1))
        if schedule.mode == "velocity":
            new = sample_ode(model.head, cond, schedule, noise[0], literal_sign=literal_ode_sign)
        else:
            new = sample_ddpm(model.head, cond, schedule, noise[0], step_noise=noise[1:])
        bad = ~torch.isfinite(new).all(-1)
        if bool(bad.any()):
            pos = int(ps[bad.nonzero()[0, 0]])
            raise GenerationError(f"non-finite latent sampled at position {pos}", position=pos)
        x[bs, ps] = new
        steps_done += 1

    out = ae.unstandardize(x)
    if src is not None:
        # pinned positions are copied, not round-tripped through standardisation
        out = torch.where(gen.unsqueeze(-1), out, src)
    return [out[b, : lengths[b]].numpy().copy() for b in range(B)]


@torch.no_grad()
def decode_latents(ae: MotionAE, latents: np.ndarray, frames: int, fps: float = 20.0) -> MotionSequence:
    ae.eval()
    coords = ae.decode(torch.from_numpy(np.asarray(latents, np.float32)).unsqueeze(0))[0, :frames]
    return MotionSequence(coords.numpy(), fps)


@torch.no_grad()
def encode_motion(ae: MotionAE, m: MotionSequence) -> np.ndarray:
    ae.eval()
    return ae.encode(torch.from_numpy(m.coords).unsqueeze(0))[0].numpy().copy()


def generate_batch(requests, models: Models, chunk=1, literal_ode_sign=False, fps=20.0):
    """Serve several requests at once; those sharing sampler and steps are batched together."""
    results = [None] * len(requests)
    groups = {}
    for k, req in enumerate(requests):
        groups.setdefault((req.sampler, req.steps), []).append(k)
    f = models.ae.cfg.downsample_factor
    for (sampler, steps), ids in groups.items():
        reqs = [requests[k] for k in ids]
        lengths, sources, masks = [], [], []
        for r in reqs:
            if r.target_frames < f:
                raise ValidationError(f"target_frames must be >= {f}")
            l = latent_length(r.target_frames, f)
            if l > models.transformer.cfg.max_len:
                raise ValidationError(f"target_frames {r.target_frames} exceeds the trained range")
            lengths.append(l)
        has_edit = any(r.edit is not None for r in reqs)
        L = max(lengths)
        if has_edit:
            src = np.zeros((len(reqs), L, models.ae.cfg.latent_dim), np.float32)
            em = np.zeros((len(reqs), L), np.uint8)
            for j, r in enumerate(reqs):
                if r.edit is None:
                    em[j, : lengths[j]] = 1
                    continue
                motion, mask = r.edit
                z = encode_motion(models.ae, motion)
                if len(mask.m) != lengths[j] or z.shape[0] != lengths[j]:
                    raise ValidationError(
                        f"edit mask length {len(mask.m)} / source length {z.shape[0]} do not match {lengths[j]}"
                    )
                src[j, : lengths[j]] = z
                em[j, : lengths[j]] = mask.m
            sources, masks = src, em
        lat = generate_latents(models, [r.prompt for r in reqs], lengths, [r.seed for r in reqs], sampler, steps,
                               source=sources if has_edit else None, edit_masks=masks if has_edit else None,
                               chunk=chunk, literal_ode_sign=literal_ode_sign)
        for j, k in enumerate(ids):
            r = reqs[j]
            motion = decode_latents(models.ae, lat[j], r.target_frames, fps)
            src_j = sources[j, : lengths[j]].copy() if has_edit and r.edit is not None else None
            mask_j = masks[j, : lengths[j]].copy() if has_edit and r.edit is not None else None
            results[k] = Generated(motion, lat[j], src_j, mask_j)
    return results


def generate(req: GenerationRequest, models: Models, **kw) -> MotionSequence:
    return generate_batch([req], models, **kw)[0].motion


def edit(source: MotionSequence, task: str, prompt: str, models: Models, seed=0, sampler="ode", steps=50,
         return_latents=False, **kw):
    """Regenerate the ``task`` region of ``source`` in latent space, keeping the rest pinned."""
    l = latent_length(source.frames, models.ae.cfg.downsample_factor)
    mask = build_edit_mask(task, l)
    req = GenerationRequest(prompt, source.frames, (source, mask), sampler, steps, seed)
    out = generate_batch([req], models, fps=source.fps, **kw)[0]
    return out if return_latents else out.motion
