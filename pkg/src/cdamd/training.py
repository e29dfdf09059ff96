"""Small helpers shared by the training loops."""
from __future__ import annotations

import math
import zlib

import numpy as np
import torch

from .errors import TrainingError


def substream_seed(seed: int, name: str) -> int:
    """Derive an independent seed for the named sub-stream of ``seed``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def torch_generator(seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(substream_seed(seed, name))
    return g


def warmup_cosine(step, total_steps, warmup_steps, base_lr, min_lr=1e-6):
    """Linear warm-up then cosine decay to ``min_lr``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1 + math.cos(math.pi * progress))


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def check_loss(loss, module, last_good, what):
    if not torch.isfinite(loss):
        raise TrainingError(f"{what} diverged (loss={float(loss.detach())})", last_good_state=last_good)


def snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def batches(n, batch_size, generator):
    order = torch.randperm(n, generator=generator).tolist()
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]
