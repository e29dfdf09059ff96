"""Contrastive motion/text evaluator and the metric suite.

Metrics operate on plain numpy embedding arrays so they can be checked
against brute-force oracles; only the evaluator itself uses torch.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import DimensionError, NumericError, ValidationError
from .motion import MotionSequence, MotionStats, compute_stats
from .training import check_loss, snapshot, substream_seed, torch_generator
from .transformer import tokenize, word_bucket

METRICS = ("fid", "rp1", "rp2", "rp3", "matching", "diversity", "multimodality", "clip_score")
RP_BATCH = 32


# --------------------------------------------------------------------------
# evaluator


@dataclass(frozen=True)
class EvaluatorConfig:
    joints: int = 8
    embed_dim: int = 32
    width: int = 64
    vocab_buckets: int = 512
    temperature: float = 0.1


class MotionEncoder(nn.Module):
    def __init__(self, cfg: EvaluatorConfig):
        super().__init__()
        c, w = cfg.joints * 3, cfg.width
        self.net = nn.Sequential(
            nn.Conv1d(2 * c, w, 5, padding=2), nn.ReLU(),
            nn.Conv1d(w, w, 5, padding=2, dilation=1), nn.ReLU(),
            nn.Conv1d(w, w, 5, padding=4, dilation=2), nn.ReLU(),
        )
        self.out = nn.Linear(2 * w, cfg.embed_dim)

    def forward(self, x, valid):
        # x: (B, T, J*3) normalised coordinates
        vel = torch.cat([torch.zeros_like(x[:, :1]), x[:, 1:] - x[:, :-1]], dim=1)
        h = self.net(torch.cat([x, vel], dim=-1).transpose(1, 2)).transpose(1, 2)
        w = valid.unsqueeze(-1).to(h.dtype)
        mean = (h * w).sum(1) / w.sum(1).clamp_min(1.0)
        peak = h.masked_fill(~valid.unsqueeze(-1), float("-inf")).amax(1)
        return F.normalize(self.out(torch.cat([mean, peak], -1)), dim=-1)


class BagOfWordsEncoder(nn.Module):
    def __init__(self, cfg: EvaluatorConfig):
        super().__init__()
        self.buckets = cfg.vocab_buckets
        self.embed = nn.EmbeddingBag(cfg.vocab_buckets, cfg.width, mode="mean")
        self.out = nn.Sequential(nn.Linear(cfg.width, cfg.width), nn.ReLU(), nn.Linear(cfg.width, cfg.embed_dim))

    def forward(self, prompts):
        ids, offsets = [], []
        for p in prompts:
            offsets.append(len(ids))
            words = tokenize(p) or ["<empty>"]
            ids.extend(word_bucket(w, self.buckets) for w in words)
        e = self.embed(torch.tensor(ids), torch.tensor(offsets))
        return F.normalize(self.out(e), dim=-1)


class EvaluatorModel(nn.Module):
    """Maps motions and texts into a shared unit-norm embedding space."""

    def __init__(self, cfg: EvaluatorConfig, stats: MotionStats):
        super().__init__()
        self.cfg = cfg
        self.motion_encoder = MotionEncoder(cfg)
        self.text_encoder = BagOfWordsEncoder(cfg)
        self.register_buffer("motion_mean", torch.from_numpy(stats.mean.reshape(-1).copy()))
        self.register_buffer("motion_std", torch.from_numpy(stats.std.reshape(-1).copy()))

    def _batch(self, motions):
        T = max(m.frames for m in motions)
        D = self.motion_mean.numel()
        x = np.empty((len(motions), T, D), np.float32)
        valid = np.zeros((len(motions), T), bool)
        for i, m in enumerate(motions):
            flat = m.coords.reshape(m.frames, -1)
            if flat.shape[1] != D:
                raise DimensionError(f"evaluator expects {D // 3} joints, got {m.joints}")
            x[i, : m.frames] = flat
            x[i, m.frames :] = flat[-1]
            valid[i, : m.frames] = True
        x = (torch.from_numpy(x) - self.motion_mean) / self.motion_std
        return x, torch.from_numpy(valid)

    def encode_motions_tensor(self, motions):
        return self.motion_encoder(*self._batch(motions))

    @torch.no_grad()
    def embed_motions(self, motions) -> np.ndarray:
        """Embeddings ``(n, e)``; sequences are grouped by length so no padding enters the encoder."""
        self.eval()
        motions = list(motions)
        out = np.empty((len(motions), self.cfg.embed_dim), np.float64)
        groups = {}
        for i, m in enumerate(motions):
            groups.setdefault(m.frames, []).append(i)
        for idx in groups.values():
            out[idx] = self.encode_motions_tensor([motions[i] for i in idx]).double().numpy()
        return out

    @torch.no_grad()
    def embed_texts(self, prompts) -> np.ndarray:
        self.eval()
        return self.text_encoder(list(prompts)).double().numpy()


def train_evaluator(items, cfg: EvaluatorConfig = EvaluatorConfig(), epochs=20, batch_size=64, lr=2e-3, seed=0,
                    log=None):
    """Symmetric contrastive training with in-batch negatives.

    Items sharing a caption are all treated as positives for each other, which
    matters for template captions.  Returns ``(model, per-epoch losses)``.
    """
    items = list(items)
    if len(items) < 2:
        raise ValidationError("evaluator training needs at least two pairs")
    motions = [it.motion for it in items]
    texts = [it.text for it in items]
    torch.manual_seed(substream_seed(seed, "eval-init"))
    model = EvaluatorModel(cfg, compute_stats(motions))
    gen = torch_generator(seed, "eval-batches")
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    losses, last_good = [], snapshot(model)
    for epoch in range(epochs):
        model.train()
        total, count = 0.0, 0
        order = torch.randperm(len(items), generator=gen).tolist()
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            if len(idx) < 2:
                continue
            m = model.encode_motions_tensor([motions[i] for i in idx])
            caps = [texts[i] for i in idx]
            t = model.text_encoder(caps)
            logits = m @ t.T / cfg.temperature
            same = torch.tensor([[a == b for b in caps] for a in caps], dtype=logits.dtype)
            target = same / same.sum(1, keepdim=True)
            loss = 0.5 * (torch.sum(-target * F.log_softmax(logits, 1), 1).mean()
                          + torch.sum(-target * F.log_softmax(logits.T, 1), 1).mean())
            check_loss(loss, model, last_good, "evaluator")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        last_good = snapshot(model)
        losses.append(total / max(count, 1))
        if log is not None:
            log({"stage": "evaluator", "epoch": epoch, "loss": losses[-1]})
    model.eval()
    return model, losses


def classify(evaluator: EvaluatorModel, motions, class_texts) -> np.ndarray:
    """Index of the class caption whose embedding is most similar to each motion."""
    m = evaluator.embed_motions(motions)
    t = evaluator.embed_texts(class_texts)
    return np.argmax(m @ t.T, axis=1)


# --------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, np.float64).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, np.float64))
        if cov.shape != (mean.size, mean.size):
            raise DimensionError(f"covariance {cov.shape} does not match mean of size {mean.size}")
        if not np.allclose(cov, cov.T, atol=1e-8, rtol=0):
            raise NumericError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov).min() < -1e-8 * max(1.0, np.abs(cov).max()):
            raise NumericError("covariance is not positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def from_embeddings(cls, emb):
        emb = np.asarray(emb, np.float64)
        if emb.ndim != 2 or emb.shape[0] < 2:
            raise ValidationError("need at least two embeddings to fit a Gaussian")
        return cls(emb.mean(0), np.cov(emb, rowvar=False).reshape(emb.shape[1], emb.shape[1]))


def _psd_sqrt(a):
    w, v = np.linalg.eigh(a)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _trace_sqrt_product(a, b):
    ra = _psd_sqrt(a)
    inner = ra @ b @ ra
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Squared Frechet distance between two Gaussians."""
    if a.mean.shape != b.mean.shape:
        raise DimensionError("Gaussian stats have different dimensions")
    # both orderings are averaged so the result is exactly symmetric
    tr = 0.5 * (_trace_sqrt_product(a.cov, b.cov) + _trace_sqrt_product(b.cov, a.cov))
    diff = a.mean - b.mean
    d = float(diff @ diff) + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * tr
    if d < -1e-6:
        raise NumericError(f"negative Frechet distance {d}")
    return max(d, 0.0)


def _pairwise(a, b):
    return np.sqrt(np.maximum(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1), 0.0))


def _paired(motion_emb, text_emb):
    m = np.asarray(motion_emb, np.float64)
    t = np.asarray(text_emb, np.float64)
    if m.shape != t.shape or m.ndim != 2:
        raise DimensionError(f"paired embeddings must share a 2-d shape, got {m.shape} and {t.shape}")
    return m, t


def r_precision(motion_emb, text_emb, k) -> float:
    """Fraction of motions whose own caption is within the ``k`` nearest captions.

    A caption tied in distance with the true one does not push it down the
    ranking, so duplicate captions in a batch count as hits.
    """
    m, t = _paired(motion_emb, text_emb)
    if m.shape[0] < k:
        raise ValidationError(f"batch of {m.shape[0]} is smaller than k={k}")
    d = _pairwise(m, t)
    true = np.diag(d)
    rank = (d < true[:, None]).sum(1) + 1
    return float(np.mean(rank <= k))


def matching_score(motion_emb, text_emb) -> float:
    m, t = _paired(motion_emb, text_emb)
    return float(np.linalg.norm(m - t, axis=1).mean())


def diversity(emb, subset_size, rng=None) -> float:
    """Mean distance between paired members of two disjoint random subsets."""
    emb = np.asarray(emb, np.float64)
    if subset_size < 1 or emb.shape[0] < 2 * subset_size:
        raise ValidationError(f"diversity needs at least {2 * subset_size} embeddings, got {emb.shape[0]}")
    rng = np.random.default_rng(rng)
    idx = rng.permutation(emb.shape[0])[: 2 * subset_size]
    a, b = emb[idx[:subset_size]], emb[idx[subset_size:]]
    return float(np.linalg.norm(a - b, axis=1).mean())


def multimodality(groups) -> float:
    """Mean pairwise distance between samples generated for the same prompt."""
    total, count = 0.0, 0
    for g in groups:
        g = np.asarray(g, np.float64)
        if g.ndim != 2 or g.shape[0] < 2:
            raise ValidationError("every multimodality group needs at least two samples")
        d = _pairwise(g, g)
        iu = np.triu_indices(g.shape[0], 1)
        total += d[iu].sum()
        count += iu[0].size
    if count == 0:
        raise ValidationError("multimodality needs at least one group")
    return float(total / count)


def clip_style_score(motion_emb, text_emb) -> float:
    m, t = _paired(motion_emb, text_emb)
    m = m / np.maximum(np.linalg.norm(m, axis=1, keepdims=True), 1e-12)
    t = t / np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-12)
    return float(np.maximum((m * t).sum(1), 0.0).mean())


def confidence_interval(values) -> tuple[float, float]:
    v = np.asarray(values, np.float64)
    if v.size == 0 or np.isnan(v).any():
        return float("nan"), float("nan")
    return float(v.mean()), float(1.96 * v.std() / math.sqrt(v.size))


def _batch_metrics(m, t, rng):
    n = m.shape[0]
    bs = min(RP_BATCH, n)
    order = rng.permutation(n)
    out = {k: [] for k in ("rp1", "rp2", "rp3", "matching", "clip_score")}
    for s in range(0, n - bs + 1, bs):
        idx = order[s : s + bs]
        for k in (1, 2, 3):
            out[f"rp{k}"].append(r_precision(m[idx], t[idx], min(k, bs)))
        out["matching"].append(matching_score(m[idx], t[idx]))
        out["clip_score"].append(clip_style_score(m[idx], t[idx]))
    return {k: float(np.mean(v)) for k, v in out.items()}


def evaluate_embeddings(gen_motion, gen_text, ref_motion, repeats=20, seed=0, groups=None, mm_samples=10):
    """Metric report from precomputed embeddings.

    ``groups`` lists index arrays of generated samples sharing a prompt and
    feeds MultiModality; it is reported as NaN when no group has two members.
    """
    gen_motion = np.asarray(gen_motion, np.float64)
    gen_text = np.asarray(gen_text, np.float64)
    ref_motion = np.asarray(ref_motion, np.float64)
    if gen_motion.shape[0] == 0 or ref_motion.shape[0] == 0:
        raise ValidationError("generated and reference sets must be non-empty")
    if repeats < 1:
        raise ValidationError("repeats must be >= 1")
    fid = frechet_distance(GaussianStats.from_embeddings(gen_motion), GaussianStats.from_embeddings(ref_motion))
    subset = min(gen_motion.shape[0] // 2, 100)
    groups = [np.asarray(g) for g in (groups or []) if len(g) >= 2]
    rng = np.random.default_rng(substream_seed(seed, "eval-resample"))
    runs = {k: [] for k in METRICS}
    for _ in range(repeats):
        runs["fid"].append(fid)
        for k, v in _batch_metrics(gen_motion, gen_text, rng).items():
            runs[k].append(v)
        runs["diversity"].append(diversity(gen_motion, subset, rng) if subset >= 1 else float("nan"))
        if groups:
            picked = [gen_motion[rng.permutation(g)[:mm_samples]] for g in groups]
            runs["multimodality"].append(multimodality(picked))
        else:
            runs["multimodality"].append(float("nan"))
    report = {}
    for k in METRICS:
        mean, ci = confidence_interval(runs[k])
        report[k] = {"mean": mean, "ci": ci}
    return report


def evaluate_run(generated, reference, evaluator: EvaluatorModel, repeats=20, seed=0):
    """Evaluate ``(motion, text)`` pairs against reference pairs; returns ``{metric: {mean, ci}}``."""
    generated, reference = list(generated), list(reference)
    if not generated or not reference:
        raise ValidationError("generated and reference sets must be non-empty")
    gm = evaluator.embed_motions([g[0] for g in generated])
    gt = evaluator.embed_texts([g[1] for g in generated])
    rm = evaluator.embed_motions([r[0] for r in reference])
    by_text = {}
    for i, g in enumerate(generated):
        by_text.setdefault(g[1], []).append(i)
    return evaluate_embeddings(gm, gt, rm, repeats, seed, list(by_text.values()))


def write_report(report, path):
    """Write a metric report as JSON, or CSV when ``path`` ends in ``.csv``."""
    path = str(path)
    if path.endswith(".csv"):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "mean", "ci"])
            for k in METRICS:
                w.writerow([k, repr(report[k]["mean"]), repr(report[k]["ci"])])
    else:
        with open(path, "w") as f:
            json.dump(_json_safe(report), f, indent=2, sort_keys=True)
            f.write("\n")


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj
