"""Experiment orchestration: staged training, persistence, generation runs and ablations.

Stages are trained in order ``ae -> rvq -> transformer`` (plus the
evaluator), each frozen once written.  Every stage writes ``<stage>.ckpt``
and a line-delimited JSON log into the experiment directory.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, load_state, save_checkpoint, state_to_tensors
from .codec import AEConfig, MotionAE, RVQVAE, train_ae, train_rvq
from .diffusion import DiffusionSchedule
from .errors import CheckpointError, ConfigError, ValidationError
from .evaluation import METRICS, EvaluatorConfig, EvaluatorModel, evaluate_run, train_evaluator
from .generation import GenerationRequest, Models, decode_latents, encode_motion, generate_batch
from .masks import MASK_KINDS
from .motion import CorpusSpec, MotionStats, generate_corpus, load_motion, read_corpus, split_corpus
from .training import set_lr, snapshot, substream_seed, torch_generator, warmup_cosine
from .transformer import Batch, CDAMDTransformer, PerturbationConfig, TransformerConfig, train_step

STAGES = ("ae", "rvq", "transformer", "evaluator")
ABLATIONS = ("full", "w/o CMP", "w/o DCCA", "BCM")
CHECKPOINTS = {"ae": "ae.ckpt", "rvq": "rvq.ckpt", "transformer": "transformer.ckpt", "evaluator": "eval.ckpt"}


@dataclass(frozen=True)
class StageSettings:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 2e-3
    warmup_steps: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    test_fraction: float = 0.2
    ae: AEConfig = field(default_factory=AEConfig)
    ae_train: StageSettings = field(default_factory=StageSettings)
    rvq_levels: int = 4
    codebook_size: int = 64
    commitment_beta: float = 0.25
    rvq_train: StageSettings = field(default_factory=StageSettings)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    transformer_train: StageSettings = field(default_factory=lambda: StageSettings(150, 32, 1e-3, 200))
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    diffusion_mode: str = "velocity"
    diffusion_steps: int = 50
    evaluator: EvaluatorConfig = field(default_factory=EvaluatorConfig)
    evaluator_train: StageSettings = field(default_factory=lambda: StageSettings(20, 64, 2e-3))
    mask_kind: str = "DCCM"
    cmp_enabled: bool = True
    vq_levels_used: int | str = "all"
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.mask_kind not in MASK_KINDS:
            raise ConfigError(f"mask_kind must be one of {MASK_KINDS}, got {self.mask_kind!r}")
        levels = self.vq_levels_used
        if levels != "all" and not (isinstance(levels, int) and 1 <= levels <= self.rvq_levels):
            raise ConfigError(f"vq_levels_used must be 'all' or 1..{self.rvq_levels}, got {levels!r}")
        if self.transformer.codebook_size != self.codebook_size or self.transformer.token_levels < self.rvq_levels:
            raise ConfigError("transformer token embeddings must cover the RVQ codebook size and levels")
        if self.transformer.latent_dim != self.ae.latent_dim:
            raise ConfigError("transformer latent_dim must equal the AE latent_dim")
        DiffusionSchedule(self.diffusion_mode, self.diffusion_steps)

    @property
    def levels(self) -> int:
        return self.rvq_levels if self.vq_levels_used == "all" else int(self.vq_levels_used)

    @property
    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.diffusion_mode, self.diffusion_steps)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _build(cls, data)

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Apply ``{"a.b": value}`` overrides; values may be JSON literals or plain strings."""
        data = self.to_dict()
        for key, raw in overrides.items():
            node, parts = data, key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = _parse_value(raw)
        return self.from_dict(data)


def _parse_value(raw):
    if not isinstance(raw, str):
        return raw
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _build(cls, data):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for {cls.__name__}")
    known = {f.name: f for f in fields(cls) if f.init}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kw[name] = _build(type(current), value)
        elif isinstance(current, tuple):
            kw[name] = tuple(value)
        else:
            kw[name] = value
    return cls(**kw)


def load_config(path=None, overrides=None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        cfg = ExperimentConfig.from_dict(json.loads(Path(path).read_text()))
    return cfg.with_overrides(overrides or {})


# --------------------------------------------------------------------------
# data


def corpus_split(cfg: ExperimentConfig):
    items = generate_corpus(cfg.corpus)
    return split_corpus(items, cfg.test_fraction, seed=cfg.corpus.seed)


class JsonlLog:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")

    def __call__(self, record):
        with self.path.open("a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# persistence


def _save_module(path, module, kind, cfg: ExperimentConfig, force, **extra):
    # the output location is not part of the experiment, so moved or rerun dirs stay byte-identical
    config = {k: v for k, v in cfg.to_dict().items() if k != "output_dir"}
    meta = {"kind": kind, "config": config, **extra}
    return save_checkpoint(path, state_to_tensors(module), meta, force=force)


def _load(path, kind):
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {meta.get('kind')!r} checkpoint, expected {kind!r}")
    return tensors, meta, ExperimentConfig.from_dict(meta["config"])


def load_ae(path) -> MotionAE:
    tensors, _, cfg = _load(path, "ae")
    return load_state(MotionAE(cfg.ae), tensors).eval()


def load_rvq(path) -> RVQVAE:
    tensors, _, cfg = _load(path, "rvq")
    return load_state(RVQVAE(cfg.ae, None, cfg.rvq_levels, cfg.codebook_size, cfg.commitment_beta), tensors).eval()


def load_evaluator(path) -> EvaluatorModel:
    tensors, _, cfg = _load(path, "evaluator")
    dummy = MotionStats(np.zeros((cfg.evaluator.joints, 3)), np.ones((cfg.evaluator.joints, 3)))
    return load_state(EvaluatorModel(cfg.evaluator, dummy), tensors).eval()


def load_transformer(path):
    """Return ``(model, schedule, config)`` for a transformer checkpoint."""
    tensors, _, cfg = _load(path, "transformer")
    model = load_state(CDAMDTransformer(cfg.transformer), tensors).eval()
    return model, cfg.schedule, cfg


def load_models(directory, transformer_name="transformer.ckpt") -> Models:
    d = Path(directory)
    model, schedule, cfg = load_transformer(d / transformer_name)
    return Models(load_ae(d / "ae.ckpt"), model, schedule, cfg.mask_kind)


# --------------------------------------------------------------------------
# stage training


def _require(path: Path, stage: str, why: str):
    if not path.exists():
        raise CheckpointError(f"missing {path.name}: train stage '{stage}' first ({why})")


def _check_target(path: Path, force: bool):
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")


@torch.no_grad()
def _latent_dataset(ae: MotionAE, items, rvq: RVQVAE | None, levels: int):
    lat, toks = [], []
    for it in items:
        z = ae.standardize(ae.encode(torch.from_numpy(it.motion.coords).unsqueeze(0)))[0]
        lat.append(z)
        if rvq is not None:
            toks.append(rvq.tokenize(torch.from_numpy(it.motion.coords).unsqueeze(0), levels)[0])
    return lat, (toks if rvq is not None else None)


def _collate(idx, lat, toks, prompts, d):
    L = max(lat[i].shape[0] for i in idx)
    x = torch.zeros(len(idx), L, d)
    valid = torch.zeros(len(idx), L, dtype=torch.bool)
    tok = None
    if toks is not None:
        tok = torch.zeros(len(idx), L, toks[idx[0]].shape[-1], dtype=torch.long)
    for j, i in enumerate(idx):
        n = lat[i].shape[0]
        x[j, :n] = lat[i]
        valid[j, :n] = True
        if tok is not None:
            tok[j, :n] = toks[i]
    return Batch(x, valid, [prompts[i] for i in idx], tok)


def train_transformer(cfg: ExperimentConfig, ae: MotionAE, items, rvq: RVQVAE | None = None, log=None):
    """Train the backbone and diffusion head on frozen AE latents; returns ``(model, losses)``."""
    items = list(items)
    if cfg.cmp_enabled and rvq is None:
        raise ConfigError("cmp_enabled needs a trained RVQ-VAE")
    tc, ts = cfg.transformer, cfg.transformer_train
    torch.manual_seed(substream_seed(cfg.seed, "transformer-init"))
    model = CDAMDTransformer(tc)
    lat, toks = _latent_dataset(ae, items, rvq if cfg.cmp_enabled else None, cfg.levels)
    prompts = [it.text for it in items]
    order_gen = torch_generator(cfg.seed, "transformer-batches")
    mask_gen = torch_generator(cfg.seed, "transformer-masking")
    torch.manual_seed(substream_seed(cfg.seed, "transformer-dropout"))
    opt = torch.optim.AdamW(model.parameters(), lr=ts.lr, betas=(0.9, 0.99), weight_decay=0.01)
    per_epoch = -(-len(items) // ts.batch_size)
    total = ts.epochs * per_epoch
    step, losses = 0, []
    last_good = snapshot(model)
    for epoch in range(ts.epochs):
        acc, n = 0.0, 0
        perm = torch.randperm(len(items), generator=order_gen).tolist()
        for s in range(0, len(perm), ts.batch_size):
            set_lr(opt, warmup_cosine(step, total, ts.warmup_steps, ts.lr))
            batch = _collate(perm[s : s + ts.batch_size], lat, toks, prompts, tc.latent_dim)
            try:
                loss = train_step(model, opt, batch, cfg.schedule, cfg.perturbation, mask_gen, cfg.mask_kind,
                                  cfg.levels)
            except Exception as exc:
                if hasattr(exc, "last_good_state"):
                    exc.last_good_state = last_good
                raise
            acc += loss
            n += 1
            step += 1
        last_good = snapshot(model)
        losses.append(acc / max(n, 1))
        if log is not None:
            log({"stage": "transformer", "epoch": epoch, "loss": losses[-1]})
    model.eval()
    return model, losses


def train_stage(cfg: ExperimentConfig, stage: str, force=False, name=None):
    """Train one stage and write its checkpoint and JSON log; returns the checkpoint path."""
    if stage not in STAGES:
        raise ValidationError(f"unknown stage {stage!r}; expected one of {STAGES}")
    out = cfg.out
    ckpt = out / (name or CHECKPOINTS[stage])
    _check_target(ckpt, force)
    log = JsonlLog(ckpt.with_suffix(".log.jsonl"))
    train, _ = corpus_split(cfg)
    motions = [it.motion for it in train]
    if stage == "ae":
        s = cfg.ae_train
        model, losses = train_ae(motions, cfg.ae, s.epochs, s.batch_size, s.lr, cfg.seed, log)
    elif stage == "rvq":
        s = cfg.rvq_train
        model, losses = train_rvq(motions, cfg.ae, s.epochs, s.batch_size, s.lr, cfg.seed, cfg.rvq_levels,
                                  cfg.codebook_size, cfg.commitment_beta, log)
    elif stage == "evaluator":
        s = cfg.evaluator_train
        model, losses = train_evaluator(train, cfg.evaluator, s.epochs, s.batch_size, s.lr, cfg.seed, log)
    else:
        _require(out / "ae.ckpt", "ae", "the transformer trains on AE latents")
        rvq = None
        if cfg.cmp_enabled:
            _require(out / "rvq.ckpt", "rvq", "cmp_enabled needs motion-prior tokens")
            rvq = load_rvq(out / "rvq.ckpt")
        model, losses = train_transformer(cfg, load_ae(out / "ae.ckpt"), train, rvq, log)
    return _save_module(ckpt, model, stage, cfg, force, losses=losses)


def train_all(cfg: ExperimentConfig, force=False):
    """Train every missing stage; existing checkpoints are kept unless ``force``."""
    paths = {}
    for stage in STAGES:
        path = cfg.out / CHECKPOINTS[stage]
        if stage == "rvq" and not cfg.cmp_enabled:
            continue
        paths[stage] = path if path.exists() and not force else train_stage(cfg, stage, force)
    return paths


# --------------------------------------------------------------------------
# runs


def generate_for_items(models: Models, items, seed=0, sampler="ode", steps=50, batch=64):
    """One generated motion per item, using the item's caption and length."""
    reqs = [GenerationRequest(it.text, it.motion.frames, None, sampler, steps, substream_seed(seed, f"gen-{k}"))
            for k, it in enumerate(items)]
    out = []
    for s in range(0, len(reqs), batch):
        out.extend(g.motion for g in generate_batch(reqs[s : s + batch], models))
    return out


@torch.no_grad()
def shuffled_latent_baseline(ae: MotionAE, items, seed=0):
    """Real motions whose latent positions are randomly permuted within each sequence, then decoded."""
    rng = np.random.default_rng(substream_seed(seed, "shuffle-baseline"))
    out = []
    for it in items:
        z = encode_motion(ae, it.motion)
        out.append(decode_latents(ae, z[rng.permutation(z.shape[0])], it.motion.frames, it.motion.fps))
    return out


def evaluate_generated(evaluator, generated, items, repeats=20, seed=0):
    return evaluate_run(list(zip(generated, [it.text for it in items])),
                        [(it.motion, it.text) for it in items], evaluator, repeats, seed)


def variant_config(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    if variant == "full":
        return replace(cfg, mask_kind="DCCM", cmp_enabled=True)
    if variant == "w/o CMP":
        return replace(cfg, mask_kind="DCCM", cmp_enabled=False)
    if variant == "w/o DCCA":
        return replace(cfg, mask_kind="CM", cmp_enabled=True)
    if variant == "BCM":
        return replace(cfg, mask_kind="BCM", cmp_enabled=True)
    raise ValidationError(f"unknown ablation variant {variant!r}; expected one of {ABLATIONS}")


def run_ablation(cfg: ExperimentConfig, variants=ABLATIONS, repeats=20, force=False, sampler=None, steps=None):
    """Train one transformer per variant on shared codecs and evaluator; returns metric rows."""
    out = cfg.out
    for stage in ("ae", "rvq", "evaluator"):
        _require(out / CHECKPOINTS[stage], stage, "ablations reuse the trained base checkpoints")
    train, test = corpus_split(cfg)
    ae, rvq, evaluator = load_ae(out / "ae.ckpt"), load_rvq(out / "rvq.ckpt"), load_evaluator(out / "eval.ckpt")
    sampler = sampler or ("ode" if cfg.diffusion_mode == "velocity" else "ddpm")
    steps = steps or cfg.diffusion_steps
    rows = []
    for variant in variants:
        vcfg = variant_config(cfg, variant)
        path = out / f"transformer_{_slug(variant)}.ckpt"
        if path.exists() and not force:
            model, _, _ = load_transformer(path)
        else:
            log = JsonlLog(path.with_suffix(".log.jsonl"))
            model, losses = train_transformer(vcfg, ae, train, rvq if vcfg.cmp_enabled else None, log)
            _save_module(path, model, "transformer", vcfg, force, losses=losses)
        models = Models(ae, model, vcfg.schedule, vcfg.mask_kind)
        gen = generate_for_items(models, test, cfg.seed, sampler, steps)
        report = evaluate_generated(evaluator, gen, test, repeats, cfg.seed)
        rows.append({"variant": variant, "mask_kind": vcfg.mask_kind, "cmp": vcfg.cmp_enabled,
                     **{k: report[k]["mean"] for k in METRICS}, **{f"{k}_ci": report[k]["ci"] for k in METRICS}})
    return rows


def _slug(variant):
    return variant.lower().replace("/", "").replace(" ", "_")


def write_rows(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path


def motions_in(directory):
    """All ``.cdm`` motions in a directory (sorted), paired with captions from a manifest when present."""
    d = Path(directory)
    if (d / "manifest.json").exists():
        return [(it.motion, it.text) for it in read_corpus(d)]
    return [(load_motion(p), "") for p in sorted(d.glob("*.cdm"))]

