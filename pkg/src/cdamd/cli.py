"""Command-line entry point: ``python3 -m cdamd <command>``.

Any experiment config field can be overridden with ``--key value`` using
dotted paths, e.g. ``--transformer_train.epochs 20 --corpus.class_count 4``.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .errors import CDAMDError
from .evaluation import evaluate_run, write_report
from .generation import SAMPLERS, EDIT_TASKS, GenerationRequest, build_edit_mask, edit, generate
from .masks import MASK_KINDS, SequenceLayout, build_cross_mask, build_latent_mask, build_mask_set, export_mask
from .motion import CorpusItem, load_motion, save_motion, write_corpus
from . import pipeline


def _log(**record):
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def _overrides(extra):
    """Turn leftover ``--a.b value`` pairs into a config override dict."""
    out, i = {}, 0
    while i < len(extra):
        key = extra[i]
        if not key.startswith("--") or i + 1 >= len(extra):
            raise SystemExit(f"error: cannot parse config override near {key!r}; use --key value")
        out[key[2:].replace("-", "_")] = extra[i + 1]
        i += 2
    return out


def _config(args, extra):
    overrides = _overrides(extra)
    for attr, key in (("run_dir", "output_dir"), ("seed", "seed"), ("mask_kind", "mask_kind")):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "no_cmp", False):
        overrides["cmp_enabled"] = False
    return pipeline.load_config(args.config, overrides)


def _write_motion(m, path, force):
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_motion(m, path)
    return path


def cmd_train(args, extra):
    cfg = _config(args, extra)
    if args.stage == "all":
        paths = pipeline.train_all(cfg, args.force)
    else:
        paths = {args.stage: pipeline.train_stage(cfg, args.stage, args.force)}
    for stage, p in paths.items():
        _log(event="checkpoint", stage=stage, path=str(p))


def cmd_generate(args, extra):
    cfg = _config(args, extra)
    models = pipeline.load_models(cfg.out)
    if args.split:
        train, test = pipeline.corpus_split(cfg)
        items = test if args.split == "test" else train
        motions = pipeline.generate_for_items(models, items, args.seed or 0, args.sampler, args.steps)
        out = Path(args.out)
        if out.exists() and any(out.iterdir()) and not args.force:
            raise FileExistsError(f"{out} is not empty; pass --force to overwrite")
        write_corpus([CorpusItem(m, it.text, it.class_id) for m, it in zip(motions, items)], out)
        _log(event="generated", count=len(motions), out=str(out))
        return
    if args.prompt is None or args.frames is None:
        raise SystemExit("error: generate needs --prompt and --frames (or --split)")
    req = GenerationRequest(args.prompt, args.frames, None, args.sampler, args.steps, args.seed or 0)
    path = _write_motion(generate(req, models), args.out, args.force)
    _log(event="generated", out=str(path), frames=args.frames)


def cmd_edit(args, extra):
    cfg = _config(args, extra)
    models = pipeline.load_models(cfg.out)
    source = load_motion(args.source)
    m = edit(source, args.task, args.prompt, models, args.seed or 0, args.sampler, args.steps)
    path = _write_motion(m, args.out, args.force)
    _log(event="edited", task=args.task, out=str(path))


def cmd_evaluate(args, extra):
    evaluator = pipeline.load_evaluator(args.evaluator)
    gen, ref = pipeline.motions_in(args.gen), pipeline.motions_in(args.ref)
    if any(not text for _, text in gen):
        raise SystemExit("error: --gen needs a manifest.json with captions")
    report = evaluate_run(gen, ref, evaluator, args.repeats, args.seed or 0)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    write_report(report, out)
    _log(event="report", out=str(out), fid=report["fid"]["mean"])


def cmd_ablate(args, extra):
    cfg = _config(args, extra)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    rows = pipeline.run_ablation(cfg, pipeline.ABLATIONS, args.repeats, args.force, args.sampler, args.steps)
    pipeline.write_rows(rows, out)
    _log(event="ablation", rows=len(rows), out=str(out))


def cmd_export_corpus(args, extra):
    cfg = _config(args, extra)
    train, test = pipeline.corpus_split(cfg)
    items = {"train": train, "test": test, "all": train + test}[args.split]
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"{out} is not empty; pass --force to overwrite")
    write_corpus(items, out)
    _log(event="corpus", count=len(items), out=str(out))


def cmd_export_masks(args, extra):
    if args.flags is not None:
        flags = np.array([int(c) for c in args.flags], np.uint8)
    else:
        flags = build_edit_mask(args.task, args.length).condition_flags
    layout = SequenceLayout(args.n_text, len(flags) if args.tokens else 0, len(flags), tuple(int(f) for f in flags))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    masks = build_mask_set(layout) if args.kind == "DCCM" else {
        "self_mask": build_latent_mask(args.kind, flags), "cross": build_cross_mask(layout, args.kind)}
    for name, mask in masks.items():
        path = out / f"{args.kind.lower()}_{name}.{args.format}"
        if path.exists() and not args.force:
            raise FileExistsError(f"{path} exists; pass --force to overwrite")
        export_mask(mask, path, args.format)
        _log(event="mask", name=name, shape=list(np.asarray(mask).shape), out=str(path))


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="cdamd", formatter_class=fmt, description=__doc__.splitlines()[0],
                                     epilog="Unrecognised --key value pairs override experiment config fields.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=None):
        p.add_argument("--config", default=None, help="experiment config JSON")
        p.add_argument("--run-dir", default=None, help="experiment directory (overrides output_dir)")
        p.add_argument("--seed", type=int, default=seed_default, help="seed")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    def sampling(p):
        p.add_argument("--sampler", choices=sorted(SAMPLERS), default="ode", help="diffusion sampler")
        p.add_argument("--steps", type=int, default=50, help="sampler steps")

    p = sub.add_parser("train", formatter_class=fmt, help="train one stage or all")
    p.add_argument("--stage", choices=(*pipeline.STAGES, "all"), default="all", help="stage to train")
    p.add_argument("--mask-kind", choices=MASK_KINDS, default=None, help="attention mask for the transformer")
    p.add_argument("--no-cmp", action="store_true", help="train without motion-prior tokens")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", formatter_class=fmt, help="text-to-motion generation")
    p.add_argument("--prompt", default=None, help="text prompt")
    p.add_argument("--frames", type=int, default=None, help="output length in frames")
    p.add_argument("--split", choices=("train", "test"), default=None, help="generate one motion per corpus item")
    p.add_argument("--out", default="motion.cdm", help="output .cdm file (or directory with --split)")
    sampling(p)
    common(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("edit", formatter_class=fmt, help="temporal editing of an existing motion")
    p.add_argument("--task", choices=[t for t in EDIT_TASKS if t != "none"], required=True, help="editing task")
    p.add_argument("--source", required=True, help="source .cdm motion")
    p.add_argument("--prompt", required=True, help="text prompt")
    p.add_argument("--out", default="edited.cdm", help="output .cdm file")
    sampling(p)
    common(p)
    p.set_defaults(fn=cmd_edit)

    p = sub.add_parser("evaluate", formatter_class=fmt, help="metric report for generated vs reference motions")
    p.add_argument("--gen", required=True, help="directory of generated motions with manifest.json")
    p.add_argument("--ref", required=True, help="directory of reference motions")
    p.add_argument("--evaluator", required=True, help="evaluator checkpoint (eval.ckpt)")
    p.add_argument("--repeats", type=int, default=20, help="resampled evaluation repeats")
    p.add_argument("--out", default="report.json", help="report path (.json or .csv)")
    common(p, seed_default=0)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", formatter_class=fmt, help="train and evaluate the four ablation variants")
    p.add_argument("--repeats", type=int, default=20, help="resampled evaluation repeats")
    p.add_argument("--out", default="ablation.csv", help="CSV with one row per variant")
    p.add_argument("--sampler", choices=sorted(SAMPLERS), default=None, help="sampler (default follows the model)")
    p.add_argument("--steps", type=int, default=None, help="sampler steps (default: trained steps)")
    common(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("export-corpus", formatter_class=fmt, help="write the synthetic corpus to disk")
    p.add_argument("--split", choices=("train", "test", "all"), default="test", help="which split")
    p.add_argument("--out", default="corpus", help="output directory")
    common(p)
    p.set_defaults(fn=cmd_export_corpus)

    p = sub.add_parser("export-masks", formatter_class=fmt, help="write attention masks as PGM or CSV")
    p.add_argument("--kind", choices=MASK_KINDS, default="DCCM", help="mask kind")
    p.add_argument("--flags", default=None, help="condition flags as a 0/1 string, e.g. 11000011")
    p.add_argument("--task", choices=EDIT_TASKS, default="inpaint", help="edit task when --flags is absent")
    p.add_argument("--length", type=int, default=16, help="latent length when --flags is absent")
    p.add_argument("--n-text", type=int, default=1, help="text columns in the cross mask")
    p.add_argument("--tokens", action="store_true", help="include motion-token columns")
    p.add_argument("--format", choices=("pgm", "csv"), default="pgm", help="file format")
    p.add_argument("--out", default="masks", help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.set_defaults(fn=cmd_export_masks)
    return parser


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    torch.set_num_threads(1)
    try:
        args.fn(args, extra)
    except (CDAMDError, FileExistsError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
