import json

import numpy as np
import pytest
import torch

from cdamd.cli import main
from cdamd.pipeline import load_config, load_models, train_stage

torch.set_num_threads(1)

TINY = {
    "corpus.class_count": 2,
    "corpus.sequences_per_class": 24,
    "corpus.length_range": [16, 32],
    "ae_train.epochs": 2,
    "rvq_train.epochs": 2,
    "transformer_train.epochs": 3,
    "transformer_train.warmup_steps": 2,
    "evaluator_train.epochs": 2,
    "diffusion_steps": 8,
}


def tiny_config(out_dir, **extra):
    return load_config(overrides={**TINY, "output_dir": str(out_dir), **extra})


def tiny_args(run_dir):
    args = ["--run-dir", str(run_dir)]
    for k, v in TINY.items():
        args += [f"--{k}", json.dumps(v)]
    return args


def rerun_everything(run_dir, out):
    """Drive every CLI command on the tiny config; returns ``(run_dir, out)``."""
    args = tiny_args(run_dir)
    assert main(["train", "--stage", "all", *args]) == 0
    gen, ref = out / "gen", out / "ref"
    assert main(["generate", "--split", "test", "--steps", "4", "--out", str(gen), *args]) == 0
    assert main(["export-corpus", "--split", "test", "--out", str(ref), *args]) == 0
    assert main(["evaluate", "--gen", str(gen), "--ref", str(ref), "--evaluator", str(run_dir / "eval.ckpt"),
                 "--repeats", "3", "--out", str(out / "report.json")]) == 0
    assert main(["ablate", "--repeats", "2", "--out", str(out / "ablation.csv"), *args]) == 0
    return run_dir, out


def snapshot_files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A tiny fully trained experiment directory (velocity head)."""
    cfg = tiny_config(tmp_path_factory.mktemp("tiny"))
    for stage in ("ae", "rvq", "transformer", "evaluator"):
        train_stage(cfg, stage)
    return cfg


@pytest.fixture(scope="session")
def tiny_models(tiny_run):
    return load_models(tiny_run.out)


@pytest.fixture(scope="session")
def tiny_noise_models(tiny_run, tmp_path_factory):
    """Same codecs, transformer trained with the noise-prediction head."""
    import shutil

    out = tmp_path_factory.mktemp("tiny_noise")
    shutil.copy(tiny_run.out / "ae.ckpt", out / "ae.ckpt")
    shutil.copy(tiny_run.out / "rvq.ckpt", out / "rvq.ckpt")
    cfg = tiny_config(out, diffusion_mode="noise")
    train_stage(cfg, "transformer")
    return load_models(out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
