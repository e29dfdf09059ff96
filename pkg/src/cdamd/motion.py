"""Motion sequences, normalisation, the synthetic paired corpus and file I/O.

Motions are absolute joint coordinates, ``frames x joints x 3`` in metres.
The synthetic skeleton has 8 joints::

    0 root   1 torso   2 head
    3 left elbow   4 left hand   5 right elbow   6 right hand
    7 leg marker

Left is +x, up is +y and the body faces +z.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, FormatError, TruncatedFileError, ValidationError

NUM_JOINTS = 8
LEFT_RIGHT_PAIRS = ((3, 5), (4, 6))

REST_POSE = np.array(
    [
        [0.0, 1.0, 0.0],
        [0.0, 1.4, 0.0],
        [0.0, 1.7, 0.0],
        [0.35, 1.2, 0.0],
        [0.4, 0.95, 0.0],
        [-0.35, 1.2, 0.0],
        [-0.4, 0.95, 0.0],
        [0.0, 0.5, 0.0],
    ],
    dtype=np.float64,
)

CLASS_TEXTS = (
    "a person walks forward",
    "a person raises both arms",
    "a person turns around in place",
    "a person jumps up and down",
    "a person waves with the right hand",
    "a person squats down and stands up",
)

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class MotionSequence:
    coords: np.ndarray
    fps: float = 20.0

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float32)
        if coords.ndim != 3 or coords.shape[2] != 3:
            raise DimensionError(f"coords must be T x J x 3, got {coords.shape}")
        if coords.shape[0] < 1:
            raise ValidationError("a motion needs at least one frame")
        if coords.shape[1] < 2:
            raise ValidationError("a motion needs at least two joints")
        if not np.all(np.isfinite(coords)):
            raise ValidationError("motion coordinates must be finite")
        if not self.fps > 0:
            raise ValidationError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "coords", coords)

    @property
    def frames(self) -> int:
        return self.coords.shape[0]

    @property
    def joints(self) -> int:
        return self.coords.shape[1]

    def with_coords(self, coords) -> "MotionSequence":
        return MotionSequence(coords, self.fps)


@dataclass(frozen=True)
class MotionStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float32)
        std = np.asarray(self.std, dtype=np.float32)
        if mean.shape != std.shape or mean.ndim != 2 or mean.shape[1] != 3:
            raise DimensionError(f"stats must be J x 3, got {mean.shape} and {std.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", np.maximum(std, np.float32(STD_FLOOR)))


def compute_stats(motions: Sequence[MotionSequence]) -> MotionStats:
    """Per-joint, per-axis mean and std over every frame of ``motions``."""
    frames = np.concatenate([m.coords.astype(np.float64) for m in motions], axis=0)
    return MotionStats(frames.mean(axis=0), frames.std(axis=0))


def _check_stats(m: MotionSequence, s: MotionStats):
    if s.mean.shape != (m.joints, 3):
        raise DimensionError(f"stats are for {s.mean.shape[0]} joints, motion has {m.joints}")


def normalize(m: MotionSequence, s: MotionStats) -> MotionSequence:
    _check_stats(m, s)
    return m.with_coords((m.coords - s.mean) / s.std)


def denormalize(m: MotionSequence, s: MotionStats) -> MotionSequence:
    _check_stats(m, s)
    return m.with_coords(m.coords * s.std + s.mean)


def mirror(m: MotionSequence, left_right_pairs=LEFT_RIGHT_PAIRS) -> MotionSequence:
    """Reflect across the sagittal plane: negate x and swap paired joints."""
    seen = set()
    for a, b in left_right_pairs:
        for j in (a, b):
            if not 0 <= j < m.joints:
                raise ValidationError(f"joint index {j} out of range for {m.joints} joints")
            if j in seen:
                raise ValidationError(f"joint {j} appears in more than one mirror pair")
            seen.add(j)
        if a == b:
            raise ValidationError(f"mirror pair ({a}, {b}) pairs a joint with itself")
    perm = np.arange(m.joints)
    for a, b in left_right_pairs:
        perm[a], perm[b] = b, a
    out = m.coords[:, perm, :].copy()
    out[..., 0] = -out[..., 0]
    return m.with_coords(out)


# --------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class CorpusSpec:
    class_count: int = 4
    sequences_per_class: int = 200
    length_range: tuple = (40, 64)
    seed: int = 0
    noise_scale: float = 0.02
    fps: float = 20.0

    def __post_init__(self):
        lo, hi = self.length_range
        object.__setattr__(self, "length_range", (int(lo), int(hi)))
        if not 2 <= self.class_count <= len(CLASS_TEXTS):
            raise ValidationError(f"class_count must be in [2, {len(CLASS_TEXTS)}]")
        if self.sequences_per_class < 1:
            raise ValidationError("sequences_per_class must be positive")
        if lo < 8 or hi < lo:
            raise ValidationError(f"length_range must satisfy 8 <= min <= max, got {self.length_range}")
        if self.noise_scale < 0:
            raise ValidationError("noise_scale must be non-negative")


@dataclass
class CorpusItem:
    motion: MotionSequence
    text: str
    class_id: int
    meta: dict = field(default_factory=dict)

    def __iter__(self):
        # lets callers unpack ``motion, text, class_id = item``
        return iter((self.motion, self.text, self.class_id))


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def _rot_y(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.stack(
        [np.stack([c, 0 * c, s], -1), np.stack([0 * c, 1 + 0 * c, 0 * c], -1), np.stack([-s, 0 * c, c], -1)],
        -2,
    )


def _class_motion(class_id, T, fps, rng, noise_scale):
    t = np.arange(T) / fps
    tau = np.arange(T) / max(T - 1, 1)
    amp = 1.0 + 2.0 * noise_scale * rng.standard_normal()
    phase = rng.uniform(0.0, 2 * np.pi)
    pose = np.broadcast_to(REST_POSE, (T, NUM_JOINTS, 3)).copy()

    if class_id == 0:  # walk
        pose[:, :, 2] += (1.0 * amp * t)[:, None]
        pose[:, :, 1] += 0.03 * np.sin(4 * np.pi * t + phase)[:, None]
        swing = 0.2 * amp * np.sin(2 * np.pi * t + phase)
        pose[:, 4, 2] += swing
        pose[:, 3, 2] += 0.5 * swing
        pose[:, 6, 2] -= swing
        pose[:, 5, 2] -= 0.5 * swing
        pose[:, 7, 2] += 0.15 * np.sin(2 * np.pi * t + phase + np.pi)
    elif class_id == 1:  # raise arms
        p = amp * _smoothstep(2.5 * tau - 0.1)
        for elbow, hand, side in ((3, 4, 1.0), (5, 6, -1.0)):
            pose[:, elbow] += p[:, None] * (np.array([side * 0.4, 1.75, 0.1]) - REST_POSE[elbow])
            pose[:, hand] += p[:, None] * (np.array([side * 0.5, 2.15, 0.2]) - REST_POSE[hand])
    elif class_id == 2:  # turn in place
        theta = np.pi * amp * _smoothstep(tau) + 0.1 * phase
        rel = REST_POSE - REST_POSE[0]
        pose = REST_POSE[0] + np.einsum("tij,kj->tki", _rot_y(theta), rel)
    elif class_id == 3:  # jump
        h = 0.4 * amp * np.maximum(0.0, np.sin(2 * np.pi * 1.2 * t + phase))
        pose[:, :, 1] += h[:, None]
        pose[:, [4, 6], 1] += 0.5 * h[:, None]
    elif class_id == 4:  # wave right hand
        up = _smoothstep(4 * tau)
        pose[:, 5] += up[:, None] * (np.array([-0.3, 1.65, 0.25]) - REST_POSE[5])
        pose[:, 6] += up[:, None] * (np.array([-0.2, 2.0, 0.35]) - REST_POSE[6])
        pose[:, 6, 0] += up * 0.3 * amp * np.sin(2 * np.pi * 1.5 * t + phase)
        pose[:, 4, 2] -= 0.2 * up
    elif class_id == 5:  # squat
        d = 0.4 * amp * np.sin(np.pi * tau) ** 2
        pose[:, :7, 1] -= d[:, None]
        pose[:, 7, 2] += 0.5 * d
        pose[:, [4, 6], 2] += 0.6 * d[:, None]
    else:
        raise ValidationError(f"unknown class id {class_id}")

    pose += noise_scale * rng.standard_normal(pose.shape)
    return pose.astype(np.float32)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for sample ``index``; independent of generation order."""
    return np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, index]))


def generate_corpus(spec: CorpusSpec) -> list:
    """Procedural paired text-motion corpus; a pure function of ``spec``."""
    items = []
    lo, hi = spec.length_range
    for class_id in range(spec.class_count):
        for k in range(spec.sequences_per_class):
            index = class_id * spec.sequences_per_class + k
            rng = sample_rng(spec.seed, index)
            T = int(rng.integers(lo, hi + 1))
            coords = _class_motion(class_id, T, spec.fps, rng, spec.noise_scale)
            items.append(CorpusItem(MotionSequence(coords, spec.fps), CLASS_TEXTS[class_id], class_id))
    return items


def split_corpus(items, test_fraction=0.2, seed=0):
    """Deterministic stratified split into (train, test)."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    by_class = {}
    for it in items:
        by_class.setdefault(it.class_id, []).append(it)
    for cid in sorted(by_class):
        group = by_class[cid]
        order = rng.permutation(len(group))
        n_test = int(round(test_fraction * len(group)))
        test.extend(group[i] for i in order[:n_test])
        train.extend(group[i] for i in order[n_test:])
    return train, test


# --------------------------------------------------------------------------
# file formats

MAGIC = b"CDAMDMOT".ljust(16, b"\0")
FORMAT_VERSION = 1
_HEADER = struct.Struct("<IIII")


def save_motion(m: MotionSequence, path):
    fps_milli = int(round(m.fps * 1000))
    header = MAGIC + _HEADER.pack(FORMAT_VERSION, m.frames, m.joints, fps_milli)
    payload = np.ascontiguousarray(m.coords, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header + payload)


def load_motion(path) -> MotionSequence:
    with open(path, "rb") as f:
        data = f.read()
    head_len = len(MAGIC) + _HEADER.size
    if len(data) < head_len:
        raise FormatError(f"{path}: file too short for a motion header ({len(data)} bytes)")
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, T, J, fps_milli = _HEADER.unpack_from(data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if T < 1 or J < 2 or fps_milli == 0:
        raise FormatError(f"{path}: invalid header T={T} J={J} fps*1000={fps_milli}")
    expected = T * J * 3 * 4
    payload = data[head_len:]
    if len(payload) < expected:
        raise TruncatedFileError(f"{path}: payload has {len(payload)} bytes, header declares {expected}")
    if len(payload) > expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header declares {expected}")
    coords = np.frombuffer(payload, dtype="<f4").reshape(T, J, 3).astype(np.float32)
    return MotionSequence(coords, fps_milli / 1000.0)


def write_corpus(items, directory, manifest_name="manifest.json"):
    """Write every motion as ``NNNNN.cdm`` plus a JSON manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, it in enumerate(items):
        name = f"{i:05d}.cdm"
        save_motion(it.motion, directory / name)
        entries.append({"motion_path": name, "text": it.text, "class_id": int(it.class_id)})
    manifest = directory / manifest_name
    manifest.write_text(json.dumps(entries, indent=1))
    return manifest


def read_corpus(path) -> list:
    """Load a manifest (or a directory holding ``manifest.json``)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    entries = json.loads(path.read_text())
    if not isinstance(entries, list):
        raise FormatError(f"{path}: manifest must be a JSON array")
    items = []
    for e in entries:
        try:
            mpath = Path(e["motion_path"])
            text, cid = e["text"], int(e["class_id"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}: malformed manifest entry {e!r}") from exc
        if not mpath.is_absolute():
            mpath = path.parent / mpath
        items.append(CorpusItem(load_motion(os.fspath(mpath)), text, cid))
    return items
