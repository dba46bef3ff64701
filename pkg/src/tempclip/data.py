"""Synthetic moving-shape videos and their class vocabulary.

Three class pools:

* pretrain  -- static "photo of a <color> <shape>" images (T = 1) used to
  train the image model that plays the role of the pretrained checkpoint.
* finetune  -- "video of a <shape> moving <direction>" clips.  Colour and
  start position are nuisances, so a single frame has the same distribution
  in every same-shape class; only how the shape shifts between frames tells
  them apart.  No direction is the reverse of another: a clip played
  backwards is a clip of the opposite direction, and an encoder without
  frame order cannot separate those two.
* zeroshot  -- held-out colour/shape combinations (static clips) and unseen
  shape/direction combinations.

A sample is a pure function of (seed, split, shape, sample index), so two
classes that share a shape share the first frame of every sample.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ClassPromptBank, TextEncoder, VideoBatch
from .weightspace import Checkpoint, ParamVector, load_checkpoint, save_checkpoint

_BITMAPS = {
    "square": ["11111", "11111", "11111", "11111", "11111"],
    "ring": ["11111", "10001", "10001", "10001", "11111"],
    "triangle": ["00100", "00100", "01110", "01110", "11111"],
    "plus": ["00100", "00100", "11111", "00100", "00100"],
    "cross": ["10001", "01010", "00100", "01010", "10001"],
    "diamond": ["00100", "01110", "11111", "01110", "00100"],
}
SHAPES = tuple(_BITMAPS)
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.2, 0.3, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
}
DIRECTIONS = {"left": (0, -1), "up": (-1, 0), "upleft": (-1, -1), "upright": (-1, 1)}
POOLS = ("pretrain", "finetune", "zeroshot")
_SPLIT_CODES = {"train": 1, "eval": 2}


@dataclass(frozen=True)
class ClassDef:
    id: int
    shape: str
    pool: str
    color: str | None = None      # None: drawn per sample
    motion: str | None = None     # None: static
    speed: int = 1

    @property
    def template(self) -> str:
        return "photo" if self.motion is None else "video"

    @property
    def prompt(self) -> tuple[str, ...]:
        if self.motion is None:
            return ("a", "photo", "of", "a", self.color or "", self.shape)
        return ("a", "video", "of", "a", self.shape, "moving", self.motion)

    @property
    def attributes(self) -> frozenset[str]:
        return frozenset(a for a in (self.shape, self.color, self.motion) if a)


@dataclass(frozen=True)
class SyntheticVideoSpec:
    frame_size: int = 16
    frames_T: int = 8
    shape_size: int = 5
    noise: float = 0.05
    brightness: tuple[float, float] = (0.6, 1.0)

    def __post_init__(self):
        if self.shape_size > self.frame_size:
            raise ValueError(f"shape size {self.shape_size} exceeds frame size {self.frame_size}")
        if self.shape_size != 5:
            raise ValueError("only 5x5 shape bitmaps are defined")
        lo, hi = self.brightness
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"brightness range {self.brightness} is not inside [0, 1]")


def default_classes() -> list[ClassDef]:
    """24 pretrain, 12 finetune and 12 zeroshot classes."""
    colors = list(COLORS)
    held_out = {(SHAPES[i], colors[i % len(colors)]) for i in range(len(SHAPES))}
    out: list[ClassDef] = []
    for s in SHAPES:
        for c in colors:
            if (s, c) not in held_out:
                out.append(ClassDef(len(out), s, "pretrain", color=c))
    for s in SHAPES[:3]:
        for d in DIRECTIONS:
            out.append(ClassDef(len(out), s, "finetune", motion=d))
    for i, s in enumerate(SHAPES):
        out.append(ClassDef(len(out), s, "zeroshot", color=colors[i % len(colors)]))
    for s, d in [("plus", "left"), ("plus", "up"), ("cross", "upleft"),
                 ("cross", "upright"), ("diamond", "left"), ("diamond", "upright")]:
        out.append(ClassDef(len(out), s, "zeroshot", motion=d))
    return out


def motion_pairs(classes: Sequence[ClassDef], pool: str = "finetune") -> list[tuple[int, int]]:
    """Class-id pairs in ``pool`` that share shape, colour and speed and differ only in direction."""
    moving = [c for c in classes if c.pool == pool and c.motion]
    return [(a.id, b.id) for i, a in enumerate(moving) for b in moving[i + 1:]
            if (a.shape, a.color, a.speed) == (b.shape, b.color, b.speed) and a.motion != b.motion]


def _bitmap(shape: str) -> np.ndarray:
    return np.array([[ch == "1" for ch in row] for row in _BITMAPS[shape]], dtype=bool)


def _sample_rng(seed: int, split: str, shape: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _SPLIT_CODES[split], SHAPES.index(shape), index])


def render_sample(cdef: ClassDef, spec: SyntheticVideoSpec, seed: int, split: str,
                  index: int, frames: int | None = None) -> np.ndarray:
    """One T x H x W x 3 clip in [0, 1]; deterministic in its arguments."""
    T = spec.frames_T if frames is None else frames
    n = spec.frame_size
    rng = _sample_rng(seed, split, cdef.shape, index)
    color = np.array(COLORS[cdef.color] if cdef.color else COLORS[list(COLORS)[rng.integers(len(COLORS))]])
    y0, x0 = rng.integers(0, n, size=2)
    mask0 = np.zeros((n, n), dtype=bool)
    mask0[:spec.shape_size, :spec.shape_size] = _bitmap(cdef.shape)
    b = rng.uniform(*spec.brightness)
    if cdef.motion is None:
        frame = rng.uniform(0.0, spec.noise, size=(n, n, 3))
        frame[np.roll(mask0, (y0, x0), axis=(0, 1))] = b * color
        return np.repeat(frame[None], T, axis=0).astype(np.float32)
    video = rng.uniform(0.0, spec.noise, size=(T, n, n, 3))
    dy, dx = DIRECTIONS[cdef.motion]
    for t in range(T):
        mask = np.roll(mask0, (y0 + dy * cdef.speed * t, x0 + dx * cdef.speed * t), axis=(0, 1))
        video[t][mask] = b * color
    return video.astype(np.float32)


def gen_static_video(frame: np.ndarray, frames_T: int) -> VideoBatch:
    """A batch of one clip made of ``frames_T`` copies of ``frame`` (H x W x C)."""
    frame = np.asarray(frame)
    return VideoBatch(np.repeat(frame[None, None], frames_T, axis=1), np.zeros(1, dtype=np.int64))


def split_classes(classes: Sequence, seed: int, fraction: float):
    """Seeded random split into (subset, complement), order preserved."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    classes = list(classes)
    k = int(round(fraction * len(classes)))
    if k == 0 or k == len(classes):
        raise ValueError(f"fraction {fraction} of {len(classes)} classes leaves an empty side")
    chosen = set(np.random.default_rng(seed).permutation(len(classes))[:k].tolist())
    return ([c for i, c in enumerate(classes) if i in chosen],
            [c for i, c in enumerate(classes) if i not in chosen])


@dataclass
class VideoSet:
    pixels: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.pixels.shape[0]

    def batch(self, idx=None) -> VideoBatch:
        return VideoBatch(self.pixels if idx is None else self.pixels[idx],
                          self.labels if idx is None else self.labels[idx])

    def where(self, class_ids) -> "VideoSet":
        keep = np.isin(self.labels, list(class_ids))
        return VideoSet(self.pixels[keep], self.labels[keep])


@dataclass
class Dataset:
    classes: list[ClassDef]
    spec: SyntheticVideoSpec
    seed: int
    counts: dict
    splits: dict[str, VideoSet] = field(default_factory=dict)

    def pool(self, name: str) -> list[ClassDef]:
        return [c for c in self.classes if c.pool == name]

    def pool_ids(self, name: str) -> list[int]:
        return [c.id for c in self.pool(name)]

    def bank(self, dim: int, text_seed: int = 0) -> ClassPromptBank:
        return ClassPromptBank({c.id: c.prompt for c in self.classes}, TextEncoder(dim, text_seed))

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "spec": asdict(self.spec),
            "counts": self.counts,
            "classes": [asdict(c) for c in self.classes],
            "splits": {k: {"n": len(v), "frames": int(v.pixels.shape[1])} for k, v in self.splits.items()},
        }


DEFAULT_COUNTS = {"train": 40, "eval": 20}


def gen_dataset(spec: SyntheticVideoSpec | None = None, counts: dict | None = None, seed: int = 0,
                classes: Sequence[ClassDef] | None = None) -> Dataset:
    """Render every split.  Pretrain images have one frame; the zeroshot pool is eval-only."""
    spec = spec or SyntheticVideoSpec()
    counts = dict(DEFAULT_COUNTS if counts is None else counts)
    if min(counts.values()) < 1:
        raise ValueError("need at least one sample per class in every split")
    classes = list(default_classes() if classes is None else classes)
    ds = Dataset(classes=classes, spec=spec, seed=seed, counts=counts)
    for pool in POOLS:
        frames = 1 if pool == "pretrain" else spec.frames_T
        for split in ("train", "eval"):
            if pool == "zeroshot" and split == "train":
                continue
            pixels, labels = [], []
            for c in ds.pool(pool):
                for i in range(counts[split]):
                    pixels.append(render_sample(c, spec, seed, split, i, frames))
                    labels.append(c.id)
            if pixels:
                ds.splits[f"{pool}/{split}"] = VideoSet(np.stack(pixels), np.array(labels, dtype=np.int64))
    return ds


def save_dataset(ds: Dataset, out_dir) -> dict:
    """Write ``dataset.ovcp`` and ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    if not out.is_dir():
        raise FileNotFoundError(f"output directory {out} does not exist")
    entries = []
    for name in sorted(ds.splits):
        vs = ds.splits[name]
        entries.append((f"{name}/pixels", vs.pixels.astype(np.float32)))
        entries.append((f"{name}/labels", vs.labels.astype(np.float32)))
    digest = save_checkpoint(out / "dataset.ovcp", Checkpoint("dataset", ParamVector(entries)))
    manifest = ds.manifest()
    manifest["blob_sha256"] = digest
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(data_dir) -> Dataset:
    d = Path(data_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    blob = load_checkpoint(d / "dataset.ovcp").params
    spec_d = manifest["spec"]
    spec_d["brightness"] = tuple(spec_d["brightness"])
    ds = Dataset(classes=[ClassDef(**c) for c in manifest["classes"]], spec=SyntheticVideoSpec(**spec_d),
                 seed=manifest["seed"], counts=manifest["counts"])
    for name in manifest["splits"]:
        ds.splits[name] = VideoSet(blob[f"{name}/pixels"], blob[f"{name}/labels"].astype(np.int64))
    return ds


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()
