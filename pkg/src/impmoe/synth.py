"""Synthetic multimodal datasets with planted cross-modal correspondences.

Every example is a pure function of ``(seed, dataset, index)``. Randomness comes
from Philox, a counter-based generator, keyed per field so any example can be
produced in isolation.

All modalities of one example share a class id and a small latent (spatial
jitter, amplitude, phase). Only the class is meant to be learnable.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .embedder import RawSample
from .objectives import Objective, label_text_decode, label_text_encode


@dataclass
class SynthConfig:
    num_classes: int = 16
    image_size: int = 64
    video_frames: int = 16
    spec_size: int = 32
    wave_len: int = 2048
    noise: float = 0.1
    seed: int = 0
    vocab_size: int = 512

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.spec_size < 2 * self.num_classes:
            raise ValueError(f"spectrogram of {self.spec_size} rows cannot hold "
                             f"{self.num_classes} two-row class bands")
        if self.wave_len // 2 <= self._wave_bin(self.num_classes - 1) * 2:
            raise ValueError("waveform too short for the class frequency table")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        # raises when classes overflow the caption vocabulary
        label_text_encode(self.num_classes - 1, vocab_size=self.vocab_size)

    @staticmethod
    def _wave_bin(c: int) -> int:
        return 16 + 8 * c


def _key(text: str) -> int:
    return zlib.crc32(text.encode())


def stream(seed: int, dataset: str, index: int, tag: str) -> np.random.Generator:
    """Independent Philox stream for one field of one example."""
    ss = np.random.SeedSequence([seed, _key(dataset), index, _key(tag)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class Latent:
    dy: int
    dx: int
    amp: float
    phase: float

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "Latent":
        dy, dx = rng.integers(-2, 3, size=2)
        return cls(int(dy), int(dx), float(rng.uniform(0.8, 1.2)), float(rng.uniform(0, 2 * np.pi)))

    @classmethod
    def zero(cls) -> "Latent":
        return cls(0, 0, 1.0, 0.0)


# ---------------------------------------------------------------------------
# class patterns

def grid_side(num_classes: int) -> int:
    return math.ceil(math.sqrt(num_classes))


def bump_center(c: int, latent: Latent, cfg: SynthConfig) -> tuple[int, int]:
    g = grid_side(cfg.num_classes)
    cell = cfg.image_size / g
    row, col = divmod(c % (g * g), g)
    return (int((row + 0.5) * cell) + latent.dy, int((col + 0.5) * cell) + latent.dx)


def channel_signature(c: int, num_classes: int) -> np.ndarray:
    return 0.5 + 0.5 * np.cos(2 * np.pi * (c / num_classes + np.arange(3) / 3))


def velocity(c: int) -> tuple[int, int]:
    """Integer pixels per frame; class 0 is static."""
    return c % 3, (c // 3) % 3


def _check_class(c: int, cfg: SynthConfig):
    if not 0 <= c < cfg.num_classes:
        raise ValueError(f"class {c} outside [0, {cfg.num_classes})")


def image_pattern(c: int, latent: Latent, cfg: SynthConfig) -> np.ndarray:
    _check_class(c, cfg)
    n = cfg.image_size
    cy, cx = bump_center(c, latent, cfg)
    width = n / (4 * grid_side(cfg.num_classes))
    yy, xx = np.mgrid[0:n, 0:n]
    # toroidal distance so video translation can wrap without a seam
    dy = np.minimum(np.abs(yy - cy), n - np.abs(yy - cy))
    dx = np.minimum(np.abs(xx - cx), n - np.abs(xx - cx))
    bump = np.exp(-(dy ** 2 + dx ** 2) / (2 * width ** 2))
    return latent.amp * bump[..., None] * channel_signature(c, cfg.num_classes)


def gen_image(c: int, latent: Latent, cfg: SynthConfig, rng: np.random.Generator) -> RawSample:
    img = image_pattern(c, latent, cfg)
    img = img + cfg.noise * rng.standard_normal(img.shape)
    return RawSample("image", img.astype(np.float32))


def gen_video(c: int, latent: Latent, cfg: SynthConfig, rng: np.random.Generator) -> RawSample:
    base = image_pattern(c, latent, cfg)
    vy, vx = velocity(c)
    frames = np.stack([np.roll(base, (t * vy, t * vx), axis=(0, 1))
                       for t in range(cfg.video_frames)])
    frames = frames + cfg.noise * rng.standard_normal(frames.shape)
    return RawSample("video", frames.astype(np.float32))


def gen_spectrogram(c: int, latent: Latent, cfg: SynthConfig,
                    rng: np.random.Generator) -> RawSample:
    _check_class(c, cfg)
    n = cfg.spec_size
    spec = np.zeros((n, n))
    t = np.arange(n)
    spec[2 * c:2 * c + 2] = latent.amp * (0.75 + 0.25 * np.sin(2 * np.pi * t / n + latent.phase))
    spec = spec + cfg.noise * rng.standard_normal(spec.shape)
    return RawSample("spectrogram", spec.astype(np.float32))


def gen_waveform(c: int, latent: Latent, cfg: SynthConfig,
                 rng: np.random.Generator) -> RawSample:
    _check_class(c, cfg)
    k = cfg._wave_bin(c)
    t = np.arange(cfg.wave_len) / cfg.wave_len
    wave = latent.amp * (np.sin(2 * np.pi * k * t + latent.phase)
                         + 0.3 * np.sin(2 * np.pi * 2 * k * t))
    wave = wave + cfg.noise * rng.standard_normal(wave.shape)
    return RawSample("waveform", wave.astype(np.float32))


def gen_caption(c: int, cfg: SynthConfig) -> np.ndarray:
    _check_class(c, cfg)
    return label_text_encode(c, num_classes=cfg.num_classes, vocab_size=cfg.vocab_size)


GENERATORS = {
    "image": gen_image,
    "video": gen_video,
    "spectrogram": gen_spectrogram,
    "waveform": gen_waveform,
}


# ---------------------------------------------------------------------------
# datasets

@dataclass
class DatasetSpec:
    name: str
    modalities: tuple
    train_count: int
    eval_count: int = 256
    objectives: tuple = ()
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        bad = [m for m in self.modalities if m not in GENERATORS and m != "text"]
        if bad:
            raise ValueError(f"dataset {self.name!r}: unknown modalities {bad}")
        if self.train_count < 1 or self.eval_count < 0:
            raise ValueError(f"dataset {self.name!r}: bad split sizes")
        self.objectives = tuple(o if isinstance(o, Objective) else Objective.parse(o)
                                for o in self.objectives)
        for obj in self.objectives:
            self.validate_objective(obj)

    @property
    def example_count(self) -> int:
        return self.train_count

    def validate_objective(self, obj: Objective):
        missing = [m for m in obj.modalities if m not in self.modalities]
        if missing:
            raise ValueError(f"objective {obj} needs modalities {missing} "
                             f"absent from dataset {self.name!r} {self.modalities}")
        if obj.kind in ("SCE", "BCE") and not any(m in GENERATORS for m in self.modalities):
            raise ValueError(f"dataset {self.name!r} has no input modality to classify")

    def split_range(self, split: str) -> range:
        # disjoint index ranges stand in for near-domain filtering
        if split == "train":
            return range(0, self.train_count)
        if split == "eval":
            return range(self.train_count, self.train_count + self.eval_count)
        raise ValueError(f"unknown split {split!r}")


@dataclass
class SynthExample:
    index: int
    label: int
    samples: dict

    @property
    def caption(self) -> np.ndarray | None:
        s = self.samples.get("text")
        return None if s is None else s.payload


def example_class(spec: DatasetSpec, index: int) -> int:
    rng = stream(spec.synth.seed, spec.name, index, "class")
    return int(rng.integers(spec.synth.num_classes))


def generate(spec: DatasetSpec, split: str, i: int) -> SynthExample:
    """The ``i``-th example of ``split``."""
    rng_split = spec.split_range(split)
    if not 0 <= i < len(rng_split):
        raise IndexError(f"{spec.name}/{split} has {len(rng_split)} examples, asked for {i}")
    index = rng_split[i]
    cfg = spec.synth
    c = example_class(spec, index)
    latent = Latent.draw(stream(cfg.seed, spec.name, index, "latent"))
    samples = {}
    for m in spec.modalities:
        if m == "text":
            samples[m] = RawSample("text", gen_caption(c, cfg))
        else:
            samples[m] = GENERATORS[m](c, latent, cfg, stream(cfg.seed, spec.name, index, m))
    return SynthExample(index, c, samples)


def generate_batch(spec: DatasetSpec, split: str, indices: Iterable[int]) -> dict:
    """Stack payloads per modality; labels under ``"label"``."""
    exs = [generate(spec, split, int(i)) for i in indices]
    out = {m: np.stack([e.samples[m].payload for e in exs]) for m in spec.modalities}
    out["label"] = np.asarray([e.label for e in exs], dtype=np.int64)
    return out


# ---------------------------------------------------------------------------
# shard format
#
# file   := MAGIC u32:version u64:count record*
# record := u64:body_len body u32:crc32(body)
# body   := u32:header_len header_json payload*
# Payloads are little-endian in header order.

MAGIC = b"IMPSHRD1"
VERSION = 1


class ShardError(ValueError):
    pass


def _encode_record(ex: SynthExample) -> bytes:
    meta, payloads = [], []
    for m in sorted(ex.samples):
        arr = np.ascontiguousarray(ex.samples[m].payload)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        meta.append({"modality": m, "dtype": le.dtype.str, "shape": list(arr.shape)})
        payloads.append(le.tobytes())
    header = json.dumps({"index": ex.index, "label": ex.label, "fields": meta},
                        sort_keys=True).encode()
    return struct.pack("<I", len(header)) + header + b"".join(payloads)


def write_shard(examples: Iterable[SynthExample], path) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = [_encode_record(e) for e in examples]
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<IQ", VERSION, len(records)))
        for body in records:
            f.write(struct.pack("<Q", len(body)) + body + struct.pack("<I", zlib.crc32(body)))
    tmp.replace(path)
    return len(records)


def _take(buf: memoryview, pos: int, n: int, what: str) -> tuple[memoryview, int]:
    if pos + n > len(buf):
        raise ShardError(f"truncated shard while reading {what}")
    return buf[pos:pos + n], pos + n


def read_shard(path) -> list[SynthExample]:
    buf = memoryview(Path(path).read_bytes())
    head, pos = _take(buf, 0, len(MAGIC) + 12, "file header")
    if bytes(head[:len(MAGIC)]) != MAGIC:
        raise ShardError(f"{path}: not a shard file")
    version, count = struct.unpack("<IQ", head[len(MAGIC):])
    if version != VERSION:
        raise ShardError(f"{path}: shard version {version}, expected {VERSION}")
    out = []
    for r in range(count):
        raw, pos = _take(buf, pos, 8, f"record {r} length")
        (n,) = struct.unpack("<Q", raw)
        body, pos = _take(buf, pos, n, f"record {r}")
        raw, pos = _take(buf, pos, 4, f"record {r} checksum")
        if struct.unpack("<I", raw)[0] != zlib.crc32(body):
            raise ShardError(f"{path}: checksum mismatch in record {r}")
        (hl,) = struct.unpack("<I", body[:4])
        header = json.loads(bytes(body[4:4 + hl]))
        off = 4 + hl
        samples = {}
        for fld in header["fields"]:
            dt = np.dtype(fld["dtype"])
            size = dt.itemsize * int(np.prod(fld["shape"]))
            arr = np.frombuffer(body[off:off + size], dtype=dt).reshape(fld["shape"])
            samples[fld["modality"]] = RawSample(fld["modality"], arr.astype(dt.newbyteorder("=")))
            off += size
        out.append(SynthExample(header["index"], header["label"], samples))
    if pos != len(buf):
        raise ShardError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


# ---------------------------------------------------------------------------
# registry

class Registry:
    def __init__(self, specs: Iterable[DatasetSpec] = ()):
        self._specs: dict[str, DatasetSpec] = {}
        for s in specs:
            self.register(s)

    def register(self, spec: DatasetSpec):
        if spec.name in self._specs:
            raise ValueError(f"dataset {spec.name!r} registered twice")
        self._specs[spec.name] = spec

    def lookup(self, name: str) -> DatasetSpec:
        try:
            return self._specs[name]
        except KeyError:
            raise KeyError(f"unknown dataset {name!r}; registered: {sorted(self._specs)}") from None

    def names(self) -> list[str]:
        return list(self._specs)

    def __len__(self):
        return len(self._specs)

    def decode_caption(self, name: str, ids) -> int:
        c = label_text_decode(ids)
        if c >= self.lookup(name).synth.num_classes:
            raise ValueError(f"caption decodes to class {c}, outside dataset {name!r}")
        return c


def materialize(spec: DatasetSpec, out_dir, split: str = "train") -> Path:
    path = Path(out_dir) / f"{spec.name}-{split}.shard"
    n = len(spec.split_range(split))
    write_shard((generate(spec, split, i) for i in range(n)), path)
    return path


class ShardSource:
    """Serves batches from materialized shards, loading each split once."""

    def __init__(self, root):
        self.root = Path(root)
        self._cache: dict = {}

    def _load(self, spec: DatasetSpec, split: str) -> list[SynthExample]:
        key = (spec.name, split)
        if key not in self._cache:
            path = self.root / f"{spec.name}-{split}.shard"
            if not path.exists():
                raise FileNotFoundError(f"missing shard {path}; run gen-data first")
            exs = read_shard(path)
            want = len(spec.split_range(split))
            if len(exs) != want:
                raise ShardError(f"{path} holds {len(exs)} records, dataset declares {want}")
            self._cache[key] = exs
        return self._cache[key]

    def batch(self, spec: DatasetSpec, split: str, indices) -> dict:
        exs = self._load(spec, split)
        picked = [exs[int(i)] for i in indices]
        out = {m: np.stack([e.samples[m].payload for e in picked]) for m in spec.modalities}
        out["label"] = np.asarray([e.label for e in picked], dtype=np.int64)
        return out
