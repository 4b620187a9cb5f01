"""Run configuration: dataclasses, YAML loading and up-front validation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .embedder import EmbedConfig, PatchKernel, kept_count
from .model import ModelConfig, input_modality
from .moe import EncoderConfig
from .scheduler import MODES, AdamConfig, LRSchedule, make_variants
from .synth import DatasetSpec, SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    peak: float = 1e-3
    warmup: int | None = None
    floor: float = 0.0


@dataclass
class DatasetConfig:
    name: str
    modalities: list
    train_count: int
    eval_count: int = 256
    objectives: list = field(default_factory=list)
    batch_size: int | None = None
    synth: dict = field(default_factory=dict)


@dataclass
class EvalConfig:
    datasets: list | None = None
    probe_iters: int = 500
    probe_lr: float = 0.1
    max_examples: int | None = None


@dataclass
class RunConfig:
    datasets: list
    seed: int = 0
    precision: int = 32
    mode: str = "alternating"
    steps: int = 2000
    batch_size: int = 32
    multi_resolution: bool = True
    checkpoint_every: int = 0
    out_dir: str = "runs/default"
    data_dir: str | None = None
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    towers: str = "single"
    temperature_init: float = 0.07
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # -- derived objects ------------------------------------------------------

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.embed, self.encoder, self.towers, self.temperature_init)

    def lr_schedule(self) -> LRSchedule:
        return LRSchedule(self.schedule.peak, self.steps, self.schedule.warmup, self.schedule.floor)

    def dataset_specs(self) -> list[DatasetSpec]:
        base = dataclasses.asdict(self.synth)
        out = []
        for d in self.datasets:
            synth = SynthConfig(**{**base, **d.synth})
            out.append(DatasetSpec(d.name, tuple(d.modalities), d.train_count, d.eval_count,
                                   tuple(d.objectives), synth))
        return out

    def batch_sizes(self) -> dict:
        return {d.name: d.batch_size or self.batch_size for d in self.datasets}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# loading

def _build(cls, data, where: str):
    if cls is PatchKernel and isinstance(data, (list, tuple)):
        return PatchKernel(*data)
    if dataclasses.is_dataclass(cls):
        if isinstance(data, cls):
            return data
        if not isinstance(data, dict):
            raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
        hints = typing.get_type_hints(cls)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{where}: unknown keys {unknown}; allowed {sorted(known)}")
        kwargs = {k: _build(hints[k], v, f"{where}.{k}") for k, v in data.items()}
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(f"{where}: {e}") from None
        except ValueError as e:
            raise ConfigError(f"{where}: {e}") from None
    origin = typing.get_origin(cls)
    if cls is list or origin is list:
        return list(data)
    if cls is tuple or origin is tuple:
        return tuple(data)
    return data


def _coerce(cfg: RunConfig) -> RunConfig:
    cfg.datasets = [_build(DatasetConfig, d, f"datasets[{i}]") for i, d in enumerate(cfg.datasets)]
    cfg.embed.spec_buckets = tuple(cfg.embed.spec_buckets)
    return cfg


def from_dict(data: dict) -> RunConfig:
    if "datasets" not in data:
        raise ConfigError("config needs a 'datasets' list")
    cfg = _coerce(_build(RunConfig, data, "config"))
    validate(cfg)
    return cfg


def load(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    data = yaml.safe_load(path.read_text()) or {}
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return from_dict(data)


# ---------------------------------------------------------------------------
# validation

def validate(cfg: RunConfig) -> None:
    """Check every cross-reference before any compute happens."""
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {cfg.mode!r}")
    if cfg.precision not in (32, 64):
        raise ConfigError("precision must be 32 or 64")
    if cfg.steps < 1:
        raise ConfigError("steps must be >= 1")
    if not cfg.datasets:
        raise ConfigError("at least one dataset is required")
    names = [d.name for d in cfg.datasets]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate dataset names in {names}")
    try:
        model = cfg.model_config()
        specs = cfg.dataset_specs()
        cfg.lr_schedule()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    for spec in specs:
        if not spec.objectives:
            raise ConfigError(f"dataset {spec.name!r} lists no objectives")
        _check_geometry(spec, model.embed, cfg)
        _check_routing(spec, model, cfg)
    ev = cfg.eval.datasets or []
    missing = [n for n in ev if n not in names]
    if missing:
        raise ConfigError(f"eval references unknown datasets {missing}; known {names}")


def _check_geometry(spec: DatasetSpec, e: EmbedConfig, cfg: RunConfig):
    s, k = spec.synth, e.kernel
    where = f"dataset {spec.name!r}"
    mods = set(spec.modalities)
    if mods & {"image", "video"}:
        scale = 2 if cfg.multi_resolution and "video" not in mods else 1
        if s.image_size % k.h or s.image_size % k.w:
            raise ConfigError(f"{where}: image size {s.image_size} not divisible by "
                              f"kernel {k.h}x{k.w}")
        if scale * s.image_size // k.h > e.spatial_buckets:
            raise ConfigError(f"{where}: {scale * s.image_size // k.h} patches per side exceed "
                              f"{e.spatial_buckets} spatial buckets")
    if "video" in mods:
        if s.video_frames % k.f:
            raise ConfigError(f"{where}: {s.video_frames} frames not divisible by {k.f}")
        if s.video_frames // k.f > e.temporal_buckets:
            raise ConfigError(f"{where}: {s.video_frames // k.f} frame tokens exceed "
                              f"{e.temporal_buckets} temporal buckets")
    if "spectrogram" in mods:
        n = s.spec_size // e.spec_kernel
        if s.spec_size % e.spec_kernel:
            raise ConfigError(f"{where}: spectrogram {s.spec_size} not divisible by "
                              f"{e.spec_kernel}")
        if n > min(e.spec_buckets):
            raise ConfigError(f"{where}: {n} spectrogram patches exceed buckets {e.spec_buckets}")
    if "waveform" in mods and s.wave_len % e.wave_kernel:
        raise ConfigError(f"{where}: waveform length {s.wave_len} not divisible by "
                          f"{e.wave_kernel}")
    if "text" in mods and e.text_max_len < 5:
        raise ConfigError(f"{where}: text_max_len {e.text_max_len} shorter than captions")
    if s.num_classes > 240 * (e.vocab_size - 272):
        raise ConfigError(f"{where}: {s.num_classes} classes overflow the vocabulary")


def _check_routing(spec: DatasetSpec, model: ModelConfig, cfg: RunConfig):
    enc = model.encoder
    if enc.router_kind != "expert_choice" or enc.num_moe_layers == 0:
        return
    fam = input_modality(spec)
    b = cfg.batch_sizes()[spec.name]
    s = spec.synth
    res = {"video": (s.video_frames, s.image_size, s.image_size),
           "image": (s.image_size, s.image_size)}.get(fam)
    try:
        variants = make_variants(fam, b, res or (), model.embed.kernel, cfg.multi_resolution)
    except ValueError as e:
        raise ConfigError(f"dataset {spec.name!r}: {e}") from None
    k = model.embed.kernel
    for v in variants:
        if fam == "video":
            f, h, w = v.resolution
            seq = (f // k.f) * (h // k.h) * (w // k.w)
        elif fam == "image":
            seq = (v.resolution[0] // k.h) * (v.resolution[1] // k.w)
        else:
            continue
        total = v.batch_size * kept_count(seq, v.drop_ratio)
        if int(enc.capacity_factor * total / enc.num_experts) < 1:
            raise ConfigError(f"dataset {spec.name!r} variant {v.name}: {total} tokens give "
                              f"experts zero capacity")
