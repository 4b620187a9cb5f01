"""Whole-model parameters and the embed -> encode -> head pipeline."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .embedder import MODALITIES, EmbedConfig, TokenBatch, embed, init_embed_params
from .moe import EncoderConfig, RoutingMonitor, encoder_forward, init_encoder_params
from .objectives import (init_classifier_head, init_projection_head, init_temperature,
                         pool_and_project, TEMPERATURE_INIT)


@dataclass
class ModelConfig:
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    towers: str = "single"
    temperature_init: float = TEMPERATURE_INIT

    def __post_init__(self):
        if self.towers not in ("single", "multi"):
            raise ValueError(f"towers must be 'single' or 'multi', got {self.towers!r}")
        if self.embed.dim != self.encoder.dim:
            raise ValueError(f"embedding width {self.embed.dim} != encoder width {self.encoder.dim}")

    def tower(self, modality: str) -> int | None:
        return None if self.towers == "single" else MODALITIES.index(modality)


def head_names(datasets) -> tuple[set, set, bool]:
    """(projection modalities, classifier datasets, needs temperature)."""
    proj, cls = set(), set()
    for ds in datasets:
        for obj in ds.objectives:
            if obj.is_contrastive:
                proj.update(obj.modalities)
            else:
                cls.add(ds.name)
    return proj, cls, bool(proj)


def input_modality(ds) -> str:
    """The modality classified by SCE/BCE and resized by input variants."""
    for m in ("video", "image", "spectrogram", "waveform"):
        if m in ds.modalities:
            return m
    raise ValueError(f"dataset {ds.name!r} has no non-text modality")


def init_model(cfg: ModelConfig, datasets, seed: int) -> T.ParamTree:
    params = T.ParamTree()
    params.update(init_embed_params(cfg.embed, np.random.default_rng([seed, 1])))
    if cfg.towers == "single":
        params.update(init_encoder_params(cfg.encoder, seed))
    else:
        used = sorted({m for ds in datasets for m in ds.modalities}, key=MODALITIES.index)
        for m in used:
            params.update(init_encoder_params(cfg.encoder, seed, tower=cfg.tower(m)))
    proj, cls, temp = head_names(datasets)
    d = cfg.encoder.dim
    for m in sorted(proj):
        params.update(init_projection_head(m, d, np.random.default_rng([seed, 2, zlib.crc32(m.encode())])))
    for ds in datasets:
        if ds.name in cls:
            rng = np.random.default_rng([seed, 3, zlib.crc32(ds.name.encode())])
            params.update(init_classifier_head(ds.name, d, ds.synth.num_classes, rng))
    if temp:
        params.update(init_temperature(cfg.temperature_init))
    return params


def embed_inputs(modality: str, payload: np.ndarray, params, cfg: ModelConfig) -> TokenBatch:
    return embed(modality, payload, params, cfg.embed)


def encode_tokens(tb: TokenBatch, params, cfg: ModelConfig,
                  monitor: RoutingMonitor | None = None) -> T.Tensor:
    return encoder_forward(tb.tokens, params, cfg.encoder, monitor=monitor,
                           tower=cfg.tower(tb.modality))


def pooled_features(modality: str, payload: np.ndarray, params, cfg: ModelConfig,
                    batch_size: int = 64) -> np.ndarray:
    """Frozen mean-pooled encoder features, computed in chunks without a tape."""
    out = []
    with T.no_grad():
        for i in range(0, len(payload), batch_size):
            tb = embed_inputs(modality, payload[i:i + batch_size], params, cfg)
            out.append(T.mean_pool(encode_tokens(tb, params, cfg), axis=1).data)
    return np.concatenate(out).astype(np.float64)


def projected_embeddings(modality: str, payload: np.ndarray, params, cfg: ModelConfig,
                         batch_size: int = 64) -> np.ndarray:
    """Unit-norm embeddings in the shared contrastive space."""
    out = []
    with T.no_grad():
        for i in range(0, len(payload), batch_size):
            tb = embed_inputs(modality, payload[i:i + batch_size], params, cfg)
            out.append(pool_and_project(encode_tokens(tb, params, cfg), params, modality).data)
    return np.concatenate(out).astype(np.float64)
