"""Modality embedders: raw arrays -> token sequences of width D.

Vision inputs are cut into f x h x w x 3 voxels (images are tiled f times
along time first), spectrograms into 16 x 16 patches, waveforms into
256-sample windows and text is a table lookup. Positional encodings are
learned per axis; spatial axes use the dilated lookup so that a grid with P
patches indexes a table of B buckets at stride B / P.

Token order is row-major everywhere: time, then height, then width.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

MODALITIES = ("video", "image", "spectrogram", "waveform", "text")
VISION = ("video", "image")


@dataclass(frozen=True)
class PatchKernel:
    f: int = 4
    h: int = 16
    w: int = 16


@dataclass
class EmbedConfig:
    dim: int = 64
    kernel: PatchKernel = field(default_factory=PatchKernel)
    spec_kernel: int = 16
    wave_kernel: int = 256
    wave_max_tokens: int = 256
    vocab_size: int = 512
    text_max_len: int = 16
    temporal_buckets: int = 4
    spatial_buckets: int = 8
    spec_buckets: tuple = (8, 8)
    init_std: float = 0.02


@dataclass
class RawSample:
    modality: str
    payload: np.ndarray
    label: int | None = None
    caption: np.ndarray | None = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}; expected one of {MODALITIES}")
        self.payload = np.asarray(self.payload)
        expected = {"video": 4, "image": 3, "spectrogram": 2, "waveform": 1, "text": 1}[self.modality]
        if self.payload.ndim != expected:
            raise ValueError(f"{self.modality} payload must be rank {expected}, "
                             f"got shape {self.payload.shape}")
        if self.payload.size == 0 or min(self.payload.shape) <= 0:
            raise ValueError(f"{self.modality} payload has an empty dimension: {self.payload.shape}")


@dataclass
class TokenBatch:
    """Embedded tokens [B, S, D] plus the (B, T_F, T_H, T_W) factorisation."""
    tokens: T.Tensor
    modality: str
    budget: tuple
    kept_indices: np.ndarray | None = None

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    @property
    def tokens_per_batch(self) -> int:
        return self.tokens.shape[0] * self.tokens.shape[1]


def init_embed_params(cfg: EmbedConfig, rng: np.random.Generator) -> dict:
    k, d, std = cfg.kernel, cfg.dim, cfg.init_std
    voxel = k.f * k.h * k.w * 3

    def normal(*shape, s=std):
        return T.Tensor(rng.standard_normal(shape) * s, requires_grad=True)

    def zeros(*shape):
        return T.Tensor(np.zeros(shape), requires_grad=True)

    return {
        "embed/vision/w": normal(voxel, d, s=1.0 / math.sqrt(voxel)),
        "embed/vision/b": zeros(d),
        "embed/spectrogram/w": normal(cfg.spec_kernel ** 2, d, s=1.0 / cfg.spec_kernel),
        "embed/spectrogram/b": zeros(d),
        "embed/waveform/w": normal(cfg.wave_kernel, d, s=1.0 / math.sqrt(cfg.wave_kernel)),
        "embed/waveform/b": zeros(d),
        "embed/text/table": normal(cfg.vocab_size, d, s=1.0),
        "pos/temporal": normal(cfg.temporal_buckets, d),
        "pos/height": normal(cfg.spatial_buckets, d),
        "pos/width": normal(cfg.spatial_buckets, d),
        "pos/spec_freq": normal(cfg.spec_buckets[0], d),
        "pos/spec_time": normal(cfg.spec_buckets[1], d),
        "pos/waveform": normal(cfg.wave_max_tokens, d),
        "pos/text": normal(cfg.text_max_len, d),
    }


def _batched(x, modality: str, rank: int) -> np.ndarray:
    if isinstance(x, RawSample):
        if x.modality != modality:
            raise ValueError(f"expected a {modality} sample, got {x.modality}")
        return x.payload[None]
    if isinstance(x, (list, tuple)):
        return np.stack([_batched(s, modality, rank)[0] for s in x])
    x = np.asarray(x)
    if x.ndim == rank:
        return x[None]
    if x.ndim != rank + 1:
        raise ValueError(f"{modality} input must be rank {rank} or batched rank {rank + 1}, "
                         f"got shape {x.shape}")
    return x


def _divides(extent: int, size: int, axis: str) -> int:
    if extent % size:
        raise ValueError(f"{axis} extent {extent} is not divisible by patch size {size}")
    return extent // size


def voxelize(videos: np.ndarray, kernel: PatchKernel):
    """[B, F, H, W, C] -> ([B, N, f*h*w*C] voxels, (T_F, T_H, T_W))."""
    b, nf, nh, nw, c = videos.shape
    tf = _divides(nf, kernel.f, "frame (F)")
    th = _divides(nh, kernel.h, "height (H)")
    tw = _divides(nw, kernel.w, "width (W)")
    v = videos.reshape(b, tf, kernel.f, th, kernel.h, tw, kernel.w, c)
    v = v.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return v.reshape(b, tf * th * tw, kernel.f * kernel.h * kernel.w * c), (tf, th, tw)


def _project(patches: np.ndarray, params: dict, name: str) -> T.Tensor:
    b, n, p = patches.shape
    x = T.Tensor(patches.reshape(b * n, p))
    y = T.add(T.matmul(x, params[f"embed/{name}/w"]), params[f"embed/{name}/b"])
    return T.reshape(y, (b, n, y.shape[-1]))


def patchify_video(sample, kernel: PatchKernel, params: dict) -> TokenBatch:
    videos = _batched(sample, "video", 4)
    patches, (tf, th, tw) = voxelize(videos, kernel)
    return TokenBatch(_project(patches, params, "vision"), "video", (videos.shape[0], tf, th, tw))


def tile_image(images: np.ndarray, f: int) -> np.ndarray:
    """[B, H, W, C] -> [B, f, H, W, C] by repeating the single frame."""
    return np.repeat(images[:, None], f, axis=1)


def patchify_image(sample, kernel: PatchKernel, params: dict) -> TokenBatch:
    images = _batched(sample, "image", 3)
    out = patchify_video(tile_image(images, kernel.f), kernel, params)
    out.modality = "image"
    return out


def patchify_spectrogram(sample, kernel: int, params: dict) -> TokenBatch:
    grids = _batched(sample, "spectrogram", 2)
    b, m, n = grids.shape
    th = _divides(m, kernel, "frequency")
    tw = _divides(n, kernel, "time")
    p = grids.reshape(b, th, kernel, tw, kernel).transpose(0, 1, 3, 2, 4)
    p = p.reshape(b, th * tw, kernel * kernel)
    return TokenBatch(_project(p, params, "spectrogram"), "spectrogram", (b, 1, th, tw))


def embed_waveform(sample, kernel: int, params: dict, max_tokens: int = 256) -> TokenBatch:
    waves = _batched(sample, "waveform", 1)
    waves = waves[:, : kernel * max_tokens]
    b, n = waves.shape
    if n == 0:
        raise ValueError("empty waveform")
    t = _divides(n, kernel, "waveform length")
    p = waves.reshape(b, t, kernel)
    return TokenBatch(_project(p, params, "waveform"), "waveform", (b, 1, 1, t))


def embed_text(sample, params: dict, max_len: int) -> TokenBatch:
    ids = _batched(sample, "text", 1).astype(np.int64)
    if ids.shape[1] == 0:
        raise ValueError("empty token sequence")
    ids = ids[:, :max_len]
    table = params["embed/text/table"]
    vocab = table.shape[0]
    if ids.min() < 0 or ids.max() >= vocab:
        raise ValueError(f"token id out of range for vocabulary of {vocab}")
    b, n = ids.shape
    rows = T.gather_rows(table, ids.reshape(-1))
    return TokenBatch(T.reshape(rows, (b, n, table.shape[1])), "text", (b, 1, 1, n))


# ---------------------------------------------------------------------------
# positions

def dilated_positions(buckets: int, patches: int) -> list:
    """Bucket indices for ``patches`` positions spread over ``buckets``.

    Stride is buckets / patches, so a half-resolution grid lands on every
    other bucket of the full-resolution table.
    """
    if patches < 1 or patches > buckets:
        raise ValueError(f"{patches} patches do not fit in {buckets} positional buckets")
    if buckets % patches:
        raise ValueError(f"{buckets} buckets not divisible by {patches} patches; "
                         "non-integer dilation is unsupported")
    s = buckets // patches
    return [i * s for i in range(patches)]


def _truncated(buckets: int, n: int, axis: str) -> np.ndarray:
    if n > buckets:
        raise ValueError(f"{axis}: {n} positions exceed {buckets} buckets")
    return np.arange(n)


@functools.lru_cache(maxsize=None)
def position_index(modality: str, grid: tuple, buckets: tuple) -> tuple:
    """Per-token bucket indices for each positional table, in token order.

    Returns a tuple of (table name, int array of length S) pairs. Cached, so
    each distinct grid is resolved once.
    """
    _, tf, th, tw = grid
    if modality in VISION:
        bt, bs = buckets
        t_idx = _truncated(bt, tf, "temporal")
        h_idx = np.asarray(dilated_positions(bs, th))
        w_idx = np.asarray(dilated_positions(bs, tw))
        tt, hh, ww = np.meshgrid(t_idx, h_idx, w_idx, indexing="ij")
        return (("pos/temporal", tt.reshape(-1)), ("pos/height", hh.reshape(-1)),
                ("pos/width", ww.reshape(-1)))
    if modality == "spectrogram":
        bf, bt = buckets
        f_idx = np.asarray(dilated_positions(bf, th))
        t_idx = np.asarray(dilated_positions(bt, tw))
        ff, tt = np.meshgrid(f_idx, t_idx, indexing="ij")
        return (("pos/spec_freq", ff.reshape(-1)), ("pos/spec_time", tt.reshape(-1)))
    if modality in ("waveform", "text"):
        return ((f"pos/{modality}", _truncated(buckets[0], tw, modality)),)
    raise ValueError(f"unknown modality {modality!r}")


def _buckets(modality: str, params: dict) -> tuple:
    if modality in VISION:
        return (params["pos/temporal"].shape[0], params["pos/height"].shape[0])
    if modality == "spectrogram":
        return (params["pos/spec_freq"].shape[0], params["pos/spec_time"].shape[0])
    return (params[f"pos/{modality}"].shape[0],)


def positional_sum(modality: str, grid: tuple, params: dict) -> T.Tensor:
    """[S, D] positional encoding for one example's token grid."""
    parts = position_index(modality, tuple(grid), _buckets(modality, params))
    out = None
    for name, idx in parts:
        rows = T.gather_rows(params[name], idx)
        out = rows if out is None else T.add(out, rows)
    return out


def apply_positions(batch: TokenBatch, params: dict) -> TokenBatch:
    if batch.kept_indices is not None:
        raise ValueError("positions must be applied before DropToken")
    pos = positional_sum(batch.modality, batch.budget, params)
    return TokenBatch(T.add(batch.tokens, pos), batch.modality, batch.budget)


def kept_count(seq_len: int, ratio: float) -> int:
    # round first so 0.25 * 1024 stays 256 under float error
    return max(1, math.ceil(round((1.0 - ratio) * seq_len, 9)))


def drop_token(batch: TokenBatch, ratio: float, rng: np.random.Generator) -> TokenBatch:
    """Keep a uniformly random, order-preserving subset of ceil((1-d)*S) tokens per example."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"DropToken ratio must be in [0, 1), got {ratio}")
    b, s, d = batch.tokens.shape
    if ratio == 0.0:
        kept = np.tile(np.arange(s), (b, 1))
        return TokenBatch(batch.tokens, batch.modality, batch.budget, kept)
    n = kept_count(s, ratio)
    kept = np.stack([np.sort(rng.choice(s, size=n, replace=False)) for _ in range(b)])
    flat = (kept + s * np.arange(b)[:, None]).reshape(-1)
    rows = T.gather_rows(T.reshape(batch.tokens, (b * s, d)), flat)
    return TokenBatch(T.reshape(rows, (b, n, d)), batch.modality, batch.budget, kept)


def embed(modality: str, payload: np.ndarray, params: dict, cfg: EmbedConfig) -> TokenBatch:
    """Embed a batched payload and add positions (no DropToken)."""
    if modality == "video":
        tb = patchify_video(payload, cfg.kernel, params)
    elif modality == "image":
        tb = patchify_image(payload, cfg.kernel, params)
    elif modality == "spectrogram":
        tb = patchify_spectrogram(payload, cfg.spec_kernel, params)
    elif modality == "waveform":
        tb = embed_waveform(payload, cfg.wave_kernel, params, cfg.wave_max_tokens)
    elif modality == "text":
        tb = embed_text(payload, params, cfg.text_max_len)
    else:
        raise ValueError(f"unknown modality {modality!r}")
    return apply_positions(tb, params)


def token_grid(modality: str, shape: tuple, cfg: EmbedConfig) -> tuple:
    """(T_F, T_H, T_W) for one unbatched payload shape, without embedding it."""
    k = cfg.kernel
    if modality == "video":
        f, h, w = shape[:3]
        return (_divides(f, k.f, "frame (F)"), _divides(h, k.h, "height (H)"),
                _divides(w, k.w, "width (W)"))
    if modality == "image":
        h, w = shape[:2]
        return (1, _divides(h, k.h, "height (H)"), _divides(w, k.w, "width (W)"))
    if modality == "spectrogram":
        return (1, _divides(shape[0], cfg.spec_kernel, "frequency"),
                _divides(shape[1], cfg.spec_kernel, "time"))
    if modality == "waveform":
        n = min(shape[0], cfg.wave_kernel * cfg.wave_max_tokens)
        return (1, 1, _divides(n, cfg.wave_kernel, "waveform length"))
    if modality == "text":
        return (1, 1, min(shape[0], cfg.text_max_len))
    raise ValueError(f"unknown modality {modality!r}")
