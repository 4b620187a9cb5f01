"""Output heads and losses: softmax / sigmoid cross-entropy and contrastive NCE."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T

TEMPERATURE_INIT = 0.07
TEMPERATURE_MIN = 0.01


@dataclass(frozen=True)
class Objective:
    """One of SCE, BCE, NCE_pair(a, b) or NCE_triplet(video, audio, text)."""
    kind: str
    modalities: tuple = ()

    def __post_init__(self):
        if self.kind not in ("SCE", "BCE", "NCE_pair", "NCE_triplet"):
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.kind == "NCE_pair" and len(self.modalities) != 2:
            raise ValueError("NCE_pair needs exactly two modalities")
        if self.kind == "NCE_triplet" and len(self.modalities) != 3:
            raise ValueError("NCE_triplet needs (video, audio, text) modalities")

    @property
    def is_contrastive(self) -> bool:
        return self.kind.startswith("NCE")

    def __str__(self) -> str:
        if self.modalities:
            return f"{self.kind}({','.join(self.modalities)})"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "Objective":
        m = re.fullmatch(r"\s*(\w+)\s*(?:\(([^)]*)\))?\s*", text)
        if not m:
            raise ValueError(f"cannot parse objective {text!r}")
        mods = tuple(s.strip() for s in m.group(2).split(",")) if m.group(2) else ()
        return cls(m.group(1), mods)


# ---------------------------------------------------------------------------
# heads

def init_projection_head(name: str, dim: int, rng: np.random.Generator) -> dict:
    s = 1.0 / math.sqrt(dim)
    return {
        f"heads/proj_{name}/w1": T.Tensor(rng.standard_normal((dim, dim)) * s, requires_grad=True),
        f"heads/proj_{name}/b1": T.Tensor(np.zeros(dim), requires_grad=True),
        f"heads/proj_{name}/w2": T.Tensor(rng.standard_normal((dim, dim)) * s, requires_grad=True),
        f"heads/proj_{name}/b2": T.Tensor(np.zeros(dim), requires_grad=True),
    }


def init_classifier_head(dataset: str, dim: int, num_classes: int,
                         rng: np.random.Generator) -> dict:
    return {
        f"heads/cls_{dataset}/w": T.Tensor(rng.standard_normal((dim, num_classes)) * 0.02,
                                           requires_grad=True),
        f"heads/cls_{dataset}/b": T.Tensor(np.zeros(num_classes), requires_grad=True),
    }


def init_temperature(tau: float = TEMPERATURE_INIT) -> dict:
    # stored as log(1 / tau), the CLIP logit-scale parameterisation
    return {"heads/log_inv_temp": T.Tensor(math.log(1.0 / tau), requires_grad=True)}


def temperature_value(log_inv_temp) -> float:
    v = float(np.asarray(log_inv_temp.data if isinstance(log_inv_temp, T.Tensor) else log_inv_temp))
    return max(math.exp(-v), TEMPERATURE_MIN)


def project(pooled: T.Tensor, params: dict, name: str) -> T.Tensor:
    p = f"heads/proj_{name}"
    h = T.gelu(T.add(T.matmul(pooled, params[f"{p}/w1"]), params[f"{p}/b1"]))
    z = T.add(T.matmul(h, params[f"{p}/w2"]), params[f"{p}/b2"])
    return T.l2_normalize(z, axis=-1)


def pool_and_project(encoded: T.Tensor, params: dict, name: str) -> T.Tensor:
    """Global average pool over the sequence, GeLU projection, unit-normalise."""
    return project(T.mean_pool(encoded, axis=1), params, name)


def classify(pooled: T.Tensor, params: dict, dataset: str) -> T.Tensor:
    p = f"heads/cls_{dataset}"
    return T.add(T.matmul(pooled, params[f"{p}/w"]), params[f"{p}/b"])


# ---------------------------------------------------------------------------
# losses

def sce_loss(logits: T.Tensor, labels) -> T.Tensor:
    """Mean of -log softmax(logits)[label]."""
    b, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != b:
        raise ValueError(f"{labels.shape[0]} labels for batch of {b}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range for {c} classes")
    logp = T.reshape(T.log_softmax(logits, axis=-1), (b * c,))
    picked = T.gather_rows(logp, np.arange(b) * c + labels)
    return T.scale(T.mean(picked), -1.0)


def bce_loss(logits: T.Tensor, multi_labels) -> T.Tensor:
    y = np.asarray(multi_labels)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("multi-label targets must be 0/1")
    return T.mean(T.sigmoid_cross_entropy(logits, y))


def _inv_temp(temp) -> T.Tensor | float:
    if isinstance(temp, T.Tensor):
        # temp holds log(1 / tau); clamp so tau >= TEMPERATURE_MIN
        return T.exp(T.clip(temp, -1e9, math.log(1.0 / TEMPERATURE_MIN)))
    if temp <= 0:
        raise ValueError("temperature must be positive")
    return 1.0 / max(float(temp), TEMPERATURE_MIN)


def nce_pair_loss(za: T.Tensor, zb: T.Tensor, temp) -> T.Tensor:
    """Symmetric InfoNCE with matched rows as positives.

    ``temp`` is either a float temperature or a tensor holding log(1/tau).
    """
    if za.shape[0] == 0:
        raise ValueError("empty batch")
    if za.shape != zb.shape:
        raise ValueError(f"embedding shapes differ: {za.shape} vs {zb.shape}")
    b = za.shape[0]
    sim = T.matmul(za, T.swap_last(zb))
    inv = _inv_temp(temp)
    logits = T.mul(sim, inv) if isinstance(inv, T.Tensor) else T.scale(sim, inv)
    diag = np.arange(b)
    return T.scale(T.add(sce_loss(logits, diag), sce_loss(T.swap_last(logits), diag)), 0.5)


def nce_triplet_loss(zv: T.Tensor, za: T.Tensor, zt: T.Tensor, temp) -> T.Tensor:
    """Video-anchored triplet: pair(video, audio) + pair(video, text)."""
    return T.add(nce_pair_loss(zv, za, temp), nce_pair_loss(zv, zt, temp))


# ---------------------------------------------------------------------------
# label text

TEMPLATES = {"default": (1, 2, 3), "none": ()}
_NAME_BASE, _NAME_SPAN, _NAME_HIGH = 32, 240, 272


def label_text_encode(class_id: int, template: str = "default", num_classes: int | None = None,
                      vocab_size: int = 512) -> np.ndarray:
    """Deterministic token ids for a class name under a fixed template."""
    if class_id < 0 or (num_classes is not None and class_id >= num_classes):
        raise ValueError(f"unknown class {class_id}")
    if template not in TEMPLATES:
        raise ValueError(f"unknown template {template!r}")
    hi = _NAME_HIGH + class_id // _NAME_SPAN
    if hi >= vocab_size:
        raise ValueError(f"class {class_id} does not fit the {vocab_size}-entry vocabulary")
    name = (_NAME_BASE + class_id % _NAME_SPAN, hi)
    return np.asarray(TEMPLATES[template] + name, dtype=np.int64)


def label_text_decode(ids, template: str = "default") -> int:
    ids = tuple(int(i) for i in ids)
    prefix = TEMPLATES[template]
    if ids[: len(prefix)] != prefix or len(ids) != len(prefix) + 2:
        raise ValueError(f"token ids {ids} are not a {template!r} label caption")
    lo, hi = ids[len(prefix):]
    return (lo - _NAME_BASE) + _NAME_SPAN * (hi - _NAME_HIGH)
