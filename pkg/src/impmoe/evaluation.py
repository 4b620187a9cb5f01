"""Zero-shot classification, cross-modal retrieval and linear probing."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ModelConfig, input_modality, pooled_features, projected_embeddings
from .synth import DatasetSpec, gen_caption, generate_batch


def zero_shot_accuracy(z_inputs: np.ndarray, labels: np.ndarray, z_classes: np.ndarray) -> float:
    """Nearest class-caption embedding by cosine similarity."""
    pred = np.argmax(z_inputs @ z_classes.T, axis=1)
    return float(np.mean(pred == labels))


def recall_at_1(z_query: np.ndarray, z_gallery: np.ndarray, q_labels: np.ndarray,
                g_labels: np.ndarray) -> float:
    """Top-1 retrieval counts as a hit when the retrieved caption matches the query's.

    Captions are class names, so two items share a caption exactly when they
    share a class.
    """
    top = np.argmax(z_query @ z_gallery.T, axis=1)
    return float(np.mean(g_labels[top] == q_labels))


def standardize(train: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu, sd = train.mean(0), train.std(0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (train - mu) / sd, (test - mu) / sd


def linear_probe(x_train: np.ndarray, y_train: np.ndarray, x_test: np.ndarray,
                 y_test: np.ndarray, num_classes: int, iters: int = 500,
                 lr: float = 0.1) -> float:
    """Multinomial logistic regression by full-batch gradient descent."""
    xtr, xte = standardize(np.asarray(x_train, np.float64), np.asarray(x_test, np.float64))
    n, d = xtr.shape
    w = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y_train]
    for _ in range(iters):
        logits = xtr @ w + b
        logits -= logits.max(1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (xtr.T @ g)
        b -= lr * g.sum(0)
    return float(np.mean(np.argmax(xte @ w + b, axis=1) == y_test))


@dataclass
class EvalReport:
    config_hash: str
    checkpoint: str
    step: int
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        for ds, vals in self.metrics.items():
            for k, v in vals.items():
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{ds}/{k}={v} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


def _contrastive_pair(spec: DatasetSpec, params) -> str | None:
    vm = input_modality(spec)
    if "text" in spec.modalities and f"heads/proj_{vm}/w1" in params \
            and "heads/proj_text/w1" in params:
        return vm
    return None


def evaluate_dataset(spec: DatasetSpec, params, model: ModelConfig, probe_iters: int = 500,
                     probe_lr: float = 0.1, max_examples: int | None = None) -> dict:
    n_eval = spec.eval_count if max_examples is None else min(max_examples, spec.eval_count)
    if n_eval == 0:
        raise ValueError(f"dataset {spec.name!r} has no eval split")
    vm = input_modality(spec)
    ev = generate_batch(spec, "eval", range(n_eval))
    out = {}
    vm_c = _contrastive_pair(spec, params)
    if vm_c is not None:
        zi = projected_embeddings(vm, ev[vm], params, model)
        zt = projected_embeddings("text", ev["text"], params, model)
        caps = np.stack([gen_caption(c, spec.synth) for c in range(spec.synth.num_classes)])
        zc = projected_embeddings("text", caps, params, model)
        out["zero_shot"] = zero_shot_accuracy(zi, ev["label"], zc)
        out["i2t_recall@1"] = recall_at_1(zi, zt, ev["label"], ev["label"])
        out["t2i_recall@1"] = recall_at_1(zt, zi, ev["label"], ev["label"])
    n_train = spec.train_count if max_examples is None else min(max_examples, spec.train_count)
    tr = generate_batch(spec, "train", range(n_train))
    ftr = pooled_features(vm, tr[vm], params, model)
    fte = pooled_features(vm, ev[vm], params, model)
    out["linear_probe"] = linear_probe(ftr, tr["label"], fte, ev["label"],
                                       spec.synth.num_classes, probe_iters, probe_lr)
    return out
