"""Alternating gradient descent over (dataset, objective, input variant) tasks.

Each step samples one task with probability proportional to its dataset size,
draws one of the dataset's input variants uniformly, and takes a single Adam
step on that task's loss alone. Structurally identical steps share a cached
plan keyed by :class:`TaskSignature`.
"""
from __future__ import annotations

import json
import math
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .embedder import PatchKernel, drop_token, kept_count
from .model import ModelConfig, embed_inputs, encode_tokens, input_modality
from .moe import RoutingMonitor
from .objectives import (Objective, bce_loss, classify, nce_pair_loss, nce_triplet_loss,
                         pool_and_project, sce_loss)

MODES = ("alternating", "summed", "accumulated")


class DivergenceError(RuntimeError):
    """Non-finite loss; carries the offending step and task."""

    def __init__(self, step: int, task: str, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step} (task {task})")
        self.step, self.task, self.loss = step, task, loss


# ---------------------------------------------------------------------------
# input variants

@dataclass(frozen=True)
class InputVariant:
    name: str
    batch_size: int
    resolution: tuple
    drop_ratio: float = 0.0


def variant_tokens(v: InputVariant, family: str, kernel: PatchKernel) -> int:
    """Tokens per batch after DropToken."""
    if family == "video":
        f, h, w = v.resolution
        s = (f // kernel.f) * (h // kernel.h) * (w // kernel.w)
    elif family == "image":
        h, w = v.resolution
        s = (h // kernel.h) * (w // kernel.w)
    else:
        raise ValueError(f"no token arithmetic for family {family!r}")
    return v.batch_size * kept_count(s, v.drop_ratio)


def make_variants(family: str, batch_size: int, resolution: tuple, kernel: PatchKernel,
                  multi_resolution: bool = True) -> list[InputVariant]:
    """Token-budget-matched input variants for one dataset.

    Video sampling uses only the three reduced variants; each carries the
    base image budget, a quarter of the full-resolution video base.
    """
    res = tuple(resolution)
    base = InputVariant("base", batch_size, res)
    if not multi_resolution or family not in ("video", "image"):
        return [base]
    if batch_size % 4:
        raise ValueError(f"quarter-batch variant needs batch size divisible by 4, got {batch_size}")
    if family == "video":
        f, h, w = res
        if f % kernel.f or f // kernel.f != 4:
            raise ValueError(f"video base must have 4 frame tokens, got {f} frames "
                             f"with temporal kernel {kernel.f}")
        if h % (2 * kernel.h) or w % (2 * kernel.w):
            raise ValueError(f"cannot halve {h}x{w} into whole {kernel.h}x{kernel.w} patches")
        return [
            InputVariant("half_res", batch_size, (f, h // 2, w // 2)),
            InputVariant("quarter_batch", batch_size // 4, res),
            InputVariant("drop_token", batch_size, res, 1 - 1 / 4),
        ]
    h, w = res
    if h % kernel.h or w % kernel.w:
        raise ValueError(f"image {h}x{w} not divisible by kernel {kernel.h}x{kernel.w}")
    double = (2 * h, 2 * w)
    return [
        base,
        InputVariant("quarter_batch_2x", batch_size // 4, double),
        InputVariant("drop_token_2x", batch_size, double, 1 - 1 / 4),
    ]


def resize(x: np.ndarray, modality: str, resolution: tuple) -> np.ndarray:
    """Integer-factor spatial resize: nearest upsampling or area downsampling."""
    if modality not in ("image", "video"):
        return x
    h_ax = 1 if modality == "image" else 2
    th, tw = resolution[-2:]
    h, w = x.shape[h_ax], x.shape[h_ax + 1]
    if (th, tw) == (h, w):
        return x
    if th >= h and tw >= w and th % h == 0 and tw % w == 0:
        return np.repeat(np.repeat(x, th // h, axis=h_ax), tw // w, axis=h_ax + 1)
    if th <= h and tw <= w and h % th == 0 and w % tw == 0:
        fh, fw = h // th, w // tw
        shape = x.shape[:h_ax] + (th, fh, tw, fw) + x.shape[h_ax + 2:]
        return x.reshape(shape).mean(axis=(h_ax + 1, h_ax + 3)).astype(x.dtype)
    raise ValueError(f"cannot resize {h}x{w} to {th}x{tw} by an integer factor")


# ---------------------------------------------------------------------------
# tasks and sampling

@dataclass
class TaskSpec:
    dataset: str
    objective: Objective
    variants: tuple
    example_count: int
    weight: float = 0.0

    @property
    def name(self) -> str:
        return f"{self.dataset}:{self.objective}"


class TaskRegistry:
    def __init__(self, tasks: Iterable[TaskSpec]):
        self.tasks = list(tasks)
        if not self.tasks:
            raise ValueError("task registry is empty")
        total = sum(t.example_count for t in self.tasks)
        for t in self.tasks:
            if t.example_count <= 0:
                raise ValueError(f"task {t.name} has no examples")
            if not t.variants:
                raise ValueError(f"task {t.name} has no input variants")
            t.weight = t.example_count / total

    @property
    def probabilities(self) -> np.ndarray:
        return np.asarray([t.weight for t in self.tasks])

    def by_dataset(self) -> dict:
        out: dict = {}
        for t in self.tasks:
            out.setdefault(t.dataset, []).append(t)
        return out


def build_task_registry(datasets, kernel: PatchKernel, batch_size: int | dict = 8,
                        multi_resolution: bool = True) -> TaskRegistry:
    tasks = []
    for ds in datasets:
        fam = input_modality(ds)
        cfg = ds.synth
        res = {"video": (cfg.video_frames, cfg.image_size, cfg.image_size),
               "image": (cfg.image_size, cfg.image_size)}.get(fam, ())
        b = batch_size[ds.name] if isinstance(batch_size, dict) else batch_size
        variants = tuple(make_variants(fam, b, res, kernel, multi_resolution))
        for obj in ds.objectives:
            tasks.append(TaskSpec(ds.name, obj, variants, ds.example_count))
    return TaskRegistry(tasks)


def sample_task(registry: TaskRegistry, rng: np.random.Generator, t: int = 0,
                state=None) -> tuple[TaskSpec, InputVariant]:
    """Size-weighted task draw, then a uniform variant of that task.

    ``t`` and ``state`` are accepted for state-dependent policies; the
    size-proportional rule ignores them.
    """
    if not registry.tasks:
        raise ValueError("task registry is empty")
    i = int(rng.choice(len(registry.tasks), p=registry.probabilities))
    task = registry.tasks[i]
    return task, task.variants[int(rng.integers(len(task.variants)))]


# ---------------------------------------------------------------------------
# signatures and plans

@dataclass(frozen=True)
class TaskSignature:
    inputs: tuple          # ((modality, S), ...) sorted by modality
    batch_size: int
    objective: str
    heads: tuple

    @property
    def key(self) -> str:
        ins = ",".join(f"{m}:{s}" for m, s in self.inputs)
        return f"{self.objective}|B={self.batch_size}|{ins}|{','.join(self.heads)}"

    @classmethod
    def from_key(cls, key: str) -> "TaskSignature":
        obj, b, ins, heads = key.split("|")
        inputs = tuple((m, int(s)) for m, s in (p.split(":") for p in ins.split(",")))
        return cls(inputs, int(b[2:]), obj, tuple(heads.split(",")))


def objective_modalities(obj: Objective, dataset) -> tuple:
    return obj.modalities if obj.is_contrastive else (input_modality(dataset),)


def objective_heads(obj: Objective, dataset: str) -> tuple:
    if obj.is_contrastive:
        return tuple(f"proj_{m}" for m in obj.modalities) + ("temp",)
    return (f"cls_{dataset}",)


def signature_for(obj: Objective, dataset: str, inputs: dict) -> TaskSignature:
    mods = obj.modalities if obj.is_contrastive else tuple(inputs)
    b = {inputs[m].batch_size for m in mods}
    if len(b) != 1:
        raise ValueError(f"inputs disagree on batch size: {b}")
    return TaskSignature(tuple(sorted((m, inputs[m].seq_len) for m in mods)), b.pop(), str(obj),
                         objective_heads(obj, dataset))


class Plan:
    """Prepared forward pipeline for one signature: heads resolved, shapes fixed."""

    def __init__(self, sig: TaskSignature, model: ModelConfig, params):
        self.signature = sig
        self.model = model
        self.objective = Objective.parse(sig.objective)
        self.expected = dict(sig.inputs)
        missing = []
        for h in sig.heads:
            probe = "heads/log_inv_temp" if h == "temp" else f"heads/{h}/"
            if not any(p.startswith(probe) for p in params):
                missing.append(h)
        if missing:
            raise KeyError(f"plan {sig.key}: heads {missing} have no parameters")
        if self.objective.is_contrastive:
            self._loss = self._contrastive
        else:
            self.dataset = sig.heads[0][len("cls_"):]
            self._loss = self._classify

    def _check(self, inputs: dict):
        for m, s in self.expected.items():
            tb = inputs.get(m)
            if tb is None:
                raise ValueError(f"plan {self.signature.key}: missing {m} input")
            if tb.seq_len != s or tb.batch_size != self.signature.batch_size:
                raise ValueError(f"plan {self.signature.key}: {m} batch is "
                                 f"[{tb.batch_size}, {tb.seq_len}], expected "
                                 f"[{self.signature.batch_size}, {s}]")

    def _encode(self, params, tb, monitor):
        return encode_tokens(tb, params, self.model, monitor)

    def _classify(self, params, inputs, labels, monitor):
        (m,) = self.expected
        pooled = T.mean_pool(self._encode(params, inputs[m], monitor), axis=1)
        logits = classify(pooled, params, self.dataset)
        if self.objective.kind == "SCE":
            return sce_loss(logits, labels)
        return bce_loss(logits, np.eye(logits.shape[1], dtype=np.int64)[labels])

    def _contrastive(self, params, inputs, labels, monitor):
        z = [pool_and_project(self._encode(params, inputs[m], monitor), params, m)
             for m in self.objective.modalities]
        temp = params["heads/log_inv_temp"]
        if self.objective.kind == "NCE_pair":
            return nce_pair_loss(z[0], z[1], temp)
        return nce_triplet_loss(z[0], z[1], z[2], temp)

    def run(self, params, inputs: dict, labels, monitor=None) -> T.Tensor:
        self._check(inputs)
        return self._loss(params, inputs, labels, monitor)


# ---------------------------------------------------------------------------
# optimisation

@dataclass
class LRSchedule:
    peak: float = 1e-3
    total: int = 1000
    warmup: int | None = None
    floor: float = 0.0

    def __post_init__(self):
        if self.warmup is None:
            self.warmup = max(1, round(0.05 * self.total))
        if not 0 < self.warmup <= self.total:
            raise ValueError(f"warmup {self.warmup} must be in (0, total={self.total}]")


def cosine_lr(t: int, s: LRSchedule) -> float:
    if t < 0:
        raise ValueError("step must be >= 0")
    if t >= s.total:
        return s.floor
    if t < s.warmup:
        return s.peak * (t + 1) / s.warmup
    span = s.total - s.warmup
    progress = (t - s.warmup) / span
    return s.floor + 0.5 * (s.peak - s.floor) * (1 + math.cos(math.pi * progress))


@dataclass
class AdamConfig:
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8


def adam_update(params: dict, grads: dict, m: dict, v: dict, t: int, lr: float,
                cfg: AdamConfig = AdamConfig()) -> dict:
    """Bias-corrected Adam, no weight decay. ``t`` counts updates from 1."""
    c1, c2 = 1 - cfg.b1 ** t, 1 - cfg.b2 ** t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.data.shape:
            raise ValueError(f"grad for {k} has shape {g.shape}, parameter {p.data.shape}")
        m[k] = cfg.b1 * m[k] + (1 - cfg.b1) * g
        v[k] = cfg.b2 * v[k] + (1 - cfg.b2) * g * g
        step = lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + cfg.eps)
        p.data = (p.data - step).astype(p.data.dtype, copy=False)
    return params


# ---------------------------------------------------------------------------
# training state

RNG_PURPOSES = ("sample", "data", "drop")


def make_rngs(seed: int) -> dict:
    return {p: np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, zlib.crc32(p.encode())])))
            for p in RNG_PURPOSES}


@dataclass
class TrainState:
    params: T.ParamTree
    m: dict
    v: dict
    step: int
    rngs: dict
    plans: dict = field(default_factory=dict)
    plan_builds: int = 0
    monitor: RoutingMonitor = field(default_factory=RoutingMonitor)

    @classmethod
    def fresh(cls, params: T.ParamTree, seed: int) -> "TrainState":
        zeros = {k: np.zeros_like(p.data) for k, p in params.items()}
        return cls(params, zeros, {k: z.copy() for k, z in zeros.items()}, 0, make_rngs(seed))


def get_or_build_plan(sig: TaskSignature, state: TrainState, model: ModelConfig) -> tuple[Plan, bool]:
    plan = state.plans.get(sig.key)
    if plan is not None:
        return plan, False
    plan = Plan(sig, model, state.params)
    state.plans[sig.key] = plan
    state.plan_builds += 1
    return plan, True


class Trainer:
    """Drives one training run; all mutable run state lives in ``self.state``."""

    def __init__(self, model: ModelConfig, datasets: Sequence, registry: TaskRegistry,
                 state: TrainState, schedule: LRSchedule, adam: AdamConfig = AdamConfig(),
                 mode: str = "alternating", source=None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.model, self.registry, self.state = model, registry, state
        self.datasets = {d.name: d for d in datasets}
        self.schedule, self.adam, self.mode = schedule, adam, mode
        self.source = source
        self.step_objectives: list = []
        self.step_built: list = []

    # -- data ---------------------------------------------------------------

    def fetch(self, ds, variant: InputVariant, modalities: Iterable[str]) -> tuple[dict, np.ndarray, int]:
        """Raw arrays for one batch plus the DropToken seed for this batch."""
        rngs = self.state.rngs
        n, b = ds.train_count, variant.batch_size
        idx = np.sort(rngs["data"].choice(n, size=b, replace=b > n))
        if self.source is not None:
            raw = self.source.batch(ds, "train", idx)
        else:
            from .synth import generate_batch
            raw = generate_batch(ds, "train", idx)
        vm = input_modality(ds)
        out = {m: raw[m] for m in modalities}
        if vm in out:
            out[vm] = resize(out[vm], vm, variant.resolution)
        return out, raw["label"], int(rngs["drop"].integers(2 ** 63))

    def embed_batch(self, ds, variant: InputVariant, raw: dict, drop_seed: int) -> dict:
        vm = input_modality(ds)
        out = {}
        for m in sorted(raw):
            tb = embed_inputs(m, raw[m], self.state.params, self.model)
            if m == vm and variant.drop_ratio > 0:
                tb = drop_token(tb, variant.drop_ratio, np.random.default_rng(drop_seed))
            out[m] = tb
        return out

    def task_loss(self, task: TaskSpec, inputs: dict, labels) -> tuple[T.Tensor, TaskSignature, bool]:
        sig = signature_for(task.objective, task.dataset, inputs)
        plan, built = get_or_build_plan(sig, self.state, self.model)
        self.step_objectives.append(task.objective.kind)
        if built:
            self.step_built.append(sig.key)
        return plan.run(self.state.params, inputs, labels, self.state.monitor), sig, built

    # -- steps --------------------------------------------------------------

    def _apply(self, grads: dict, lr: float):
        s = self.state
        adam_update(s.params, grads, s.m, s.v, s.step + 1, lr, self.adam)

    def _finite(self, value: float, task: str):
        if not math.isfinite(value):
            raise DivergenceError(self.state.step, task, value)

    def step(self) -> dict:
        t0 = time.perf_counter()
        s = self.state
        lr = cosine_lr(s.step, self.schedule)
        self.step_objectives, self.step_built = [], []
        T.get_tape().clear()
        T.zero_grad(s.params)
        rec = (self._alternating if self.mode == "alternating" else self._combined)(lr)
        rec.update(step=s.step, lr=lr, plan_builds_total=s.plan_builds,
                   built_signatures=list(self.step_built))
        s.step += 1
        rec["wall_ms"] = round((time.perf_counter() - t0) * 1e3, 3)
        order = ("step", "task", "variant", "objective", "loss", "lr", "tokens_per_batch",
                 "plan_builds_total", "wall_ms")
        return {k: rec[k] for k in order} | {k: v for k, v in rec.items() if k not in order}

    def _alternating(self, lr: float) -> dict:
        s = self.state
        task, variant = sample_task(self.registry, s.rngs["sample"], s.step, s)
        ds = self.datasets[task.dataset]
        raw, labels, seed = self.fetch(ds, variant, objective_modalities(task.objective, ds))
        inputs = self.embed_batch(ds, variant, raw, seed)
        loss, sig, built = self.task_loss(task, inputs, labels)
        value = float(loss.data)
        self._finite(value, task.name)
        grads = T.backward(loss, s.params)
        if len(self.step_objectives) != 1:
            raise AssertionError(f"step {s.step} touched objectives {self.step_objectives}")
        self._apply(grads, lr)
        vm = input_modality(ds)
        tokens = inputs[vm].tokens_per_batch if vm in inputs else 0
        return dict(task=task.name, variant=variant.name, objective=str(task.objective),
                    loss=value, tokens_per_batch=tokens, signature=sig.key, plan_built=built)

    def _combined(self, lr: float) -> dict:
        """One update from every task: summed losses or averaged per-task gradients."""
        s = self.state
        groups = self.registry.by_dataset()
        losses, sigs, built_any, variants, tokens = {}, [], False, [], 0
        total = None
        acc = {k: np.zeros_like(p.data) for k, p in s.params.items()} \
            if self.mode == "accumulated" else None
        n_tasks = len(self.registry.tasks)
        for name, tasks in groups.items():
            ds = self.datasets[name]
            variant = tasks[0].variants[int(s.rngs["sample"].integers(len(tasks[0].variants)))]
            variants.append(f"{name}:{variant.name}")
            mods = sorted({m for t in tasks for m in objective_modalities(t.objective, ds)})
            raw, labels, seed = self.fetch(ds, variant, mods)
            for task in tasks:
                sub = {m: raw[m] for m in objective_modalities(task.objective, ds)}
                inputs = self.embed_batch(ds, variant, sub, seed)
                loss, sig, built = self.task_loss(task, inputs, labels)
                built_any |= built
                sigs.append(sig.key)
                losses[task.name] = float(loss.data)
                self._finite(losses[task.name], task.name)
                vm = input_modality(ds)
                if vm in inputs:
                    tokens += inputs[vm].tokens_per_batch
                if acc is not None:
                    T.zero_grad(s.params)
                    for k, g in T.backward(loss, s.params).items():
                        acc[k] += g / n_tasks
                else:
                    total = loss if total is None else T.add(total, loss)
        if acc is None:
            grads = T.backward(total, s.params)
            value = float(total.data)
        else:
            grads, value = acc, float(np.mean(list(losses.values())))
        self._apply(grads, lr)
        return dict(task="all", variant=";".join(variants), objective=self.mode, loss=value,
                    tokens_per_batch=tokens, signature=";".join(sigs), plan_built=built_any,
                    task_losses=losses)

    def run(self, steps: int, sink: Callable[[dict], None] | None = None,
            on_step: Callable[[int], None] | None = None) -> list:
        out = []
        for _ in range(steps):
            rec = self.step()
            out.append(rec)
            if sink is not None:
                sink(rec)
            if on_step is not None:
                on_step(self.state.step)
        return out


def jsonl_sink(path):
    f = open(path, "a")

    def write(rec: dict):
        f.write(json.dumps(rec) + "\n")
        f.flush()
    write.close = f.close
    return write


def alternate_minimize(objectives: Sequence[Callable[[dict], T.Tensor]], weights: Sequence[float],
                       params: dict, schedule: LRSchedule, seed: int = 0,
                       adam: AdamConfig = AdamConfig(),
                       policy: str = "multinomial") -> list[tuple[int, float]]:
    """Alternating Adam over arbitrary scalar objectives of shared parameters.

    The model-free core of the training loop: each step draws one objective by
    weight, back-propagates it alone and applies one Adam update. Returns the
    (objective index, loss) history.

    ``policy="balanced"`` replaces the random draw with a largest-deficit
    schedule whose counts track the weights exactly (round robin for equal
    weights).
    """
    if policy not in ("multinomial", "balanced"):
        raise ValueError(f"unknown policy {policy!r}")
    p = np.asarray(weights, dtype=np.float64)
    if len(p) != len(objectives) or not len(p) or (p <= 0).any():
        raise ValueError("need one positive weight per objective")
    p = p / p.sum()
    rng = np.random.default_rng(seed)
    m = {k: np.zeros_like(x.data) for k, x in params.items()}
    v = {k: np.zeros_like(x.data) for k, x in params.items()}
    history = []
    counts = np.zeros(len(p))
    for t in range(schedule.total):
        if policy == "balanced":
            i = int(np.argmax(p * (t + 1) - counts))
        else:
            i = int(rng.choice(len(p), p=p))
        counts[i] += 1
        T.zero_grad(params)
        loss = objectives[i](params)
        grads = T.backward(loss, params)
        adam_update(params, grads, m, v, t + 1, cosine_lr(t, schedule), adam)
        history.append((i, float(loss.data)))
    return history
