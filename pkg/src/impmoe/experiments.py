"""Desk-scale experiments: gradient audits, objective and router comparisons,
budget and plan-cache audits, stability stress runs.

Each function returns plain dicts so scripts and tests can print or assert on
them directly.
"""
from __future__ import annotations

import copy
import dataclasses
import math
import time
from pathlib import Path

import numpy as np

from . import moe as M
from . import objectives as O
from . import tensor as T
from .config import RunConfig, load
from .embedder import EmbedConfig, drop_token, embed, init_embed_params
from .evaluation import evaluate_dataset
from .gradcheck import check_gradients, projected
from .model import init_model, input_modality
from .synth import DatasetSpec, SynthConfig, generate_batch
from .scheduler import (DivergenceError, LRSchedule, TaskSignature, Trainer, TrainState,
                        alternate_minimize, build_task_registry, objective_heads, sample_task,
                        variant_tokens)

CONFIG_DIR = Path(__file__).resolve().parents[2] / "configs"


def config_path(name: str) -> Path:
    return CONFIG_DIR / f"{name}.yaml"


def make_trainer(cfg: RunConfig, state: TrainState | None = None, source=None) -> Trainer:
    T.set_precision(cfg.precision)
    model = cfg.model_config()
    specs = cfg.dataset_specs()
    registry = build_task_registry(specs, model.embed.kernel, cfg.batch_sizes(),
                                   cfg.multi_resolution)
    if state is None:
        state = TrainState.fresh(init_model(model, specs, cfg.seed), cfg.seed)
    return Trainer(model, specs, registry, state, cfg.lr_schedule(), cfg.adam, cfg.mode, source)


def variant(cfg: RunConfig, **changes) -> RunConfig:
    """Deep copy with top-level or dotted (``encoder.router_kind``) overrides."""
    out = copy.deepcopy(cfg)
    for key, value in changes.items():
        node, *path = key.split(".")
        if not path:
            setattr(out, node, value)
            continue
        obj = getattr(out, node)
        for p in path[:-1]:
            obj = getattr(obj, p)
        setattr(obj, path[-1], value)
    return out


def with_objectives(cfg: RunConfig, objectives) -> RunConfig:
    out = copy.deepcopy(cfg)
    for d in out.datasets:
        d.objectives = list(objectives)
    return out


def train_and_eval(cfg: RunConfig, max_examples: int | None = None, extra_specs=()) -> dict:
    """Train, then evaluate the training datasets plus any held-out ``extra_specs``."""
    t0 = time.perf_counter()
    tr = make_trainer(cfg)
    recs = tr.run(cfg.steps)
    model = cfg.model_config()
    metrics = {s.name: evaluate_dataset(s, tr.state.params, model, cfg.eval.probe_iters,
                                        cfg.eval.probe_lr,
                                        max_examples if max_examples else cfg.eval.max_examples)
               for s in list(cfg.dataset_specs()) + list(extra_specs)}
    return {"metrics": metrics, "final_loss": float(np.mean([r["loss"] for r in recs[-20:]])),
            "seconds": time.perf_counter() - t0, "routing_violations": tr.state.monitor.violations,
            "routing_checks": tr.state.monitor.checks}


# ---------------------------------------------------------------------------
# gradient audit

def _t(rng, *shape, scale=1.0, shift=0.0):
    return T.Tensor(rng.standard_normal(shape) * scale + shift, requires_grad=True)


def op_gradient_cases(seed: int) -> list:
    """(name, scalar fn, inputs) for every differentiable primitive and composite."""
    rng = np.random.default_rng([seed, 17])
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    v = _t(rng, 4)
    pos = T.Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    den = T.Tensor(rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1, 1], (3, 4)), requires_grad=True)
    mid = T.Tensor(rng.uniform(-0.8, 0.8, (3, 4)), requires_grad=True)
    w = _t(rng, 4, 5)
    x3 = _t(rng, 2, 3, 4)
    g, bb = _t(rng, 4, shift=1.0), _t(rng, 4)
    idx = rng.integers(0, 3, 6)
    y6 = _t(rng, 6, 4)
    targets = rng.integers(0, 2, (3, 4))
    P = lambda fn, shape: projected(fn, shape, seed)

    cases = [
        ("add", P(lambda: T.add(a, v), (3, 4)), [a, v]),
        ("sub", P(lambda: T.sub(a, b), (3, 4)), [a, b]),
        ("mul", P(lambda: T.mul(a, v), (3, 4)), [a, v]),
        ("div", P(lambda: T.div(a, den), (3, 4)), [a, den]),
        ("scale", P(lambda: T.scale(a, -1.3), (3, 4)), [a]),
        ("exp", P(lambda: T.exp(a), (3, 4)), [a]),
        ("log", P(lambda: T.log(pos), (3, 4)), [pos]),
        ("clip", P(lambda: T.clip(mid, -1.0, 1.0), (3, 4)), [mid]),
        ("gelu", P(lambda: T.gelu(a), (3, 4)), [a]),
        ("reshape", P(lambda: T.reshape(a, (4, 3)), (4, 3)), [a]),
        ("transpose", P(lambda: T.transpose(x3, (2, 0, 1)), (4, 2, 3)), [x3]),
        ("swap_last", P(lambda: T.swap_last(x3), (2, 4, 3)), [x3]),
        ("sum", P(lambda: T.sum(x3, axis=1), (2, 4)), [x3]),
        ("mean", P(lambda: T.mean(x3, axis=-1), (2, 3)), [x3]),
        ("mean_pool", P(lambda: T.mean_pool(x3, axis=1), (2, 4)), [x3]),
        ("matmul", P(lambda: T.matmul(x3, w), (2, 3, 5)), [x3, w]),
        ("softmax", P(lambda: T.softmax(a, axis=-1), (3, 4)), [a]),
        ("log_softmax", P(lambda: T.log_softmax(a, axis=0), (3, 4)), [a]),
        ("layer_norm", P(lambda: T.layer_norm(x3, g, bb), (2, 3, 4)), [x3, g, bb]),
        ("l2_normalize", P(lambda: T.l2_normalize(a), (3, 4)), [a]),
        ("sigmoid_cross_entropy", lambda: T.mean(T.sigmoid_cross_entropy(a, targets)), [a]),
        ("gather_rows", P(lambda: T.gather_rows(a, idx), (6, 4)), [a]),
        ("scatter_add_rows", P(lambda: T.scatter_add_rows(y6, idx, 3), (3, 4)), [y6]),
        ("top_k", P(lambda: T.top_k(a, 2)[0], (3, 2)), [a]),
    ]

    # heads and losses
    d, cls = 6, 5
    heads = O.init_projection_head("m", d, rng)
    heads.update(O.init_classifier_head("ds", d, cls, rng))
    heads["heads/log_inv_temp"] = T.Tensor(np.array(math.log(1 / 0.3)), requires_grad=True)
    enc = _t(rng, 4, 3, d)
    za = T.Tensor(O.project(T.Tensor(rng.standard_normal((4, d))), heads, "m").data,
                  requires_grad=True)
    zb, zc = _t(rng, 4, d), _t(rng, 4, d)
    labels = rng.integers(0, cls, 4)
    temp = heads["heads/log_inv_temp"]
    cases += [
        ("pool_and_project", P(lambda: O.pool_and_project(enc, heads, "m"), (4, d)),
         [enc] + [heads[f"heads/proj_m/{n}"] for n in ("w1", "b1", "w2", "b2")]),
        ("sce_loss", lambda: O.sce_loss(O.classify(T.mean_pool(enc, 1), heads, "ds"), labels),
         [enc, heads["heads/cls_ds/w"], heads["heads/cls_ds/b"]]),
        ("bce_loss", lambda: O.bce_loss(O.classify(T.mean_pool(enc, 1), heads, "ds"),
                                         np.eye(cls, dtype=np.int64)[labels]),
         [enc, heads["heads/cls_ds/w"]]),
        ("nce_pair_loss", lambda: O.nce_pair_loss(za, T.l2_normalize(zb), temp), [za, zb, temp]),
        ("nce_triplet_loss", lambda: O.nce_triplet_loss(za, T.l2_normalize(zb),
                                                         T.l2_normalize(zc), temp),
         [za, zb, zc, temp]),
    ]

    # encoder blocks
    ecfg = M.EncoderConfig(num_layers=2, dim=8, ffn_dim=16, heads=2, num_experts=2)
    ep = M.init_encoder_params(ecfg, seed)
    xe = _t(rng, 2, 3, 8)
    pre = M.layer_prefix(1)
    dec = M.route_expert_choice(T.reshape(T.layer_norm(xe, ep[f"{pre}/ln2/g"], ep[f"{pre}/ln2/b"]),
                                          (6, 8)), ep[f"{pre}/moe/router"], 1.0)
    attn_names = ("ln1/g", "attn/wq", "attn/wk", "attn/wv", "attn/wo", "attn/q_ln/g")
    cases += [
        ("attention", P(lambda: M.attention(xe, ep, M.layer_prefix(0), ecfg), (2, 3, 8)),
         [xe] + [ep[f"{M.layer_prefix(0)}/{n}"] for n in attn_names]),
        ("moe_ffn", P(lambda: M.moe_ffn(xe, ep, pre, M.reroute_fixed(
            T.reshape(T.layer_norm(xe, ep[f"{pre}/ln2/g"], ep[f"{pre}/ln2/b"]), (6, 8)),
            ep[f"{pre}/moe/router"], dec)), (2, 3, 8)),
         [xe, ep[f"{pre}/moe/router"], ep[f"{pre}/moe/expert_0/w1"], ep[f"{pre}/ln2/g"]]),
    ]

    # embedder: image patches and text lookup with positions
    ecfg2 = EmbedConfig(dim=4, kernel=_small_kernel(), spatial_buckets=2, temporal_buckets=1,
                        text_max_len=4, vocab_size=16, wave_max_tokens=2)
    embp = init_embed_params(ecfg2, rng)
    img = rng.standard_normal((2, 4, 4, 3))
    txt = rng.integers(0, 16, (2, 4))
    cases += [
        ("embed_image", P(lambda: embed("image", img, embp, ecfg2).tokens, (2, 4, 4)),
         [embp["embed/vision/w"], embp["embed/vision/b"], embp["pos/height"]]),
        ("embed_text", P(lambda: embed("text", txt, embp, ecfg2).tokens, (2, 4, 4)),
         [embp["embed/text/table"], embp["pos/text"]]),
    ]
    return cases


def _small_kernel():
    from .embedder import PatchKernel
    return PatchKernel(1, 2, 2)


def encoder_gradient_error(seed: int, router_kind: str = "expert_choice") -> float:
    """Full tiny encoder (2 layers, D=8, E=2, 6 tokens) with routing frozen at the point."""
    cfg = M.EncoderConfig(num_layers=2, dim=8, ffn_dim=8, heads=2, num_experts=2,
                          router_kind=router_kind)
    p = M.init_encoder_params(cfg, seed)
    x = T.Tensor(np.random.default_rng(seed).standard_normal((1, 6, 8)), requires_grad=True)
    decisions: list = []
    with T.no_grad():
        M.encoder_forward(x, p, cfg, decisions=decisions)
    fn = projected(lambda: M.encoder_forward(x, p, cfg, fixed=decisions), (1, 6, 8), seed)
    return check_gradients(fn, [x] + list(p.values()))


def gradient_audit(seeds=range(20), router_kinds=("expert_choice",)) -> dict:
    with T.precision(64):
        t0 = time.perf_counter()
        ops: dict = {}
        for s in seeds:
            for name, fn, inputs in op_gradient_cases(s):
                ops[name] = max(ops.get(name, 0.0), check_gradients(fn, inputs))
        enc = max(encoder_gradient_error(s, k) for s in seeds for k in router_kinds)
    return {"ops": ops, "encoder": enc, "seconds": time.perf_counter() - t0,
            "seeds": len(list(seeds))}


# ---------------------------------------------------------------------------
# audits over the scheduler

def budget_audit(steps: int = 1000, batch_size: int = 8, seed: int = 0) -> dict:
    """Measured tokens per batch for sampled video variants vs the image budget."""
    from .embedder import PatchKernel
    from .scheduler import resize
    kernel = PatchKernel(4, 16, 16)
    synth = SynthConfig(num_classes=4, image_size=64, video_frames=16)
    ds = DatasetSpec("video", ("video",), 512, 0, ("SCE",), synth)
    ecfg = EmbedConfig(dim=8, kernel=kernel)
    params = init_embed_params(ecfg, np.random.default_rng(seed))
    reg = build_task_registry([ds], kernel, batch_size)
    rng = np.random.default_rng(seed)
    image_budget = batch_size * (64 // 16) ** 2
    seen: dict = {}
    worst = 0
    with T.no_grad():
        for t in range(steps):
            _, v = sample_task(reg, rng, t)
            idx = rng.integers(0, ds.train_count, v.batch_size)
            raw = resize(generate_batch(ds, "train", idx)["video"], "video", v.resolution)
            tb = embed("video", raw, params, ecfg)
            if v.drop_ratio:
                tb = drop_token(tb, v.drop_ratio, rng)
            measured = tb.batch_size * tb.seq_len
            if measured != variant_tokens(v, "video", kernel):
                raise AssertionError(f"{v.name}: measured {measured} tokens, "
                                     f"arithmetic says {variant_tokens(v, 'video', kernel)}")
            seen[v.name] = seen.get(v.name, 0) + 1
            worst = max(worst, abs(measured - image_budget))
    return {"image_budget": image_budget, "max_deviation": worst, "tolerance": batch_size,
            "variant_counts": seen}


def registry_signatures(trainer: Trainer) -> set:
    """Every signature the registry can produce, derived without running the model."""
    out = set()
    emb = trainer.model.embed
    for task in trainer.registry.tasks:
        ds = trainer.datasets[task.dataset]
        vm = input_modality(ds)
        for v in task.variants:
            s = variant_tokens(v, vm, emb.kernel) // v.batch_size
            if task.objective.is_contrastive:
                inputs = tuple(sorted((m, s if m == vm else emb.text_max_len)
                                      for m in task.objective.modalities))
            else:
                inputs = ((vm, s),)
            out.add(TaskSignature(inputs, v.batch_size, str(task.objective),
                                  objective_heads(task.objective, task.dataset)).key)
    return out


def plan_cache_audit(cfg: RunConfig, lengths=(300, 600)) -> dict:
    runs = []
    for n in lengths:
        tr = make_trainer(variant(cfg, steps=n))
        recs = tr.run(n)
        seen = {r["signature"] for r in recs}
        runs.append({"steps": n, "builds": tr.state.plan_builds, "distinct_seen": len(seen),
                     "registry_signatures": len(registry_signatures(tr))})
    return {"runs": runs, "tasks": len(tr.registry.tasks),
            "variants": sorted({v.name for t in tr.registry.tasks for v in t.variants})}


def load_balance_run(cfg: RunConfig, steps: int = 500) -> dict:
    tr = make_trainer(variant(cfg, steps=steps))
    tr.state.monitor.keep_records = True
    tr.run(steps)
    mon = tr.state.monitor
    recs = [r for r in mon.records if r[1] == "expert_choice"]
    return {"checks": mon.checks, "violations": mon.violations,
            "moe_layers": cfg.encoder.num_moe_layers,
            "all_exact": all(set(loads) == {cap} for _, _, cap, loads, _ in recs)}


def quadratic_convergence(steps: int = 2000, peak: float = 0.05, policy: str = "balanced",
                          seed: int = 0, x0: float = 3.0) -> dict:
    with T.precision(64):
        params = T.ParamTree(x=T.Tensor(np.array([x0]), requires_grad=True))

        def quad(c):
            return lambda p: T.sum(T.mul(T.sub(p["x"], c), T.sub(p["x"], c)))
        hist = alternate_minimize([quad(0.0), quad(1.0)], [1, 1], params, LRSchedule(peak, steps),
                                  seed, policy=policy)
    x = float(params["x"].data[0])
    return {"x": x, "optimum": 0.5, "error": abs(x - 0.5),
            "counts": [sum(i == k for i, _ in hist) for k in (0, 1)]}


# ---------------------------------------------------------------------------
# comparisons

def contrastive_run(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    tr = make_trainer(cfg)
    tr.run(cfg.steps)
    train_s = time.perf_counter() - t0
    spec = cfg.dataset_specs()[0]
    out = evaluate_dataset(spec, tr.state.params, cfg.model_config(), probe_iters=1,
                           max_examples=256)
    return {"recall_i2t": out["i2t_recall@1"], "recall_t2i": out["t2i_recall@1"],
            "zero_shot": out["zero_shot"], "train_seconds": train_s,
            "total_seconds": time.perf_counter() - t0}


OBJECTIVE_ARMS = ("nce", "sce", "alternating", "summed")


def downstream_spec(cfg: RunConfig, num_classes: int = 9) -> DatasetSpec:
    """Held-out probe set: different class count, hence different class layout."""
    base = cfg.dataset_specs()[0].synth
    synth = dataclasses.replace(base, num_classes=num_classes, seed=base.seed + 1)
    return DatasetSpec("downstream", ("image",), 1024, 256, ("SCE",), synth)


def objective_comparison(cfg: RunConfig, seeds=(0, 1, 2)) -> dict:
    nce, sce = "NCE_pair(image,text)", "SCE"
    down = downstream_spec(cfg)
    out: dict = {}
    for seed in seeds:
        arms = {
            "nce": variant(with_objectives(cfg, [nce]), seed=seed),
            "sce": variant(with_objectives(cfg, [sce]), seed=seed),
            "alternating": variant(with_objectives(cfg, [nce, sce]), seed=seed,
                                   mode="alternating"),
            "summed": variant(with_objectives(cfg, [nce, sce]), seed=seed, mode="summed"),
        }
        out[seed] = {}
        for name, c in arms.items():
            res = train_and_eval(c, extra_specs=[down])
            m = res["metrics"][c.datasets[0].name]
            out[seed][name] = {"linear_probe": m["linear_probe"],
                               "downstream_probe": res["metrics"][down.name]["linear_probe"],
                               "zero_shot": m.get("zero_shot"), "i2t": m.get("i2t_recall@1"),
                               "seconds": res["seconds"]}
    return out


def objective_verdict(results: dict, margin: float = 0.01, metric: str = "downstream_probe") -> dict:
    """Alternating >= each single objective and >= summed - margin, per seed."""
    wins = {}
    for seed, arms in results.items():
        alt = arms["alternating"][metric]
        wins[seed] = (alt >= arms["nce"][metric] and alt >= arms["sce"][metric]
                      and alt >= arms["summed"][metric] - margin)
    return {"per_seed": wins, "passed": sum(wins.values()) > len(wins) / 2}


def router_comparison(cfg: RunConfig, seeds=(0, 1, 2)) -> dict:
    out: dict = {}
    for seed in seeds:
        out[seed] = {}
        for kind in ("expert_choice", "tokens_choose"):
            c = variant(cfg, seed=seed, **{"encoder.router_kind": kind})
            res = train_and_eval(c)
            m = res["metrics"][c.datasets[0].name]
            out[seed][kind] = {"zero_shot": m["zero_shot"], "i2t": m["i2t_recall@1"],
                               "seconds": res["seconds"]}
    wins = {s: r["expert_choice"]["zero_shot"] >= r["tokens_choose"]["zero_shot"]
            for s, r in out.items()}
    return {"results": out, "per_seed": wins, "passed": sum(wins.values()) > len(wins) / 2}


def qk_stress(cfg: RunConfig, steps: int = 300, lr_mult: float = 10.0) -> dict:
    """High-learning-rate runs with and without QK LayerNorm."""
    out = {}
    for qk in (True, False):
        c = variant(cfg, steps=steps, **{"encoder.qk_layernorm": qk,
                                         "schedule.peak": cfg.schedule.peak * lr_mult})
        tr = make_trainer(c)
        losses, diverged = [], None
        try:
            for _ in range(steps):
                losses.append(tr.step()["loss"])
        except DivergenceError as e:
            diverged = {"step": e.step, "task": e.task}
        finite_params = all(np.isfinite(p.data).all() for p in tr.state.params.values())
        out["qk_layernorm" if qk else "control"] = {
            "steps_completed": len(losses), "diverged": diverged,
            "nan_free": diverged is None and finite_params and all(map(math.isfinite, losses)),
            "first_loss": losses[0] if losses else None,
            "last_loss": float(np.mean(losses[-20:])) if losses else None,
            "max_loss": max(losses) if losses else None}
    return out


def qk_invariance(alphas=(0.01, 0.1, 3.0, 50.0, 1e4), seed: int = 0) -> float:
    """Largest change of attention probabilities when wq, wk are scaled by alpha > 0."""
    cfg = M.EncoderConfig(num_layers=2, dim=16, ffn_dim=32, heads=2, num_experts=2)
    worst = 0.0
    with T.precision(64):
        p = M.init_encoder_params(cfg, seed)
        x = T.Tensor(np.random.default_rng(seed).standard_normal((2, 7, 16)))
        pre = M.layer_prefix(0)
        _, base = M.attention(x, p, pre, cfg, return_probs=True)
        for a in alphas:
            scaled = dict(p)
            for n in ("wq", "wk"):
                scaled[f"{pre}/attn/{n}"] = T.Tensor(p[f"{pre}/attn/{n}"].data * a)
            _, probs = M.attention(x, scaled, pre, cfg, return_probs=True)
            worst = max(worst, float(np.max(np.abs(probs.data - base.data))))
    return worst


def load_config(name: str, **overrides) -> RunConfig:
    cfg = load(config_path(name))
    return variant(cfg, **overrides) if overrides else cfg


def as_record(obj):
    """JSON-friendly copy of nested results (dataclasses, numpy scalars)."""
    if dataclasses.is_dataclass(obj):
        return as_record(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): as_record(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [as_record(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
