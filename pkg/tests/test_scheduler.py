import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from impmoe import tensor as T
from impmoe.embedder import PatchKernel
from impmoe.objectives import Objective
from impmoe.scheduler import (
    DivergenceError, InputVariant, LRSchedule, Plan, TaskRegistry, TaskSignature,
    TaskSpec, TrainState, adam_update, alternate_minimize, build_task_registry, cosine_lr,
    get_or_build_plan, make_variants, resize, sample_task, variant_tokens,
)
from impmoe.synth import DatasetSpec

from helpers import TINY_SYNTH, image_text, tiny_model, tiny_trainer

K = PatchKernel(4, 16, 16)


# -- variants ---------------------------------------------------------------

def test_video_variants_match_image_budget():
    vs = make_variants("video", 8, (16, 64, 64), K)
    assert [(v.name, v.batch_size, v.resolution, v.drop_ratio) for v in vs] == [
        ("half_res", 8, (16, 32, 32), 0.0),
        ("quarter_batch", 2, (16, 64, 64), 0.0),
        ("drop_token", 8, (16, 64, 64), 0.75),
    ]
    image_budget = variant_tokens(InputVariant("base", 8, (64, 64)), "image", K)
    assert image_budget == 8 * 16
    assert [variant_tokens(v, "video", K) for v in vs] == [image_budget] * 3


def test_image_variants():
    vs = make_variants("image", 8, (64, 64), K)
    assert [v.name for v in vs] == ["base", "quarter_batch_2x", "drop_token_2x"]
    assert vs[2].drop_ratio == 1 - 1 / 4
    assert {variant_tokens(v, "image", K) for v in vs} == {128}


def test_single_variant_without_multires():
    vs = make_variants("image", 8, (64, 64), K, multi_resolution=False)
    assert [v.name for v in vs] == ["base"]
    reg = TaskRegistry([TaskSpec("a", Objective.parse("SCE"), tuple(vs), 10)])
    rng = np.random.default_rng(0)
    assert {sample_task(reg, rng)[1].name for _ in range(50)} == {"base"}


def test_variant_errors():
    with pytest.raises(ValueError, match="halve"):
        make_variants("video", 8, (16, 48, 48), K)
    with pytest.raises(ValueError, match="divisible by 4"):
        make_variants("image", 6, (64, 64), K)
    with pytest.raises(ValueError, match="4 frame tokens"):
        make_variants("video", 8, (8, 64, 64), K)


@settings(max_examples=40, deadline=None)
@given(b=st.integers(1, 16).map(lambda x: 4 * x), side=st.integers(1, 6).map(lambda x: 16 * x))
def test_image_budget_conserved(b, side):
    vs = make_variants("image", b, (side, side), K)
    base = variant_tokens(vs[0], "image", K)
    for v in vs:
        assert abs(variant_tokens(v, "image", K) - base) <= b


@settings(max_examples=30, deadline=None)
@given(b=st.integers(1, 8).map(lambda x: 4 * x), side=st.integers(1, 4).map(lambda x: 32 * x))
def test_video_budget_conserved(b, side):
    vs = make_variants("video", b, (16, side, side), K)
    image = b * (side // 16) ** 2
    for v in vs:
        assert abs(variant_tokens(v, "video", K) - image) <= b


def test_resize_nearest_and_area():
    x = np.arange(2 * 4 * 4 * 3, dtype=np.float32).reshape(2, 4, 4, 3)
    up = resize(x, "image", (8, 8))
    assert up.shape == (2, 8, 8, 3)
    assert np.array_equal(up[:, ::2, ::2], x)
    np.testing.assert_array_equal(resize(up, "image", (4, 4)), x)
    down = resize(x, "image", (2, 2))
    oracle = np.array([[x[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2].mean(axis=(1, 2)) for j in range(2)]
                       for i in range(2)]).transpose(2, 0, 1, 3)
    np.testing.assert_allclose(down, oracle, rtol=1e-6)
    with pytest.raises(ValueError):
        resize(x, "image", (3, 3))


# -- sampling ---------------------------------------------------------------

def _registry(sizes, variants=1):
    vs = tuple(InputVariant(f"v{i}", 4, (32, 32)) for i in range(variants))
    return TaskRegistry([TaskSpec(n, Objective.parse("SCE"), vs, c) for n, c in sizes.items()])


def test_weights_proportional_to_size():
    reg = _registry({"A": 100, "B": 300})
    np.testing.assert_allclose(reg.probabilities, [0.25, 0.75])


def test_sampling_chi_square():
    reg = _registry({"A": 100, "B": 300})
    rng = np.random.default_rng(1)
    counts = {"A": 0, "B": 0}
    for t in range(10_000):
        counts[sample_task(reg, rng, t)[0].dataset] += 1
    assert chisquare([counts["A"], counts["B"]], [2500, 7500]).pvalue > 0.01


def test_single_task_always_selected():
    reg = _registry({"only": 5})
    rng = np.random.default_rng(0)
    assert all(sample_task(reg, rng)[0].dataset == "only" for _ in range(100))


def test_variants_uniform_within_dataset():
    vs = tuple(InputVariant(f"v{i}", 4, (32, 32)) for i in range(3))
    reg = TaskRegistry([TaskSpec("A", Objective.parse("SCE"), vs, 600),
                        TaskSpec("B", Objective.parse("SCE"), vs[:1], 400)])
    rng = np.random.default_rng(3)
    draws = [sample_task(reg, rng) for _ in range(10_000)]
    for name in ("v0", "v1", "v2"):
        freq = sum(t.dataset == "A" and v.name == name for t, v in draws) / len(draws)
        assert abs(freq - 0.2) < 0.02


def test_empty_registry_rejected():
    with pytest.raises(ValueError, match="empty"):
        TaskRegistry([])


def test_registry_from_datasets_shares_dataset_weight():
    a = image_text("a", train=100, objectives=("SCE", "NCE_pair(image,text)"))
    b = image_text("b", train=300, objectives=("SCE",))
    reg = build_task_registry([a, b], K, 8)
    assert [t.name for t in reg.tasks] == ["a:SCE", "a:NCE_pair(image,text)", "b:SCE"]
    np.testing.assert_allclose(reg.probabilities, [0.2, 0.2, 0.6])


# -- plan cache -------------------------------------------------------------

def _fake_params(*names):
    return {n: None for n in names}


def test_plan_cache_builds_once_per_signature():
    params = _fake_params("heads/cls_a/w", "heads/cls_b/w", "heads/cls_c/w")
    vs = make_variants("image", 8, (32, 32), K)
    tasks = [TaskSpec(n, Objective.parse("SCE"), tuple(vs), 10) for n in "abc"]
    reg = TaskRegistry(tasks)
    state = TrainState(params, {}, {}, 0, {})

    def sig(task, v):
        return TaskSignature((("image", variant_tokens(v, "image", K) // v.batch_size),),
                             v.batch_size, "SCE", (f"cls_{task.dataset}",))

    # base and drop_token_2x carry the same (B, S), so they share a plan
    distinct = {sig(t, v).key for t in tasks for v in t.variants}
    assert len(distinct) == 6
    rng = np.random.default_rng(0)
    seen = set()
    for t in range(10_000):
        task, v = sample_task(reg, rng, t)
        get_or_build_plan(sig(task, v), state, tiny_model())
        seen.add(sig(task, v).key)
        assert state.plan_builds == len(seen) <= 9
    assert state.plan_builds == len(distinct)


def test_one_task_one_build():
    params = _fake_params("heads/cls_a/w")
    state = TrainState(params, {}, {}, 0, {})
    sig = TaskSignature((("image", 4),), 8, "SCE", ("cls_a",))
    for _ in range(100):
        get_or_build_plan(sig, state, tiny_model())
    assert state.plan_builds == 1


def test_shared_signature_shares_plan():
    params = _fake_params("heads/proj_image/w1", "heads/proj_text/w1", "heads/log_inv_temp")
    state = TrainState(params, {}, {}, 0, {})
    sig = TaskSignature((("image", 4), ("text", 8)), 8, "NCE_pair(image,text)",
                        ("proj_image", "proj_text", "temp"))
    p1, b1 = get_or_build_plan(sig, state, tiny_model())
    p2, b2 = get_or_build_plan(TaskSignature.from_key(sig.key), state, tiny_model())
    assert p1 is p2 and (b1, b2) == (True, False) and state.plan_builds == 1


def test_plan_missing_head():
    sig = TaskSignature((("image", 4),), 8, "SCE", ("cls_x",))
    with pytest.raises(KeyError, match="cls_x"):
        Plan(sig, tiny_model(), _fake_params("heads/cls_y/w"))


def test_signature_key_roundtrip():
    sig = TaskSignature((("audio", 3), ("text", 8)), 2, "NCE_pair(audio,text)", ("proj_a", "temp"))
    assert TaskSignature.from_key(sig.key) == sig


# -- optimizer and schedule -------------------------------------------------

def test_adam_first_step_hand_formula():
    p = {"w": T.Tensor(np.array([1.0]), dtype=np.float64)}
    m, v = {"w": np.zeros(1)}, {"w": np.zeros(1)}
    adam_update(p, {"w": np.array([0.5])}, m, v, 1, 0.1)
    # m̂ = 0.5, v̂ = 0.25 after bias correction
    assert p["w"].data[0] == pytest.approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8), abs=1e-15)


def test_adam_two_steps_vs_oracle():
    g = 0.3
    p = {"w": T.Tensor(np.array([2.0]), dtype=np.float64)}
    m, v = {"w": np.zeros(1)}, {"w": np.zeros(1)}
    x, mo, vo = 2.0, 0.0, 0.0
    for t in (1, 2):
        adam_update(p, {"w": np.array([g])}, m, v, t, 0.05)
        mo = 0.9 * mo + 0.1 * g
        vo = 0.999 * vo + 0.001 * g * g
        x -= 0.05 * (mo / (1 - 0.9 ** t)) / (math.sqrt(vo / (1 - 0.999 ** t)) + 1e-8)
    assert abs(p["w"].data[0] - x) < 1e-10


def test_adam_zero_grad_is_null_update():
    p = {"w": T.Tensor(np.array([1.5, -2.0]), dtype=np.float64)}
    m, v = {"w": np.zeros(2)}, {"w": np.zeros(2)}
    adam_update(p, {"w": np.zeros(2)}, m, v, 1, 0.1)
    np.testing.assert_array_equal(p["w"].data, [1.5, -2.0])


def test_adam_shape_mismatch():
    p = {"w": T.Tensor(np.zeros(2))}
    with pytest.raises(ValueError, match="shape"):
        adam_update(p, {"w": np.zeros(3)}, {"w": np.zeros(2)}, {"w": np.zeros(2)}, 1, 0.1)


def test_cosine_endpoints():
    s = LRSchedule(1e-3, 1000, warmup=50)
    assert cosine_lr(0, s) == pytest.approx(1e-3 / 50)
    assert cosine_lr(50, s) == pytest.approx(1e-3)
    assert cosine_lr(50 + 475, s) == pytest.approx(0.5e-3)
    assert cosine_lr(1000, s) == 0.0
    assert cosine_lr(5000, s) == 0.0
    assert LRSchedule(1e-3, 2000).warmup == 100


def test_cosine_monotone_after_warmup():
    s = LRSchedule(1e-3, 400)
    rates = [cosine_lr(t, s) for t in range(401)]
    assert all(a <= b for a, b in zip(rates[:s.warmup], rates[1:s.warmup + 1]))
    assert all(a >= b for a, b in zip(rates[s.warmup:], rates[s.warmup + 1:]))


# -- the alternating core ---------------------------------------------------

def _quadratic(center):
    return lambda p: T.sum(T.mul(T.sub(p["x"], center), T.sub(p["x"], center)))


def test_alternating_one_parameter_oracle(f64):
    params = T.ParamTree(x=T.Tensor(np.array([0.7]), requires_grad=True))
    sched = LRSchedule(0.1, 12, warmup=2)
    hist = alternate_minimize([_quadratic(0.0), _quadratic(1.0)], [1, 1], params, sched, seed=4)
    x, m, v = 0.7, 0.0, 0.0
    for t, (i, _) in enumerate(hist):
        g = 2 * (x - (0.0, 1.0)[i])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        lr = cosine_lr(t, sched)
        x -= lr * (m / (1 - 0.9 ** (t + 1))) / (math.sqrt(v / (1 - 0.999 ** (t + 1))) + 1e-8)
    assert {i for i, _ in hist} == {0, 1}
    assert params["x"].data[0] == pytest.approx(x, abs=1e-12)


def test_balanced_policy_tracks_weights():
    params = T.ParamTree(x=T.Tensor(np.array([0.0]), requires_grad=True))
    hist = alternate_minimize([_quadratic(0.0), _quadratic(1.0)], [1, 3], params,
                              LRSchedule(0.01, 40))
    hist_b = alternate_minimize([_quadratic(0.0), _quadratic(1.0)], [1, 3], params,
                                LRSchedule(0.01, 40), policy="balanced")
    idx = [i for i, _ in hist_b]
    assert idx.count(0) == 10 and idx.count(1) == 30
    assert len(hist) == 40


def test_alternating_quadratics_converge(f64):
    params = T.ParamTree(x=T.Tensor(np.array([3.0]), requires_grad=True))
    alternate_minimize([_quadratic(0.0), _quadratic(1.0)], [1, 1], params,
                       LRSchedule(0.05, 2000), policy="balanced")
    assert abs(params["x"].data[0] - 0.5) < 1e-3


# -- trainer ----------------------------------------------------------------

def test_trainer_alternates_single_objective():
    tr = tiny_trainer([image_text()], steps=12)
    recs = tr.run(12)
    assert [r["step"] for r in recs] == list(range(12))
    for r in recs:
        assert r["objective"] in ("NCE_pair(image,text)", "SCE")
        assert r["task"] == "it:" + r["objective"]
        assert math.isfinite(r["loss"])
    assert list(recs[0])[:9] == ["step", "task", "variant", "objective", "loss", "lr",
                                 "tokens_per_batch", "plan_builds_total", "wall_ms"]


def test_trainer_records_budget_and_builds():
    tr = tiny_trainer([image_text()], steps=30)
    recs = tr.run(30)
    assert {r["tokens_per_batch"] for r in recs} == {8 * 4}
    builds = [b for r in recs for b in r["built_signatures"]]
    assert len(builds) == len(set(builds)) == recs[-1]["plan_builds_total"]
    assert recs[-1]["plan_builds_total"] == len({r["signature"] for r in recs})


def test_trainer_uses_fresh_gradients():
    tr = tiny_trainer([image_text()], steps=5)
    tr.step()
    twin = copy.deepcopy(tr.state)
    for p in twin.params.values():
        p.grad = None
    seen = {}
    tr._apply = lambda grads, lr: seen.setdefault("a", {k: g.copy() for k, g in grads.items()})
    tr.step()
    other = tiny_trainer([image_text()], steps=5)
    other.state = twin
    other._apply = lambda grads, lr: seen.setdefault("b", {k: g.copy() for k, g in grads.items()})
    other.step()
    for k in seen["a"]:
        np.testing.assert_array_equal(seen["a"][k], seen["b"][k])


def test_trainer_deterministic():
    a = tiny_trainer([image_text()], steps=8, seed=3).run(8)
    b = tiny_trainer([image_text()], steps=8, seed=3).run(8)
    strip = lambda rs: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rs]
    assert strip(a) == strip(b)


@pytest.mark.parametrize("mode", ["summed", "accumulated"])
def test_combined_modes_cover_all_tasks(mode):
    tr = tiny_trainer([image_text()], steps=4, mode=mode)
    recs = tr.run(4)
    for r in recs:
        assert r["task"] == "all" and r["objective"] == mode
        assert set(r["task_losses"]) == {"it:NCE_pair(image,text)", "it:SCE"}
    if mode == "summed":
        assert recs[0]["loss"] == pytest.approx(sum(recs[0]["task_losses"].values()), rel=1e-5)


def test_divergence_surfaces_task_and_step():
    tr = tiny_trainer([image_text(objectives=("SCE",))], steps=4)
    tr.run(2)
    tr.state.params["heads/cls_it/b"].data[:] = np.nan
    with pytest.raises(DivergenceError) as e:
        tr.step()
    assert e.value.step == 2 and e.value.task == "it:SCE"


def test_expert_choice_balance_over_training():
    tr = tiny_trainer([image_text()], steps=25)
    tr.run(25)
    assert tr.state.monitor.checks > 0 and tr.state.monitor.violations == 0


def test_video_dataset_trains_on_reduced_variants():
    ds = DatasetSpec("vt", ("video", "text"), 32, 8, ("NCE_pair(video,text)",), TINY_SYNTH)
    tr = tiny_trainer([ds], steps=10)
    recs = tr.run(10)
    assert {r["variant"] for r in recs} <= {"half_res", "quarter_batch", "drop_token"}
    assert {r["tokens_per_batch"] for r in recs} == {8 * 4}
