"""Shared Transformer encoder with QK-LayerNorm attention and MoE FFNs.

Blocks are pre-LayerNorm. The last ``floor(moe_layer_fraction * L)`` layers
replace the dense FFN with ``num_experts`` expert FFNs. Expert-choice routing
pools every token of the current call (batch x sequence flattened); each
expert takes its top ``k = floor(c * S_total / E)`` tokens by router
probability, so every expert always processes exactly ``k`` tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

ROUTER_KINDS = ("expert_choice", "tokens_choose", "dense")


@dataclass
class EncoderConfig:
    num_layers: int = 4
    dim: int = 64
    ffn_dim: int = 256
    heads: int | None = None
    num_experts: int = 4
    capacity_factor: float = 1.0
    router_kind: str = "expert_choice"
    moe_layer_fraction: float = 0.5
    tokens_choose_capacity: float = 1.05
    qk_layernorm: bool = True
    # tiny so q/k scale invariance holds even at init-scale projections
    qk_eps: float = 1e-12
    init_std: float = 0.02

    def __post_init__(self):
        if self.heads is None:
            self.heads = max(1, self.dim // 64)
        if self.dim % self.heads:
            raise ValueError(f"hidden size {self.dim} not divisible by {self.heads} heads")
        if self.num_experts < 1:
            raise ValueError("num_experts must be >= 1")
        if self.capacity_factor <= 0:
            raise ValueError("capacity_factor must be > 0")
        if self.router_kind not in ROUTER_KINDS:
            raise ValueError(f"router_kind must be one of {ROUTER_KINDS}, got {self.router_kind!r}")
        if not 0.0 <= self.moe_layer_fraction <= 1.0:
            raise ValueError("moe_layer_fraction must be in [0, 1]")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def num_moe_layers(self) -> int:
        if self.router_kind == "dense":
            return 0
        return int(math.floor(self.moe_layer_fraction * self.num_layers))

    def is_moe_layer(self, layer: int) -> bool:
        """``layer`` is 0-based."""
        return layer >= self.num_layers - self.num_moe_layers


def layer_prefix(layer: int, tower: int | None = None) -> str:
    base = "encoder" if tower is None else f"encoder_t{tower}"
    return f"{base}/layer_{layer:02d}"


def init_encoder_params(cfg: EncoderConfig, seed: int, tower: int | None = None) -> dict:
    """Initialise one encoder tower.

    Each layer draws from its own stream, and the router is drawn last, so a
    one-expert MoE layer gets exactly the weights of the dense FFN it replaces.
    """
    d, f, dh, std = cfg.dim, cfg.ffn_dim, cfg.head_dim, cfg.init_std
    params = {}

    def ones(n):
        return T.Tensor(np.ones(n), requires_grad=True)

    def zeros(n):
        return T.Tensor(np.zeros(n), requires_grad=True)

    for layer in range(cfg.num_layers):
        rng = np.random.default_rng([seed, 7919, layer, 0 if tower is None else tower + 1])
        pre = layer_prefix(layer, tower)

        def normal(*shape, s=std):
            return T.Tensor(rng.standard_normal(shape) * s, requires_grad=True)

        params[f"{pre}/ln1/g"], params[f"{pre}/ln1/b"] = ones(d), zeros(d)
        for name in ("wq", "wk", "wv"):
            params[f"{pre}/attn/{name}"] = normal(d, d, s=1.0 / math.sqrt(d))
        params[f"{pre}/attn/wo"] = normal(d, d, s=1.0 / math.sqrt(d))
        params[f"{pre}/attn/bo"] = zeros(d)
        if cfg.qk_layernorm:
            params[f"{pre}/attn/q_ln/g"], params[f"{pre}/attn/q_ln/b"] = ones(dh), zeros(dh)
            params[f"{pre}/attn/k_ln/g"], params[f"{pre}/attn/k_ln/b"] = ones(dh), zeros(dh)
        params[f"{pre}/ln2/g"], params[f"{pre}/ln2/b"] = ones(d), zeros(d)
        n_ffn = cfg.num_experts if cfg.is_moe_layer(layer) else 1
        for e in range(n_ffn):
            sub = f"{pre}/moe/expert_{e}" if cfg.is_moe_layer(layer) else f"{pre}/mlp"
            params[f"{sub}/w1"] = normal(d, f, s=1.0 / math.sqrt(d))
            params[f"{sub}/b1"] = zeros(f)
            params[f"{sub}/w2"] = normal(f, d, s=1.0 / math.sqrt(f))
            params[f"{sub}/b2"] = zeros(d)
        if cfg.is_moe_layer(layer):
            params[f"{pre}/moe/router"] = normal(d, cfg.num_experts)
    final = "encoder" if tower is None else f"encoder_t{tower}"
    params[f"{final}/final_ln/g"], params[f"{final}/final_ln/b"] = ones(d), zeros(d)
    return params


# ---------------------------------------------------------------------------
# attention

def _split_heads(x: T.Tensor, heads: int) -> T.Tensor:
    b, s, d = x.shape
    return T.transpose(T.reshape(x, (b, s, heads, d // heads)), (0, 2, 1, 3))


def attention(x: T.Tensor, params: dict, prefix: str, cfg: EncoderConfig,
              return_probs: bool = False):
    """Pre-LN multi-head self-attention block with residual.

    With QK LayerNorm on, queries and keys are normalised per head after
    their projections, so rescaling ``wq``/``wk`` leaves the attention
    probabilities unchanged.
    """
    b, s, d = x.shape
    if d != cfg.dim:
        raise ValueError(f"attention input width {d} != hidden size {cfg.dim}")
    p = f"{prefix}/attn"
    h = T.layer_norm(x, params[f"{prefix}/ln1/g"], params[f"{prefix}/ln1/b"])
    h2 = T.reshape(h, (b * s, d))
    q = _split_heads(T.reshape(T.matmul(h2, params[f"{p}/wq"]), (b, s, d)), cfg.heads)
    k = _split_heads(T.reshape(T.matmul(h2, params[f"{p}/wk"]), (b, s, d)), cfg.heads)
    v = _split_heads(T.reshape(T.matmul(h2, params[f"{p}/wv"]), (b, s, d)), cfg.heads)
    if cfg.qk_layernorm:
        q = T.layer_norm(q, params[f"{p}/q_ln/g"], params[f"{p}/q_ln/b"], eps=cfg.qk_eps)
        k = T.layer_norm(k, params[f"{p}/k_ln/g"], params[f"{p}/k_ln/b"], eps=cfg.qk_eps)
    scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(cfg.head_dim))
    probs = T.softmax(scores, axis=-1)
    ctx = T.transpose(T.matmul(probs, v), (0, 2, 1, 3))
    ctx = T.reshape(ctx, (b * s, d))
    out = T.add(T.matmul(ctx, params[f"{p}/wo"]), params[f"{p}/bo"])
    y = T.add(x, T.reshape(out, (b, s, d)))
    return (y, probs) if return_probs else y


# ---------------------------------------------------------------------------
# routing

@dataclass
class RouterDecision:
    """Which tokens each expert processes and with what combine weight.

    ``expert_tokens[e]`` holds flat token indices for expert ``e`` and
    ``weights[e]`` a matching differentiable [n_e] tensor (``None`` if the
    expert got nothing). ``dropped`` lists tokens no expert processes
    (tokens-choose only).
    """
    kind: str
    num_tokens: int
    expert_tokens: list
    weights: list
    capacity: int
    dropped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def loads(self) -> list:
        return [len(t) for t in self.expert_tokens]


def router_probs(tokens: T.Tensor, router: T.Tensor) -> T.Tensor:
    """Softmax over experts of ``tokens @ router``: [S_total, E]."""
    return T.softmax(T.matmul(tokens, router), axis=-1)


def expert_choice_capacity(num_tokens: int, num_experts: int, c: float) -> int:
    return int(math.floor(c * num_tokens / num_experts + 1e-9))


def route_expert_choice(tokens: T.Tensor, router: T.Tensor, c: float) -> RouterDecision:
    s_total, _ = tokens.shape
    e = router.shape[1]
    if s_total < e:
        raise ValueError(f"expert-choice routing needs at least {e} tokens, got {s_total}")
    k = expert_choice_capacity(s_total, e, c)
    if k < 1:
        raise ValueError(f"expert capacity k = floor({c} * {s_total} / {e}) = 0; "
                         "batch too small for the expert count")
    probs = router_probs(tokens, router)
    vals, idx = T.top_k(T.swap_last(probs), k, axis=-1)
    weights = []
    for ex in range(e):
        row = T.reshape(T.gather_rows(vals, [ex]), (k,))
        weights.append(row)
    decision = RouterDecision("expert_choice", s_total, [idx[ex] for ex in range(e)], weights, k)
    if any(n != k for n in decision.loads):
        raise RuntimeError(f"expert-choice load imbalance: loads {decision.loads}, expected {k}")
    return decision


def route_tokens_choose(tokens: T.Tensor, router: T.Tensor, capacity: float = 1.05,
                        k: int = 1) -> RouterDecision:
    """Top-1 tokens-choose routing with a per-expert buffer.

    Each token picks its argmax expert; experts accept tokens in descending
    router probability up to ``ceil(capacity * S_total / E)``, the rest are
    dropped and only pass through the residual.
    """
    if k != 1:
        raise NotImplementedError("only top-1 tokens-choose routing is supported")
    s_total, _ = tokens.shape
    e = router.shape[1]
    cap = int(math.ceil(capacity * s_total / e - 1e-9))
    probs = router_probs(tokens, router)
    p = probs.data
    choice = np.argmax(p, axis=-1)
    best = p[np.arange(s_total), choice]
    flat_probs = T.reshape(probs, (s_total * e,))
    expert_tokens, weights, dropped = [], [], []
    for ex in range(e):
        mine = np.nonzero(choice == ex)[0]
        order = mine[np.argsort(-best[mine], kind="stable")]
        accepted = np.sort(order[:cap])
        dropped.extend(order[cap:].tolist())
        expert_tokens.append(accepted)
        weights.append(T.gather_rows(flat_probs, accepted * e + ex) if len(accepted) else None)
    return RouterDecision("tokens_choose", s_total, expert_tokens, weights, cap,
                          np.sort(np.asarray(dropped, dtype=np.int64)))


def reroute_fixed(tokens: T.Tensor, router: T.Tensor, like: RouterDecision) -> RouterDecision:
    """Reuse ``like``'s token selections with combine weights from the current router."""
    s_total, _ = tokens.shape
    e = router.shape[1]
    flat = T.reshape(router_probs(tokens, router), (s_total * e,))
    weights = [T.gather_rows(flat, np.asarray(idx) * e + ex) if len(idx) else None
               for ex, idx in enumerate(like.expert_tokens)]
    return RouterDecision(like.kind, s_total, list(like.expert_tokens), weights,
                          like.capacity, like.dropped)


def route(tokens: T.Tensor, router: T.Tensor, cfg: EncoderConfig) -> RouterDecision:
    if cfg.router_kind == "expert_choice":
        return route_expert_choice(tokens, router, cfg.capacity_factor)
    if cfg.router_kind == "tokens_choose":
        return route_tokens_choose(tokens, router, cfg.tokens_choose_capacity)
    raise ValueError(f"router kind {cfg.router_kind!r} does not route")


# ---------------------------------------------------------------------------
# feed-forward

def ffn(x: T.Tensor, params: dict, prefix: str) -> T.Tensor:
    """Two-layer GeLU FFN on [N, D] rows."""
    h = T.gelu(T.add(T.matmul(x, params[f"{prefix}/w1"]), params[f"{prefix}/b1"]))
    return T.add(T.matmul(h, params[f"{prefix}/w2"]), params[f"{prefix}/b2"])


def scale_rows(x: T.Tensor, w: T.Tensor) -> T.Tensor:
    """Multiply row i of [N, D] ``x`` by ``w[i]`` under the trailing broadcast rule."""
    return T.swap_last(T.mul(T.swap_last(x), w))


def moe_ffn(x: T.Tensor, params: dict, prefix: str, decision: RouterDecision,
            normed: T.Tensor | None = None) -> T.Tensor:
    """Dispatch routed tokens to experts, combine, add the residual.

    ``x`` is the block input [B, S, D]; ``normed`` its pre-FFN LayerNorm
    (computed here if omitted). Expert outputs are accumulated in ascending
    expert order.
    """
    b, s, d = x.shape
    n = b * s
    if decision.num_tokens != n:
        raise ValueError(f"router decision covers {decision.num_tokens} tokens, input has {n}")
    if normed is None:
        normed = T.layer_norm(x, params[f"{prefix}/ln2/g"], params[f"{prefix}/ln2/b"])
    flat = T.reshape(normed, (n, d))
    out = None
    for ex, (idx, w) in enumerate(zip(decision.expert_tokens, decision.weights)):
        if len(idx) == 0:
            continue
        if w is None or w.shape != (len(idx),):
            raise ValueError(f"expert {ex}: combine weights do not match {len(idx)} selections")
        y = ffn(T.gather_rows(flat, idx), params, f"{prefix}/moe/expert_{ex}")
        contrib = T.scatter_add_rows(scale_rows(y, w), idx, n)
        out = contrib if out is None else T.add(out, contrib)
    if out is None:
        return x
    return T.add(x, T.reshape(out, (b, s, d)))


@dataclass
class RoutingMonitor:
    """Records per-layer expert loads for every routed call."""
    checks: int = 0
    violations: int = 0
    records: list = field(default_factory=list)
    keep_records: bool = False

    def observe(self, layer: int, decision: RouterDecision) -> None:
        self.checks += 1
        if decision.kind == "expert_choice" and any(n != decision.capacity for n in decision.loads):
            self.violations += 1
        if self.keep_records:
            self.records.append((layer, decision.kind, decision.capacity, tuple(decision.loads),
                                 len(decision.dropped)))


def encoder_forward(tokens: T.Tensor, params: dict, cfg: EncoderConfig,
                    monitor: RoutingMonitor | None = None, tower: int | None = None,
                    decisions: list | None = None, fixed: list | None = None) -> T.Tensor:
    """Run the encoder stack on [B, S, D] tokens; returns [B, S, D].

    ``decisions`` collects each MoE layer's routing. ``fixed`` replays
    previously collected decisions (selections frozen, weights recomputed),
    which is what gradient checks need.
    """
    if tokens.ndim != 3 or tokens.shape[-1] != cfg.dim:
        raise ValueError(f"encoder expects [B, S, {cfg.dim}] tokens, got {tokens.shape}")
    x = tokens
    b, s, d = x.shape
    moe_index = 0
    for layer in range(cfg.num_layers):
        pre = layer_prefix(layer, tower)
        if f"{pre}/ln1/g" not in params:
            raise KeyError(f"missing parameters for {pre}; config and params disagree")
        x = attention(x, params, pre, cfg)
        normed = T.layer_norm(x, params[f"{pre}/ln2/g"], params[f"{pre}/ln2/b"])
        if cfg.is_moe_layer(layer):
            flat = T.reshape(normed, (b * s, d))
            router = params[f"{pre}/moe/router"]
            if fixed is not None:
                decision = reroute_fixed(flat, router, fixed[moe_index])
            else:
                decision = route(flat, router, cfg)
            if monitor is not None:
                monitor.observe(layer, decision)
            if decisions is not None:
                decisions.append(decision)
            x = moe_ffn(x, params, pre, decision, normed)
            moe_index += 1
        else:
            y = ffn(T.reshape(normed, (b * s, d)), params, f"{pre}/mlp")
            x = T.add(x, T.reshape(y, (b, s, d)))
    final = "encoder" if tower is None else f"encoder_t{tower}"
    return T.layer_norm(x, params[f"{final}/final_ln/g"], params[f"{final}/final_ln/b"])


def count_params(cfg: EncoderConfig) -> tuple:
    """Analytic (dense, sparse) encoder parameter counts, embeddings excluded."""
    d, f, dh = cfg.dim, cfg.ffn_dim, cfg.head_dim
    attn = 3 * d * d + d * d + d
    qk = 4 * dh if cfg.qk_layernorm else 0
    norms = 4 * d
    mlp = d * f + f + f * d + d
    dense = cfg.num_layers * (attn + qk + norms + mlp) + 2 * d
    extra = cfg.num_moe_layers * ((cfg.num_experts - 1) * mlp + d * cfg.num_experts)
    return dense, dense + extra
