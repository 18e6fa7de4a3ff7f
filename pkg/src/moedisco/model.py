"""Toy MoE transformer, dense single-expert submodels, loss and perplexity.

Parameters are addressed by path.  The prefix says which block a tensor
belongs to, so merge tooling never needs to know the architecture:

    shared/...            embeddings, attention, layer norms, output head
    gate/<layer>          [d_model, E] router matrix of one MoE layer
    expert/<k>/...        feed-forward weights of expert k
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError, InputError, SchemaError, ShapeError
from .tensor import Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class MoEConfig:
    vocab_size: int = 32
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    num_experts: int = 2
    top_k: int = 2
    max_seq_len: int = 64

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "num_experts", "top_k", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError("top_k must lie in [1, num_experts]")

    def to_dict(self):
        return asdict(self)


def shared_shapes(cfg: MoEConfig) -> dict[str, tuple]:
    d = cfg.d_model
    shapes = {"shared/tok_emb": (cfg.vocab_size, d), "shared/pos_emb": (cfg.max_seq_len, d)}
    for l in range(cfg.n_layers):
        p = f"shared/layer/{l}/"
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.wk": (d, d), p + "attn.wv": (d, d), p + "attn.wo": (d, d),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
        })
    shapes.update({"shared/lnf.g": (d,), "shared/lnf.b": (d,), "shared/head": (d, cfg.vocab_size)})
    return shapes


def expert_shapes(cfg: MoEConfig, k: int) -> dict[str, tuple]:
    shapes = {}
    for l in range(cfg.n_layers):
        p = f"expert/{k}/layer/{l}/"
        shapes.update({
            p + "w1": (cfg.d_model, cfg.d_ff), p + "b1": (cfg.d_ff,),
            p + "w2": (cfg.d_ff, cfg.d_model), p + "b2": (cfg.d_model,),
        })
    return shapes


def gate_shapes(cfg: MoEConfig) -> dict[str, tuple]:
    return {f"gate/{l}": (cfg.d_model, cfg.num_experts) for l in range(cfg.n_layers)}


def all_shapes(cfg: MoEConfig) -> dict[str, tuple]:
    shapes = shared_shapes(cfg)
    shapes.update(gate_shapes(cfg))
    for k in range(cfg.num_experts):
        shapes.update(expert_shapes(cfg, k))
    return shapes


def _init_array(path, shape, rng, dtype):
    leaf = path.rsplit("/", 1)[-1]
    if leaf.endswith(".g"):
        return np.ones(shape, dtype=dtype)
    if leaf.endswith(".b") or leaf in ("b1", "b2"):
        return np.zeros(shape, dtype=dtype)
    return (rng.standard_normal(shape) * INIT_STD).astype(dtype)


def expert_path(path: str, k: int) -> str:
    """Rewrite an ``expert/<j>/...`` path to expert slot ``k``."""
    head, _, rest = path.split("/", 2)
    if head != "expert":
        raise SchemaError(f"{path!r} is not an expert path")
    return f"expert/{k}/{rest}"


def split_expert(path: str) -> tuple[int, str]:
    _, k, rest = path.split("/", 2)
    return int(k), rest


class ParamStore:
    """Full MoE parameter set: shared backbone, gates and E expert blocks."""

    def __init__(self, config: MoEConfig, params: dict):
        self.config = config
        self.params = {p: v if isinstance(v, Tensor) else Tensor(v, requires_grad=True) for p, v in params.items()}
        missing = set(all_shapes(config)) - set(self.params)
        if missing:
            raise SchemaError(f"missing parameter path {sorted(missing)[0]!r}")
        extra = set(self.params) - set(all_shapes(config))
        if extra:
            raise SchemaError(f"unexpected parameter path {sorted(extra)[0]!r}")
        for path, shape in all_shapes(config).items():
            if self.params[path].shape != shape:
                raise SchemaError(f"{path!r} has shape {self.params[path].shape}, expected {shape}")

    @classmethod
    def init(cls, config: MoEConfig, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        return cls(config, {p: _init_array(p, s, rng, dtype) for p, s in all_shapes(config).items()})

    @property
    def shared(self) -> dict:
        return {p: t for p, t in self.params.items() if p.startswith("shared/")}

    @property
    def gates(self) -> dict:
        return {p: t for p, t in self.params.items() if p.startswith("gate/")}

    def expert(self, k: int) -> dict:
        prefix = f"expert/{k}/"
        return {p: t for p, t in self.params.items() if p.startswith(prefix)}

    @property
    def experts(self) -> list[dict]:
        return [self.expert(k) for k in range(self.config.num_experts)]

    def arrays(self) -> dict[str, np.ndarray]:
        return {p: t.data for p, t in self.params.items()}

    def copy(self):
        return ParamStore(self.config, {p: t.data.copy() for p, t in self.params.items()})

    def forward(self, tokens, force_expert=None, trace=None):
        return moe_forward(self.params, tokens, self.config, force_expert=force_expert, trace=trace)


@dataclass
class DenseSubmodel:
    """Shared backbone plus a single expert; the gate is gone."""

    config: MoEConfig
    shared: dict
    expert: dict
    expert_index: int

    @property
    def params(self) -> dict:
        return {**self.shared, **self.expert}

    def forward(self, tokens, trace=None):
        return moe_forward(self.params, tokens, self.config, force_expert=self.expert_index, trace=trace)


def extract_submodel(params: ParamStore, k: int) -> DenseSubmodel:
    if not 0 <= k < params.config.num_experts:
        raise IndexError(f"expert index {k} outside [0, {params.config.num_experts})")
    shared = {p: Tensor(t.data.copy(), requires_grad=True) for p, t in params.shared.items()}
    expert = {p: Tensor(t.data.copy(), requires_grad=True) for p, t in params.expert(k).items()}
    return DenseSubmodel(params.config, shared, expert, k)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

_MASKS: dict[int, np.ndarray] = {}


def _causal(t):
    m = _MASKS.get(t)
    if m is None:
        m = _MASKS[t] = np.tril(np.ones((t, t), dtype=bool))
    return m


def _attention(P, x, l, cfg):
    b, t, d = x.shape
    h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    p = f"shared/layer/{l}/attn."

    def heads(w):
        return (x @ P[p + w]).reshape(b, t, h, dh).transpose(0, 2, 1, 3)

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    att = T.softmax(scores, axis=-1, mask=_causal(t))
    y = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return y @ P[p + "wo"]


def _expert_ffn(P, x, k, l):
    p = f"expert/{k}/layer/{l}/"
    return T.gelu(x @ P[p + "w1"] + P[p + "b1"]) @ P[p + "w2"] + P[p + "b2"]


def _moe_layer(P, x, l, cfg, force_expert, trace):
    n = x.shape[0]
    if force_expert is not None:
        if trace is not None:
            trace.setdefault("weight_sums", []).append(np.ones(n))
        return _expert_ffn(P, x, force_expert, l)
    weights, sel = T.topk_gate(x @ P[f"gate/{l}"], cfg.top_k)
    if trace is not None:
        trace.setdefault("weight_sums", []).append(weights.data.sum(axis=1))
        trace.setdefault("selected", []).append(sel)
    out = None
    for e in range(cfg.num_experts):
        rows = np.flatnonzero((sel == e).any(axis=1))
        if rows.size == 0:
            continue
        if rows.size == n:
            y = _expert_ffn(P, x, e, l) * weights[:, e:e + 1]
        else:
            y = _expert_ffn(P, x[rows], e, l) * weights[rows, e:e + 1]
            y = T.scatter_rows(y, rows, n)
        out = y if out is None else out + y
    return out


def check_tokens(tokens, cfg: MoEConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.dtype.kind not in "iu":
        raise InputError(f"token ids must be integers, got dtype {tokens.dtype}")
    if tokens.ndim not in (1, 2) or tokens.shape[-1] == 0:
        raise InputError(f"tokens must be a non-empty [T] or [B, T] array, got {tokens.shape}")
    if tokens.shape[-1] > cfg.max_seq_len:
        raise InputError(f"sequence length {tokens.shape[-1]} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise InputError(f"token id out of range [0, {cfg.vocab_size})")
    return tokens


def moe_forward(params: dict, tokens, config: MoEConfig, force_expert=None, trace=None) -> Tensor:
    """Logits of shape [T, V] (or [B, T, V] for batched input).

    ``force_expert`` bypasses every gate and sends all tokens to that expert.
    ``trace``, if a dict, receives per-layer routing diagnostics.
    """
    tokens = check_tokens(tokens, config)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None]
    if force_expert is not None and not 0 <= force_expert < config.num_experts:
        raise IndexError(f"expert index {force_expert} outside [0, {config.num_experts})")
    P = params
    b, t = tokens.shape
    d = config.d_model
    x = T.embedding(P["shared/tok_emb"], tokens) + P["shared/pos_emb"][:t]
    for l in range(config.n_layers):
        p = f"shared/layer/{l}/"
        x = x + _attention(P, T.layernorm(x, P[p + "ln1.g"], P[p + "ln1.b"]), l, config)
        h = T.layernorm(x, P[p + "ln2.g"], P[p + "ln2.b"]).reshape(b * t, d)
        x = x + _moe_layer(P, h, l, config, force_expert, trace).reshape(b, t, d)
    x = T.layernorm(x, P["shared/lnf.g"], P["shared/lnf.b"])
    logits = x @ P["shared/head"]
    return logits[0] if single else logits


def lm_loss(logits: Tensor, targets) -> Tensor:
    """Mean next-token cross-entropy; ``targets`` aligned with the logit rows."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError("lm_loss", f"logits {logits.shape} do not align with targets {targets.shape}")
    v = logits.shape[-1]
    return T.cross_entropy(logits.reshape(-1, v), targets.reshape(-1))


def mean_nll(model, eval_set) -> tuple[float, int]:
    """Token-weighted mean NLL over ``eval_set`` of (inputs, targets) pairs."""
    total, count = 0.0, 0
    with T.no_grad():
        for inputs, targets in eval_set:
            targets = np.asarray(targets)
            loss = lm_loss(model.forward(inputs), targets)
            total += float(loss.data) * targets.size
            count += targets.size
    if count == 0:
        raise DomainError("evaluation set is empty")
    return total / count, count


def perplexity(model, eval_set) -> float:
    return math.exp(mean_nll(model, eval_set)[0])
