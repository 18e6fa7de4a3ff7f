"""Reassemble a full MoE from independently trained single-expert submodels."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .errors import AssemblyError, ConfigError, DomainError, SchemaError
from .model import INIT_STD, MoEConfig, ParamStore, expert_shapes, gate_shapes, shared_shapes


@dataclass
class SubmodelCheckpoint:
    expert_index: int
    shared: dict
    expert: dict
    n_k: int
    seed: int = 0
    steps: int = 0
    wall_time_s: float = 0.0
    shard_id: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_k < 1:
            raise DomainError(f"submodel {self.expert_index} was trained on an empty shard")

    def meta(self):
        # wall time stays out of the file so reruns produce identical bytes
        return {
            "kind": "submodel", "expert_index": self.expert_index, "n_k": self.n_k, "seed": self.seed,
            "steps": self.steps,
            "shard_id": self.expert_index if self.shard_id is None else self.shard_id, **self.extra,
        }

    def save(self, path):
        checkpoint.save(path, {**self.shared, **self.expert}, self.meta())

    @classmethod
    def load(cls, path, wall_time_s=0.0):
        arrays, meta = checkpoint.load(path)
        shared = {p: a for p, a in arrays.items() if p.startswith("shared/")}
        expert = {p: a for p, a in arrays.items() if p.startswith("expert/")}
        known = {"kind", "expert_index", "n_k", "seed", "steps", "wall_time_s", "shard_id"}
        return cls(meta["expert_index"], shared, expert, meta["n_k"], meta.get("seed", 0), meta.get("steps", 0),
                   wall_time_s, meta.get("shard_id"), {k: v for k, v in meta.items() if k not in known})


@dataclass(frozen=True)
class MergeWeights:
    gammas: tuple

    def __post_init__(self):
        g = np.asarray(self.gammas, dtype=np.float64)
        if np.any(g < 0) or abs(g.sum() - 1.0) > 1e-12:
            raise DomainError(f"merge weights must be non-negative and sum to 1, got {self.gammas}")

    def __len__(self):
        return len(self.gammas)

    def __iter__(self):
        return iter(self.gammas)


def wp_weights(sample_counts) -> MergeWeights:
    """Sample-count proportional weights n_k / sum(n)."""
    counts = [int(n) for n in sample_counts]
    if not counts:
        raise DomainError("no sample counts given")
    if min(counts) < 1:
        raise DomainError("every shard needs at least one sample")
    total = sum(counts)
    if len(set(counts)) == 1:
        return MergeWeights(tuple(1.0 / len(counts) for _ in counts))
    gammas = [n / total for n in counts]
    # push the rounding residue onto the largest weight so the sum is exact
    resid = 1.0 - sum(gammas)
    j = int(np.argmax(gammas))
    gammas[j] += resid
    return MergeWeights(tuple(gammas))


def _check_same_structure(dicts, what):
    ref = dicts[0]
    for i, d in enumerate(dicts[1:], start=1):
        for path in sorted(set(ref) | set(d)):
            if path not in ref or path not in d:
                raise SchemaError(f"{what} of checkpoint {i} diverges at path {path!r}")
            if np.shape(ref[path]) != np.shape(d[path]):
                raise SchemaError(f"{what} of checkpoint {i} has shape {np.shape(d[path])} at {path!r}, "
                                  f"expected {np.shape(ref[path])}")


def merge_shared(checkpoints, weights) -> dict:
    """Elementwise convex combination of the submodels' shared parameters."""
    gammas = list(weights)
    if len(gammas) != len(checkpoints):
        raise SchemaError(f"{len(checkpoints)} checkpoints but {len(gammas)} merge weights")
    if not checkpoints:
        raise SchemaError("nothing to merge")
    dicts = [c.shared for c in checkpoints]
    _check_same_structure(dicts, "shared parameters")
    merged = {}
    for path in dicts[0]:
        # anchored at the first input so identical inputs come back unchanged
        anchor = np.asarray(dicts[0][path], dtype=np.float64)
        acc = np.zeros_like(anchor)
        for g, d in zip(gammas[1:], dicts[1:]):
            acc += g * (np.asarray(d[path], dtype=np.float64) - anchor)
        merged[path] = (anchor + acc).astype(np.asarray(dicts[0][path]).dtype)
    return merged


def concat_experts(checkpoints) -> dict:
    """Slot every checkpoint's expert block into its own index, untouched."""
    indices = sorted(c.expert_index for c in checkpoints)
    if len(set(indices)) != len(indices):
        raise AssemblyError(f"duplicate expert index in {indices}")
    if indices != list(range(len(indices))):
        raise AssemblyError(f"expert indices {indices} do not cover 0..{len(indices) - 1}")
    by_index = {c.expert_index: c for c in checkpoints}
    rel = []
    for k in range(len(indices)):
        prefix = f"expert/{k}/"
        block = by_index[k].expert
        bad = [p for p in block if not p.startswith(prefix)]
        if bad:
            raise AssemblyError(f"checkpoint for expert {k} holds foreign path {bad[0]!r}")
        rel.append({p[len(prefix):]: a for p, a in block.items()})
    _check_same_structure(rel, "expert parameters")
    out = {}
    for k in range(len(indices)):
        out.update(by_index[k].expert)
    return out


def init_gating(config: MoEConfig, mode: str = "column-concat-random", seed: int = 0, centroids=None,
                dtype=np.float64) -> dict:
    """One [d_model, E] gate per MoE layer, built column by column."""
    e, d = config.num_experts, config.d_model
    gates = {}
    if mode == "column-concat-random":
        for l in range(config.n_layers):
            cols = [np.random.default_rng([seed, l, k]).standard_normal(d) * INIT_STD for k in range(e)]
            gates[f"gate/{l}"] = np.stack(cols, axis=1).astype(dtype)
    elif mode == "centroid":
        if centroids is None:
            raise ConfigError("centroid gate initialisation needs the shard manifest centroids")
        c = np.asarray(centroids, dtype=np.float64)
        if c.shape != (e, d):
            raise ConfigError(f"centroids have shape {c.shape}, expected {(e, d)}")
        norms = np.linalg.norm(c, axis=1, keepdims=True)
        cols = [c[k] / norms[k] if norms[k] > 0 else c[k] for k in range(e)]
        w = np.stack(cols, axis=1).astype(dtype)
        for l in range(config.n_layers):
            gates[f"gate/{l}"] = w.copy()
    else:
        raise ConfigError(f"unknown gate init mode {mode!r}")
    return gates


def assemble(config: MoEConfig, shared: dict, experts: dict, gates: dict) -> ParamStore:
    expected = {**shared_shapes(config), **gate_shapes(config)}
    for k in range(config.num_experts):
        expected.update(expert_shapes(config, k))
    given = {**shared, **experts, **gates}
    for path in expected:
        if path not in given:
            raise SchemaError(f"missing parameter path {path!r}")
    return ParamStore(config, {p: np.array(a, copy=True) for p, a in given.items()})


def merge_report(path, weights, checkpoints, merged_shared):
    """Delimited report: merge weights, then per-path norms of the merge and its inputs."""
    lines = ["# merge report", "expert,n_k,gamma"]
    for c, g in zip(checkpoints, weights):
        lines.append(f"{c.expert_index},{c.n_k},{g!r}")
    head = ",".join(f"norm_in_{c.expert_index}" for c in checkpoints)
    lines += ["", f"path,norm_merged,{head}"]
    for p, a in merged_shared.items():
        norms = ",".join(f"{np.linalg.norm(c.shared[p]):.10g}" for c in checkpoints)
        lines.append(f"{p},{np.linalg.norm(a):.10g},{norms}")
    Path(path).write_text("\n".join(lines) + "\n")


def merge_checkpoints(config, checkpoints, gate_mode="column-concat-random", seed=0, centroids=None,
                      weights=None):
    """wp weights -> shared average -> expert concat -> gate init -> assemble."""
    checkpoints = sorted(checkpoints, key=lambda c: c.expert_index)
    if weights is None:
        weights = wp_weights([c.n_k for c in checkpoints])
    shared = merge_shared(checkpoints, weights)
    experts = concat_experts(checkpoints)
    dtype = next(iter(shared.values())).dtype
    gates = init_gating(config, gate_mode, seed=seed, centroids=centroids, dtype=dtype)
    return assemble(config, shared, experts, gates), weights, shared
