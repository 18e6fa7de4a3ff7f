"""Run configuration and its JSON file form.

Every key is checked before any work starts; unknown keys are an error.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import MoEConfig
from .optim import LrSchedule

GATE_MODES = ("column-concat-random", "centroid")
PARTITION_MODES = ("kmeans", "random")
EXECUTORS = ("process", "thread", "sequential")
DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class PhaseSchedule:
    kind: str = "constant"
    peak_lr: float = 1e-3
    warmup_ratio: float = 0.0
    weight_decay: float = 0.0

    def for_steps(self, steps: int) -> LrSchedule:
        return LrSchedule(self.kind, self.peak_lr, self.warmup_ratio, steps)


@dataclass(frozen=True)
class ModelSection:
    """MoEConfig minus the vocabulary, which comes from the corpus."""

    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    num_experts: int = 2
    top_k: int = 2

    def build(self, vocab_size: int, max_seq_len: int) -> MoEConfig:
        return MoEConfig(vocab_size=vocab_size, max_seq_len=max_seq_len, **asdict(self))


@dataclass(frozen=True)
class RunConfig:
    corpus: str = ""
    model: ModelSection = field(default_factory=ModelSection)
    submodel_steps: int = 400
    finetune_steps: int = 400
    baseline_steps: int | None = None
    batch_size: int = 8
    seq_len: int = 64
    seed: int = 0
    submodel_schedule: PhaseSchedule = field(default_factory=lambda: PhaseSchedule("constant", 2e-3, 0.0, 0.0))
    finetune_schedule: PhaseSchedule = field(default_factory=lambda: PhaseSchedule("cosine", 2e-3, 0.03, 0.01))
    baseline_schedule: PhaseSchedule | None = None
    gate_init: str = "column-concat-random"
    partition: str = "kmeans"
    eval_every: int = 50
    eval_fraction: float = 0.1
    eval_windows: int = 64
    executor: str = "process"
    dtype: str = "float64"
    run_root: str | None = None

    def __post_init__(self):
        if self.gate_init not in GATE_MODES:
            raise ConfigError(f"gate_init must be one of {GATE_MODES}")
        if self.partition not in PARTITION_MODES:
            raise ConfigError(f"partition must be one of {PARTITION_MODES}")
        if self.executor not in EXECUTORS:
            raise ConfigError(f"executor must be one of {EXECUTORS}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {tuple(DTYPES)}")
        for name in ("submodel_steps", "finetune_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.baseline_steps is not None and self.baseline_steps < 0:
            raise ConfigError("baseline_steps must be non-negative")
        for name in ("batch_size", "seq_len", "eval_every", "eval_windows"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.eval_fraction < 1:
            raise ConfigError("eval_fraction must lie in [0, 1)")

    @property
    def num_experts(self) -> int:
        return self.model.num_experts

    @property
    def full_steps(self) -> int:
        """Baseline budget; defaults to the disco phases laid end to end."""
        if self.baseline_steps is not None:
            return self.baseline_steps
        return self.submodel_steps + self.finetune_steps

    @property
    def full_schedule(self) -> PhaseSchedule:
        return self.baseline_schedule or self.finetune_schedule

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def with_experts(self, e: int, top_k: int | None = None):
        k = min(self.model.top_k, e) if top_k is None else top_k
        return replace(self, model=replace(self.model, num_experts=e, top_k=k))

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key {where}.{unknown[0]}" if where else f"unknown key {unknown[0]}")
    kwargs = {}
    for name, value in data.items():
        _check_scalar(known[name].type, value, f"{where}.{name}" if where else name)
        if name == "model":
            value = _build(ModelSection, value, "model")
        elif name.endswith("_schedule") and value is not None:
            value = _build(PhaseSchedule, value, name)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from None


_SCALARS = {"int": (int,), "float": (int, float), "str": (str,)}


def _check_scalar(annotation, value, where):
    base, _, rest = annotation.partition(" | ")
    if base not in _SCALARS or (value is None and rest == "None"):
        return
    if isinstance(value, bool) or not isinstance(value, _SCALARS[base]):
        raise ConfigError(f"{where} has invalid type {type(value).__name__}")


def _check_types(cfg: RunConfig):
    def expect(obj, name, types, where):
        v = getattr(obj, name)
        if not isinstance(v, types) or isinstance(v, bool) and bool not in types:
            raise ConfigError(f"{where}{name} has invalid type {type(v).__name__}")

    for name in ("submodel_steps", "finetune_steps", "batch_size", "seq_len", "seed", "eval_every", "eval_windows"):
        expect(cfg, name, (int,), "")
    for name in ("d_model", "n_layers", "n_heads", "d_ff", "num_experts", "top_k"):
        expect(cfg.model, name, (int,), "model.")
    expect(cfg, "corpus", (str,), "")
    expect(cfg, "eval_fraction", (int, float), "")
    for sname in ("submodel_schedule", "finetune_schedule", "baseline_schedule"):
        s = getattr(cfg, sname)
        if s is None:
            continue
        expect(s, "kind", (str,), sname + ".")
        for n in ("peak_lr", "warmup_ratio", "weight_decay"):
            expect(s, n, (int, float), sname + ".")
        try:
            s.for_steps(1)
        except Exception as exc:
            raise ConfigError(f"{sname}: {exc}") from None


def from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    _check_types(cfg)
    try:
        cfg.model.build(vocab_size=1, max_seq_len=cfg.seq_len)
    except ConfigError as exc:
        raise ConfigError(f"model: {exc}") from None
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    cfg = from_dict(data)
    if cfg.corpus and not Path(cfg.corpus).is_absolute():
        cfg = replace(cfg, corpus=str((path.parent / cfg.corpus).resolve()))
    return cfg


def dump(cfg: RunConfig, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
