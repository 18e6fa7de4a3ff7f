"""End-to-end driver: partition, independent submodel workers, merge, fine-tune.

Workers share nothing.  Each one reads the broadcast backbone and its own
expert from files, trains on its shard, and writes its checkpoint into its own
directory; all file traffic goes through an :class:`AccessLog` so the run can
prove no worker touched another worker's state.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _kernels, checkpoint
from . import config as cfgmod
from .data import (CharTokenizer, DataShard, WindowStream, encode_corpus, eval_windows, partition_dataset,
                   pca_project, read_lines, sentence_vectors, shard_labels, train_eval_split, write_manifest,
                   write_scatter)
from .errors import DomainError, NumericalError
from .merge import SubmodelCheckpoint, merge_checkpoints, merge_report
from .model import DenseSubmodel, ParamStore, lm_loss, mean_nll
from .optim import OptimizerState, adamw_step, lr_at
from .tensor import Tensor

log = logging.getLogger(__name__)


def derive_seed(*parts: int) -> int:
    """Deterministic 32-bit seed from a tuple of non-negative ints."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def worker_seed(global_seed: int, k: int) -> int:
    return derive_seed(global_seed, 0, k)


def params_digest(arrays: dict) -> str:
    h = hashlib.sha256()
    for p in sorted(arrays):
        h.update(p.encode())
        h.update(np.ascontiguousarray(arrays[p]).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class TrainingReport:
    phase: str
    worker_id: int | None = None
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    ppls: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    steps_completed: int = 0
    wall_time_s: float = 0.0

    def add(self, step, loss, wall):
        if self.steps and step <= self.steps[-1]:
            raise DomainError(f"report steps must increase ({step} after {self.steps[-1]})")
        self.steps.append(int(step))
        self.losses.append(float(loss))
        self.ppls.append(math.exp(loss) if loss < 700 else math.inf)
        self.wall_times.append(float(wall))

    @property
    def final_loss(self):
        return self.losses[-1]

    def to_csv(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "ppl", "wall_time_s"])
            for row in zip(self.steps, self.losses, self.ppls, self.wall_times):
                w.writerow([row[0], repr(row[1]), repr(row[2]), f"{row[3]:.6f}"])

    @classmethod
    def from_csv(cls, path, phase=None, worker_id=None):
        rep = cls(phase or Path(path).stem, worker_id)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rep.steps.append(int(row["step"]))
                rep.losses.append(float(row["loss"]))
                rep.ppls.append(float(row["ppl"]))
                rep.wall_times.append(float(row["wall_time_s"]))
        if rep.steps:
            rep.steps_completed = rep.steps[-1]
            rep.wall_time_s = rep.wall_times[-1]
        return rep


def steps_to_reach(report: TrainingReport, target: float):
    """First evaluated step whose loss is at or below ``target`` (None if never)."""
    for s, l in zip(report.steps, report.losses):
        if l <= target:
            return s
    return None


# ---------------------------------------------------------------------------
# generic training loop
# ---------------------------------------------------------------------------

def train_loop(params: dict, forward, stream, schedule, steps, evaluate, eval_every, report,
               weight_decay=0.0, worker_id=None):
    """AdamW over ``params`` (path -> Tensor) for ``steps`` batches of ``stream``."""
    lrs = schedule.for_steps(steps)
    state = OptimizerState.for_params({p: t.data for p, t in params.items()}, lr=lrs.peak_lr,
                                      weight_decay=weight_decay)
    t0 = time.perf_counter()

    def checked_eval(step):
        value = evaluate()
        if not math.isfinite(value):
            raise NumericalError(f"non-finite eval loss at step {step}"
                                 + ("" if worker_id is None else f" in worker {worker_id}"),
                                 step=step, worker=worker_id)
        return value

    report.add(0, checked_eval(0), 0.0)
    for step in range(steps):
        x, y = stream.next_batch()
        for t in params.values():
            t.grad = None
        loss = lm_loss(forward(x), y)
        if not np.isfinite(loss.data):
            raise NumericalError(f"non-finite loss at step {step} (batch {stream.batches_drawn - 1})"
                                 + ("" if worker_id is None else f" in worker {worker_id}"),
                                 step=step, batch=stream.batches_drawn - 1, worker=worker_id)
        loss.backward()
        state.lr = lr_at(step, lrs)
        try:
            adamw_step({p: t.data for p, t in params.items()}, {p: t.grad for p, t in params.items()}, state)
        except NumericalError as exc:
            raise NumericalError(f"{exc} at step {step}", step=step, worker=worker_id, **exc.context) from None
        done = step + 1
        if done % eval_every == 0 or done == steps:
            report.add(done, checked_eval(done), time.perf_counter() - t0)
    report.steps_completed = steps
    report.wall_time_s = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# corpus preparation
# ---------------------------------------------------------------------------

@dataclass
class Corpus:
    lines: list
    tokenizer: CharTokenizer
    sentences: list
    train_idx: np.ndarray
    eval_idx: np.ndarray

    @property
    def train(self):
        return [self.sentences[i] for i in self.train_idx]

    @property
    def held_out(self):
        return [self.sentences[i] for i in self.eval_idx]


def prepare_corpus(cfg: cfgmod.RunConfig, lines=None) -> Corpus:
    lines = read_lines(cfg.corpus) if lines is None else lines
    tok = CharTokenizer.from_lines(lines)
    sentences = encode_corpus(lines, tok)
    tr, ev = train_eval_split(len(sentences), cfg.eval_fraction, cfg.seed)
    return Corpus(lines, tok, sentences, tr, ev)


def _eval_set(cfg, corpus):
    sents = corpus.held_out or corpus.train
    return eval_windows(sents, cfg.seq_len, corpus.tokenizer.sep_id, cfg.eval_windows)


def _shard_eval_sets(cfg, corpus, shards, table, full):
    """Held-out windows per shard: each held-out sentence goes to its nearest centroid.

    Random shards have no meaningful centroid, so every worker scores on ``full``.
    """
    held = corpus.held_out
    if cfg.partition != "kmeans" or not held:
        return [full] * len(shards)
    labels, _ = _kernels.kmeans_assign(sentence_vectors(held, table),
                                       np.ascontiguousarray(np.stack([s.centroid for s in shards])))
    out = []
    for k in range(len(shards)):
        mine = [s for s, lab in zip(held, labels) if lab == k]
        out.append(eval_windows(mine, cfg.seq_len, corpus.tokenizer.sep_id, cfg.eval_windows) if mine else full)
    return out


def _model_config(cfg, corpus):
    return cfg.model.build(corpus.tokenizer.vocab_size, cfg.seq_len)


# ---------------------------------------------------------------------------
# workers
# ---------------------------------------------------------------------------

class AccessLog:
    """Records every file a worker reads or writes."""

    def __init__(self):
        self.reads: list[str] = []
        self.writes: list[str] = []

    def load(self, path):
        self.reads.append(str(Path(path).resolve()))
        return checkpoint.load(path)

    def save(self, path, arrays, meta):
        self.writes.append(str(Path(path).resolve()))
        checkpoint.save(path, arrays, meta)

    def write_text(self, path, text):
        self.writes.append(str(Path(path).resolve()))
        Path(path).write_text(text)


@dataclass
class WorkerTask:
    k: int
    seed: int
    tokens: list            # token arrays of the shard's sentences
    n_k: int
    shared_path: str
    expert_path: str
    out_dir: str
    model_config: dict
    run: dict
    sep_id: int
    eval_set: list


@dataclass
class WorkerResult:
    k: int
    checkpoint_path: str
    report: TrainingReport
    wall_time_s: float
    reads: list
    writes: list
    init_shared_digest: str


def _run_worker(task: WorkerTask) -> WorkerResult:
    from .data import Sentence
    from .model import MoEConfig

    run = cfgmod.from_dict(task.run)
    mcfg = MoEConfig(**task.model_config)
    io = AccessLog()
    shared, _ = io.load(task.shared_path)
    expert, _ = io.load(task.expert_path)
    digest = params_digest(shared)
    sub = DenseSubmodel(mcfg, {p: Tensor(a, requires_grad=True) for p, a in shared.items()},
                        {p: Tensor(a, requires_grad=True) for p, a in expert.items()}, task.k)
    sentences = [Sentence(t, i) for i, t in enumerate(task.tokens)]
    stream = WindowStream(sentences, run.seq_len, run.batch_size, task.seed, task.sep_id)
    report = TrainingReport("submodel", task.k)
    sched = run.submodel_schedule
    t0 = time.perf_counter()
    train_loop(sub.params, sub.forward, stream, sched, run.submodel_steps,
               lambda: mean_nll(sub, task.eval_set)[0], run.eval_every, report,
               weight_decay=sched.weight_decay, worker_id=task.k)
    wall = time.perf_counter() - t0
    out = Path(task.out_dir)
    ckpt = SubmodelCheckpoint(task.k, {p: t.data for p, t in sub.shared.items()},
                              {p: t.data for p, t in sub.expert.items()}, task.n_k, task.seed,
                              run.submodel_steps, wall, task.k)
    ckpt_path = out / "submodel.ckpt"
    io.save(ckpt_path, {**ckpt.shared, **ckpt.expert}, ckpt.meta())
    io.write_text(out / "timing.json", json.dumps({"wall_time_s": wall}) + "\n")
    report.to_csv(out / "report.csv")
    io.writes.append(str((out / "report.csv").resolve()))
    return WorkerResult(task.k, str(ckpt_path), report, wall, io.reads, io.writes, digest)


def run_workers(tasks, executor="process"):
    """Run every task to completion; results come back in task order."""
    if executor == "sequential" or len(tasks) == 1:
        return [_run_worker(t) for t in tasks]
    pool_cls = ProcessPoolExecutor if executor == "process" else ThreadPoolExecutor
    with pool_cls(max_workers=len(tasks)) as pool:
        futures = [pool.submit(_run_worker, t) for t in tasks]
        return [f.result() for f in futures]


def cross_worker_accesses(results, run_dir) -> int:
    """Count file accesses by one worker into another worker's private files."""
    run_dir = Path(run_dir).resolve()
    count = 0
    for r in results:
        own = (run_dir / "submodels" / str(r.k)).resolve()
        own_expert = (run_dir / "broadcast" / f"expert_{r.k}.ckpt").resolve()
        shared = (run_dir / "broadcast" / "shared.ckpt").resolve()
        for p in r.reads + r.writes:
            p = Path(p)
            if p == shared or p == own_expert or own in p.parents:
                continue
            count += 1
    return count


# ---------------------------------------------------------------------------
# phases
# ---------------------------------------------------------------------------

def train_submodel(k, shard: DataShard, shared_init: dict, expert_init: dict, cfg: cfgmod.RunConfig,
                   eval_set, sep_id, model_config=None, work_dir=None) -> SubmodelCheckpoint:
    """Train one dense submodel on one shard in isolation."""
    if shard.n_k < 1:
        raise DomainError(f"shard {k} is empty")
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        base = Path(work_dir or tmp)
        (base / "broadcast").mkdir(parents=True, exist_ok=True)
        checkpoint.save(base / "broadcast" / "shared.ckpt", shared_init)
        checkpoint.save(base / "broadcast" / f"expert_{k}.ckpt", expert_init)
        task = _task(k, shard, cfg, model_config, base, sep_id, eval_set)
        res = _run_worker(task)
        ckpt = SubmodelCheckpoint.load(res.checkpoint_path, res.wall_time_s)
        ckpt.extra["report"] = res.report
        return ckpt


def _task(k, shard, cfg, model_config, base, sep_id, eval_set):
    return WorkerTask(
        k=k, seed=worker_seed(cfg.seed, k), tokens=[s.tokens for s in shard.sentences], n_k=shard.n_k,
        shared_path=str(base / "broadcast" / "shared.ckpt"),
        expert_path=str(base / "broadcast" / f"expert_{k}.ckpt"),
        out_dir=str(base / "submodels" / str(k)), model_config=model_config.to_dict(),
        run=cfg.to_dict(), sep_id=sep_id, eval_set=eval_set,
    )


def train_full(store: ParamStore, sentences, cfg, steps, schedule, eval_set, sep_id, phase, seed):
    """Train every parameter of ``store`` in place on ``sentences``."""
    stream = WindowStream(sentences, cfg.seq_len, cfg.batch_size, seed, sep_id)
    report = TrainingReport(phase)
    train_loop(store.params, store.forward, stream, schedule, steps,
               lambda: mean_nll(store, eval_set)[0], cfg.eval_every, report,
               weight_decay=schedule.weight_decay)
    return report


def finetune(store: ParamStore, sentences, cfg, eval_set, sep_id):
    return train_full(store, sentences, cfg, cfg.finetune_steps, cfg.finetune_schedule, eval_set, sep_id,
                      "finetune", derive_seed(cfg.seed, 1))


@dataclass
class DiscoResult:
    final: ParamStore
    merged: ParamStore
    reports: list
    shards: list
    weights: object
    checkpoints: list
    s_max_wall_time_s: float
    f_wall_time_s: float
    cross_worker_accesses: int
    broadcast_ok: bool
    run_dir: Path
    config: cfgmod.RunConfig

    @property
    def finetune_report(self):
        return self.reports[-1]

    @property
    def submodel_reports(self):
        return self.reports[:-1]


def _default_run_dir(cfg, label):
    import os
    import tempfile

    root = cfg.run_root or os.environ.get("DISCO_RUN_ROOT") or tempfile.mkdtemp(prefix="moedisco-")
    return Path(root) / f"{label}-{cfg.digest()}"


def partition_phase(cfg, corpus, store, run_dir=None):
    """Cluster (or randomly deal) the training sentences into E shards."""
    train = corpus.train
    table = store.params["shared/tok_emb"].data
    shards = partition_dataset(train, table, cfg.num_experts, seed=cfg.seed, mode=cfg.partition)
    # shard indices refer to the full corpus
    for s in shards:
        s.indices = corpus.train_idx[s.indices]
    if run_dir is not None:
        write_manifest(Path(run_dir) / "manifest.txt", shards, len(corpus.sentences))
        vecs = sentence_vectors(train, table)
        labels = shard_labels(shards, len(corpus.sentences))[corpus.train_idx]
        write_scatter(Path(run_dir) / "scatter.csv", pca_project(vecs).coords, labels)
    return shards


def run_disco(cfg: cfgmod.RunConfig, run_dir=None, lines=None) -> DiscoResult:
    run_dir = Path(run_dir) if run_dir is not None else _default_run_dir(cfg, "disco")
    run_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.dump(cfg, run_dir / "config.json")
    corpus = prepare_corpus(cfg, lines)
    mcfg = _model_config(cfg, corpus)
    eval_set = _eval_set(cfg, corpus)
    sep = corpus.tokenizer.sep_id
    init = ParamStore.init(mcfg, cfg.seed, cfg.np_dtype)

    shards = partition_phase(cfg, corpus, init, run_dir)
    log.info("shard sizes: %s", [s.n_k for s in shards])

    bdir = run_dir / "broadcast"
    shared0 = {p: t.data for p, t in init.shared.items()}
    checkpoint.save(bdir / "shared.ckpt", shared0, {"kind": "broadcast"})
    for k in range(mcfg.num_experts):
        checkpoint.save(bdir / f"expert_{k}.ckpt", {p: t.data for p, t in init.expert(k).items()},
                        {"kind": "expert-init", "expert_index": k})
    shard_evals = _shard_eval_sets(cfg, corpus, shards, init.params["shared/tok_emb"].data, eval_set)
    tasks = [_task(k, shards[k], cfg, mcfg, run_dir, sep, shard_evals[k]) for k in range(mcfg.num_experts)]
    results = run_workers(tasks, cfg.executor)
    crossings = cross_worker_accesses(results, run_dir)
    digest0 = params_digest(shared0)
    broadcast_ok = all(r.init_shared_digest == digest0 for r in results)

    ckpts = [SubmodelCheckpoint.load(r.checkpoint_path, r.wall_time_s) for r in results]
    centroids = np.stack([s.centroid for s in shards]) if cfg.gate_init == "centroid" else None
    merged, weights, merged_shared = merge_checkpoints(mcfg, ckpts, cfg.gate_init, derive_seed(cfg.seed, 2),
                                                       centroids)
    checkpoint.save(run_dir / "merged.ckpt", merged.arrays(), {"kind": "merged", "gammas": list(weights)})
    merge_report(run_dir / "merge_report.csv", weights, ckpts, merged_shared)

    final = merged.copy()
    ft = finetune(final, corpus.train, cfg, eval_set, sep)
    checkpoint.save(run_dir / "final.ckpt", final.arrays(), {"kind": "final"})

    reports = [r.report for r in results] + [ft]
    rdir = run_dir / "reports"
    for r in results:
        r.report.to_csv(rdir / f"submodel_{r.k}.csv")
    ft.to_csv(rdir / "finetune.csv")
    s_max = max(r.wall_time_s for r in results)
    timing = {"mode": "disco", "num_experts": mcfg.num_experts, "s_max_wall_time_s": s_max,
              "s_wall_times_s": [r.wall_time_s for r in results], "f_wall_time_s": ft.wall_time_s}
    (run_dir / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    return DiscoResult(final, merged, reports, shards, weights, ckpts, s_max, ft.wall_time_s, crossings,
                       broadcast_ok, run_dir, cfg)


def run_full_baseline(cfg: cfgmod.RunConfig, run_dir=None, lines=None):
    run_dir = Path(run_dir) if run_dir is not None else _default_run_dir(cfg, "full")
    run_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.dump(cfg, run_dir / "config.json")
    corpus = prepare_corpus(cfg, lines)
    mcfg = _model_config(cfg, corpus)
    eval_set = _eval_set(cfg, corpus)
    store = ParamStore.init(mcfg, cfg.seed, cfg.np_dtype)
    report = train_full(store, corpus.train, cfg, cfg.full_steps, cfg.full_schedule, eval_set,
                        corpus.tokenizer.sep_id, "full", derive_seed(cfg.seed, 1))
    checkpoint.save(run_dir / "final.ckpt", store.arrays(), {"kind": "full"})
    report.to_csv(run_dir / "reports" / "full.csv")
    (run_dir / "timing.json").write_text(json.dumps({"mode": "full", "wall_time_s": report.wall_time_s}) + "\n")
    return store, report


def config_diff(a: cfgmod.RunConfig, b: cfgmod.RunConfig) -> dict:
    """Flattened keys whose values differ between two configs."""
    def flat(d, prefix=""):
        out = {}
        for k, v in d.items():
            if isinstance(v, dict):
                out.update(flat(v, prefix + k + "."))
            else:
                out[prefix + k] = v
        return out

    fa, fb = flat(a.to_dict()), flat(b.to_dict())
    return {k: (fa.get(k), fb.get(k)) for k in sorted(set(fa) | set(fb)) if fa.get(k) != fb.get(k)}


def run_ablation_partition(cfg: cfgmod.RunConfig, run_dir=None, lines=None) -> dict:
    """Two disco runs that differ only in how data is dealt to experts."""
    run_dir = Path(run_dir) if run_dir is not None else _default_run_dir(cfg, "ablate-partition")
    out = {}
    for mode in ("kmeans", "random"):
        c = replace(cfg, partition=mode)
        out[mode] = run_disco(c, run_dir / mode, lines)
    return out


def run_ablation_experts(cfg: cfgmod.RunConfig, expert_counts=(2, 4), run_dir=None, lines=None) -> dict:
    run_dir = Path(run_dir) if run_dir is not None else _default_run_dir(cfg, "ablate-experts")
    return {e: run_disco(cfg.with_experts(e), run_dir / f"E{e}", lines) for e in expert_counts}
