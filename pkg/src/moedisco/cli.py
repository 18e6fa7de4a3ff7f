"""Command-line front end.

Exit codes: 0 success, 2 input error, 3 refused overwrite, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint, cost, orchestrator as orch
from . import config as cfgmod
from .data import read_lines, read_manifest
from .errors import ConfigError, DiscoError, DomainError, InputError, NumericalError, SchemaError
from .merge import SubmodelCheckpoint, merge_checkpoints, merge_report
from .model import ParamStore

EXIT_OK, EXIT_INPUT, EXIT_REFUSED, EXIT_NUMERICAL = 0, 2, 3, 4
DONE_MARKER = "COMPLETE"

log = logging.getLogger("moedisco")


class Refused(Exception):
    pass


def _load_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if not cfg.corpus:
        raise ConfigError("config has no corpus path")
    return cfg


def _run_root(args, cfg):
    return Path(os.environ.get("DISCO_RUN_ROOT") or cfg.run_root or "runs")


def _run_dir(args, cfg, label) -> Path:
    """Explicit --out, else <root>/<label>-<config hash>-<timestamp>.

    A finished run with the same label and config hash is never redone
    without --force.
    """
    if args.out:
        out = Path(args.out)
        if (out / DONE_MARKER).exists() and not args.force:
            raise Refused(f"{out} already holds a completed run (use --force)")
        return out
    root = _run_root(args, cfg)
    prefix = f"{label}-{cfg.digest()}-"
    if root.is_dir() and not args.force:
        for d in sorted(root.iterdir()):
            if d.name.startswith(prefix) and (d / DONE_MARKER).exists():
                raise Refused(f"{d} already holds a completed run of this config (use --force)")
    return root / (prefix + time.strftime("%Y%m%d-%H%M%S"))


def _finish(run_dir):
    (Path(run_dir) / DONE_MARKER).write_text("ok\n")


def _labels_for(corpus_path):
    p = Path(str(corpus_path) + ".labels")
    if not p.is_file():
        return None
    return np.array([int(x) for x in p.read_text().split()])


def purity(shards, labels) -> float:
    hit = sum(np.bincount(labels[s.indices]).max() for s in shards if s.n_k)
    return hit / sum(s.n_k for s in shards)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_partition(args):
    cfg = _load_config(args)
    out = Path(args.out) if args.out else _run_root(args, cfg) / f"partition-{cfg.digest()}"
    out.mkdir(parents=True, exist_ok=True)
    corpus = orch.prepare_corpus(cfg)
    mcfg = cfg.model.build(corpus.tokenizer.vocab_size, cfg.seq_len)
    store = ParamStore.init(mcfg, cfg.seed, cfg.np_dtype)
    shards = orch.partition_phase(cfg, corpus, store, out)
    for s in shards:
        print(f"cluster {s.cluster_id}: {s.n_k} sentences")
    labels = _labels_for(cfg.corpus)
    if labels is not None and len(labels) == len(corpus.sentences):
        print(f"purity: {purity(shards, labels):.4f}")
    print(f"manifest: {out / 'manifest.txt'}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args)
    run_dir = _run_dir(args, cfg, args.mode)
    run_dir.mkdir(parents=True, exist_ok=True)
    args._run_dir = run_dir
    if args.mode == "disco":
        res = orch.run_disco(cfg, run_dir)
        print(f"finetune final loss {res.finetune_report.final_loss:.4f}; "
              f"merge weights {[round(g, 4) for g in res.weights]}")
    else:
        _, rep = orch.run_full_baseline(cfg, run_dir)
        print(f"full-parameter final loss {rep.final_loss:.4f}")
    _finish(run_dir)
    print(f"run directory: {run_dir}")
    return EXIT_OK


def _need_run_dir(args):
    if not args.out:
        raise InputError("--out must name an existing run directory")
    d = Path(args.out)
    if not d.is_dir():
        raise InputError(f"run directory {d} does not exist")
    return d


def cmd_merge(args):
    run_dir = _need_run_dir(args)
    cfg = cfgmod.load(args.config) if args.config else cfgmod.load(run_dir / "config.json")
    if (run_dir / "merged.ckpt").exists() and not args.force:
        raise Refused(f"{run_dir / 'merged.ckpt'} exists (use --force)")
    paths = sorted((run_dir / "submodels").glob("*/submodel.ckpt"))
    if not paths:
        raise InputError(f"no submodel checkpoints under {run_dir / 'submodels'}")
    ckpts = [SubmodelCheckpoint.load(p) for p in paths]
    manifest = read_manifest(run_dir / "manifest.txt") if (run_dir / "manifest.txt").exists() else None
    corpus = orch.prepare_corpus(cfg)
    mcfg = cfg.model.build(corpus.tokenizer.vocab_size, cfg.seq_len)
    centroids = None
    if cfg.gate_init == "centroid":
        if manifest is None:
            raise ConfigError("centroid gate initialisation needs manifest.txt in the run directory")
        centroids = manifest.centroid_matrix()
    merged, weights, shared = merge_checkpoints(mcfg, ckpts, cfg.gate_init, orch.derive_seed(cfg.seed, 2), centroids)
    checkpoint.save(run_dir / "merged.ckpt", merged.arrays(), {"kind": "merged", "gammas": list(weights)})
    merge_report(run_dir / "merge_report.csv", weights, ckpts, shared)
    print(f"merged {len(ckpts)} submodels with weights {[round(g, 4) for g in weights]}")
    return EXIT_OK


def cmd_finetune(args):
    run_dir = _need_run_dir(args)
    cfg = cfgmod.load(args.config) if args.config else cfgmod.load(run_dir / "config.json")
    if (run_dir / "final.ckpt").exists() and not args.force:
        raise Refused(f"{run_dir / 'final.ckpt'} exists (use --force)")
    arrays, _ = checkpoint.load(run_dir / "merged.ckpt")
    corpus = orch.prepare_corpus(cfg)
    mcfg = cfg.model.build(corpus.tokenizer.vocab_size, cfg.seq_len)
    store = ParamStore(mcfg, arrays)
    rep = orch.finetune(store, corpus.train, cfg, orch._eval_set(cfg, corpus), corpus.tokenizer.sep_id)
    checkpoint.save(run_dir / "final.ckpt", store.arrays(), {"kind": "final"})
    rep.to_csv(run_dir / "reports" / "finetune.csv")
    print(f"finetune final loss {rep.final_loss:.4f}")
    return EXIT_OK


def _write_paired(path, curves: dict):
    steps = sorted(set().union(*[set(r.steps) for r in curves.values()]))
    lookup = {k: dict(zip(r.steps, r.losses)) for k, r in curves.items()}
    lines = ["step," + ",".join(f"{k}_loss" for k in curves)]
    for s in steps:
        lines.append(f"{s}," + ",".join(repr(lookup[k][s]) if s in lookup[k] else "" for k in curves))
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_ablate(args):
    cfg = _load_config(args)
    run_dir = _run_dir(args, cfg, f"ablate-{args.which}")
    run_dir.mkdir(parents=True, exist_ok=True)
    args._run_dir = run_dir
    if args.which == "partition":
        res = orch.run_ablation_partition(cfg, run_dir)
        diff = orch.config_diff(res["kmeans"].config, res["random"].config)
        if set(diff) != {"partition"}:
            raise ConfigError(f"paired runs differ in more than the partition mode: {sorted(diff)}")
        _write_paired(run_dir / "partition_curves.csv", {m: r.finetune_report for m, r in res.items()})
    else:
        counts = [int(x) for x in args.experts.split(",")]
        res = orch.run_ablation_experts(cfg, counts, run_dir)
        runs = list(res.values())
        for r in runs[1:]:
            diff = orch.config_diff(runs[0].config, r.config)
            if not set(diff) <= {"model.num_experts", "model.top_k"}:
                raise ConfigError(f"paired runs differ in more than the expert count: {sorted(diff)}")
        _write_paired(run_dir / "experts_curves.csv", {f"E{e}": r.finetune_report for e, r in res.items()})
    for key, r in res.items():
        print(f"{key}: finetune final loss {r.finetune_report.final_loss:.4f}")
    _finish(run_dir)
    print(f"run directory: {run_dir}")
    return EXIT_OK


def _timing(run_dir):
    p = Path(run_dir) / "timing.json"
    if not p.is_file():
        raise InputError(f"no timing.json in {run_dir}")
    return json.loads(p.read_text())


def cmd_cost(args):
    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    rates = cost.read_rates(args.rates) if args.rates else {r.name: r for r in cost.DEFAULT_RATES.values()}
    try:
        low, high = rates[args.s_device], rates[args.f_device]
    except KeyError as exc:
        raise InputError(f"device {exc.args[0]!r} missing from rates") from None
    if args.replay_table4:
        reports = cost.table4_reports(low, high)
    else:
        if not args.runs:
            raise InputError("give run directories or --replay-table4")
        full = disco = None
        for d in args.runs:
            t = _timing(d)
            if t["mode"] == "full":
                full = cost.PhaseRecord("FULL", t["wall_time_s"] / 3600, 1, high)
            else:
                disco = t
        s = f = None
        workers = []
        if disco is not None:
            s = cost.PhaseRecord("S", disco["s_max_wall_time_s"] / 3600, disco["num_experts"], low)
            f = cost.PhaseRecord("F", disco["f_wall_time_s"] / 3600, 1, high)
            workers = [w / 3600 for w in disco["s_wall_times_s"]]
        reports = [cost.CostReport("toy", "run", full, s, f, workers)]
    cost.write_report(out / "cost_report.csv", reports)
    for r in reports:
        row = r.row()
        line = "  ".join(f"{k}={v}" for k, v in row.items() if v != "")
        print(line)
    for i, r in enumerate(reports):
        name = "cost_curve.csv" if len(reports) == 1 else f"cost_curve_{r.model}_{r.dataset}.csv"
        cost.write_curve(out / name, r.curve(args.resolution))
    return EXIT_OK


def cmd_report(args):
    run_dir = _need_run_dir(args)
    csvs = sorted((run_dir / "reports").glob("*.csv")) if (run_dir / "reports").is_dir() else []
    if not csvs:
        raise InputError(f"no reports under {run_dir}")
    print(f"{'phase':<14}{'steps':>8}{'first loss':>12}{'final loss':>12}{'final ppl':>12}{'wall s':>10}")
    for p in csvs:
        r = orch.TrainingReport.from_csv(p)
        print(f"{p.stem:<14}{r.steps_completed:>8}{r.losses[0]:>12.4f}{r.losses[-1]:>12.4f}"
              f"{r.ppls[-1]:>12.3f}{r.wall_time_s:>10.2f}")
    return EXIT_OK


def cmd_synth(args):
    from .synth import write_corpus

    lines, groups = write_corpus(args.output, n_groups=args.groups, n_tokens=args.tokens, seed=args.seed or 0)
    Path(str(args.output) + ".labels").write_text("\n".join(str(g) for g in groups) + "\n")
    print(f"wrote {len(lines)} lines to {args.output}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="moedisco", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, required=True):
        if config:
            sp.add_argument("--config", required=required, help="JSON run configuration")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", default=None, help="output / run directory")
        sp.add_argument("--force", action="store_true", help="overwrite a completed run")

    sp = sub.add_parser("partition", help="cluster the corpus into expert shards")
    common(sp)
    sp.set_defaults(func=cmd_partition)

    sp = sub.add_parser("train", help="run the staged pipeline or the full-parameter baseline")
    common(sp)
    sp.add_argument("--mode", choices=("disco", "full"), default="disco")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("merge", help="merge submodel checkpoints of a run directory")
    common(sp, required=False)
    sp.set_defaults(func=cmd_merge)

    sp = sub.add_parser("finetune", help="fine-tune the merged checkpoint of a run directory")
    common(sp, required=False)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("ablate", help="paired ablation runs")
    common(sp)
    sp.add_argument("--which", choices=("partition", "experts"), required=True)
    sp.add_argument("--experts", default="2,4", help="comma-separated expert counts")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("cost", help="dollar cost report and cumulative-cost curve")
    common(sp, config=False)
    sp.add_argument("--runs", nargs="*", default=[], help="run directories (full and/or disco)")
    sp.add_argument("--rates", default=None, help="rates file: name,dollars_per_hour")
    sp.add_argument("--s-device", default="RTX 4090")
    sp.add_argument("--f-device", default="A100")
    sp.add_argument("--replay-table4", action="store_true", help="use the published per-phase hours")
    sp.add_argument("--resolution", type=float, default=0.01, help="curve sampling step in hours")
    sp.set_defaults(func=cmd_cost)

    sp = sub.add_parser("report", help="summarise the phase reports of a run directory")
    common(sp, config=False)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("synth", help="write a synthetic disjoint-vocabulary corpus")
    sp.add_argument("output")
    sp.add_argument("--groups", type=int, default=2)
    sp.add_argument("--tokens", type=int, default=200_000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)
    return p


def _failure_record(args, exc, code):
    run_dir = getattr(args, "_run_dir", None)
    if run_dir is None:
        return
    rec = {"exit_code": code, "error": type(exc).__name__, "message": str(exc),
           "context": getattr(exc, "context", {}), "traceback": traceback.format_exc()}
    Path(run_dir).mkdir(parents=True, exist_ok=True)
    (Path(run_dir) / "failure.json").write_text(json.dumps(rec, indent=2, default=str) + "\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Refused as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    except NumericalError as exc:
        _failure_record(args, exc, EXIT_NUMERICAL)
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, ConfigError, SchemaError, DomainError, DiscoError, FileNotFoundError) as exc:
        _failure_record(args, exc, EXIT_INPUT)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
