import json

import pytest

from moedisco import config as cfgmod
from moedisco.cli import main
from moedisco.config import ModelSection, PhaseSchedule, RunConfig


@pytest.fixture
def env(tmp_path, monkeypatch):
    monkeypatch.setenv("DISCO_RUN_ROOT", str(tmp_path / "runs"))
    corpus = tmp_path / "corpus.txt"
    assert main(["synth", str(corpus), "--groups", "2", "--tokens", "8000", "--seed", "2"]) == 0
    cfg = RunConfig(corpus="corpus.txt", model=ModelSection(16, 1, 2, 24, 2, 2), submodel_steps=4, finetune_steps=4,
                    batch_size=4, seq_len=16, eval_every=2, eval_windows=6, executor="sequential")
    cfgmod.dump(cfg, tmp_path / "cfg.json")
    return tmp_path


def write_cfg(env, name="cfg.json", **kw):
    cfg = cfgmod.load(env / "cfg.json")
    cfgmod.dump(cfgmod.RunConfig(**{**cfg.__dict__, **kw}), env / name)
    return str(env / name)


def test_missing_inputs_exit_2(env, capsys):
    assert main(["train", "--config", str(env / "absent.json")]) == 2
    p = write_cfg(env, "nocorpus.json", corpus=str(env / "absent.txt"))
    assert main(["partition", "--config", p]) == 2
    assert "absent.txt" in capsys.readouterr().err
    assert main(["merge", "--out", str(env / "nowhere")]) == 2


def test_partition_prints_purity_and_is_reproducible(env, capsys):
    cfg = str(env / "cfg.json")
    assert main(["partition", "--config", cfg, "--out", str(env / "p1")]) == 0
    out = capsys.readouterr().out
    assert "cluster 0:" in out and "cluster 1:" in out
    purity = float(out.split("purity:")[1].split()[0])
    assert purity >= 0.99
    assert main(["partition", "--config", cfg, "--out", str(env / "p2")]) == 0
    assert (env / "p1/manifest.txt").read_bytes() == (env / "p2/manifest.txt").read_bytes()
    assert (env / "p1/scatter.csv").is_file()


def test_single_expert_manifest(env):
    p = write_cfg(env, "e1.json", model=ModelSection(16, 1, 2, 24, 1, 1))
    assert main(["partition", "--config", p, "--out", str(env / "p")]) == 0
    text = (env / "p/manifest.txt").read_text()
    clusters = text.split("[clusters]")[1].strip().splitlines()[1:]
    assert len(clusters) == 1
    assigned = text.split("[assignments]")[1].split("[clusters]")[0].strip().splitlines()[1:]
    assert {line.split(",")[1] for line in assigned} == {"0"}


def test_train_then_refuse_rerun(env, capsys):
    cfg = str(env / "cfg.json")
    before = (env / "corpus.txt").read_bytes(), (env / "cfg.json").read_bytes()
    assert main(["train", "--config", cfg]) == 0
    (run,) = (env / "runs").iterdir()
    assert (run / "COMPLETE").exists() and (run / "final.ckpt").exists()
    assert main(["train", "--config", cfg]) == 3
    assert "refused" in capsys.readouterr().err
    assert main(["train", "--config", cfg, "--force"]) == 0
    assert ((env / "corpus.txt").read_bytes(), (env / "cfg.json").read_bytes()) == before

    assert main(["report", "--out", str(run)]) == 0
    out = capsys.readouterr().out
    assert out.count("submodel_") == 2 and "finetune" in out


def test_stagewise_merge_and_finetune(env):
    cfg = str(env / "cfg.json")
    assert main(["train", "--config", cfg, "--out", str(env / "r")]) == 0
    merged = (env / "r/merged.ckpt").read_bytes()
    final = (env / "r/final.ckpt").read_bytes()
    assert main(["merge", "--out", str(env / "r")]) == 3
    assert main(["merge", "--out", str(env / "r"), "--force"]) == 0
    assert (env / "r/merged.ckpt").read_bytes() == merged
    assert main(["finetune", "--out", str(env / "r"), "--force"]) == 0
    assert (env / "r/final.ckpt").read_bytes() == final


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_4_with_failure_record(env, capsys):
    p = write_cfg(env, "hot.json", dtype="float32", finetune_schedule=PhaseSchedule("constant", 1e30, 0.0, 0.0))
    assert main(["train", "--config", p, "--out", str(env / "hot")]) == 4
    rec = json.loads((env / "hot/failure.json").read_text())
    assert rec["exit_code"] == 4 and rec["error"] == "NumericalError"
    assert "step" in rec["context"]
    assert not (env / "hot/COMPLETE").exists()


def test_cost_replay(env, capsys):
    assert main(["cost", "--replay-table4", "--out", str(env / "c")]) == 0
    out = capsys.readouterr().out
    assert "Savings=69.5%" in out and "Total Cost($)=6.8704" in out
    assert (env / "c/cost_report.csv").is_file()
    assert len(list((env / "c").glob("cost_curve_*.csv"))) == 6


def test_cost_from_runs(env, capsys):
    cfg = str(env / "cfg.json")
    assert main(["train", "--config", cfg, "--out", str(env / "d")]) == 0
    assert main(["train", "--config", cfg, "--mode", "full", "--out", str(env / "f")]) == 0
    (env / "rates.csv").write_text("cheap,0.5\ndear,3\n")
    assert main(["cost", "--runs", str(env / "d"), str(env / "f"), "--rates", str(env / "rates.csv"),
                 "--s-device", "cheap", "--f-device", "dear", "--out", str(env / "c")]) == 0
    row = (env / "c/cost_report.csv").read_text().splitlines()[1]
    assert "cheap*2" in row and "dear*1" in row
    assert (env / "c/cost_curve.csv").is_file()
    assert main(["cost", "--runs", str(env / "d"), "--rates", str(env / "rates.csv"), "--out", str(env / "c")]) == 2


@pytest.mark.parametrize("which, files", [("partition", ["kmeans", "random"]), ("experts", ["E1", "E2"])])
def test_ablate_outputs(env, which, files):
    args = ["ablate", "--config", str(env / "cfg.json"), "--which", which, "--out", str(env / "a")]
    if which == "experts":
        args += ["--experts", "1,2"]
    assert main(args) == 0
    curves = (env / f"a/{which}_curves.csv").read_text().splitlines()
    assert curves[0] == "step," + ",".join(f"{f}_loss" for f in files)
    assert len(curves) == 4
    trees = [d.name for d in (env / "a").iterdir() if d.is_dir()]
    assert len(trees) == 2
