import json
from dataclasses import replace

import pytest

from moedisco import config as cfgmod
from moedisco.config import ModelSection, PhaseSchedule, RunConfig
from moedisco.errors import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert cfg.num_experts == 2 and cfg.model.top_k == 2
    assert cfg.full_steps == cfg.submodel_steps + cfg.finetune_steps
    assert cfg.full_schedule == cfg.finetune_schedule
    assert replace(cfg, baseline_steps=5).full_steps == 5


def test_with_experts_clamps_top_k():
    cfg = RunConfig()
    assert cfg.with_experts(1).model.top_k == 1
    assert cfg.with_experts(4).model.top_k == 2
    assert cfg.with_experts(4, top_k=3).model.top_k == 3


@pytest.mark.parametrize("data, msg", [
    ({"nope": 1}, "unknown key nope"),
    ({"model": {"width": 3}}, "unknown key model.width"),
    ({"batch_size": "8"}, "batch_size"),
    ({"seed": 1.5}, "seed"),
    ({"batch_size": True}, "batch_size"),
    ({"model": {"top_k": 3}}, "model"),
    ({"partition": "spectral"}, "partition"),
    ({"submodel_schedule": {"kind": "linear"}}, "submodel_schedule"),
    ({"eval_fraction": 1.0}, "eval_fraction"),
    ({"finetune_steps": -1}, "finetune_steps"),
])
def test_invalid_configs(data, msg):
    with pytest.raises(ConfigError, match=msg):
        cfgmod.from_dict(data)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        cfgmod.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="not valid JSON"):
        cfgmod.load(tmp_path / "bad.json")


def test_round_trip_and_path_resolution(tmp_path):
    cfg = RunConfig(corpus="data/c.txt", model=ModelSection(num_experts=4, top_k=1),
                    finetune_schedule=PhaseSchedule("cosine", 1e-3, 0.1, 0.0), dtype="float32")
    cfgmod.dump(cfg, tmp_path / "c.json")
    back = cfgmod.load(tmp_path / "c.json")
    assert back.corpus == str((tmp_path / "data/c.txt").resolve())
    assert replace(back, corpus=cfg.corpus) == cfg
    abs_cfg = json.loads((tmp_path / "c.json").read_text())
    abs_cfg["corpus"] = "/abs/c.txt"
    (tmp_path / "d.json").write_text(json.dumps(abs_cfg))
    assert cfgmod.load(tmp_path / "d.json").corpus == "/abs/c.txt"


def test_digest_tracks_content():
    a = RunConfig()
    assert a.digest() == RunConfig().digest() and len(a.digest()) == 12
    assert a.digest() != replace(a, seed=1).digest()
