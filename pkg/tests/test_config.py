from __future__ import annotations

import json

import pytest

from sudoku_mechlab.config import RunConfig, load_config
from sudoku_mechlab.errors import ConfigError


@pytest.mark.parametrize("mode", ["desk", "paper"])
def test_roundtrip(mode):
    cfg = RunConfig.preset(mode)
    back = RunConfig.from_dict(json.loads(cfg.to_json()))
    assert back == cfg
    assert back.to_json() == cfg.to_json()
    assert back.hash() == cfg.hash()


def test_paper_defaults():
    cfg = RunConfig.preset("paper")
    assert (cfg.train.lr, cfg.train.weight_decay, cfg.train.batch_size) == (1e-3, 0.1, 512)
    assert cfg.train.warmup_tokens == 5_000_000 and cfg.train.epochs == 6.0
    m = cfg.model
    assert (m.n_layers, m.n_heads, m.d_model, m.d_mlp, m.max_seq) == (8, 8, 576, 3456, 250)


def test_desk_defaults():
    cfg = RunConfig.preset("desk")
    assert (cfg.model.n_layers, cfg.model.n_heads, cfg.model.d_model, cfg.model.d_mlp) == (4, 4, 128, 768)
    assert cfg.train.batch_size == 64 and cfg.train.lr == 1e-3
    assert cfg.capture.n == 640  # probe split 512 / 128


def test_set_path():
    cfg = RunConfig.preset("desk")
    h = cfg.hash()
    cfg.set_path("train.lr", "0.003")
    cfg.set_path("patch.mode", "sequential")
    cfg.set_path("seed", "4")
    cfg.set_path("data.puzzles", "some/file.csv")
    assert cfg.train.lr == 0.003 and cfg.patch.mode == "sequential" and cfg.seed == 4
    assert cfg.data.puzzles == "some/file.csv"
    assert cfg.hash() != h


@pytest.mark.parametrize("key,value", [("train.nope", "1"), ("nope", "1"), ("a.b.c", "1"), ("train", "1"),
                                       ("patch.mode", "other"), ("model.n_heads", "3"), ("probe.train_fraction", "1.5")])
def test_set_path_errors(key, value):
    with pytest.raises(ConfigError):
        RunConfig.preset("desk").set_path(key, value)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown config keys"):
        RunConfig.from_dict({"mode": "desk", "bogus": 1})
    with pytest.raises(ConfigError, match="unknown keys in train"):
        RunConfig.from_dict({"train": {"learning_rate": 1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"mode": "huge"})


def test_partial_file_overlays_preset(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"mode": "paper", "train": {"lr": 5e-4}}))
    cfg = load_config(p)
    assert cfg.train.lr == 5e-4 and cfg.train.batch_size == 512
    assert load_config(p, mode="desk").model.d_model == 128


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError, match="valid JSON"):
        load_config(bad)
