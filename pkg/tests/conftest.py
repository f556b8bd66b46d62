from __future__ import annotations

import os
from pathlib import Path

import pytest
import torch
from hypothesis import HealthCheck, settings

from sudoku_mechlab.grid import read_puzzle_csv
from sudoku_mechlab.model import ModelConfig, init_model
from sudoku_mechlab.tracegen import generate_corpus

DATA = Path(__file__).parent / "data"
PUZZLES = DATA / "puzzles.csv"

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def records():
    return read_puzzle_csv(PUZZLES, limit=400)


@pytest.fixture(scope="session")
def traces(records):
    return generate_corpus(records[:120], 7)


@pytest.fixture(scope="session")
def sequences(traces):
    return [t.tokens for t in traces]


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(n_layers=2, n_heads=2, d_model=16, d_mlp=32, max_seq=250, seed=3)


@pytest.fixture(scope="session")
def small_model():
    m = init_model(ModelConfig(n_layers=2, n_heads=2, d_model=32, d_mlp=64, seed=11))
    m.eval()
    return m
