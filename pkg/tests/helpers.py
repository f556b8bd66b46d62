"""Shared test data and hypothesis strategies."""
from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np
from hypothesis import strategies as st

from sudoku_mechlab.grid import Board, read_puzzle_csv

PUZZLES = Path(__file__).parent / "data" / "puzzles.csv"


@lru_cache(maxsize=1)
def solutions() -> tuple[str, ...]:
    return tuple(r.solution for r in read_puzzle_csv(PUZZLES, limit=60))


def partial_board(solution: str, keep: np.ndarray) -> Board:
    """The solution with only the ``keep`` cells filled; always consistent."""
    return Board([int(ch) if k else 0 for ch, k in zip(solution, keep)])


@st.composite
def consistent_boards(draw, min_density: float = 0.0, max_density: float = 1.0):
    sol = draw(st.sampled_from(solutions()))
    density = draw(st.floats(min_density, max_density))
    seed = draw(st.integers(0, 2**32 - 1))
    keep = np.random.default_rng(seed).random(81) < density
    return partial_board(sol, keep)


def random_boards(n: int, seed: int, lo: float = 0.2, hi: float = 0.9) -> list[Board]:
    rng = np.random.default_rng(seed)
    sols = solutions()
    out = []
    for _ in range(n):
        sol = sols[int(rng.integers(len(sols)))]
        out.append(partial_board(sol, rng.random(81) < rng.uniform(lo, hi)))
    return out
