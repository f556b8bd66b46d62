"""Sudoku domain algebra: cells, substructures, candidate sets and deduction rules.

Digits are stored as 9-bit masks (bit ``d-1`` set for digit ``d``). Every
enumeration is deterministic (row-major cells, ascending digits); randomness
lives in :mod:`sudoku_mechlab.tracegen`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .errors import DomainError, FormatError, UsageError

ALL_DIGITS = 0x1FF
DIGITS = range(1, 10)


class Cell(NamedTuple):
    row: int
    col: int

    @property
    def index(self) -> int:
        return (self.row - 1) * 9 + (self.col - 1)

    @property
    def box(self) -> int:
        return box_index(self.row, self.col)

    @classmethod
    def from_index(cls, i: int) -> "Cell":
        return cls(i // 9 + 1, i % 9 + 1)

    def validate(self) -> "Cell":
        if not (1 <= self.row <= 9 and 1 <= self.col <= 9):
            raise UsageError(f"cell out of range: {self}")
        return self

    def __str__(self) -> str:
        return f"R{self.row}C{self.col}"


def box_index(row: int, col: int) -> int:
    # box k = 3(i-1) + j with i the box-row and j the box-column, both 1-based
    return 3 * ((row - 1) // 3) + (col - 1) // 3 + 1


class Kind(str, Enum):
    ROW = "row"
    COL = "col"
    BOX = "box"
    BAND = "band"
    STACK = "stack"


class Substructure(NamedTuple):
    kind: Kind
    index: int

    def cells(self) -> list[Cell]:
        return cells_of(self)

    def __str__(self) -> str:
        return f"{self.kind.value.capitalize()} {self.index}"

    @classmethod
    def parse(cls, text: str) -> "Substructure":
        """Parse ``"row3"``, ``"Box 5"``, ``"stack:2"`` and similar."""
        t = text.strip().lower().replace(":", "").replace(" ", "")
        for kind in Kind:
            if t.startswith(kind.value):
                try:
                    sub = cls(kind, int(t[len(kind.value):]))
                except ValueError:
                    break
                _check_sub(sub)
                return sub
        raise UsageError(f"cannot parse substructure {text!r}")


def _check_sub(sub: Substructure) -> None:
    hi = 3 if sub.kind in (Kind.BAND, Kind.STACK) else 9
    if not 1 <= sub.index <= hi:
        raise UsageError(f"{sub.kind.value} index must be in [1,{hi}], got {sub.index}")


def cells_of(sub: Substructure) -> list[Cell]:
    _check_sub(sub)
    k, i = sub.kind, sub.index
    if k is Kind.ROW:
        return [Cell(i, c) for c in DIGITS]
    if k is Kind.COL:
        return [Cell(r, i) for r in DIGITS]
    if k is Kind.BOX:
        r0, c0 = 3 * ((i - 1) // 3), 3 * ((i - 1) % 3)
        return [Cell(r0 + a, c0 + b) for a in (1, 2, 3) for b in (1, 2, 3)]
    if k is Kind.BAND:
        return [Cell(r, c) for r in range(3 * i - 2, 3 * i + 1) for c in DIGITS]
    return [Cell(r, c) for r in DIGITS for c in range(3 * i - 2, 3 * i + 1)]


def substructures_of(cell: Cell) -> tuple[Substructure, Substructure, Substructure]:
    cell = Cell(*cell).validate()
    return (
        Substructure(Kind.ROW, cell.row),
        Substructure(Kind.COL, cell.col),
        Substructure(Kind.BOX, cell.box),
    )


# The 27 constraint units in canonical order: rows 1-9, cols 1-9, boxes 1-9.
UNITS: tuple[Substructure, ...] = tuple(
    Substructure(kind, i) for kind in (Kind.ROW, Kind.COL, Kind.BOX) for i in DIGITS
)
UNIT_CELLS: tuple[tuple[int, ...], ...] = tuple(
    tuple(c.index for c in cells_of(u)) for u in UNITS
)
_ROW_OF = tuple(i // 9 for i in range(81))
_COL_OF = tuple(i % 9 for i in range(81))
_BOX_OF = tuple(box_index(i // 9 + 1, i % 9 + 1) - 1 for i in range(81))
PEERS: tuple[frozenset[int], ...] = tuple(
    frozenset(
        j
        for j in range(81)
        if j != i and (_ROW_OF[j] == _ROW_OF[i] or _COL_OF[j] == _COL_OF[i] or _BOX_OF[j] == _BOX_OF[i])
    )
    for i in range(81)
)


def unit_position(sub: Substructure) -> int:
    """Index of a row/col/box in :data:`UNITS` (0..26)."""
    if sub.kind not in (Kind.ROW, Kind.COL, Kind.BOX):
        raise UsageError(f"{sub.kind.value} is not one of the 27 constraint units")
    _check_sub(sub)
    return {Kind.ROW: 0, Kind.COL: 9, Kind.BOX: 18}[sub.kind] + sub.index - 1


def mask_digits(mask: int) -> list[int]:
    return [d for d in DIGITS if mask >> (d - 1) & 1]


class Board:
    """Mutable 81-cell grid. Supports ``place``/``clear`` for apply/undo.

    Consistency is never enforced; query it with :meth:`is_consistent`.
    """

    __slots__ = ("values", "clues", "_rows", "_cols", "_boxes")

    def __init__(self, values: Iterable[int] | None = None, clues: Iterable[int] | None = None):
        self.values: list[int] = list(values) if values is not None else [0] * 81
        if len(self.values) != 81:
            raise FormatError(f"board needs 81 values, got {len(self.values)}")
        if clues is None:
            clues = (i for i, v in enumerate(self.values) if v)
        self.clues: frozenset[int] = frozenset(clues)
        if any(not self.values[i] for i in self.clues):
            raise UsageError("clue_mask must be a subset of filled cells")
        self._rebuild_masks()

    def _rebuild_masks(self) -> None:
        self._rows = [0] * 9
        self._cols = [0] * 9
        self._boxes = [0] * 9
        for i, v in enumerate(self.values):
            if v:
                b = 1 << (v - 1)
                self._rows[_ROW_OF[i]] |= b
                self._cols[_COL_OF[i]] |= b
                self._boxes[_BOX_OF[i]] |= b

    @classmethod
    def empty(cls) -> "Board":
        return cls()

    def copy(self) -> "Board":
        b = Board.__new__(Board)
        b.values = self.values.copy()
        b.clues = self.clues
        b._rows = self._rows.copy()
        b._cols = self._cols.copy()
        b._boxes = self._boxes.copy()
        return b

    def __getitem__(self, cell: Cell) -> int:
        return self.values[Cell(*cell).index]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Board) and self.values == other.values

    def __repr__(self) -> str:
        return f"Board({self.to_string()!r})"

    @property
    def clue_mask(self) -> set[Cell]:
        return {Cell.from_index(i) for i in self.clues}

    def is_empty(self, cell: Cell) -> bool:
        return self.values[Cell(*cell).index] == 0

    def n_empty(self) -> int:
        return self.values.count(0)

    def is_solved(self) -> bool:
        return 0 not in self.values and self.is_consistent()

    def place(self, cell: Cell, digit: int) -> None:
        """Write ``digit`` into an empty cell. Validity is the caller's business."""
        self.place_index(Cell(*cell).index, digit)

    def place_index(self, i: int, digit: int) -> None:
        if self.values[i]:
            raise UsageError(f"{Cell.from_index(i)} already holds {self.values[i]}")
        if not 1 <= digit <= 9:
            raise UsageError(f"digit must be 1..9, got {digit}")
        self.values[i] = digit
        b = 1 << (digit - 1)
        self._rows[_ROW_OF[i]] |= b
        self._cols[_COL_OF[i]] |= b
        self._boxes[_BOX_OF[i]] |= b

    def clear(self, cell: Cell) -> None:
        i = Cell(*cell).index
        if i in self.clues:
            raise UsageError(f"cannot clear clue cell {Cell.from_index(i)}")
        self.values[i] = 0
        # duplicates may exist on inconsistent boards, so rebuild rather than xor
        self._rebuild_masks()

    def used_mask(self, i: int) -> int:
        return self._rows[_ROW_OF[i]] | self._cols[_COL_OF[i]] | self._boxes[_BOX_OF[i]]

    def candidate_masks(self) -> list[int]:
        """Raw candidate masks; -1 marks filled cells. No consistency check."""
        v, rows, cols, boxes = self.values, self._rows, self._cols, self._boxes
        return [
            -1 if v[i] else ALL_DIGITS & ~(rows[_ROW_OF[i]] | cols[_COL_OF[i]] | boxes[_BOX_OF[i]])
            for i in range(81)
        ]

    def is_consistent(self) -> bool:
        for unit in UNIT_CELLS:
            seen = 0
            for i in unit:
                v = self.values[i]
                if v:
                    b = 1 << (v - 1)
                    if seen & b:
                        return False
                    seen |= b
        return True

    def unit_mask(self, pos: int) -> int:
        """Digits present in unit ``UNITS[pos]``."""
        if pos < 9:
            return self._rows[pos]
        if pos < 18:
            return self._cols[pos - 9]
        return self._boxes[pos - 18]

    def to_string(self) -> str:
        return "".join(str(v) if v else "." for v in self.values)

    def pretty(self) -> str:
        lines = []
        for r in range(9):
            if r and r % 3 == 0:
                lines.append("------+-------+------")
            row = self.values[9 * r : 9 * r + 9]
            chunks = [" ".join(str(v) if v else "." for v in row[k : k + 3]) for k in (0, 3, 6)]
            lines.append(" | ".join(chunks))
        return "\n".join(lines)


def parse_grid(text: str) -> Board:
    """Parse an 81-character grid; ``.`` and ``0`` both mean empty."""
    if len(text) != 81:
        raise FormatError(f"grid string must have 81 characters, got {len(text)}")
    values = []
    for pos, ch in enumerate(text):
        if ch in ".0":
            values.append(0)
        elif "1" <= ch <= "9":
            values.append(ord(ch) - 48)
        else:
            raise FormatError(f"illegal character {ch!r} at offset {pos}")
    return Board(values)


@dataclass(frozen=True)
class CandidateGrid:
    """Per-cell candidate masks; ``None`` for filled cells."""

    masks: tuple[int | None, ...]

    def __getitem__(self, cell: Cell) -> frozenset[int] | None:
        m = self.masks[Cell(*cell).index]
        return None if m is None else frozenset(mask_digits(m))

    def mask(self, cell: Cell) -> int | None:
        return self.masks[Cell(*cell).index]

    def counts(self) -> np.ndarray:
        """Candidate count per cell (row-major); filled cells count 0."""
        return np.array([0 if m is None else bin(m).count("1") for m in self.masks], dtype=np.int8)

    def has_contradiction(self) -> bool:
        return any(m == 0 for m in self.masks)


def _require_consistent(board: Board) -> None:
    if not board.is_consistent():
        raise DomainError("board is inconsistent (a digit repeats inside a substructure)")


def compute_candidates(board: Board) -> CandidateGrid:
    _require_consistent(board)
    return CandidateGrid(tuple(None if m < 0 else m for m in board.candidate_masks()))


def is_valid_placement(board: Board, cell: Cell, digit: int) -> bool:
    cell = Cell(*cell).validate()
    if not 1 <= digit <= 9:
        raise UsageError(f"digit must be 1..9, got {digit}")
    i = cell.index
    if board.values[i]:
        raise UsageError(f"{cell} is already filled")
    return not board.used_mask(i) >> (digit - 1) & 1


def _naked_singles(masks: list[int]) -> list[tuple[int, int]]:
    return [(i, m.bit_length()) for i, m in enumerate(masks) if m > 0 and m & (m - 1) == 0]


def _hidden_singles(masks: list[int]) -> list[tuple[int, int, int]]:
    """(cell index, digit, unit position), deduplicated on (cell, digit), sorted row-major."""
    found: dict[tuple[int, int], int] = {}
    for pos, unit in enumerate(UNIT_CELLS):
        once = twice = 0
        for i in unit:
            m = masks[i]
            if m > 0:
                twice |= once & m
                once |= m
        single = once & ~twice
        while single:
            b = single & -single
            single ^= b
            for i in unit:
                m = masks[i]
                if m > 0 and m & b:
                    found.setdefault((i, b.bit_length()), pos)
                    break
    return [(i, d, pos) for (i, d), pos in sorted(found.items())]


def find_naked_singles(board: Board) -> list[tuple[Cell, int]]:
    _require_consistent(board)
    return [(Cell.from_index(i), d) for i, d in _naked_singles(board.candidate_masks())]


def find_hidden_singles(board: Board) -> list[tuple[Cell, int, Substructure]]:
    _require_consistent(board)
    return [
        (Cell.from_index(i), d, UNITS[pos]) for i, d, pos in _hidden_singles(board.candidate_masks())
    ]


@dataclass(frozen=True)
class PresenceMap:
    """Digit presence for the 27 constraint units: ``bits[unit_position, digit-1]``."""

    bits: np.ndarray  # (27, 9) bool

    def __getitem__(self, key: tuple[Substructure, int]) -> bool:
        sub, d = key
        return bool(self.bits[unit_position(sub), d - 1])

    def flat(self) -> np.ndarray:
        return self.bits.reshape(243)

    def __len__(self) -> int:
        return 243


def presence_array(board: Board) -> np.ndarray:
    out = np.zeros((27, 9), dtype=bool)
    for pos in range(27):
        m = board.unit_mask(pos)
        for d in mask_digits(m):
            out[pos, d - 1] = True
    return out


def presence_map(board: Board) -> PresenceMap:
    bits = presence_array(board)
    bits.flags.writeable = False
    return PresenceMap(bits)


def brute_force_solve(board: Board, limit: int = 2) -> list[Board]:
    """Exhaustive DFS returning up to ``limit`` solutions.

    Branches on the fewest-candidates cell (ties row-major, digits ascending).
    A unit where some digit has exactly one possible cell is branched on as a
    forced move, and a unit where a missing digit has no cell left is pruned;
    both are sound, so the search stays exhaustive.
    """
    _require_consistent(board)
    if limit <= 0:
        return []
    work = board.copy()
    solutions: list[Board] = []

    def undo(i: int, b: int) -> None:
        work.values[i] = 0
        work._rows[_ROW_OF[i]] &= ~b
        work._cols[_COL_OF[i]] &= ~b
        work._boxes[_BOX_OF[i]] &= ~b

    def search() -> bool:
        masks = work.candidate_masks()
        best, best_n = -1, 10
        for i, m in enumerate(masks):
            if m < 0:
                continue
            n = bin(m).count("1")
            if n < best_n:
                best, best_n = i, n
                if n <= 1:
                    break
        if best < 0:
            solutions.append(work.copy())
            return len(solutions) >= limit
        if best_n == 0:
            return False
        if best_n > 1:
            for pos, unit in enumerate(UNIT_CELLS):
                once = twice = 0
                for i in unit:
                    m = masks[i]
                    if m > 0:
                        twice |= once & m
                        once |= m
                if ALL_DIGITS & ~(once | work.unit_mask(pos)):
                    return False
                single = once & ~twice
                if single:
                    b = single & -single
                    best = next(i for i in unit if masks[i] > 0 and masks[i] & b)
                    masks[best] = b
                    break
        m = masks[best]
        while m:
            b = m & -m
            m ^= b
            work.place_index(best, b.bit_length())
            done = search()
            undo(best, b)
            if done:
                return True
        return False

    search()
    return solutions


@dataclass(frozen=True)
class PuzzleRecord:
    id: str
    puzzle: str
    solution: str
    clues: int | None = None
    difficulty: float | None = None

    def board(self) -> Board:
        return parse_grid(self.puzzle)

    def solution_board(self) -> Board:
        return parse_grid(self.solution)


PUZZLE_COLUMNS = ("id", "puzzle", "solution", "clues", "difficulty")


def read_puzzle_csv(path: str | Path, limit: int | None = None) -> list[PuzzleRecord]:
    """Read a sudoku-3m style CSV (``id,puzzle,solution,clues,difficulty``).

    Extra columns are ignored; ``clues`` and ``difficulty`` may be blank.
    """
    out = []
    for rec in iter_puzzle_csv(path):
        if limit is not None and len(out) >= limit:
            break
        out.append(rec)
    return out


def iter_puzzle_csv(path: str | Path) -> Iterator[PuzzleRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"id", "puzzle", "solution"} - set(reader.fieldnames or ())
        if missing:
            raise FormatError(f"{path}: missing columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            puzzle, solution = row["puzzle"].strip(), row["solution"].strip()
            if len(puzzle) != 81 or len(solution) != 81:
                raise FormatError(f"{path}:{line}: puzzle and solution must be 81 characters")
            clues = row.get("clues") or ""
            diff = row.get("difficulty") or ""
            yield PuzzleRecord(
                id=row["id"].strip(),
                puzzle=puzzle,
                solution=solution,
                clues=int(clues) if clues.strip() else None,
                difficulty=float(diff) if diff.strip() else None,
            )


def write_puzzle_csv(path: str | Path, records: Iterable[PuzzleRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PUZZLE_COLUMNS)
        for r in records:
            w.writerow([
                r.id,
                r.puzzle,
                r.solution,
                "" if r.clues is None else r.clues,
                "" if r.difficulty is None else r.difficulty,
            ])
