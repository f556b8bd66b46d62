"""Solving-trace language, randomized trace generator, replayer and dataset files.

Token ids: placement ``[RrCc=d]`` is ``(r-1)*81 + (c-1)*9 + (d-1)`` (0..728),
followed by the five control tokens ``[clues_end]``=729, ``[push]``=730,
``[pop]``=731, ``[success]``=732 and ``[pad]``=733.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence, Union

import numpy as np

from .errors import DomainError, FormatError, UsageError
from .grid import (
    Board,
    Cell,
    PuzzleRecord,
    _hidden_singles,
    _naked_singles,
    brute_force_solve,
    mask_digits,
    parse_grid,
)

N_PLACEMENTS = 729
VOCAB_SIZE = 734


class Special(IntEnum):
    CLUES_END = 729
    PUSH = 730
    POP = 731
    SUCCESS = 732
    PAD = 733


CLUES_END, PUSH, POP, SUCCESS, PAD = (int(s) for s in Special)
_SPECIAL_NAMES = {
    Special.CLUES_END: "[clues_end]",
    Special.PUSH: "[push]",
    Special.POP: "[pop]",
    Special.SUCCESS: "[success]",
    Special.PAD: "[pad]",
}


class Placement(NamedTuple):
    cell: Cell
    digit: int


Token = Union[Placement, Special]


def placement_id(cell_index: int, digit: int) -> int:
    return cell_index * 9 + digit - 1


def split_placement(token_id: int) -> tuple[int, int]:
    """``(cell index, digit)`` of a placement id."""
    return divmod(token_id, 9)[0], token_id % 9 + 1


def encode_token(token: Token) -> int:
    if isinstance(token, Special):
        return int(token)
    if isinstance(token, Placement):
        cell = Cell(*token.cell).validate()
        if not 1 <= token.digit <= 9:
            raise UsageError(f"digit must be 1..9, got {token.digit}")
        return placement_id(cell.index, token.digit)
    raise UsageError(f"not a token: {token!r}")


def decode_token(token_id: int) -> Token:
    token_id = int(token_id)
    if not 0 <= token_id < VOCAB_SIZE:
        raise UsageError(f"token id {token_id} out of range [0, {VOCAB_SIZE})")
    if token_id >= N_PLACEMENTS:
        return Special(token_id)
    i, d = split_placement(token_id)
    return Placement(Cell.from_index(i), d)


def token_name(token_id: int) -> str:
    tok = decode_token(token_id)
    if isinstance(tok, Special):
        return _SPECIAL_NAMES[tok]
    return f"[R{tok.cell.row}C{tok.cell.col}={tok.digit}]"


@dataclass
class Trace:
    puzzle_id: str
    tokens: list[int]
    seed: int

    def decoded(self) -> list[Token]:
        return [decode_token(t) for t in self.tokens]

    @property
    def clues_end(self) -> int:
        return self.tokens.index(CLUES_END)

    def __len__(self) -> int:
        return len(self.tokens)


def puzzle_seed(global_seed: int, puzzle_id: str) -> int:
    """64-bit per-puzzle seed: BLAKE2b-64 of ``"<global_seed>:<puzzle_id>"``."""
    digest = hashlib.blake2b(f"{global_seed}:{puzzle_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed: int) -> np.random.Generator:
    # PCG64 (O'Neill 2014) via numpy; same stream on every platform for a given seed.
    return np.random.Generator(np.random.PCG64(seed))


class _TraceSolver:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.out: list[int] = []

    def _pick(self, n: int) -> int:
        return int(self.rng.integers(n)) if n > 1 else 0

    def solve(self, board: Board) -> bool:
        while True:
            masks = board.candidate_masks()
            if 0 in masks:
                return False
            if max(masks) < 0:
                return True
            singles = _naked_singles(masks)
            if singles:
                i, d = singles[self._pick(len(singles))]
                board.place_index(i, d)
                self.out.append(placement_id(i, d))
                continue
            hidden = _hidden_singles(masks)
            if hidden:
                i, d, _ = hidden[self._pick(len(hidden))]
                board.place_index(i, d)
                self.out.append(placement_id(i, d))
                continue
            return self._branch(board, masks)

    def _branch(self, board: Board, masks: list[int]) -> bool:
        counts = [(bin(m).count("1"), i) for i, m in enumerate(masks) if m > 0]
        fewest = min(n for n, _ in counts)
        cells = [i for n, i in counts if n == fewest]
        i = cells[self._pick(len(cells))]
        digits = mask_digits(masks[i])
        for k in self.rng.permutation(len(digits)):
            d = digits[int(k)]
            child = board.copy()
            self.out.append(PUSH)
            child.place_index(i, d)
            self.out.append(placement_id(i, d))
            if self.solve(child):
                board.values[:] = child.values
                board._rebuild_masks()
                return True
            self.out.append(POP)
        return False


def generate_trace(
    board: Board,
    seed: int,
    puzzle_id: str = "",
    check_unique: bool = True,
) -> Trace:
    """Randomized Norvig-style solving trace for a uniquely solvable puzzle.

    Each step places one naked single if any exist (uniformly at random), else
    one hidden single, else opens a ``[push]`` branch on a random
    fewest-candidate cell, trying its digits in random order and closing
    failed attempts with ``[pop]``. Clues come first in random order.
    """
    if not board.is_consistent():
        raise DomainError("puzzle is inconsistent")
    if check_unique:
        n = len(brute_force_solve(board, limit=2))
        if n != 1:
            raise DomainError(f"puzzle {puzzle_id!r} has {'no' if n == 0 else 'multiple'} solutions")
    rng = make_rng(seed)
    clues = [i for i, v in enumerate(board.values) if v]
    tokens = [placement_id(clues[int(k)], board.values[clues[int(k)]]) for k in rng.permutation(len(clues))]
    tokens.append(CLUES_END)
    solver = _TraceSolver(rng)
    work = Board(board.values)
    if not solver.solve(work):
        raise DomainError(f"puzzle {puzzle_id!r} is unsolvable")
    tokens.extend(solver.out)
    tokens.append(SUCCESS)
    return Trace(puzzle_id, tokens, seed)


def _trace_job(args: tuple[str, str, int]) -> Trace:
    pid, puzzle, seed = args
    return generate_trace(parse_grid(puzzle), seed, puzzle_id=pid)


def generate_corpus(
    records: Sequence[PuzzleRecord],
    global_seed: int,
    traces_per_puzzle: int = 1,
    workers: int = 1,
) -> list[Trace]:
    """One trace per puzzle by default; extra traces use ids ``<id>#k`` for seeding."""
    jobs = []
    for rec in records:
        for k in range(traces_per_puzzle):
            key = rec.id if k == 0 else f"{rec.id}#{k}"
            jobs.append((rec.id, rec.puzzle, puzzle_seed(global_seed, key)))
    if workers <= 1:
        return [_trace_job(j) for j in jobs]
    import multiprocessing as mp

    with mp.get_context("spawn").Pool(workers) as pool:
        return list(pool.imap(_trace_job, jobs, chunksize=64))


class Verdict(str, Enum):
    OK = "ok"
    INVALID_PLACEMENT = "invalid_placement"
    UNMATCHED_POP = "unmatched_pop"
    MISSING_CLUES_END = "missing_clues_end"
    MISPLACED_TOKEN = "misplaced_token"
    PREMATURE_SUCCESS = "premature_success"
    TOKEN_AFTER_SUCCESS = "token_after_success"
    BAD_TOKEN_ID = "bad_token_id"


class Replayer:
    """Incremental trace interpreter maintaining a board and a push stack.

    ``step`` returns ``None`` while the prefix is well-formed and the first
    :class:`Verdict` violation otherwise; after a violation the state is frozen.
    """

    def __init__(self) -> None:
        self.board = Board()
        self.stack: list[tuple[Board, int | None]] = []
        self.in_clues = True
        self.done = False
        self.padding = False
        self.clues_end: int | None = None
        self.rejected: list[tuple[int, int]] = []
        self.violation: Verdict | None = None
        self.position = -1
        self._awaiting_guess = False

    def step(self, tok: int) -> Verdict | None:
        if self.violation is not None:
            return self.violation
        self.position += 1
        v = self._step(int(tok))
        if v is not None:
            self.violation = v
        return v

    def _step(self, tok: int) -> Verdict | None:
        if not 0 <= tok < VOCAB_SIZE:
            return Verdict.BAD_TOKEN_ID
        if self.padding:
            return None if tok == PAD else Verdict.MISPLACED_TOKEN
        if tok == PAD:
            self.padding = True
            return None
        if self.done:
            return Verdict.TOKEN_AFTER_SUCCESS
        if tok < N_PLACEMENTS:
            i, d = split_placement(tok)
            if self.board.values[i] or self.board.used_mask(i) >> (d - 1) & 1:
                return Verdict.INVALID_PLACEMENT
            self.board.place_index(i, d)
            if self._awaiting_guess:
                snap, _ = self.stack[-1]
                self.stack[-1] = (snap, tok)
                self._awaiting_guess = False
            return None
        if tok == CLUES_END:
            if not self.in_clues:
                return Verdict.MISPLACED_TOKEN
            self.in_clues = False
            self.clues_end = self.position
            self.board = Board(self.board.values)
            return None
        if self.in_clues:
            return Verdict.MISPLACED_TOKEN
        if tok == PUSH:
            self.stack.append((self.board.copy(), None))
            self._awaiting_guess = True
            return None
        if tok == POP:
            if not self.stack:
                return Verdict.UNMATCHED_POP
            snap, guess = self.stack.pop()
            self.board = snap
            self._awaiting_guess = False
            if guess is not None:
                self.rejected.append(split_placement(guess))
            return None
        # SUCCESS
        if not self.board.is_solved():
            return Verdict.PREMATURE_SUCCESS
        self.done = True
        return None


@dataclass
class ReplayResult:
    verdict: Verdict
    index: int | None  # first offending token, if any
    final: Board
    states: list[Board] | None = None  # board after each token
    clues_end: int | None = None
    solved: bool = False
    rejected: list[tuple[int, int]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.verdict is Verdict.OK


def replay_trace(trace: Trace | Sequence[int], keep_states: bool = True) -> ReplayResult:
    tokens = trace.tokens if isinstance(trace, Trace) else list(trace)
    rp = Replayer()
    states: list[Board] | None = [] if keep_states else None
    for tok in tokens:
        v = rp.step(tok)
        if v is not None:
            return ReplayResult(v, rp.position, rp.board, states, rp.clues_end, False, rp.rejected)
        if states is not None:
            states.append(rp.board.copy())
    verdict = Verdict.OK if rp.clues_end is not None else Verdict.MISSING_CLUES_END
    return ReplayResult(
        verdict,
        None if verdict is Verdict.OK else len(tokens),
        rp.board,
        states,
        rp.clues_end,
        rp.done,
        rp.rejected,
    )


def iter_states(tokens: Sequence[int]) -> Iterator[tuple[int, int, Board]]:
    """Yield ``(position, token, live board after the token)``; stops at the first violation."""
    rp = Replayer()
    for pos, tok in enumerate(tokens):
        if rp.step(tok) is not None:
            return
        yield pos, int(tok), rp.board


# --- dataset files -----------------------------------------------------------------

MAGIC = b"SDTR"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


@dataclass
class TraceDataset:
    puzzle_ids: list[str]
    sequences: list[np.ndarray]  # uint16 token ids
    max_len: int

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(zip(self.puzzle_ids, self.sequences))


def _records(traces: Iterable[Trace | tuple[str, Sequence[int]]]) -> Iterator[tuple[str, Sequence[int]]]:
    for t in traces:
        if isinstance(t, Trace):
            yield t.puzzle_id, t.tokens
        else:
            yield t[0], t[1]


def write_dataset(traces: Iterable[Trace | tuple[str, Sequence[int]]], path: str | Path, max_len: int = 250) -> TraceDataset:
    """Write the ``SDTR`` binary format. Longer traces are truncated to ``max_len``."""
    ids, seqs = [], []
    for pid, toks in _records(traces):
        arr = np.asarray(toks, dtype=np.int64)[:max_len]
        if arr.size and (arr.min() < 0 or arr.max() >= VOCAB_SIZE):
            raise UsageError(f"{pid}: token id out of range")
        ids.append(pid)
        seqs.append(arr.astype("<u2"))
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, max_len, len(seqs)))
        for pid, arr in zip(ids, seqs):
            raw = pid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.size))
            fh.write(arr.tobytes())
    return TraceDataset(ids, seqs, max_len)


def read_dataset(path: str | Path) -> TraceDataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, max_len, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    ids, seqs = [], []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            if off + n > len(data):
                raise FormatError(f"{path}: truncated record")
            ids.append(data[off : off + n].decode("utf-8"))
            off += n
            (m,) = struct.unpack_from("<I", data, off)
            off += 4
            if off + 2 * m > len(data):
                raise FormatError(f"{path}: truncated record")
            arr = np.frombuffer(data, dtype="<u2", count=m, offset=off).copy()
            off += 2 * m
            if m > max_len or (m and arr.max() >= VOCAB_SIZE):
                raise FormatError(f"{path}: record {len(seqs)} violates max_len/vocabulary")
            seqs.append(arr)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated record") from exc
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return TraceDataset(ids, seqs, max_len)


def write_jsonl(traces: Iterable[Trace | tuple[str, Sequence[int]]], path: str | Path, max_len: int = 250) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pid, toks in _records(traces):
            fh.write(json.dumps({"puzzle_id": pid, "tokens": [int(t) for t in list(toks)[:max_len]]}))
            fh.write("\n")


def read_jsonl(path: str | Path, max_len: int = 250) -> TraceDataset:
    ids, seqs = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                ids.append(obj["puzzle_id"])
                seqs.append(np.asarray(obj["tokens"], dtype="<u2"))
    return TraceDataset(ids, seqs, max_len)
