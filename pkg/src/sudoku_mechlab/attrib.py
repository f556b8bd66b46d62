"""Observational analyses: logit lens, direct logit attribution, attention grids,
naked-single margins, the activation-gap neuron scan and unembedding geometry.

Direct logit attribution freezes the final LayerNorm scale at its clean value,
so the map residual -> logits becomes affine: each residual component ``c``
contributes ``((c - mean(c)) * scale * lnf_w) @ W_U`` and the constant
``lnf_b @ W_U + b_U`` is reported separately.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import UsageError
from .grid import UNITS, Board, Cell, Kind, Substructure, cells_of
from .model import Transformer, clues_end_positions, pad_batch
from .surgery import NSState
from .tracegen import N_PLACEMENTS, PAD, Replayer, placement_id, split_placement


# --- logit lens ---------------------------------------------------------------------

def logit_lens(model: Transformer, resid: torch.Tensor | np.ndarray, scale: torch.Tensor | None = None) -> torch.Tensor:
    """Final LayerNorm then unembedding, over the last axis of ``resid``."""
    x = torch.as_tensor(resid, dtype=torch.float32)
    if x.shape[-1] != model.cfg.d_model:
        raise UsageError(f"residual width {x.shape[-1]} != d_model {model.cfg.d_model}")
    with torch.no_grad():
        return model.unembed(model.final_ln(x, scale))


def _frozen_readout(model: Transformer, comp: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """Linear part of the frozen-LN readout applied to one residual component."""
    c = comp - comp.mean(-1, keepdim=True)
    return (c * scale * model.lnf_w) @ model.W_U


def readout_constant(model: Transformer) -> torch.Tensor:
    return model.lnf_b @ model.W_U + model.b_U


def dla_decomposition(model: Transformer, tokens: Sequence[Sequence[int]], positions: Sequence[int] | None = None) -> dict:
    """Split the logits at ``positions`` (default: last token) into per-component terms.

    Keys: ``embed``, ``L{l}H{h}`` (1-based layer, 0-based head), ``attn_bias.{l}``,
    ``mlp.{l}``, ``const``; plus ``logits`` (the model output) and ``scale``.
    Components sum to ``logits`` up to float error.
    """
    seqs = [list(s) for s in tokens]
    pos = torch.as_tensor(np.asarray(positions) if positions is not None else [len(s) - 1 for s in seqs])
    L = model.cfg.n_layers
    sites = ["resid_post.0", "ln_final.scale"] + [f"head_out.{l}" for l in range(1, L + 1)] + [f"mlp_out.{l}" for l in range(1, L + 1)]
    rows = torch.arange(len(seqs))
    with torch.no_grad():
        logits, cache = model(pad_batch(seqs), capture=sites)
        scale = cache["ln_final.scale"][rows, pos]
        out = {"logits": logits[rows, pos], "scale": scale}
        out["embed"] = _frozen_readout(model, cache["resid_post.0"][rows, pos], scale)
        for l, blk in enumerate(model.blocks, start=1):
            ho = cache[f"head_out.{l}"][rows, pos]
            for h in range(model.cfg.n_heads):
                out[f"L{l}H{h}"] = _frozen_readout(model, ho[:, h], scale)
            out[f"attn_bias.{l}"] = _frozen_readout(model, blk.b_O.expand(len(seqs), -1), scale)
            out[f"mlp.{l}"] = _frozen_readout(model, cache[f"mlp_out.{l}"][rows, pos], scale)
        out["const"] = readout_constant(model).expand(len(seqs), -1)
    return out


def component_sum(decomp: Mapping[str, torch.Tensor]) -> torch.Tensor:
    return sum(v for k, v in decomp.items() if k not in ("logits", "scale"))


# --- naked-single states and margins -------------------------------------------------

def naked_singles_of(board: Board) -> list[tuple[int, int]]:
    return [(i, m.bit_length()) for i, m in enumerate(board.candidate_masks()) if m > 0 and m & (m - 1) == 0]


def mine_ns_states(
    model: Transformer,
    sequences: Sequence[Sequence[int]],
    min_singles: int = 1,
    max_singles: int | None = None,
    limit: int | None = None,
    batch_size: int = 16,
) -> list[NSState]:
    """Replay traces and keep every post-``[clues_end]`` prefix whose board has
    naked singles and where the model's top-1 next token is one of them."""
    found: list[NSState] = []
    for lo in range(0, len(sequences), batch_size):
        part = [_trim(s) for s in sequences[lo : lo + batch_size]]
        with torch.no_grad():
            logits, _ = model(pad_batch(part))
        top = logits.argmax(-1).numpy()
        for k, seq in enumerate(part):
            rp = Replayer()
            for t, tok in enumerate(seq):
                if rp.step(tok) is not None or rp.done:
                    break
                if rp.clues_end is None:
                    continue
                singles = naked_singles_of(rp.board)
                if len(singles) < min_singles or (max_singles is not None and len(singles) > max_singles):
                    continue
                pred = int(top[k, t])
                if pred >= N_PLACEMENTS or split_placement(pred) not in singles:
                    continue
                found.append(NSState(list(seq[: t + 1]), t, rp.board.copy(), singles, split_placement(pred)))
                if limit is not None and len(found) >= limit:
                    return found
    return found


def _trim(seq: Sequence[int]) -> list[int]:
    s = [int(t) for t in seq]
    if PAD in s:
        s = s[: s.index(PAD)]
    return s


@dataclass
class MarginReport:
    margins: np.ndarray
    ranks: np.ndarray  # 1 = correct digit scores highest within its cell

    @property
    def rank1_fraction(self) -> float:
        return float(np.mean(self.ranks == 1)) if self.ranks.size else float("nan")

    def histogram(self, bins: int = 40) -> tuple[np.ndarray, np.ndarray]:
        return np.histogram(self.margins, bins=bins)


def cell_margin(logits: np.ndarray, cell_index: int, digit: int) -> tuple[float, int]:
    """Correct-digit logit minus the best other digit of the same cell, and its rank."""
    block = np.asarray(logits)[cell_index * 9 : cell_index * 9 + 9]
    mine = block[digit - 1]
    others = np.delete(block, digit - 1)
    return float(mine - others.max()), int(1 + np.sum(others > mine))


def _lens_rows(model: Transformer, states: Sequence[NSState], site: str, batch_size: int = 32):
    for lo in range(0, len(states), batch_size):
        part = states[lo : lo + batch_size]
        pos = torch.as_tensor([s.position for s in part])
        with torch.no_grad():
            _, cache = model(pad_batch([s.tokens[: s.position + 1] for s in part]), capture=[site])
        yield from zip(part, logit_lens(model, cache[site][torch.arange(len(part)), pos]).numpy())


def ns_margin_analysis(model: Transformer, states: Sequence[NSState], site: str | None = None) -> MarginReport:
    """Logit-lens margin of the predicted naked single at ``resid_mid`` of the last
    block (after attention, before the final MLP) by default."""
    site = site or f"resid_mid.{model.cfg.n_layers}"
    margins, ranks = [], []
    for s, row in _lens_rows(model, states, site):
        m, r = cell_margin(row, *s.target)
        margins.append(m)
        ranks.append(r)
    return MarginReport(np.asarray(margins), np.asarray(ranks))


def placement_rank_stats(model: Transformer, states: Sequence[NSState], site: str | None = None) -> dict:
    """Rank-1 rate at ``site`` over every naked single present in each state."""
    site = site or f"resid_mid.{model.cfg.n_layers}"
    hits = total = 0
    for s, row in _lens_rows(model, states, site):
        for ci, d in s.singles:
            hits += cell_margin(row, ci, d)[1] == 1
            total += 1
    return {"states": len(states), "placements": total, "rank1_fraction": hits / total if total else float("nan")}


# --- attention grids ----------------------------------------------------------------

@dataclass
class GridHeatmap:
    values: np.ndarray  # (9, 9)
    layer: int
    head: int
    statistic: str
    meta: dict = field(default_factory=dict)

    def csv_rows(self) -> list[list[str]]:
        return [[repr(float(v)) for v in row] for row in self.values]


def attention_grid(model: Transformer, layer: int, head: int, sequences: Sequence[Sequence[int]],
                   statistic: str = "mass", batch_size: int = 32) -> GridHeatmap:
    """Average attention from ``[clues_end]`` onto the tokens that place into each cell.

    ``mass``: attention summed over a cell's placement tokens, averaged over all
    puzzles (empty cells contribute 0). The grid plus the mass on non-placement
    tokens sums to 1 for every puzzle. ``per_digit``: averaged only over puzzles
    where the cell carries a clue, so each entry is the typical weight a filled
    cell receives.
    """
    if not 1 <= layer <= model.cfg.n_layers or not 0 <= head < model.cfg.n_heads:
        raise UsageError(f"no head L{layer}H{head}")
    if statistic not in ("mass", "per_digit"):
        raise UsageError(f"unknown statistic {statistic!r}")
    site = f"attn_probs.{layer}"
    total = np.zeros(81)
    hits = np.zeros(81)
    other = 0.0
    ce = clues_end_positions(sequences)
    for lo in range(0, len(sequences), batch_size):
        part = [list(np.asarray(s)[: ce[lo + k] + 1]) for k, s in enumerate(sequences[lo : lo + batch_size])]
        with torch.no_grad():
            _, cache = model(pad_batch(part), capture=[site])
        probs = cache[site][:, head].double().numpy()
        for k, seq in enumerate(part):
            q = len(seq) - 1
            row = probs[k, q, : q + 1]
            toks = np.asarray(seq)
            is_place = toks < N_PLACEMENTS
            cells = toks[is_place] // 9
            np.add.at(total, cells, row[is_place])
            hits[np.unique(cells)] += 1
            other += row[~is_place].sum()
    n = len(sequences)
    if statistic == "mass":
        vals = total / max(n, 1)
    else:
        vals = np.divide(total, hits, out=np.zeros(81), where=hits > 0)
    return GridHeatmap(vals.reshape(9, 9), layer, head, statistic, {"n": n, "other_mass": other / max(n, 1)})


def candidate_regions() -> list[Substructure]:
    return list(UNITS) + [Substructure(k, i) for k in (Kind.BAND, Kind.STACK) for i in (1, 2, 3)]


def dominant_region(values: np.ndarray) -> Substructure:
    """Region holding the most attention mass in excess of its share of cells."""
    v = np.clip(np.asarray(values, dtype=np.float64).ravel(), 0, None)
    total = v.sum()
    if total <= 0:
        return Substructure(Kind.BOX, 1)
    best, score = None, -np.inf
    for reg in candidate_regions():
        idx = [c.index for c in cells_of(reg)]
        excess = v[idx].sum() / total - len(idx) / 81
        if excess > score + 1e-12:
            best, score = reg, excess
    return best


# --- head DLA -----------------------------------------------------------------------

def member_line(region: Substructure, cell: Cell) -> Substructure:
    """The line through ``cell`` whose digit presence conditions a head's effect:
    rows for bands and rows, columns for stacks and columns, the box for boxes."""
    if region.kind in (Kind.BAND, Kind.ROW):
        return Substructure(Kind.ROW, cell.row)
    if region.kind in (Kind.STACK, Kind.COL):
        return Substructure(Kind.COL, cell.col)
    return Substructure(Kind.BOX, cell.box)


@dataclass
class HeadDLAReport:
    layer: int
    head: int
    region: Substructure
    present: np.ndarray  # (9, 9) grid: mean contribution when the digit is in the cell's line
    absent: np.ndarray
    per_digit: np.ndarray  # (9, 2) [present, absent] means over region cells
    counts: np.ndarray  # (9, 2)


def head_contributions(model: Transformer, layer: int, head: int, sequences: Sequence[Sequence[int]],
                       batch_size: int = 32) -> tuple[np.ndarray, list[Board]]:
    """Frozen-LN logit contribution of one head at ``[clues_end]``: (n, vocab)."""
    ce = clues_end_positions(sequences)
    site = f"head_out.{layer}"
    out, boards = [], []
    for lo in range(0, len(sequences), batch_size):
        part = [list(np.asarray(s)[: ce[lo + k] + 1]) for k, s in enumerate(sequences[lo : lo + batch_size])]
        pos = torch.as_tensor([len(p) - 1 for p in part])
        rows = torch.arange(len(part))
        with torch.no_grad():
            _, cache = model(pad_batch(part), capture=[site, "ln_final.scale"])
            c = _frozen_readout(model, cache[site][rows, pos, head], cache["ln_final.scale"][rows, pos])
        out.append(c.numpy())
        for p in part:
            rp = Replayer()
            for t in p:
                rp.step(t)
            boards.append(rp.board)
    return np.concatenate(out), boards


def head_dla(model: Transformer, layer: int, head: int, sequences: Sequence[Sequence[int]], region: Substructure) -> HeadDLAReport:
    """Mean contribution to placement (cell, d) for empty cells, split by whether
    ``d`` is already present in the cell's member line (see :func:`member_line`)."""
    if not 1 <= layer <= model.cfg.n_layers or not 0 <= head < model.cfg.n_heads:
        raise UsageError(f"no head L{layer}H{head}")
    contrib, boards = head_contributions(model, layer, head, sequences)
    sums = np.zeros((2, 81))
    cnts = np.zeros((2, 81))
    dsum = np.zeros((9, 2))
    dcnt = np.zeros((9, 2))
    inside = {c.index for c in cells_of(region)}
    for row, board in zip(contrib, boards):
        present_in = {}
        for i in range(81):
            if board.values[i]:
                continue
            line = member_line(region, Cell.from_index(i))
            if line not in present_in:
                present_in[line] = {board.values[c.index] for c in cells_of(line)}
            for d in range(1, 10):
                slot = 0 if d in present_in[line] else 1
                v = row[placement_id(i, d)]
                sums[slot, i] += v
                cnts[slot, i] += 1
                if i in inside:
                    dsum[d - 1, slot] += v
                    dcnt[d - 1, slot] += 1
    grids = np.divide(sums, cnts, out=np.full_like(sums, np.nan), where=cnts > 0).reshape(2, 9, 9)
    per_digit = np.divide(dsum, dcnt, out=np.full_like(dsum, np.nan), where=dcnt > 0)
    return HeadDLAReport(layer, head, region, grids[0], grids[1], per_digit, dcnt)


# --- neuron scan --------------------------------------------------------------------

@dataclass
class NeuronScanReport:
    gaps: np.ndarray  # (81, n_neurons); nan where a cell never reached count 1
    threshold: float
    detectors: dict[int, list[int]]  # cell index -> neuron ids
    neuron_cell: dict[int, int]

    def coverage(self) -> dict[str, int]:
        sizes = [len(self.detectors.get(c, [])) for c in range(81)]
        return {"cells_0": sizes.count(0), "cells_1": sizes.count(1), "cells_2plus": sum(s >= 2 for s in sizes),
                "neurons": len(self.neuron_cell)}

    def rows(self) -> list[tuple]:
        """(neuron, cell label, gap) for every detector, sorted by neuron id."""
        return [(n, str(Cell.from_index(c)), float(self.gaps[c, n])) for n, c in sorted(self.neuron_cell.items())]


def conditional_means(acts: np.ndarray, counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean activation per (cell, candidate count 0..9, neuron) and the sample counts."""
    acts = np.asarray(acts, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.int64)
    n = acts.shape[0]
    onehot = np.zeros((n, 81, 10))
    onehot[np.arange(n)[:, None], np.arange(81)[None], counts] = 1.0
    flat = onehot.reshape(n, 810)
    sums = flat.T @ acts  # (810, M)
    tallies = flat.sum(0)
    means = np.divide(sums, tallies[:, None], out=np.full_like(sums, np.nan), where=tallies[:, None] > 0)
    return means.reshape(81, 10, -1), tallies.reshape(81, 10)


def neuron_scan(acts: np.ndarray, counts: np.ndarray, threshold: float = 3.0) -> NeuronScanReport:
    """Activation gap per (cell, neuron): mean at candidate count 1 minus the largest
    mean at any other observed count. Filled cells count as 0 candidates.

    Each neuron is claimed by at most one cell, its largest-gap cell, and only
    when that gap reaches ``threshold``.
    """
    means, tallies = conditional_means(acts, counts)
    at_one = means[:, 1]
    rest = np.delete(means, 1, axis=1)
    with np.errstate(all="ignore"):
        best_other = np.nanmax(np.where(np.isnan(rest), -np.inf, rest), axis=1)
    gaps = at_one - best_other
    gaps[~np.isfinite(gaps)] = np.nan
    detectors: dict[int, list[int]] = {}
    neuron_cell: dict[int, int] = {}
    filled = np.where(np.isnan(gaps), -np.inf, gaps)
    best_cell = filled.argmax(0)
    for m in range(gaps.shape[1]):
        c = int(best_cell[m])
        if filled[c, m] >= threshold:
            neuron_cell[m] = c
            detectors.setdefault(c, []).append(m)
    return NeuronScanReport(gaps, threshold, detectors, neuron_cell)


def collect_scan_data(model: Transformer, sequences: Sequence[Sequence[int]], max_states: int | None = None,
                      batch_size: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Final-MLP activations and per-cell candidate counts at every post-``[clues_end]``
    position of the given traces (the board after the token at that position)."""
    site = f"mlp_post.{model.cfg.n_layers}"
    acts, counts = [], []
    n = 0
    for lo in range(0, len(sequences), batch_size):
        part = [_trim(s) for s in sequences[lo : lo + batch_size]]
        with torch.no_grad():
            _, cache = model(pad_batch(part), capture=[site])
        a = cache[site].numpy()
        for k, seq in enumerate(part):
            rp = Replayer()
            for t, tok in enumerate(seq):
                if rp.step(tok) is not None or rp.done:
                    break
                if rp.clues_end is None:
                    continue
                masks = rp.board.candidate_masks()
                counts.append([bin(m).count("1") if m > 0 else 0 for m in masks])
                acts.append(a[k, t])
                n += 1
                if max_states is not None and n >= max_states:
                    return np.asarray(acts), np.asarray(counts)
    width = model.cfg.d_mlp
    return (np.asarray(acts) if acts else np.zeros((0, width))), (np.asarray(counts) if counts else np.zeros((0, 81), int))


# --- neuron weight DLA --------------------------------------------------------------

@dataclass
class NeuronDLA:
    neuron: int
    contributions: np.ndarray  # (729,) per unit activation
    cell: int | None
    target_mean: float
    target_std: float
    other_mean: float
    other_std: float


def neuron_weight_dla(model: Transformer, neuron: int, scale: float = 1.0, cell: int | None = None) -> NeuronDLA:
    """Logit effect of one unit of final-MLP neuron ``neuron`` on the 729 placements,
    with the final LayerNorm folded in at a fixed ``scale``.

    When ``cell`` is given, reports mean/std over its 9 tokens and over all
    tokens of the other 80 cells.
    """
    M = model.cfg.d_mlp
    if not 0 <= neuron < M:
        raise UsageError(f"unknown neuron id {neuron} (final MLP has {M} neurons)")
    w = model.blocks[-1].W_out[neuron].detach()
    with torch.no_grad():
        c = _frozen_readout(model, w, torch.tensor(float(scale)))[:N_PLACEMENTS].double().numpy()
    if cell is None:
        cell = int(np.argmax(c.reshape(81, 9).mean(1)))
    blocks = c.reshape(81, 9)
    mine = blocks[cell]
    rest = np.delete(blocks, cell, axis=0).ravel()
    return NeuronDLA(neuron, c, cell, float(mine.mean()), float(mine.std()), float(rest.mean()), float(rest.std()))


def mean_final_scale(model: Transformer, states: Sequence[NSState]) -> float:
    """Average final-LN 1/sigma at the states' prediction positions."""
    vals = []
    for s in states:
        with torch.no_grad():
            _, cache = model(pad_batch([s.tokens[: s.position + 1]]), capture=["ln_final.scale"])
        vals.append(float(cache["ln_final.scale"][0, s.position, 0]))
    return float(np.mean(vals)) if vals else 1.0


def neuron_table(model: Transformer, scan: NeuronScanReport, scale: float = 1.0) -> list[dict]:
    rows = []
    for n, c in sorted(scan.neuron_cell.items()):
        r = neuron_weight_dla(model, n, scale, c)
        rows.append({"neuron": n, "cell": str(Cell.from_index(c)), "gap": float(scan.gaps[c, n]),
                     "target_mean": r.target_mean, "target_std": r.target_std,
                     "other_mean": r.other_mean, "other_std": r.other_std})
    return rows


# --- unembedding geometry -----------------------------------------------------------

def _feature_codes() -> np.ndarray:
    ids = np.arange(N_PLACEMENTS)
    cell, digit = ids // 9, ids % 9
    row, col = cell // 9, cell % 9
    box = (row // 3) * 3 + col // 3
    same = lambda a: (a[:, None] == a[None, :]).astype(np.int64)  # noqa: E731
    return same(row) | same(col) << 1 | same(box) << 2 | same(digit) << 3


def _group_name(code: int) -> str:
    parts = [n for bit, n in enumerate(("row", "col", "box", "digit")) if code >> bit & 1]
    return "+".join(parts) if parts else "none"


def unembedding_cosine_analysis(model: Transformer, full: bool = False) -> dict:
    """Pairwise cosine of placement unembeddings grouped by the features they share.

    Returns ``{"groups": {name: {"mean", "std", "pairs"}}}`` over off-diagonal
    pairs, and the (729, 729) matrix under ``"matrix"`` when ``full``.
    """
    U = model.W_U.detach()[:, :N_PLACEMENTS].double().numpy().T
    norms = np.linalg.norm(U, axis=1, keepdims=True)
    V = np.divide(U, norms, out=np.zeros_like(U), where=norms > 0)
    C = V @ V.T
    codes = _feature_codes()
    off = ~np.eye(N_PLACEMENTS, dtype=bool)
    groups = {}
    for code in np.unique(codes[off]):
        vals = C[off & (codes == code)]
        groups[_group_name(int(code))] = {"mean": float(vals.mean()), "std": float(vals.std()), "pairs": int(vals.size)}
    out = {"groups": groups, "diagonal_min": float(np.diag(C).min())}
    if full:
        out["matrix"] = C
    return out
