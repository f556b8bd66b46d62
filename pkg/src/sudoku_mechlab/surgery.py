"""Causal interventions: probe-direction patching, head mean ablation, neuron ablation.

Every intervention reads logits at a single prediction position per example
(usually ``[clues_end]``) and compares a clean run with a hooked run. Models
are never mutated.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .errors import UsageError
from .grid import Board, Cell, Kind, Substructure, cells_of, substructures_of
from .model import Hook, Transformer, clues_end_positions, pad_batch
from .probes import Family, ProbeBank, probe_index
from .tracegen import CLUES_END, N_PLACEMENTS, Replayer, placement_id, split_placement


def _run_at(model: Transformer, seqs: Sequence[Sequence[int]], pos: np.ndarray,
            hooks: Mapping[str, Hook] | None = None, capture: Sequence[str] = ()) -> tuple[torch.Tensor, dict]:
    toks = pad_batch(seqs)
    rows = torch.arange(len(seqs))
    with torch.no_grad():
        logits, cache = model(toks, capture=capture, hooks=hooks)
    return logits[rows, torch.as_tensor(pos)], cache


def _mean_se(x: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(x, dtype=np.float64)
    if a.size == 0:
        return float("nan"), float("nan")
    se = a.std(ddof=1) / np.sqrt(a.size) if a.size > 1 else 0.0
    return float(a.mean()), float(se)


def _board_at_clues_end(seq: Sequence[int]) -> Board:
    rp = Replayer()
    for t in seq:
        rp.step(t)
        if t == CLUES_END:
            break
    return rp.board


# --- probe-direction patching ----------------------------------------------------------

def apply_patch(x1: torch.Tensor, x2: torch.Tensor, directions: torch.Tensor, mode: str = "sum") -> torch.Tensor:
    """Transplant the components of ``x2`` along unit ``directions`` (k, d) into ``x1``.

    ``mode="sum"``: x1 + sum_k (w_k.x2 - w_k.x1) w_k, every coefficient read off
    the original x1. ``mode="sequential"``: the same update applied one direction
    at a time to the running vector, so the last direction matches x2 exactly.
    """
    if mode == "sum":
        coef = (x2 - x1) @ directions.T
        return x1 + coef @ directions
    if mode == "sequential":
        x = x1.clone()
        for w in directions:
            x = x + ((x2 - x) @ w)[..., None] * w
        return x
    raise UsageError(f"unknown patch mode {mode!r}")


@dataclass
class InterventionResult:
    clean_logits: np.ndarray
    patched_logits: np.ndarray
    target: int
    clean_top1: int
    patched_top1: int
    valid_top1: bool

    @property
    def logit_drop(self) -> float:
        """clean minus patched logit of the target token."""
        return float(self.clean_logits[self.target] - self.patched_logits[self.target])

    @property
    def patched_logit(self) -> float:
        return float(self.patched_logits[self.target])

    @property
    def clean_logit(self) -> float:
        return float(self.clean_logits[self.target])

    @property
    def changed_top1(self) -> bool:
        return self.clean_top1 != self.patched_top1


def substructure_directions(bank: ProbeBank, cell: Cell, digit: int) -> np.ndarray:
    """Unit probe directions for (Row r, d), (Col c, d), (Box k, d), in that order."""
    if bank.family is not Family.SUBSTRUCTURE:
        raise UsageError("patching needs substructure probes")
    U = bank.unit_directions()[:, 0]
    return np.stack([U[probe_index(Family.SUBSTRUCTURE, (s, digit))] for s in substructures_of(cell)])


@dataclass
class PatchPair:
    g1: list[int]  # clue tokens + [clues_end]
    g2: list[int]  # same clues plus the next placement, then [clues_end]
    cell: Cell
    digit: int

    @property
    def target(self) -> int:
        return placement_id(self.cell.index, self.digit)


def make_pair(clue_prefix: Sequence[int], cell: Cell, digit: int) -> PatchPair:
    g1 = list(clue_prefix)
    if g1[-1] != CLUES_END:
        g1 = g1 + [CLUES_END]
    g2 = g1[:-1] + [placement_id(Cell(*cell).index, digit), CLUES_END]
    return PatchPair(g1, g2, Cell(*cell), digit)


def patch_batch(
    model: Transformer,
    pairs: Sequence[PatchPair],
    layer: int,
    directions: Sequence[np.ndarray] | Callable[[PatchPair], np.ndarray],
    mode: str = "sum",
    batch_size: int = 64,
) -> list[InterventionResult]:
    """Patch ``resid_post.layer`` at G1's ``[clues_end]`` with G2's probe components and
    let the forward pass continue from block ``layer + 1``."""
    if not 0 <= layer <= model.cfg.n_layers:
        raise UsageError(f"layer must be in [0, {model.cfg.n_layers}]")
    site = f"resid_post.{layer}"
    out: list[InterventionResult] = []
    for lo in range(0, len(pairs), batch_size):
        part = pairs[lo : lo + batch_size]
        dirs = [directions(p) if callable(directions) else directions[lo + k] for k, p in enumerate(part)]
        D = torch.as_tensor(np.stack(dirs), dtype=torch.float32)  # b k d
        p1 = clues_end_positions([p.g1 for p in part])
        p2 = clues_end_positions([p.g2 for p in part])
        rows = torch.arange(len(part))
        clean, _ = _run_at(model, [p.g1 for p in part], p1)
        _, c2 = _run_at(model, [p.g2 for p in part], p2, capture=[site])
        x2 = c2[site][rows, torch.as_tensor(p2)]

        def hook(x: torch.Tensor) -> torch.Tensor:
            x = x.clone()
            x1 = x[rows, torch.as_tensor(p1)]
            x[rows, torch.as_tensor(p1)] = torch.stack(
                [apply_patch(x1[i], x2[i], D[i], mode) for i in range(len(part))]
            )
            return x

        patched, _ = _run_at(model, [p.g1 for p in part], p1, hooks={site: hook})
        for i, pair in enumerate(part):
            top = int(patched[i].argmax())
            board = _board_at_clues_end(pair.g1)
            valid = False
            if top < N_PLACEMENTS:
                ci, d = split_placement(top)
                valid = board.values[ci] == 0 and not board.used_mask(ci) >> (d - 1) & 1
            out.append(InterventionResult(
                clean[i].numpy().copy(), patched[i].numpy().copy(), pair.target,
                int(clean[i].argmax()), top, valid,
            ))
    return out


def patch_substructure_directions(model: Transformer, g1: Sequence[int], g2: Sequence[int], cell: Cell, digit: int,
                                  layer: int, bank: ProbeBank | None, mode: str = "sum") -> InterventionResult:
    if bank is None:
        raise UsageError(f"no substructure probes available for layer {layer}")
    pair = PatchPair(list(g1), list(g2), Cell(*cell), digit)
    return patch_batch(model, [pair], layer, [substructure_directions(bank, pair.cell, digit)], mode)[0]


def summarize_patches(layer: int, results: Sequence[InterventionResult]) -> dict:
    drop, se = _mean_se([r.logit_drop for r in results])
    return {
        "layer": layer,
        "logit_drop": drop,
        "logit_drop_se": se,
        "patched_logit": float(np.mean([r.patched_logit for r in results])) if results else float("nan"),
        "valid_top1": float(np.mean([r.valid_top1 for r in results])) if results else float("nan"),
        "changed_top1": float(np.mean([r.changed_top1 for r in results])) if results else float("nan"),
        "clean_logit": float(np.mean([r.clean_logit for r in results])) if results else float("nan"),
        "n": len(results),
    }


def select_patch_pairs(model: Transformer, sequences: Sequence[Sequence[int]], n: int, source: str = "model") -> list[PatchPair]:
    """Build (G1, G2) pairs from the clue prefix of each trace.

    ``source="model"`` takes the clean top-1 at ``[clues_end]`` when it is a valid
    placement; ``source="trace"`` takes the trace's next placement.
    """
    pairs: list[PatchPair] = []
    ce = clues_end_positions(sequences)
    prefixes = [list(np.asarray(s)[: ce[i] + 1]) for i, s in enumerate(sequences)]
    if source == "model":
        for lo in range(0, len(prefixes), 64):
            part = prefixes[lo : lo + 64]
            logits, _ = _run_at(model, part, ce[lo : lo + 64])
            for pre, top in zip(part, logits.argmax(-1).tolist()):
                if top < N_PLACEMENTS:
                    ci, d = split_placement(top)
                    board = _board_at_clues_end(pre)
                    if board.values[ci] == 0 and not board.used_mask(ci) >> (d - 1) & 1:
                        pairs.append(make_pair(pre, Cell.from_index(ci), d))
                if len(pairs) >= n:
                    return pairs
    elif source == "trace":
        for i, s in enumerate(sequences):
            nxt = int(s[ce[i] + 1]) if ce[i] + 1 < len(s) else None
            if nxt is not None and nxt < N_PLACEMENTS:
                ci, d = split_placement(nxt)
                pairs.append(make_pair(prefixes[i], Cell.from_index(ci), d))
            if len(pairs) >= n:
                break
    else:
        raise UsageError(f"unknown pair source {source!r}")
    return pairs


# --- attention-head mean ablation ----------------------------------------------------

def head_mean(model: Transformer, layer: int, head: int, sequences: Sequence[Sequence[int]], batch_size: int = 64) -> np.ndarray:
    """Mean ``head_out`` of one head at ``[clues_end]`` over a reference set."""
    _check_head(model, layer, head)
    site = f"head_out.{layer}"
    total = np.zeros(model.cfg.d_model, dtype=np.float64)
    ce = clues_end_positions(sequences)
    for lo in range(0, len(sequences), batch_size):
        part = [np.asarray(s)[: ce[lo + k] + 1] for k, s in enumerate(sequences[lo : lo + batch_size])]
        _, cache = _run_at(model, part, ce[lo : lo + len(part)], capture=[site])
        rows = torch.arange(len(part))
        total += cache[site][rows, torch.as_tensor(ce[lo : lo + len(part)]), head].double().sum(0).numpy()
    return (total / max(len(sequences), 1)).astype(np.float32)


def _check_head(model: Transformer, layer: int, head: int) -> None:
    if not 1 <= layer <= model.cfg.n_layers or not 0 <= head < model.cfg.n_heads:
        raise UsageError(f"no head L{layer}H{head} in a {model.cfg.n_layers}x{model.cfg.n_heads} model")


def illegal_placements(board: Board, region: Substructure) -> list[int]:
    """Placement ids (cell empty, cell in region, digit already present in region)."""
    cells = cells_of(region)
    present = {board.values[c.index] for c in cells} - {0}
    return [placement_id(c.index, d) for c in cells if board.values[c.index] == 0 for d in sorted(present)]


def control_region(region: Substructure) -> Substructure:
    hi = 3 if region.kind in (Kind.BAND, Kind.STACK) else 9
    return Substructure(region.kind, region.index % hi + 1)


@dataclass
class HeadAblationResult:
    layer: int
    head: int
    region: Substructure
    control: Substructure
    target_delta: float
    target_se: float
    control_delta: float
    control_se: float
    n_target: int
    n_control: int
    deltas: dict = field(default_factory=dict, repr=False)


def ablate_head(model: Transformer, layer: int, head: int, replacement: np.ndarray,
                sequences: Sequence[Sequence[int]], batch_size: int = 64,
                extra_hooks: Mapping[str, Hook] | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Clean and ablated logits at ``[clues_end]`` with one head's output replaced.

    ``replacement`` is a single (d_model,) vector or one row per sequence."""
    _check_head(model, layer, head)
    site = f"head_out.{layer}"
    rep = torch.as_tensor(np.asarray(replacement), dtype=torch.float32)
    ce = clues_end_positions(sequences)
    cleans, ablated = [], []
    for lo in range(0, len(sequences), batch_size):
        part = [np.asarray(s)[: ce[lo + k] + 1] for k, s in enumerate(sequences[lo : lo + batch_size])]
        pos = torch.as_tensor(ce[lo : lo + len(part)])
        rows = torch.arange(len(part))
        r = rep if rep.dim() == 1 else rep[lo : lo + len(part)]

        def hook(x: torch.Tensor) -> torch.Tensor:
            x = x.clone()
            x[rows, pos, head] = r
            return x

        # the identity hook keeps the clean run on the same per-head code path
        c, _ = _run_at(model, part, pos.numpy(), hooks={**(extra_hooks or {}), site: lambda x: None})
        a, _ = _run_at(model, part, pos.numpy(), hooks={**(extra_hooks or {}), site: hook})
        cleans.append(c)
        ablated.append(a)
    return torch.cat(cleans), torch.cat(ablated)


def mean_ablate_head(model: Transformer, layer: int, head: int, mean_vector: np.ndarray,
                     sequences: Sequence[Sequence[int]], region: Substructure,
                     control: Substructure | None = None) -> HeadAblationResult:
    """Delta = ablated - clean logit over illegal placements of ``region`` and of a
    same-kind ``control`` region; mean and standard error over all placements."""
    control = control or control_region(region)
    if control.kind is not region.kind:
        raise UsageError("control region must be the same kind as the target region")
    clean, abl = ablate_head(model, layer, head, mean_vector, sequences)
    delta = (abl - clean).numpy()
    t_vals, c_vals = [], []
    for i, s in enumerate(sequences):
        board = _board_at_clues_end(s)
        t_vals.extend(delta[i, illegal_placements(board, region)])
        c_vals.extend(delta[i, illegal_placements(board, control)])
    tm, ts = _mean_se(t_vals)
    cm, cs = _mean_se(c_vals)
    return HeadAblationResult(layer, head, region, control, tm, ts, cm, cs, len(t_vals), len(c_vals),
                              {"target": np.asarray(t_vals), "control": np.asarray(c_vals)})


# --- final-MLP neuron ablation -------------------------------------------------------

@dataclass
class NSState:
    """A prefix whose next-token prediction is scored at ``position``."""

    tokens: list[int]
    position: int
    board: Board
    singles: list[tuple[int, int]]  # (cell index, digit) naked singles on the board
    target: tuple[int, int] | None = None  # the NS placement the model predicts

    @property
    def others(self) -> list[tuple[int, int]]:
        return [s for s in self.singles if s != self.target]


@dataclass
class NeuronAblationResult:
    target_logit_drop: float
    target_logit_se: float
    target_prob_drop: float
    target_prob_se: float
    other_logit_drop: float
    other_logit_se: float
    n: int
    skipped: int


def ablate_ns_neurons(
    model: Transformer,
    neurons: Sequence[int] | Mapping[int, Sequence[int]],
    states: Sequence[NSState],
    means: np.ndarray,
    extra_hooks: Mapping[str, Hook] | None = None,
    batch_size: int = 32,
) -> NeuronAblationResult:
    """Mean-ablate final-MLP neurons at each state's prediction position.

    ``neurons`` is either a fixed id list or a map ``cell index -> ids`` used with
    each state's target cell (states whose cell has no neuron are skipped).
    Drops are clean minus ablated: target logit, target softmax probability,
    and the mean logit over the other naked-single placements on the board.
    """
    L, M = model.cfg.n_layers, model.cfg.d_mlp
    ids_all = [i for v in (neurons.values() if isinstance(neurons, Mapping) else [neurons]) for i in v]
    bad = [i for i in ids_all if not 0 <= int(i) < M]
    if bad:
        raise UsageError(f"unknown neuron id(s) {bad[:5]} (final MLP has {M} neurons)")
    means_t = torch.as_tensor(np.asarray(means), dtype=torch.float32)
    site = f"mlp_post.{L}"
    usable, skipped = [], 0
    for st in states:
        if st.target is None:
            skipped += 1
            continue
        ids = list(neurons.get(st.target[0], [])) if isinstance(neurons, Mapping) else list(neurons)
        if not ids:
            skipped += 1
            continue
        usable.append((st, ids))
    t_drop, p_drop, o_drop = [], [], []
    for lo in range(0, len(usable), batch_size):
        part = usable[lo : lo + batch_size]
        seqs = [st.tokens[: st.position + 1] for st, _ in part]
        pos = np.array([st.position for st, _ in part])
        mask = torch.zeros(len(part), M, dtype=torch.bool)
        for k, (_, ids) in enumerate(part):
            mask[k, ids] = True
        prow = torch.as_tensor(pos)
        rows = torch.arange(len(part))

        def hook(x: torch.Tensor) -> torch.Tensor:
            x = x.clone()
            cur = x[rows, prow]
            x[rows, prow] = torch.where(mask, means_t.expand_as(cur), cur)
            return x

        clean, _ = _run_at(model, seqs, pos, hooks=dict(extra_hooks or {}))
        abl, _ = _run_at(model, seqs, pos, hooks={**(extra_hooks or {}), site: hook})
        pc, pa = clean.softmax(-1), abl.softmax(-1)
        for k, (st, _) in enumerate(part):
            t = placement_id(*st.target)
            t_drop.append(float(clean[k, t] - abl[k, t]))
            p_drop.append(float(pc[k, t] - pa[k, t]))
            others = [placement_id(*o) for o in st.others]
            if others:
                o_drop.append(float((clean[k, others] - abl[k, others]).mean()))
    tm, ts = _mean_se(t_drop)
    pm, ps = _mean_se(p_drop)
    om, os_ = _mean_se(o_drop)
    return NeuronAblationResult(tm, ts, pm, ps, om, os_, len(t_drop), skipped)


def neuron_means(model: Transformer, states: Sequence[NSState], batch_size: int = 32) -> np.ndarray:
    """Mean final-MLP activation at the prediction positions of ``states``."""
    site = f"mlp_post.{model.cfg.n_layers}"
    total = np.zeros(model.cfg.d_mlp)
    for lo in range(0, len(states), batch_size):
        part = states[lo : lo + batch_size]
        pos = np.array([s.position for s in part])
        _, cache = _run_at(model, [s.tokens[: s.position + 1] for s in part], pos, capture=[site])
        total += cache[site][torch.arange(len(part)), torch.as_tensor(pos)].double().sum(0).numpy()
    return (total / max(len(states), 1)).astype(np.float32)
