"""Linear probes on the residual stream: fitting, labels, metrics, geometry, transfer.

Three families are supported:

* ``cell_state``: 81 nine-class probes, "which digit fills cell (r,c)?",
  trained and scored on filled cells only;
* ``cell_candidate``: 729 binary probes, "is d a candidate of empty cell (r,c)?",
  trained and scored on empty cells only;
* ``substructure``: 243 binary probes, "is d present in row/col/box S?".
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_softmax, softmax
from scipy.stats import rankdata

from .container import read_container, write_container
from .errors import UsageError
from .grid import UNITS, Board, Cell, presence_array


class Family(str, Enum):
    CELL_STATE = "cell_state"
    CELL_CANDIDATE = "cell_candidate"
    SUBSTRUCTURE = "substructure"

    @classmethod
    def parse(cls, text: str) -> "Family":
        t = text.strip().lower().replace("-", "_")
        aliases = {"state": cls.CELL_STATE, "candidate": cls.CELL_CANDIDATE, "sub": cls.SUBSTRUCTURE}
        if t in aliases:
            return aliases[t]
        return cls(t)

    @property
    def n_probes(self) -> int:
        return {"cell_state": 81, "cell_candidate": 729, "substructure": 243}[self.value]

    @property
    def binary(self) -> bool:
        return self is not Family.CELL_STATE


def target_names(family: Family) -> list[str]:
    if family is Family.CELL_STATE:
        return [str(Cell.from_index(i)) for i in range(81)]
    if family is Family.CELL_CANDIDATE:
        return [f"{Cell.from_index(i)}={d}" for i in range(81) for d in range(1, 10)]
    return [f"{u.kind.value}{u.index}={d}" for u in UNITS for d in range(1, 10)]


def probe_index(family: Family, target: Cell | tuple) -> int:
    """Column of a target: ``Cell`` / ``(Cell, d)`` / ``(Substructure, d)``."""
    if family is Family.CELL_STATE:
        return Cell(*target).index
    if family is Family.CELL_CANDIDATE:
        cell, d = target
        return Cell(*cell).index * 9 + d - 1
    sub, d = target
    return UNITS.index(sub) * 9 + d - 1


# --- labels -------------------------------------------------------------------------

@dataclass
class Labels:
    """``y``: [n, P] targets (digit-1 ints for cell_state, bools otherwise);
    ``mask``: [n, P] rows that count for each probe."""

    family: Family
    y: np.ndarray
    mask: np.ndarray


def build_labels(family: Family | str, boards: Sequence[Board]) -> Labels:
    family = Family.parse(family) if isinstance(family, str) else family
    n = len(boards)
    vals = np.array([b.values for b in boards], dtype=np.int16).reshape(n, 81)
    filled = vals > 0
    if family is Family.CELL_STATE:
        return Labels(family, np.where(filled, vals - 1, -1).astype(np.int64), filled)
    if family is Family.SUBSTRUCTURE:
        y = np.stack([presence_array(b).reshape(243) for b in boards]) if n else np.zeros((0, 243), bool)
        return Labels(family, y, np.ones_like(y, dtype=bool))
    y = np.zeros((n, 81, 9), dtype=bool)
    for k, b in enumerate(boards):
        for i, m in enumerate(b.candidate_masks()):
            if m > 0:
                y[k, i] = [(m >> j) & 1 for j in range(9)]
    mask = np.repeat(~filled[:, :, None], 9, axis=2)
    return Labels(family, y.reshape(n, 729), mask.reshape(n, 729))


# --- probes -------------------------------------------------------------------------

@dataclass
class LinearProbe:
    weights: np.ndarray  # (k, d); k = 1 for binary probes, 9 for cell_state
    bias: np.ndarray  # (k,)
    family: Family
    target: str
    layer: int | None
    degenerate: bool = False

    @property
    def unit_direction(self) -> np.ndarray:
        norms = np.linalg.norm(self.weights, axis=1, keepdims=True)
        return np.divide(self.weights, norms, out=np.zeros_like(self.weights), where=norms > 0)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        z = X @ self.weights.T + self.bias
        return expit(z[:, 0]) if self.weights.shape[0] == 1 else softmax(z, axis=1)


@dataclass
class ProbeBank:
    """All probes of one family trained at one layer, stacked."""

    family: Family
    layer: int | None
    W: np.ndarray  # (P, k, d)
    b: np.ndarray  # (P, k)
    degenerate: np.ndarray  # (P,) bool
    targets: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.targets:
            self.targets = target_names(self.family)

    def __len__(self) -> int:
        return self.W.shape[0]

    def probe(self, j: int) -> LinearProbe:
        return LinearProbe(self.W[j], self.b[j], self.family, self.targets[j], self.layer, bool(self.degenerate[j]))

    def __iter__(self):
        return (self.probe(j) for j in range(len(self)))

    def unit_directions(self) -> np.ndarray:
        norms = np.linalg.norm(self.W, axis=2, keepdims=True)
        return np.divide(self.W, norms, out=np.zeros_like(self.W), where=norms > 0)

    def logits(self, X: np.ndarray) -> np.ndarray:
        z = np.einsum("nd,pkd->npk", X, self.W) + self.b[None]
        return z[..., 0] if self.family.binary else z

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        z = self.logits(X)
        return expit(z) if self.family.binary else softmax(z, axis=2)

    def shifted(self, delta: float) -> "ProbeBank":
        return ProbeBank(self.family, self.layer, self.W, self.b + delta, self.degenerate, self.targets)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for j, t in enumerate(self.targets):
            key = f"{self.family.value}/{t}/{self.layer}"
            out[f"{key}/w"] = self.W[j].astype(np.float64)
            out[f"{key}/b"] = self.b[j].astype(np.float64)
        return out


def save_probe_banks(path: str | Path, banks: Iterable[ProbeBank], meta: Mapping | None = None) -> None:
    """Container keys ``family/target/layer/{w,b}``."""
    tensors: dict[str, np.ndarray] = {}
    index = []
    for bank in banks:
        tensors.update(bank.tensors())
        index.append({
            "family": bank.family.value,
            "layer": bank.layer,
            "degenerate": [int(x) for x in bank.degenerate],
        })
    write_container(path, tensors, meta={"banks": index, **(meta or {})})


def load_probe_banks(path: str | Path) -> list[ProbeBank]:
    tensors, header = read_container(path)
    banks = []
    for entry in header["meta"]["banks"]:
        fam = Family(entry["family"])
        names = target_names(fam)
        key = lambda t: f"{fam.value}/{t}/{entry['layer']}"  # noqa: E731
        W = np.stack([tensors[f"{key(t)}/w"] for t in names])
        b = np.stack([tensors[f"{key(t)}/b"] for t in names])
        banks.append(ProbeBank(fam, entry["layer"], W, b, np.array(entry["degenerate"], bool), names))
    return banks


# --- fitting ------------------------------------------------------------------------

def _degenerate_bias(positive: bool, n: int) -> float:
    # smoothed logit of the observed class frequency
    p = (n + 0.5) / (n + 1.0)
    return float(np.log(p / (1 - p))) * (1 if positive else -1)


def fit_binary_probes(
    X: np.ndarray,
    Y: np.ndarray,
    mask: np.ndarray | None = None,
    l2: float = 1e-3,
    tol: float = 1e-6,
    max_iter: int = 100,
    chunk: int = 64,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """L2-regularised logistic regression for many targets sharing ``X``.

    Minimises ``mean_i BCE(sigmoid(w.x_i + b), y_i) + l2/2 * |w|^2`` per target
    (bias unpenalised) by damped Newton steps until the gradient norm is below
    ``tol``. Targets with a single class among their rows come back as constant
    probes flagged degenerate. Returns ``W (P, d)``, ``b (P,)``, ``degenerate (P,)``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
        mask = None if mask is None else np.asarray(mask)[:, None]
    n, d = X.shape
    P = Y.shape[1]
    M = np.ones_like(Y) if mask is None else np.asarray(mask, dtype=np.float64)
    if Y.shape[0] != n or M.shape != Y.shape:
        raise UsageError("X, Y and mask disagree in shape")
    Xb = np.hstack([X, np.ones((n, 1))])
    W = np.zeros((P, d + 1))
    cnt = M.sum(0)
    pos = (M * Y).sum(0)
    degenerate = (pos == 0) | (pos == cnt)
    reg = np.full(d + 1, l2)
    reg[-1] = 0.0
    for j in np.flatnonzero(degenerate):
        W[j, -1] = _degenerate_bias(pos[j] > 0, int(cnt[j]))
    live = np.flatnonzero(~degenerate)
    for lo in range(0, live.size, chunk):
        idx = live[lo : lo + chunk]
        W[idx] = _newton(Xb, Y[:, idx], M[:, idx], reg, tol, max_iter)
    return W[:, :-1], W[:, -1], degenerate


def _objective(Xb, Y, M, reg, Wc, inv):
    z = Xb @ Wc.T
    ll = np.logaddexp(0, z) - Y * z
    return (M * ll).sum(0) * inv + 0.5 * (reg * Wc * Wc).sum(1)


def _newton(Xb, Y, M, reg, tol, max_iter):
    P = Y.shape[1]
    Wc = np.zeros((P, Xb.shape[1]))
    inv = 1.0 / np.maximum(M.sum(0), 1)
    f = _objective(Xb, Y, M, reg, Wc, inv)
    for _ in range(max_iter):
        s = expit(Xb @ Wc.T)
        G = ((M * (s - Y)) * inv).T @ Xb + reg * Wc
        gnorm = np.linalg.norm(G, axis=1)
        todo = gnorm > tol
        if not todo.any():
            break
        Wts = M * s * (1 - s) * inv  # (n, P)
        H = np.einsum("np,nd,ne->pde", Wts[:, todo], Xb, Xb, optimize=True)
        H += np.einsum("d,de->de", reg, np.eye(Xb.shape[1]))[None]
        H += 1e-12 * np.eye(Xb.shape[1])[None]
        step = np.zeros_like(Wc)
        step[todo] = np.linalg.solve(H, G[todo][..., None])[..., 0]
        t = np.ones(P)
        for _ in range(30):
            cand = Wc - t[:, None] * step
            fc = _objective(Xb, Y, M, reg, cand, inv)
            # Armijo condition; the relative slack absorbs roundoff at the optimum
            bad = (fc > f - 1e-4 * t * (G * step).sum(1) + 1e-13 * np.abs(f)) & todo
            if not bad.any():
                break
            t[bad] *= 0.5
        Wc = Wc - t[:, None] * step
        f = _objective(Xb, Y, M, reg, Wc, inv)
    return Wc


def fit_multiclass_probe(X: np.ndarray, y: np.ndarray, n_classes: int = 9, l2: float = 1e-3, tol: float = 1e-6, max_iter: int = 2000) -> tuple[np.ndarray, np.ndarray]:
    """Softmax regression by L-BFGS (``gtol=tol``); returns ``W (k, d)``, ``b (k,)``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, d = X.shape
    if n == 0:
        return np.zeros((n_classes, d)), np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]

    def fun(theta):
        W = theta[: n_classes * d].reshape(n_classes, d)
        b = theta[n_classes * d :]
        z = X @ W.T + b
        lp = log_softmax(z, axis=1)
        loss = -(onehot * lp).sum() / n + 0.5 * l2 * (W * W).sum()
        r = (np.exp(lp) - onehot) / n
        gW = r.T @ X + l2 * W
        return loss, np.concatenate([gW.ravel(), r.sum(0)])

    res = minimize(fun, np.zeros(n_classes * (d + 1)), jac=True, method="L-BFGS-B",
                   options={"gtol": tol, "maxiter": max_iter, "maxcor": 20})
    return res.x[: n_classes * d].reshape(n_classes, d), res.x[n_classes * d :]


def fit_probe(X: np.ndarray, y: np.ndarray, kind: str = "binary", l2: float = 1e-3,
              family: Family = Family.SUBSTRUCTURE, target: str = "", layer: int | None = None) -> LinearProbe:
    """Fit one probe. ``kind`` is ``"binary"`` or ``"9-class"`` (labels 0..8)."""
    if kind == "binary":
        W, b, deg = fit_binary_probes(X, np.asarray(y)[:, None], l2=l2)
        return LinearProbe(W[:1], b[:1], family, target, layer, bool(deg[0]))
    if kind in ("9-class", "multiclass"):
        W, b = fit_multiclass_probe(X, y, 9, l2)
        return LinearProbe(W, b, Family.CELL_STATE if family is Family.SUBSTRUCTURE else family, target, layer,
                           len(np.unique(y)) < 2)
    raise UsageError(f"unknown probe kind {kind!r}")


def fit_bank(family: Family | str, X: np.ndarray, labels: Labels, layer: int | None = None, l2: float = 1e-3) -> ProbeBank:
    family = Family.parse(family) if isinstance(family, str) else family
    d = X.shape[1]
    if family.binary:
        W, b, deg = fit_binary_probes(X, labels.y, labels.mask, l2=l2)
        return ProbeBank(family, layer, W[:, None, :], b[:, None], deg)
    Ws, bs, deg = [], [], []
    for j in range(81):
        rows = labels.mask[:, j]
        W, b = fit_multiclass_probe(X[rows], labels.y[rows, j], 9, l2)
        Ws.append(W)
        bs.append(b)
        deg.append(len(np.unique(labels.y[rows, j])) < 2)
    return ProbeBank(family, layer, np.stack(Ws).reshape(81, 9, d), np.stack(bs), np.array(deg))


# --- metrics ------------------------------------------------------------------------

def roc_auc(scores: np.ndarray, y: np.ndarray) -> float:
    """Mann-Whitney AUC with average ranks for ties; nan if one class is missing."""
    y = np.asarray(y, dtype=bool)
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        return float("nan")
    r = rankdata(scores)
    return float((r[y].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


@dataclass
class ProbeReport:
    family: Family
    train_layer: int | None
    eval_label: str
    summary: dict[str, float]
    per_probe: dict[str, np.ndarray]  # metric -> (P,) values (nan where undefined)

    def rows(self, targets: Sequence[str]) -> list[tuple]:
        out = [(self.family.value, "ALL", self.train_layer, self.eval_label, k, v) for k, v in self.summary.items()]
        for metric, vals in self.per_probe.items():
            out.extend(
                (self.family.value, t, self.train_layer, self.eval_label, metric, float(v))
                for t, v in zip(targets, vals)
            )
        return out


def _nanmean(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    a = a[~np.isnan(a)]
    return float(a.mean()) if a.size else float("nan")


def evaluate_probes(bank: ProbeBank, X: np.ndarray, labels: Labels, eval_label: str | int | None = None,
                    per_probe: bool = True) -> ProbeReport:
    """Accuracy, grouped exact match, MSE and macro ROC-AUC.

    Grouping: cell_state exact match is top-1 accuracy; cell_candidate groups
    the 9 digit probes of an empty cell; substructure groups the 9 digits of a
    unit (``exact_match``) and all 243 probes of a board (``exact_match_all27``).
    """
    if X.shape[0] != labels.y.shape[0] or labels.y.shape[1] != len(bank) or labels.family is not bank.family:
        raise UsageError("activations, labels and probe bank disagree")
    fam = bank.family
    label = str(bank.layer if eval_label is None else eval_label)
    probs = bank.predict_proba(np.asarray(X, dtype=np.float64))
    M = labels.mask
    summary: dict[str, float] = {"n": float(X.shape[0])}
    pp: dict[str, np.ndarray] = {}
    if fam is Family.CELL_STATE:
        y = labels.y
        pred = probs.argmax(2)
        hit = (pred == y) & M
        onehot = np.eye(9)[np.clip(y, 0, 8)]
        sq = ((probs - onehot) ** 2).mean(2)
        cnt = M.sum(0)
        acc = np.where(cnt > 0, hit.sum(0) / np.maximum(cnt, 1), np.nan)
        aucs = np.full(81, np.nan)
        for j in range(81):
            rows = M[:, j]
            if rows.sum() >= 2:
                per_class = [roc_auc(probs[rows, j, c], y[rows, j] == c) for c in range(9)]
                aucs[j] = _nanmean(per_class)
        summary.update(
            accuracy=float(hit.sum() / max(M.sum(), 1)),
            exact_match=float(hit.sum() / max(M.sum(), 1)),
            mse=float(sq[M].mean()) if M.any() else float("nan"),
            auc=_nanmean(aucs),
        )
        pp = {"accuracy": acc, "auc": aucs}
    else:
        y = labels.y.astype(bool)
        correct = ((probs > 0.5) == y) | ~M
        err = (probs - y) ** 2
        cnt = M.sum(0)
        acc = np.where(cnt > 0, (correct & M).sum(0) / np.maximum(cnt, 1), np.nan)
        aucs = np.array([roc_auc(probs[M[:, j], j], y[M[:, j], j]) for j in range(len(bank))])
        grouped = correct.reshape(X.shape[0], -1, 9).all(2)
        group_valid = M.reshape(X.shape[0], -1, 9).any(2)
        summary.update(
            accuracy=float((correct & M).sum() / max(M.sum(), 1)),
            exact_match=float(grouped[group_valid].mean()) if group_valid.any() else float("nan"),
            mse=float(err[M].mean()) if M.any() else float("nan"),
            auc=_nanmean(aucs),
        )
        if fam is Family.SUBSTRUCTURE:
            summary["exact_match_all27"] = float(correct.all(1).mean()) if X.shape[0] else float("nan")
        pp = {"accuracy": acc, "auc": aucs}
    return ProbeReport(fam, bank.layer, label, summary, pp if per_probe else {})


# --- probe geometry -----------------------------------------------------------------

COSINE_CATEGORIES = ("r∩box", "c∩box", "r¬box", "c¬box", "box", "stack", "band", "none")


def pair_category(a: Cell, b: Cell) -> str:
    """Shared-structure category of two distinct cells."""
    same_row, same_col = a.row == b.row, a.col == b.col
    same_box = a.box == b.box
    if same_row:
        return "r∩box" if same_box else "r¬box"
    if same_col:
        return "c∩box" if same_box else "c¬box"
    if same_box:
        return "box"
    if (a.col - 1) // 3 == (b.col - 1) // 3:
        return "stack"
    if (a.row - 1) // 3 == (b.row - 1) // 3:
        return "band"
    return "none"


def probe_cosine_structure(directions: Mapping[Cell, np.ndarray]) -> dict[str, dict[str, float]]:
    """Mean/std of pairwise cosine similarity between per-cell probe directions,
    grouped by which substructures the two cells share."""
    cells = list(directions)
    if len(cells) < 2:
        raise UsageError("need at least two probes")
    V = np.stack([np.asarray(directions[c], dtype=np.float64).ravel() for c in cells])
    norms = np.linalg.norm(V, axis=1, keepdims=True)
    V = np.divide(V, norms, out=np.zeros_like(V), where=norms > 0)
    C = V @ V.T
    groups: dict[str, list[float]] = {k: [] for k in COSINE_CATEGORIES}
    for i in range(len(cells)):
        for j in range(i + 1, len(cells)):
            groups[pair_category(Cell(*cells[i]), Cell(*cells[j]))].append(C[i, j])
    return {
        k: {"mean": float(np.mean(v)) if v else float("nan"), "std": float(np.std(v)) if v else float("nan"), "n": len(v)}
        for k, v in groups.items()
    }


def candidate_directions(bank: ProbeBank, digit: int) -> dict[Cell, np.ndarray]:
    if bank.family is not Family.CELL_CANDIDATE:
        raise UsageError("cosine structure is defined on cell_candidate probes")
    U = bank.unit_directions()[:, 0]
    return {Cell.from_index(i): U[i * 9 + digit - 1] for i in range(81) if not bank.degenerate[i * 9 + digit - 1]}


def cosine_map(bank: ProbeBank, cell: Cell, digit: int) -> np.ndarray:
    """9x9 grid of cosine similarity between one cell's candidate probe and every other cell's."""
    U = bank.unit_directions()[:, 0]
    ref = U[Cell(*cell).index * 9 + digit - 1]
    return np.array([U[i * 9 + digit - 1] @ ref for i in range(81)]).reshape(9, 9)


# --- transfer -----------------------------------------------------------------------

def cross_layer_transfer(banks: Mapping[int, ProbeBank], activations: Mapping[int, np.ndarray], labels: Labels,
                         metric: str = "exact_match") -> tuple[list[int], list[int], np.ndarray]:
    """Entry (i, j): ``metric`` of layer-i probes applied to layer-j activations."""
    src = sorted(banks)
    dst = sorted(activations)
    out = np.zeros((len(src), len(dst)))
    for a, li in enumerate(src):
        for b, lj in enumerate(dst):
            out[a, b] = evaluate_probes(banks[li], activations[lj], labels, lj, per_probe=False).summary[metric]
    return src, dst, out


@dataclass
class PositionCurves:
    """Per layer, metrics as a function of empty cells remaining."""

    layers: list[int]
    n_empty: np.ndarray  # sorted unique bucket values
    metrics: dict[str, np.ndarray]  # name -> (len(layers), len(n_empty))
    counts: np.ndarray


def cross_position_transfer(banks: Mapping[int, ProbeBank], model, sequences: Sequence[Sequence[int]],
                            batch_size: int = 32) -> PositionCurves:
    """Apply frozen probes at every position from ``[clues_end]`` onward.

    Labels come from the replayed board after each token; rows are bucketed
    by the number of empty cells on that board.
    """
    import torch

    from .model import clues_end_positions, pad_batch
    from .tracegen import iter_states

    layers = sorted(banks)
    fam = banks[layers[0]].family
    if not fam.binary:
        raise UsageError("cross-position transfer is defined for binary families")
    ce = clues_end_positions(sequences)
    feats: dict[int, list[np.ndarray]] = {l: [] for l in layers}
    boards: list[Board] = []
    empties: list[int] = []
    model.eval()
    for lo in range(0, len(sequences), batch_size):
        part = [list(s) for s in sequences[lo : lo + batch_size]]
        keep: list[list[int]] = []
        for k, s in enumerate(part):
            pos = []
            for p, _tok, board in iter_states(s):
                if p >= ce[lo + k]:
                    boards.append(board.copy())
                    empties.append(board.n_empty())
                    pos.append(p)
            keep.append(pos)
        toks = pad_batch(part)
        with torch.no_grad():
            _, cache = model(toks, capture=[f"resid_post.{l}" for l in layers])
        for l in layers:
            r = cache[f"resid_post.{l}"].numpy()
            feats[l].append(np.concatenate([r[k, pos] for k, pos in enumerate(keep)]))
    labels = build_labels(fam, boards)
    n_empty = np.asarray(empties)
    buckets = np.unique(n_empty)
    names = ("exact_match", "mse", "auc", "accuracy") + (("exact_match_all27",) if fam is Family.SUBSTRUCTURE else ())
    out = {k: np.full((len(layers), len(buckets)), np.nan) for k in names}
    counts = np.array([(n_empty == e).sum() for e in buckets])
    for a, l in enumerate(layers):
        X = np.concatenate(feats[l])
        for b, e in enumerate(buckets):
            rows = n_empty == e
            sub = Labels(fam, labels.y[rows], labels.mask[rows])
            rep = evaluate_probes(banks[l], X[rows], sub, f"empty={e}", per_probe=False)
            for k in names:
                out[k][a, b] = rep.summary[k]
    return PositionCurves(layers, buckets, out, counts)
