"""Training loop, masked next-token loss, gradient check and solver evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericError, UsageError
from .grid import Board, PuzzleRecord, parse_grid
from .model import ModelState, Transformer, pad_batch
from .tracegen import CLUES_END, PAD, SUCCESS, Replayer, TraceDataset, make_rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.1
    batch_size: int = 64
    warmup_tokens: int = 500_000
    epochs: float = 1.0
    max_steps: int | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float | None = 1.0
    seed: int = 0
    # stop once the mean loss over the last `stop_window` steps falls below this
    stop_loss: float | None = None
    stop_window: int = 20

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        base = dict(batch_size=512, warmup_tokens=5_000_000, epochs=6.0)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def loss_mask(tokens: torch.Tensor) -> torch.Tensor:
    """Bool mask over *target* positions ``1..T-1``: true for non-pad tokens strictly
    after ``[clues_end]``. ``[clues_end]`` itself and the clues are unsupervised."""
    is_ce = tokens == CLUES_END
    after = (is_ce.cumsum(1) - is_ce.long()) > 0
    return (after & (tokens != PAD))[:, 1:]


def masked_loss(model: Transformer, tokens: torch.Tensor) -> torch.Tensor:
    logits, _ = model(tokens)
    mask = loss_mask(tokens)
    if not mask.any():
        raise UsageError("batch has no supervised positions")
    ce = F.cross_entropy(logits[:, :-1].reshape(-1, logits.shape[-1]), tokens[:, 1:].reshape(-1), reduction="none")
    return (ce * mask.reshape(-1)).sum() / mask.sum()


def make_optimizer(model: Transformer, cfg: TrainConfig) -> torch.optim.AdamW:
    # weight decay on matrices only; biases, LN parameters stay undecayed
    decay = [p for n, p in model.named_parameters() if p.dim() >= 2]
    keep = [p for n, p in model.named_parameters() if p.dim() < 2]
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": keep, "weight_decay": 0.0}],
        lr=cfg.lr,
        betas=cfg.betas,
    )


def lr_at(step: int, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    return 0.5 * base_lr * (1 + math.cos(math.pi * min(1.0, (step - warmup_steps) / span)))


def train(
    state: ModelState,
    dataset: TraceDataset,
    cfg: TrainConfig,
    on_step: Callable[[dict], None] | None = None,
) -> tuple[ModelState, list[dict]]:
    """Masked next-token training with AdamW and warmup+cosine schedule.

    Deterministic for a fixed seed and thread count. Returns the updated state
    and one metrics record per step.
    """
    torch.use_deterministic_algorithms(True)
    model = state.model
    seqs = dataset.sequences
    n = len(seqs)
    if n == 0:
        raise UsageError("empty dataset")
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.max_steps if cfg.max_steps is not None else max(1, int(round(cfg.epochs * steps_per_epoch)))
    mean_len = float(np.mean([len(s) for s in seqs]))
    warmup = max(1, math.ceil(cfg.warmup_tokens / (cfg.batch_size * mean_len)))
    opt = state.optimizer or make_optimizer(model, cfg)
    if state.optimizer is None and state.moments:
        _restore_moments(model, opt, state.moments, state.step)
    state.optimizer = opt
    rng = make_rng(cfg.seed)
    order = np.empty(0, dtype=np.int64)
    # replay the permutation stream up to the resume point
    for _ in range(state.step // steps_per_epoch + 1):
        order = rng.permutation(n)
    cursor = (state.step % steps_per_epoch) * cfg.batch_size
    history: list[dict] = []
    model.train()
    while state.step < total:
        if cursor >= n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        tokens = pad_batch([seqs[i] for i in idx])
        lr = lr_at(state.step, warmup, total, cfg.lr)
        for g in opt.param_groups:
            g["lr"] = lr
        loss = masked_loss(model, tokens)
        if not torch.isfinite(loss):
            raise NumericError(
                f"non-finite loss {loss.item()} at step {state.step} (lr={lr:.3g}); "
                f"last losses {[round(h['loss'], 4) for h in history[-5:]]}"
            )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        gnorm = None
        if cfg.grad_clip is not None:
            gnorm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip))
        opt.step()
        state.step += 1
        state.tokens_seen += int((tokens != PAD).sum())
        rec = {"step": state.step, "loss": loss.item(), "lr": lr, "tokens": state.tokens_seen, "grad_norm": gnorm}
        history.append(rec)
        if on_step is not None:
            on_step(rec)
        if cfg.stop_loss is not None and len(history) >= cfg.stop_window:
            recent = np.mean([h["loss"] for h in history[-cfg.stop_window :]])
            if recent < cfg.stop_loss:
                log.info("stop_loss reached at step %d (window mean %.4f)", state.step, recent)
                break
    model.eval()
    return state, history


def _restore_moments(model: Transformer, opt: torch.optim.Optimizer, moments: dict, step: int) -> None:
    for name, p in model.named_parameters():
        a, b = moments.get(f"optim.exp_avg.{name}"), moments.get(f"optim.exp_avg_sq.{name}")
        if a is not None and b is not None:
            opt.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": torch.from_numpy(a.copy()),
                "exp_avg_sq": torch.from_numpy(b.copy()),
            }


def batch_loss(model: Transformer, dataset: TraceDataset, n: int = 64) -> float:
    with torch.no_grad():
        return float(masked_loss(model, pad_batch(dataset.sequences[:n])))


def gradient_check(model: Transformer, tokens: torch.Tensor, eps: float = 1e-3, per_group: int = 12, seed: int = 0) -> dict[str, float]:
    """Relative error between autograd and central differences, per parameter.

    Runs on a float64 copy of ``model``. For each parameter tensor, ``per_group``
    entries are perturbed; the error is ``|g_auto - g_fd| / max(|g_auto|, |g_fd|)``
    over that sample (Euclidean norms).
    """
    import copy

    shadow = copy.deepcopy(model).double()
    loss = masked_loss(shadow, tokens)
    grads = torch.autograd.grad(loss, list(shadow.parameters()))
    gen = np.random.default_rng(seed)
    out = {}
    with torch.no_grad():
        for (name, p), g in zip(shadow.named_parameters(), grads):
            flat, gflat = p.view(-1), g.reshape(-1)
            idx = gen.choice(flat.numel(), size=min(per_group, flat.numel()), replace=False)
            auto, fd = [], []
            for i in idx:
                old = flat[i].item()
                flat[i] = old + eps
                up = masked_loss(shadow, tokens).item()
                flat[i] = old - eps
                down = masked_loss(shadow, tokens).item()
                flat[i] = old
                auto.append(gflat[i].item())
                fd.append((up - down) / (2 * eps))
            a, f = np.array(auto), np.array(fd)
            denom = max(np.linalg.norm(a), np.linalg.norm(f), 1e-12)
            out[name] = float(np.linalg.norm(a - f) / denom)
    return out


# --- solver evaluation --------------------------------------------------------------

Predictor = Callable[[list[list[int]]], list[int]]


def greedy_predictor(model: Transformer) -> Predictor:
    def predict(prefixes: list[list[int]]) -> list[int]:
        toks = pad_batch(prefixes)
        last = torch.tensor([len(p) - 1 for p in prefixes])
        with torch.no_grad():
            logits, _ = model(toks)
        return logits[torch.arange(len(prefixes)), last].argmax(-1).tolist()

    return predict


def prompt_tokens(board: Board, order: Sequence[int] | None = None) -> list[int]:
    """Clue placements in row-major (or the given cell) order, then ``[clues_end]``."""
    cells = order if order is not None else [i for i, v in enumerate(board.values) if v]
    return [i * 9 + board.values[i] - 1 for i in cells] + [CLUES_END]


@dataclass
class SolverScore:
    per_cell: float
    per_grid: float
    n_puzzles: int
    n_cells: int


def evaluate_solver(
    predictor: Predictor | Transformer,
    puzzles: Sequence[PuzzleRecord],
    max_seq: int = 250,
    batch_size: int = 64,
    prompts: Sequence[Sequence[int]] | None = None,
) -> SolverScore:
    """Greedy rollouts from the clue prefix, scored against known solutions.

    A rollout stops at ``[success]``, at the first grammar violation, or at
    ``max_seq``. Per-cell accuracy counts non-clue cells holding the solution
    digit on the final (pop-restored) board; per-grid counts boards that are
    completely correct.
    """
    predict = greedy_predictor(predictor) if isinstance(predictor, Transformer) else predictor
    correct_cells = total_cells = solved = 0
    for lo in range(0, len(puzzles), batch_size):
        part = puzzles[lo : lo + batch_size]
        boards = [parse_grid(p.puzzle) for p in part]
        seqs = [list(prompts[lo + k]) if prompts else prompt_tokens(b) for k, b in enumerate(boards)]
        players = []
        for s in seqs:
            rp = Replayer()
            for t in s:
                rp.step(t)
            players.append(rp)
        live = [k for k in range(len(part)) if len(seqs[k]) < max_seq]
        while live:
            nxt = predict([seqs[k] for k in live])
            still = []
            for k, t in zip(live, nxt):
                seqs[k].append(int(t))
                v = players[k].step(int(t))
                if v is None and t != SUCCESS and len(seqs[k]) < max_seq and not players[k].padding:
                    still.append(k)
            live = still
        for rec, board, rp in zip(part, boards, players):
            sol = rec.solution_board().values
            final = rp.board
            empties = [i for i, v in enumerate(board.values) if not v]
            hits = sum(final.values[i] == sol[i] for i in empties)
            correct_cells += hits
            total_cells += len(empties)
            solved += int(hits == len(empties))
    n = len(puzzles)
    return SolverScore(
        per_cell=correct_cells / total_cells if total_cells else 1.0,
        per_grid=solved / n if n else 0.0,
        n_puzzles=n,
        n_cells=total_cells,
    )
