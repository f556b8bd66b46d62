"""Pre-LN causal decoder-only transformer with named activation sites.

Residual sites are indexed by layer number: ``resid_post.0`` is the embedding
output and ``resid_post.l`` (l = 1..L) the output of block ``l``. Per-block
sites use the same 1-based index:

    resid_mid.l     residual after attention, before the MLP
    attn_probs.l    [batch, head, query, key]
    head_out.l      [batch, pos, head, d_model] (per-head output, without b_O)
    attn_out.l      [batch, pos, d_model] (sum of heads plus b_O)
    mlp_post.l      [batch, pos, d_mlp] post-GELU activations
    mlp_out.l       [batch, pos, d_model]
    ln_final.scale  [batch, pos, 1], the 1/sigma of the final LayerNorm; hooking
                    it freezes the normalization for attribution work

``forward`` takes ``hooks``: a mapping from site name to a function that
receives the site tensor and returns a replacement (or ``None`` to keep it).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .container import read_container, read_header, write_container
from .errors import ConfigError, FormatError, UsageError
from .tracegen import CLUES_END, PAD, VOCAB_SIZE

Hook = Callable[[torch.Tensor], "torch.Tensor | None"]


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_mlp: int = 768
    vocab: int = VOCAB_SIZE
    max_seq: int = 250
    seed: int = 0
    ln_eps: float = 1e-5

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "ModelConfig":
        base = dict(n_layers=8, n_heads=8, d_model=576, d_mlp=3456)
        base.update(kw)
        return cls(**base)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> "ModelConfig":
        for f in ("n_layers", "n_heads", "d_model", "d_mlp", "vocab", "max_seq"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"{f} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.vocab != VOCAB_SIZE:
            raise ConfigError(f"vocab must be {VOCAB_SIZE}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        H, D, E, M = cfg.n_heads, cfg.d_model, cfg.d_head, cfg.d_mlp
        self.ln1_w = nn.Parameter(torch.ones(D))
        self.ln1_b = nn.Parameter(torch.zeros(D))
        self.W_Q = nn.Parameter(torch.empty(H, D, E))
        self.b_Q = nn.Parameter(torch.zeros(H, E))
        self.W_K = nn.Parameter(torch.empty(H, D, E))
        self.b_K = nn.Parameter(torch.zeros(H, E))
        self.W_V = nn.Parameter(torch.empty(H, D, E))
        self.b_V = nn.Parameter(torch.zeros(H, E))
        self.W_O = nn.Parameter(torch.empty(H, E, D))
        self.b_O = nn.Parameter(torch.zeros(D))
        self.ln2_w = nn.Parameter(torch.ones(D))
        self.ln2_b = nn.Parameter(torch.zeros(D))
        self.W_in = nn.Parameter(torch.empty(D, M))
        self.b_in = nn.Parameter(torch.zeros(M))
        self.W_out = nn.Parameter(torch.empty(M, D))
        self.b_out = nn.Parameter(torch.zeros(D))


def _fire(name: str, x: torch.Tensor, hooks: Mapping[str, Hook], cache: dict, capture: frozenset) -> torch.Tensor:
    fn = hooks.get(name)
    if fn is not None:
        y = fn(x)
        if y is not None:
            x = y
    if name in capture:
        cache[name] = x
    return x


class Transformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.W_E = nn.Parameter(torch.empty(cfg.vocab, cfg.d_model))
        self.W_pos = nn.Parameter(torch.empty(cfg.max_seq, cfg.d_model))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.lnf_w = nn.Parameter(torch.ones(cfg.d_model))
        self.lnf_b = nn.Parameter(torch.zeros(cfg.d_model))
        self.W_U = nn.Parameter(torch.empty(cfg.d_model, cfg.vocab))
        self.b_U = nn.Parameter(torch.zeros(cfg.vocab))

    def _ln(self, x: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = x - x.mean(-1, keepdim=True)
        scale = torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.cfg.ln_eps)
        return x * scale * w + b, scale

    def final_ln(self, x: torch.Tensor, scale: torch.Tensor | None = None) -> torch.Tensor:
        """Final LayerNorm; pass ``scale`` to freeze the normalization statistic."""
        x = x - x.mean(-1, keepdim=True)
        if scale is None:
            scale = torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.cfg.ln_eps)
        return x * scale * self.lnf_w + self.lnf_b

    def unembed(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.W_U + self.b_U

    def forward(
        self,
        tokens: torch.Tensor,
        capture: Iterable[str] = (),
        hooks: Mapping[str, Hook] | None = None,
    ) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        cfg = self.cfg
        if tokens.dim() == 1:
            tokens = tokens[None]
        B, T = tokens.shape
        if T > cfg.max_seq:
            raise UsageError(f"sequence length {T} exceeds max_seq={cfg.max_seq}")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= cfg.vocab):
            raise UsageError(f"token ids must lie in [0, {cfg.vocab})")
        hooks = hooks or {}
        capture = frozenset(capture)
        cache: dict[str, torch.Tensor] = {}
        per_head = {n for n in list(capture) + list(hooks) if n.startswith("head_out.")}

        x = self.W_E[tokens] + self.W_pos[:T]
        x = _fire("resid_post.0", x, hooks, cache, capture)
        mask = torch.ones(T, T, dtype=torch.bool, device=tokens.device).triu(1)
        for l, blk in enumerate(self.blocks, start=1):
            h, _ = self._ln(x, blk.ln1_w, blk.ln1_b)
            q = torch.einsum("btd,hde->bhte", h, blk.W_Q) + blk.b_Q[None, :, None]
            k = torch.einsum("btd,hde->bhte", h, blk.W_K) + blk.b_K[None, :, None]
            v = torch.einsum("btd,hde->bhte", h, blk.W_V) + blk.b_V[None, :, None]
            scores = (q @ k.transpose(-1, -2)) / math.sqrt(cfg.d_head)
            scores = scores.masked_fill(mask, float("-inf"))
            probs = _fire(f"attn_probs.{l}", scores.softmax(-1), hooks, cache, capture)
            z = probs @ v  # b h t e
            if f"head_out.{l}" in per_head:
                ho = torch.einsum("bhte,hed->bthd", z, blk.W_O)
                ho = _fire(f"head_out.{l}", ho, hooks, cache, capture)
                attn = ho.sum(2) + blk.b_O
            else:
                attn = z.transpose(1, 2).reshape(B, T, -1) @ blk.W_O.reshape(-1, cfg.d_model) + blk.b_O
            attn = _fire(f"attn_out.{l}", attn, hooks, cache, capture)
            x = _fire(f"resid_mid.{l}", x + attn, hooks, cache, capture)
            h, _ = self._ln(x, blk.ln2_w, blk.ln2_b)
            act = F.gelu(h @ blk.W_in + blk.b_in)
            act = _fire(f"mlp_post.{l}", act, hooks, cache, capture)
            mlp = _fire(f"mlp_out.{l}", act @ blk.W_out + blk.b_out, hooks, cache, capture)
            x = _fire(f"resid_post.{l}", x + mlp, hooks, cache, capture)
        xc = x - x.mean(-1, keepdim=True)
        scale = torch.rsqrt(xc.pow(2).mean(-1, keepdim=True) + cfg.ln_eps)
        scale = _fire("ln_final.scale", scale, hooks, cache, capture)
        return self.unembed(xc * scale * self.lnf_w + self.lnf_b), cache

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_model(cfg: ModelConfig) -> Transformer:
    """Seeded init: N(0, 0.02) for embeddings and projections, output
    projections additionally scaled by 1/sqrt(2L); zero biases; unit LN gains."""
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = Transformer(cfg)
        std = 0.02
        out_std = std / math.sqrt(2 * cfg.n_layers)
        with torch.no_grad():
            for name, p in model.named_parameters():
                leaf = name.rsplit(".", 1)[-1]
                if leaf in ("W_O", "W_out"):
                    p.normal_(0.0, out_std)
                elif leaf.startswith("W_"):
                    p.normal_(0.0, std)
    return model


# --- batching & activation capture --------------------------------------------------

def pad_batch(seqs: Sequence[Sequence[int]], length: int | None = None) -> torch.Tensor:
    n = max((len(s) for s in seqs), default=0) if length is None else length
    out = torch.full((len(seqs), n), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        s = np.asarray(s, dtype=np.int64)[:n]
        out[i, : len(s)] = torch.from_numpy(s)
    return out


def clues_end_positions(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    out = np.empty(len(seqs), dtype=np.int64)
    for i, s in enumerate(seqs):
        hits = np.flatnonzero(np.asarray(s) == CLUES_END)
        if not hits.size:
            raise UsageError(f"sequence {i} has no [clues_end] token")
        out[i] = hits[0]
    return out


def site_key(site: str, layer: int | None = None, head: int | None = None, position: str = "clues_end") -> str:
    """Activation-store key ``site/layer/head/position`` (``-`` for absent fields)."""
    return f"{site}/{'-' if layer is None else layer}/{'-' if head is None else head}/{position}"


@dataclass
class ActivationSet:
    """Captured activations keyed by :func:`site_key`; arrays are [n_examples, ...]."""

    data: dict[str, np.ndarray]
    meta: dict

    def get(self, site: str, layer: int | None = None, head: int | None = None, position: str = "clues_end") -> np.ndarray:
        key = site_key(site, layer, head, position)
        if key not in self.data:
            raise UsageError(f"activation {key!r} was not captured")
        return self.data[key]

    def save(self, path: str | Path) -> None:
        write_container(path, self.data, meta=self.meta)

    @classmethod
    def load(cls, path: str | Path) -> "ActivationSet":
        data, header = read_container(path)
        return cls(data, header.get("meta", {}))


def capture_at_clues_end(
    model: Transformer,
    seqs: Sequence[Sequence[int]],
    sites: Iterable[str],
    batch_size: int = 64,
) -> ActivationSet:
    """Capture ``sites`` (e.g. ``"resid_post.3"``, ``"head_out.2"``) at each sequence's
    ``[clues_end]`` position. Inputs are cut just after ``[clues_end]``."""
    sites = list(sites)
    ce = clues_end_positions(seqs)
    chunks: dict[str, list[np.ndarray]] = {}
    model.eval()
    with torch.no_grad():
        for lo in range(0, len(seqs), batch_size):
            part = [np.asarray(s)[: ce[i] + 1] for i, s in enumerate(seqs[lo : lo + batch_size], start=lo)]
            toks = pad_batch(part)
            pos = torch.as_tensor(ce[lo : lo + len(part)])
            rows = torch.arange(len(part))
            _, cache = model(toks, capture=sites)
            for s in sites:
                t = cache[s]
                name, layer = s.split(".")
                if name == "attn_probs":
                    val = t[rows, :, pos]  # [b, head, key]
                    key = site_key(name, int(layer), None)
                    # keys beyond the query are exactly zero; pad to a common width
                    width = toks.shape[1]
                    val = F.pad(val, (0, model.cfg.max_seq - width))
                else:
                    val = t[rows, pos]
                    key = site_key(name, int(layer) if layer.isdigit() else None, None)
                chunks.setdefault(key, []).append(val.float().numpy())
    data = {k: np.concatenate(v) for k, v in chunks.items()}
    return ActivationSet(data, {"position": "clues_end", "n": len(seqs)})


# --- checkpoints --------------------------------------------------------------------

@dataclass
class ModelState:
    model: Transformer
    optimizer: torch.optim.Optimizer | None = None
    step: int = 0
    tokens_seen: int = 0
    moments: dict[str, np.ndarray] = field(default_factory=dict)  # optimizer state read from disk

    @property
    def config(self) -> ModelConfig:
        return self.model.cfg


def save_checkpoint(state: ModelState, path: str | Path, meta: Mapping | None = None) -> None:
    tensors = {n: p.detach().cpu().numpy().astype(np.float32) for n, p in state.model.named_parameters()}
    if state.optimizer is None:
        tensors.update(state.moments)
    else:
        names = {id(p): n for n, p in state.model.named_parameters()}
        for p, st in state.optimizer.state.items():
            n = names[id(p)]
            for k in ("exp_avg", "exp_avg_sq"):
                if k in st:
                    tensors[f"optim.{k}.{n}"] = st[k].detach().cpu().numpy().astype(np.float32)
    m = {"step": state.step, "tokens_seen": state.tokens_seen}
    m.update(meta or {})
    write_container(path, tensors, config=state.config.to_dict(), meta=m)


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> ModelState:
    """Load parameters (and optimizer moments, if present) into a fresh model.

    If ``config`` is given it must agree with the stored tensors; the error names
    the first tensor whose shape disagrees.
    """
    tensors, header = read_container(path)
    stored = ModelConfig.from_dict(header["config"])
    cfg = config or stored
    model = Transformer(cfg)
    expected = dict(model.named_parameters())
    for name, p in expected.items():
        if name not in tensors:
            raise FormatError(f"{path}: tensor {name!r} missing from checkpoint")
        if tuple(tensors[name].shape) != tuple(p.shape):
            raise FormatError(
                f"{path}: tensor {name!r} has shape {tuple(tensors[name].shape)} "
                f"but the requested config needs {tuple(p.shape)}"
            )
    extra = [n for n in tensors if not n.startswith("optim.") and n not in expected]
    if extra:
        raise FormatError(f"{path}: tensor {extra[0]!r} is not part of the requested config")
    if config is not None and config != stored:
        diff = [f.name for f in fields(ModelConfig) if getattr(config, f.name) != getattr(stored, f.name)]
        raise FormatError(f"{path}: config mismatch on {diff} (header says {stored.to_dict()})")
    with torch.no_grad():
        for name, p in expected.items():
            p.copy_(torch.from_numpy(tensors[name]))
    moments = {n: t for n, t in tensors.items() if n.startswith("optim.")}
    meta = header.get("meta", {})
    return ModelState(model, None, int(meta.get("step", 0)), int(meta.get("tokens_seen", 0)), moments)


def checkpoint_config(path: str | Path) -> ModelConfig:
    return ModelConfig.from_dict(read_header(path)["config"])
