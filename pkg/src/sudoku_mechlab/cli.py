"""``sudoku-mechlab`` command line: one subcommand per pipeline stage.

Every stage reads and writes inside a run directory::

    run/
      config.json       effective configuration of the most recent stage
      manifest.json     per-stage config hash, input and output sha256
      datasets/         train.sdtr, eval.sdtr (+ .jsonl mirrors), eval_puzzles.csv
      checkpoints/      model.ckpt
      activations/      clues_end.act
      probes/           <family>.probes
      reports/          CSV tables and SVG figures

Exit codes: 0 success, 2 configuration or usage error, 3 missing prerequisite,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import __version__, attrib, plotting, probes, surgery
from .config import RunConfig, load_config
from .errors import (ConfigError, DomainError, FormatError, MechlabError, MissingPrerequisite, NumericError,
                     UsageError)
from .grid import Kind, Substructure, read_puzzle_csv, write_puzzle_csv
from .model import ModelState, capture_at_clues_end, clues_end_positions, init_model, load_checkpoint, save_checkpoint, site_key
from .tracegen import TraceDataset, generate_corpus, read_dataset, write_dataset, write_jsonl
from .training import TrainConfig, evaluate_solver, train

log = logging.getLogger("sudoku_mechlab")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "SUDOKU_MECHLAB_THREADS"

B4_COLUMNS = ["layer", "logit_drop", "patched_logit", "valid_top1", "changed_top1", "logit_drop_se", "clean_logit", "n"]
TABLE1_COLUMNS = ["head", "region", "control", "target_delta", "target_se", "control_delta", "control_se",
                  "n_target", "n_control"]
TABLE2_COLUMNS = ["condition", "target_logit_drop", "target_logit_se", "target_prob_drop", "target_prob_se",
                  "other_logit_drop", "other_logit_se", "n", "skipped"]
APPD_COLUMNS = ["neuron", "cell", "gap", "target_mean", "target_std", "other_mean", "other_std"]
PROBE_COLUMNS = ["family", "target", "train_layer", "eval_layer_or_position", "metric", "value"]


# --- run directory ------------------------------------------------------------------

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDir:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def ensure(self) -> None:
        for sub in ("datasets", "checkpoints", "activations", "probes", "reports"):
            self.path(sub).mkdir(parents=True, exist_ok=True)

    @property
    def manifest_path(self) -> Path:
        return self.path("manifest.json")

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {"tool": "sudoku-mechlab", "version": __version__, "stages": {}, "configs": {}}

    def require(self, rel: str, stage: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise MissingPrerequisite(str(p), stage)
        return p

    def record(self, stage: str, cfg: RunConfig, inputs: Iterable[Path], outputs: Iterable[Path]) -> None:
        man = self.manifest()
        man["version"] = __version__
        root = self.root.resolve()

        def rel(p) -> str:
            p = Path(p).resolve()
            return p.relative_to(root).as_posix() if p.is_relative_to(root) else p.as_posix()

        man["stages"][stage] = {
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "inputs": {rel(p): sha256_file(Path(p)) for p in sorted(set(map(Path, inputs)))},
            "outputs": {rel(p): sha256_file(Path(p)) for p in sorted(set(map(Path, outputs)))},
        }
        man["configs"][cfg.hash()] = cfg.to_dict()
        self.manifest_path.write_text(json.dumps(man, sort_keys=True, indent=2) + "\n")
        self.path("config.json").write_text(cfg.to_json() + "\n")

    def producer(self, rel: str) -> tuple[str, str] | None:
        """(stage, config hash) of the stage that wrote ``rel``."""
        for stage, e in self.manifest()["stages"].items():
            if rel in e["outputs"]:
                return stage, e["config_hash"]
        return None


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    if v is None:
        return ""
    return str(v)


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


# --- shared loading -----------------------------------------------------------------

def _threads(cfg: RunConfig) -> int:
    env = os.environ.get(THREADS_ENV)
    n = cfg.threads or 0
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        n = min(n, cap) if n else cap
    return max(1, n or 1)


def _dataset(run: RunDir, split: str) -> TraceDataset:
    return read_dataset(run.require(f"datasets/{split}.sdtr", "gen-data"))


def _model(run: RunDir):
    state = load_checkpoint(run.require("checkpoints/model.ckpt", "train"))
    state.model.eval()
    return state.model


def _seqs(ds: TraceDataset, n: int | None = None) -> list[list[int]]:
    rows = ds.sequences if n is None else ds.sequences[:n]
    return [[int(t) for t in s] for s in rows]


def _layers(spec: str, n_layers: int) -> list[int]:
    if spec == "all":
        return list(range(n_layers + 1))
    try:
        out = sorted({int(x) for x in spec.split(",")})
    except ValueError:
        raise UsageError(f"--layers expects 'all' or a comma list, got {spec!r}") from None
    bad = [l for l in out if not 0 <= l <= n_layers]
    if bad:
        raise UsageError(f"layers {bad} outside 0..{n_layers}")
    return out


def _families(spec: str) -> list[probes.Family]:
    if spec == "all":
        return list(probes.Family)
    try:
        return [probes.Family.parse(x) for x in spec.split(",")]
    except ValueError:
        raise UsageError(f"unknown probe family in {spec!r}") from None


def parse_head(text: str) -> tuple[int, int, Substructure | None]:
    """``L4H6`` or ``L4H6:box5`` -> (layer, head, region). Heads are 0-based."""
    head, _, region = text.partition(":")
    h = head.upper()
    if not (h.startswith("L") and "H" in h):
        raise UsageError(f"head spec must look like L4H6[:box5], got {text!r}")
    try:
        layer, hid = (int(x) for x in h[1:].split("H"))
    except ValueError:
        raise UsageError(f"head spec must look like L4H6[:box5], got {text!r}") from None
    reg = None
    if region:
        kind = region.rstrip("0123456789").lower()
        idx = region[len(kind):]
        try:
            reg = Substructure(Kind(kind), int(idx))
        except ValueError:
            raise UsageError(f"bad region {region!r} (use row3, col7, box5, band1, stack2)") from None
    return layer, hid, reg


def region_label(reg: Substructure) -> str:
    return f"{reg.kind.value}{reg.index}"


# --- stages -------------------------------------------------------------------------

def cmd_gen_data(run: RunDir, cfg: RunConfig, args) -> list[Path]:
    src = Path(cfg.data.puzzles)
    if not src.exists():
        raise ConfigError(f"puzzle CSV {src} not found (set --puzzles)")
    want = cfg.data.n_train + cfg.data.n_eval
    recs = read_puzzle_csv(src, limit=want)
    if len(recs) < want:
        raise ConfigError(f"{src} has {len(recs)} puzzles, need n_train + n_eval = {want}")
    train_recs, eval_recs = recs[: cfg.data.n_train], recs[cfg.data.n_train :]
    workers = _threads(cfg)
    outs = []
    for split, part in (("train", train_recs), ("eval", eval_recs)):
        traces = generate_corpus(part, cfg.data.global_seed, cfg.data.traces_per_puzzle, workers=workers)
        write_dataset(traces, run.path("datasets", f"{split}.sdtr"), cfg.data.max_len)
        write_jsonl(traces, run.path("datasets", f"{split}.jsonl"), cfg.data.max_len)
        outs += [run.path("datasets", f"{split}.sdtr"), run.path("datasets", f"{split}.jsonl")]
        log.info("%s: %d traces", split, len(traces))
    write_puzzle_csv(run.path("datasets", "eval_puzzles.csv"), eval_recs)
    outs.append(run.path("datasets", "eval_puzzles.csv"))
    run.record("gen-data", cfg, [src], outs)
    return outs


def cmd_train(run: RunDir, cfg: RunConfig, args) -> list[Path]:
    ds = _dataset(run, "train")
    ckpt = run.path("checkpoints", "model.ckpt")
    if args.resume and ckpt.exists():
        state = load_checkpoint(ckpt, cfg.model)
    else:
        state = ModelState(init_model(cfg.model))
    tcfg = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": cfg.seed})
    log_rows = []

    def on_step(rec: dict) -> None:
        log_rows.append(rec)
        if rec["step"] % 50 == 0:
            log.info("step %d loss %.4f lr %.2e", rec["step"], rec["loss"], rec["lr"])

    state, history = train(state, ds, tcfg, on_step)
    save_checkpoint(state, ckpt, {"config_hash": cfg.hash()})
    rep = run.path("reports", "train_log.csv")
    write_csv(rep, ["step", "loss", "lr", "tokens", "grad_norm"],
              ([h["step"], h["loss"], h["lr"], h["tokens"], h["grad_norm"]] for h in history))
    fig = plotting.line_plot({"loss": ([h["step"] for h in history], [h["loss"] for h in history])},
                             run.path("reports", "train_loss.svg"), "step", "masked loss")
    run.record("train", cfg, [run.path("datasets", "train.sdtr")], [ckpt, rep, fig])
    return [ckpt, rep, fig]


def cmd_eval(run: RunDir, cfg: RunConfig, args) -> list[Path]:
    model = _model(run)
    recs = read_puzzle_csv(run.require("datasets/eval_puzzles.csv", "gen-data"))
    ds = _dataset(run, "eval")
    n = min(args.n_puzzles or len(recs), len(recs))
    seqs = _seqs(ds, n)
    ce = clues_end_positions(seqs)
    prompts = [s[: ce[i] + 1] for i, s in enumerate(seqs)]
    score = evaluate_solver(model, recs[:n], cfg.model.max_seq, prompts=prompts)
    out = write_csv(run.path("reports", "eval.csv"), ["per_cell", "per_grid", "n_puzzles", "n_cells"],
                    [[score.per_cell, score.per_grid, score.n_puzzles, score.n_cells]])
    run.record("eval", cfg, [run.path("checkpoints", "model.ckpt"), run.path("datasets", "eval_puzzles.csv")], [out])
    print(f"per-cell {score.per_cell:.4f}  per-grid {score.per_grid:.4f}  ({score.n_puzzles} puzzles)")
    return [out]


def cmd_capture(run: RunDir, cfg: RunConfig, args) -> list[Path]:
    model = _model(run)
    ds = _dataset(run, "eval")
    seqs = _seqs(ds, cfg.capture.n)
    L = model.cfg.n_layers
    sites = [f"resid_post.{l}" for l in range(L + 1)] + [f"resid_mid.{L}", f"mlp_post.{L}"]
    sites += [f"head_out.{l}" for l in range(1, L + 1)] + [f"attn_probs.{l}" for l in range(1, L + 1)]
    acts = capture_at_clues_end(model, seqs, sites, cfg.capture.batch_size)
    ce = clues_end_positions(seqs)
    boards = []
    for i, s in enumerate(seqs):
        boards.append(surgery._board_at_clues_end(s[: ce[i] + 1]).values)
    acts.data[site_key("boards")] = np.asarray(boards, dtype=np.uint8)
    acts.meta.update({"dataset": "eval", "n": len(seqs), "config_hash": cfg.hash()})
    out = run.path("activations", "clues_end.act")
    acts.save(out)
    run.record("capture", cfg, [run.path("checkpoints", "model.ckpt"), run.path("datasets", "eval.sdtr")], [out])
    return [out]


def _load_acts(run: RunDir):
    from .model import ActivationSet

    return ActivationSet.load(run.require("activations/clues_end.act", "capture"))


def _boards_from(acts) -> list:
    from .grid import Board

    return [Board([int(v) for v in row]) for row in acts.get("boards")]


def _split(n: int, frac: float) -> int:
    return max(1, min(n - 1, int(round(n * frac))))


def cmd_probe(run: RunDir, cfg: RunConfig, args) -> list[Path]:
    acts = _load_acts(run)
    boards = _boards_from(acts)
    L = cfg.model.n_layers
    layers = _layers(args.layers, L)
    cut = _split(len(boards), cfg.probe.train_fraction)
    outs = []
    for fam in _families(args.family):
        labels = probes.build_labels(fam, boards)
        tr = probes.Labels(fam, labels.y[:cut], labels.mask[:cut])
        te = probes.Labels(fam, labels.y[cut:], labels.mask[cut:])
        banks, rows = [], []
        for l in layers:
            X = acts.get("resid_post", l).astype(np.float64)
            bank = probes.fit_bank(fam, X[:cut], tr, layer=l, l2=cfg.probe.l2)
            banks.append(bank)
            rep = probes.evaluate_probes(bank, X[cut:], te, l)
            rows += rep.rows(bank.targets)
            log.info("%s L%d %s", fam.value, l, {k: round(v, 4) for k, v in rep.summary.items()})
        pb = run.path("probes", f"{fam.value}.probes")
        probes.save_probe_banks(pb, banks, {"config_hash": cfg.hash(), "train_rows": cut})
        csv_path = write_csv(run.path("reports", f"probe_{fam.value}.csv"), PROBE_COLUMNS, rows)
        summary = [r for r in rows if r[1] == "ALL"]
        series = {}
        for metric in ("accuracy", "exact_match", "auc"):
            pts = [(int(r[2]), r[5]) for r in summary if r[4] == metric]
            series[metric] = ([p[0] for p in pts], [p[1] for p in pts])
        fig = plotting.line_plot(series, run.path("reports", f"probe_{fam.value}.svg"), "layer", "held-out score",
                                 fam.value)
        outs += [pb, csv_path, fig]
        if fam is probes.Family.CELL_CANDIDATE:
            outs += _cosine_reports(run, banks[-1])
    run.record(f"probe:{args.family}", cfg, [run.path("activations", "clues_end.act")], outs)
    return outs


def _cosine_reports(run: RunDir, bank: probes.ProbeBank) -> list[Path]:
    rows = []
    for d in range(1, 10):
        dirs = probes.candidate_directions(bank, d)
        if len(dirs) < 2:
            continue
        for cat, st in probes.probe_cosine_structure(dirs).items():
            rows.append([bank.layer, d, cat, st["mean"], st["std"], st["n"]])
    p = write_csv(run.path("reports", "probe_cosine.csv"), ["layer", "digit", "category", "mean", "std", "n"], rows)
    fig = plotting.grid_heatmap(probes.cosine_map(bank, (5, 5), 5), run.path("reports", "probe_cosine_r5c5d5.svg"),
                                f"candidate-probe cosine to R5C5=5 (layer {bank.layer})", "RdBu_r", center=True)
    return [p, fig]


def _banks_for(run: RunDir, fam: probes.Family) -> dict[int, probes.ProbeBank]:
    path = run.require(f"probes/{fam.value}.probes", "probe")
    return {b.layer: b for b in probes.load_probe_banks(path)}


def cmd_transfer(run: RunDir, cfg: RunConfig, args) -> list[Path]:
    acts = _load_acts(run)
    boards = _boards_from(acts)
    cut = _split(len(boards), cfg.probe.train_fraction)
    outs, inputs = [], [run.path("activations", "clues_end.act")]
    model = None
    for fam in _families(args.family):
        banks = _banks_for(run, fam)
        inputs.append(run.path("probes", f"{fam.value}.probes"))
        labels = probes.build_labels(fam, boards[cut:])
        X = {l: acts.get("resid_post", l)[cut:].astype(np.float64) for l in range(cfg.model.n_layers + 1)}
        metric = "exact_match" if fam.binary else "accuracy"
        src, dst, mat = probes.cross_layer_transfer(banks, X, labels, metric)
        rows = [[fam.value, "ALL", a, b, metric, mat[i, j]] for i, a in enumerate(src) for j, b in enumerate(dst)]
        if fam.binary:
            model = model or _model(run)
            seqs = _seqs(_dataset(run, "eval"), cfg.probe.position_samples)
            curves = probes.cross_position_transfer(banks, model, seqs)
            for i, l in enumerate(curves.layers):
                for k, e in enumerate(curves.n_empty):
                    for name, vals in curves.metrics.items():
                        rows.append([fam.value, "ALL", l, f"empty={int(e)}", name, vals[i, k]])
            series = {f"L{l}": (list(map(int, curves.n_empty)), list(curves.metrics["exact_match"][i]))
                      for i, l in enumerate(curves.layers)}
            outs.append(plotting.line_plot(series, run.path("reports", f"transfer_position_{fam.value}.svg"),
                                           "empty cells remaining", "exact match", fam.value))
        outs.append(write_csv(run.path("reports", f"transfer_{fam.value}.csv"), PROBE_COLUMNS, rows))
        outs.append(plotting.matrix(mat, run.path("reports", f"transfer_layer_{fam.value}.svg"),
                                    f"{fam.value}: probe layer (rows) vs activation layer",
                                    [str(l) for l in dst]))
    if model is not None:
        inputs += [run.path("checkpoints", "model.ckpt"), run.path("datasets", "eval.sdtr")]
    run.record(f"transfer:{args.family}", cfg, inputs, outs)
    return outs


def cmd_patch(run: RunDir, cfg: RunConfig, args) -> list[Path]:
    model = _model(run)
    banks = _banks_for(run, probes.Family.SUBSTRUCTURE)
    seqs = _seqs(_dataset(run, "eval"))
    pairs = surgery.select_patch_pairs(model, seqs, cfg.patch.n_pairs, cfg.patch.source)
    if not pairs:
        raise UsageError("no usable (G1, G2) pairs: the model never predicts a valid first placement")
    rows = []
    for l in _layers(args.layers, cfg.model.n_layers):
        if l not in banks:
            raise UsageError(f"no substructure probes for layer {l}; run `sudoku-mechlab probe` with that layer")
        bank = banks[l]
        res = surgery.patch_batch(model, pairs, l, lambda p, b=bank: surgery.substructure_directions(b, p.cell, p.digit),
                                  cfg.patch.mode)
        s = surgery.summarize_patches(l, res)
        rows.append([s[c] for c in B4_COLUMNS])
        log.info("patch L%d drop %.3f valid %.3f changed %.3f", l, s["logit_drop"], s["valid_top1"], s["changed_top1"])
    out = write_csv(run.path("reports", "patch_app_b4.csv"), B4_COLUMNS, rows)
    fig = plotting.line_plot({"logit drop": ([r[0] for r in rows], [r[1] for r in rows]),
                              "patched logit": ([r[0] for r in rows], [r[2] for r in rows])},
                             run.path("reports", "patch_app_b4.svg"), "patched layer", "logit")
    run.record("patch", cfg, [run.path("checkpoints", "model.ckpt"), run.path("probes", "substructure.probes"),
                              run.path("datasets", "eval.sdtr")], [out, fig])
    return [out, fig]


def cmd_ablate_head(run: RunDir, cfg: RunConfig, args) -> list[Path]:
    model = _model(run)
    ref = _seqs(_dataset(run, "train"), cfg.ablate.n_reference)
    ev = _seqs(_dataset(run, "eval"), cfg.ablate.n_eval)
    specs = [parse_head(h) for h in (args.heads or cfg.ablate.heads)]
    if not specs:
        specs = [(l, h, None) for l in range(1, model.cfg.n_layers + 1) for h in range(model.cfg.n_heads)]
    rows = []
    for layer, head, region in specs:
        if region is None:
            grid = attrib.attention_grid(model, layer, head, ev[: cfg.attrib.n_attention])
            region = attrib.dominant_region(grid.values)
        mean = surgery.head_mean(model, layer, head, ref)
        r = surgery.mean_ablate_head(model, layer, head, mean, ev, region)
        rows.append([f"L{layer}H{head}", region_label(r.region), region_label(r.control), r.target_delta, r.target_se,
                     r.control_delta, r.control_se, r.n_target, r.n_control])
    out = write_csv(run.path("reports", "table1_heads.csv"), TABLE1_COLUMNS, rows)
    run.record("ablate-head", cfg, [run.path("checkpoints", "model.ckpt"), run.path("datasets", "train.sdtr"),
                                    run.path("datasets", "eval.sdtr")], [out])
    return [out]


def _load_scan(run: RunDir) -> dict[int, list[int]]:
    d = json.loads(run.require("reports/neuron_scan.json", "attrib").read_text())
    return {int(c): ids for c, ids in d["detectors"].items()}


def cmd_ablate_neuron(run: RunDir, cfg: RunConfig, args) -> list[Path]:
    model = _model(run)
    detectors = _load_scan(run)
    if not detectors:
        raise UsageError("the neuron scan found no detectors at this threshold; nothing to ablate")
    ev = _seqs(_dataset(run, "eval"))
    states = attrib.mine_ns_states(model, ev, min_singles=cfg.neuron.min_singles, limit=cfg.neuron.n_states)
    states = [s for s in states if s.target[0] in detectors]
    ref_states = attrib.mine_ns_states(model, _seqs(_dataset(run, "train"), cfg.neuron.scan_traces), limit=5000)
    means = surgery.neuron_means(model, ref_states or states)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    used = {n for ids in detectors.values() for n in ids}
    control = {}
    for c, ids in sorted(detectors.items()):
        # prefer neurons no cell claims; fall back to any neuron outside this cell's set
        pool = [n for n in range(model.cfg.d_mlp) if n not in used]
        if len(pool) < len(ids):
            pool = [n for n in range(model.cfg.d_mlp) if n not in ids]
        if len(pool) >= len(ids):
            control[c] = sorted(rng.choice(np.array(pool), size=len(ids), replace=False).tolist())
    rows = []
    for name, mapping in (("detector", detectors), ("random", control)):
        r = surgery.ablate_ns_neurons(model, mapping, states, means)
        rows.append([name, r.target_logit_drop, r.target_logit_se, r.target_prob_drop, r.target_prob_se,
                     r.other_logit_drop, r.other_logit_se, r.n, r.skipped])
    out = write_csv(run.path("reports", "table2_neurons.csv"), TABLE2_COLUMNS, rows)
    run.record("ablate-neuron", cfg, [run.path("checkpoints", "model.ckpt"), run.path("reports", "neuron_scan.json"),
                                      run.path("datasets", "eval.sdtr"), run.path("datasets", "train.sdtr")], [out])
    return [out]


ATTRIB_PARTS = ("grids", "dla", "lens", "scan", "unembed")


def cmd_attrib(run: RunDir, cfg: RunConfig, args) -> list[Path]:
    model = _model(run)
    parts = ATTRIB_PARTS if args.only == "all" else tuple(args.only.split(","))
    bad = set(parts) - set(ATTRIB_PARTS)
    if bad:
        raise UsageError(f"unknown attrib parts {sorted(bad)}; choose from {ATTRIB_PARTS}")
    ev = _seqs(_dataset(run, "eval"))
    inputs = [run.path("checkpoints", "model.ckpt"), run.path("datasets", "eval.sdtr")]
    outs: list[Path] = []
    rdir = run.path("reports")
    regions = {}
    if "grids" in parts or "dla" in parts:
        for l in range(1, model.cfg.n_layers + 1):
            for h in range(model.cfg.n_heads):
                g = attrib.attention_grid(model, l, h, ev[: cfg.attrib.n_attention], cfg.attrib.statistic)
                regions[(l, h)] = attrib.dominant_region(g.values)
                if "grids" in parts:
                    outs.append(write_csv(rdir / f"attention_L{l}H{h}.csv", [f"c{c}" for c in range(1, 10)], g.csv_rows()))
                    outs.append(plotting.grid_heatmap(g.values, rdir / f"attention_L{l}H{h}.svg",
                                                      f"L{l}H{h} attention from [clues_end]"))
        if "grids" in parts:
            outs.append(write_csv(rdir / "attention_regions.csv", ["head", "region"],
                                  ([f"L{l}H{h}", region_label(r)] for (l, h), r in sorted(regions.items()))))
    if "dla" in parts:
        rows = []
        sample = ev[: min(len(ev), 200)]
        for (l, h), reg in sorted(regions.items()):
            rep = attrib.head_dla(model, l, h, sample, reg)
            for d in range(9):
                rows.append([f"L{l}H{h}", region_label(reg), d + 1, rep.per_digit[d, 0], rep.per_digit[d, 1],
                             int(rep.counts[d, 0]), int(rep.counts[d, 1])])
            outs.append(plotting.grid_pair(rep.present, rep.absent, rdir / f"head_dla_L{l}H{h}.svg",
                                           ("digit present in line", "digit absent"),
                                           f"L{l}H{h} direct logit contribution ({region_label(reg)})"))
        outs.append(write_csv(rdir / "head_dla.csv", ["head", "region", "digit", "present_mean", "absent_mean",
                                                      "n_present", "n_absent"], rows))
    if "lens" in parts:
        states = attrib.mine_ns_states(model, ev, limit=cfg.attrib.n_margin_states)
        unique = [s for s in states if len(s.singles) == 1]
        margin = attrib.ns_margin_analysis(model, unique)
        stats = attrib.placement_rank_stats(model, states)
        outs.append(write_csv(rdir / "ns_margins.csv", ["margin", "rank"], zip(margin.margins, margin.ranks)))
        outs.append(write_csv(rdir / "ns_rank.csv", ["site", "states", "placements", "rank1_fraction",
                                                     "unique_states", "unique_rank1_fraction"],
                              [[f"resid_mid.{model.cfg.n_layers}", stats["states"], stats["placements"],
                                stats["rank1_fraction"], len(unique), margin.rank1_fraction]]))
        if margin.margins.size:
            outs.append(plotting.histogram(margin.margins, rdir / "ns_margins.svg", xlabel="correct minus runner-up logit",
                                           title="unique naked single, before the final MLP"))
    if "scan" in parts:
        tr = _seqs(_dataset(run, "train"), cfg.neuron.scan_traces)
        inputs.append(run.path("datasets", "train.sdtr"))
        acts, counts = attrib.collect_scan_data(model, tr)
        scan = attrib.neuron_scan(acts, counts, cfg.neuron.threshold)
        scale_states = attrib.mine_ns_states(model, ev, limit=200)
        scale = attrib.mean_final_scale(model, scale_states)
        outs.append(write_csv(rdir / "neuron_scan.csv", ["neuron", "cell", "gap"], scan.rows()))
        cov = scan.coverage()
        outs.append(write_csv(rdir / "neuron_coverage.csv", list(cov), [list(cov.values())]))
        (rdir / "neuron_scan.json").write_text(json.dumps(
            {"threshold": scan.threshold, "states": int(acts.shape[0]), "final_ln_scale": scale,
             "detectors": {str(c): ids for c, ids in sorted(scan.detectors.items())}}, sort_keys=True, indent=1) + "\n")
        outs.append(rdir / "neuron_scan.json")
        table = attrib.neuron_table(model, scan, scale)
        outs.append(write_csv(rdir / "neuron_dla_app_d.csv", APPD_COLUMNS, ([r[c] for c in APPD_COLUMNS] for r in table)))
        best = np.nan_to_num(scan.gaps, nan=-np.inf).max(1).reshape(9, 9)
        outs.append(plotting.grid_heatmap(np.where(np.isfinite(best), best, np.nan), rdir / "neuron_scan.svg",
                                          "largest activation gap per cell"))
    if "unembed" in parts:
        u = attrib.unembedding_cosine_analysis(model)
        outs.append(write_csv(rdir / "unembed_cosine.csv", ["group", "mean", "std", "pairs"],
                              ([g, v["mean"], v["std"], v["pairs"]] for g, v in sorted(u["groups"].items()))))
    run.record(f"attrib:{args.only}", cfg, inputs, outs)
    return outs


REPORTS = {
    "app-b4": "reports/patch_app_b4.csv",
    "table1": "reports/table1_heads.csv",
    "table2": "reports/table2_neurons.csv",
    "app-d": "reports/neuron_dla_app_d.csv",
    "eval": "reports/eval.csv",
    "probes": "reports/probe_substructure.csv",
    "ns-rank": "reports/ns_rank.csv",
    "unembed": "reports/unembed_cosine.csv",
    "neuron-scan": "reports/neuron_scan.csv",
}
_REPORT_STAGE = {"app-b4": "patch", "table1": "ablate-head", "table2": "ablate-neuron", "app-d": "attrib",
                 "eval": "eval", "probes": "probe", "ns-rank": "attrib", "unembed": "attrib", "neuron-scan": "attrib"}


def cmd_report(run: RunDir, cfg: RunConfig, args) -> list[Path]:
    names = list(REPORTS) if args.table == "all" else [args.table]
    found = []
    for name in names:
        rel = REPORTS[name]
        if not run.path(rel).exists():
            if args.table == "all":
                continue
            raise MissingPrerequisite(rel, _REPORT_STAGE[name])
        found.append((name, rel))
    hashes = {}
    for name, rel in found:
        prod = run.producer(rel)
        if prod is None:
            raise ConfigError(f"{rel} is not listed in the manifest; rerun `sudoku-mechlab {_REPORT_STAGE[name]}`")
        hashes[rel] = prod[1]
    if len(set(hashes.values())) > 1:
        detail = ", ".join(f"{k}={v}" for k, v in sorted(hashes.items()))
        raise ConfigError(f"reports come from different configurations ({detail}); rerun the stale stages")
    outs = []
    for name, rel in found:
        header, rows = read_csv(run.path(rel))
        if name == "probes":
            rows = [r for r in rows if r[1] == "ALL"]
        out = write_csv(run.path("reports", f"table_{name}.csv"), header, rows)
        outs.append(out)
        sys.stdout.write(f"# {name}\n")
        sys.stdout.write(out.read_text())
    if found:
        run.record(f"report:{args.table}", cfg, [run.path(rel) for _, rel in found], outs)
    return outs


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate solver traces from a puzzle CSV"),
    "train": (cmd_train, "train the transformer on the generated traces"),
    "eval": (cmd_eval, "greedy solver accuracy on held-out puzzles"),
    "capture": (cmd_capture, "capture activations at [clues_end] for the eval split"),
    "probe": (cmd_probe, "fit and score linear probes"),
    "transfer": (cmd_transfer, "cross-layer and cross-position probe transfer"),
    "patch": (cmd_patch, "substructure-direction patching, per layer"),
    "ablate-head": (cmd_ablate_head, "mean-ablate attention heads at [clues_end]"),
    "ablate-neuron": (cmd_ablate_neuron, "mean-ablate naked-single detector neurons"),
    "attrib": (cmd_attrib, "attention grids, DLA, logit lens, neuron scan, unembedding geometry"),
    "report": (cmd_report, "assemble tables from stage outputs"),
}

# flags that write straight into the config; (dest, config path)
_FLAG_MAP = {
    "puzzles": "data.puzzles",
    "n": "data.n_train",
    "n_eval": "data.n_eval",
    "data_seed": "data.global_seed",
    "max_steps": "train.max_steps",
    "stop_loss": "train.stop_loss",
    "batch_size": "train.batch_size",
    "lr": "train.lr",
    "threshold": "neuron.threshold",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run-dir", default="run", help="run directory (default: ./run)")
    common.add_argument("--config", help="RunConfig JSON; defaults to <run-dir>/config.json when present")
    common.add_argument("--mode", choices=["desk", "paper"], help="preset to start from")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config field (repeatable); flags win over the file")
    common.add_argument("--seed", type=int, help="run seed (training order, random controls)")
    common.add_argument("--threads", type=int, help=f"worker/thread count (capped by ${THREADS_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sudoku-mechlab", description="Sudoku trace transformer interpretability toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, text) in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=text, description=text)
        if name == "gen-data":
            sp.add_argument("--puzzles", help="sudoku-3m style CSV (id,puzzle,solution,clues,difficulty)")
            sp.add_argument("--n", type=int, help="training puzzles")
            sp.add_argument("--n-eval", type=int, help="held-out puzzles")
            sp.add_argument("--data-seed", type=int, help="global trace seed (default: --seed)")
        elif name == "train":
            sp.add_argument("--max-steps", type=int)
            sp.add_argument("--stop-loss", type=float, help="stop once the windowed mean loss drops below this")
            sp.add_argument("--batch-size", type=int)
            sp.add_argument("--lr", type=float)
            sp.add_argument("--resume", action="store_true", help="continue from checkpoints/model.ckpt")
        elif name == "eval":
            sp.add_argument("--n", dest="n_puzzles", type=int, help="number of eval puzzles (default: all)")
        elif name in ("probe", "transfer"):
            sp.add_argument("--family", default="all", help="cell_state, cell_candidate, substructure or all")
            if name == "probe":
                sp.add_argument("--layers", default="all", help="'all' or a comma list of residual layers (0 = embeddings)")
        elif name == "patch":
            sp.add_argument("--layers", default="all")
        elif name == "ablate-head":
            sp.add_argument("--heads", nargs="*", help="heads such as L4H2 or L4H2:box5 (default: every head)")
        elif name == "attrib":
            sp.add_argument("--only", default="all", help=f"comma list from {','.join(ATTRIB_PARTS)}")
            sp.add_argument("--threshold", type=float, help="activation-gap threshold for the neuron scan")
        elif name == "report":
            sp.add_argument("--table", default="all", choices=["all", *REPORTS])
    return p


def resolve_config(args) -> RunConfig:
    run = RunDir(args.run_dir)
    path = args.config
    if path is None and run.path("config.json").exists():
        path = run.path("config.json")
    cfg = load_config(path, args.mode)
    if args.command == "gen-data" and args.seed is not None and getattr(args, "data_seed", None) is None:
        cfg.set_path("data.global_seed", str(args.seed))
    if args.seed is not None:
        cfg.set_path("seed", str(args.seed))
    if args.threads is not None:
        cfg.set_path("threads", str(args.threads))
    for item in args.set:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        cfg.set_path(key.strip(), value)
    for dest, dotted in _FLAG_MAP.items():
        v = getattr(args, dest, None)
        if v is not None:
            cfg.set_path(dotted, json.dumps(v))
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        torch.set_num_threads(_threads(cfg))
        run = RunDir(args.run_dir)
        run.ensure()
        fn = COMMANDS[args.command][0]
        fn(run, cfg, args)
    except MissingPrerequisite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, FormatError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MechlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
