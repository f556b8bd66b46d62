"""Run configuration: one JSON document per run, with desk and paper presets."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    puzzles: str = "puzzles.csv"
    n_train: int = 5000
    n_eval: int = 500
    global_seed: int = 7
    traces_per_puzzle: int = 1
    max_len: int = 250


@dataclass
class CaptureConfig:
    n: int = 640  # traces captured for probing (eval split); probe train/test = 512/128
    batch_size: int = 64


@dataclass
class ProbeConfig:
    l2: float = 1e-3
    train_fraction: float = 0.8
    position_samples: int = 200  # traces used by the cross-position curves
    position_window: int = 40


@dataclass
class PatchConfig:
    n_pairs: int = 500
    source: str = "model"  # "model": clean top-1 placement; "trace": the trace's next placement
    mode: str = "sum"


@dataclass
class AblateConfig:
    n_reference: int = 1280
    n_eval: int = 500
    heads: list[str] = field(default_factory=list)  # "L4H6:box5"; empty = every head vs its best region


@dataclass
class NeuronConfig:
    threshold: float = 3.0
    scan_traces: int = 400
    n_states: int = 1000
    min_singles: int = 2


@dataclass
class AttribConfig:
    n_attention: int = 640
    n_margin_states: int = 2000
    statistic: str = "mass"


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "capture": CaptureConfig,
    "probe": ProbeConfig,
    "patch": PatchConfig,
    "ablate": AblateConfig,
    "neuron": NeuronConfig,
    "attrib": AttribConfig,
}


@dataclass
class RunConfig:
    mode: str = "desk"
    seed: int = 0
    threads: int | None = None
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    train: TrainConfig = field(default_factory=TrainConfig)
    capture: CaptureConfig = field(default_factory=CaptureConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    attrib: AttribConfig = field(default_factory=AttribConfig)

    @classmethod
    def preset(cls, mode: str) -> "RunConfig":
        if mode == "desk":
            return cls()
        if mode == "paper":
            return cls(
                mode="paper",
                data=DataConfig(n_train=2_700_000, n_eval=100_000),
                model=ModelConfig.paper(),
                train=TrainConfig.paper(),
                capture=CaptureConfig(n=6400),
                attrib=AttribConfig(n_attention=6400, n_margin_states=100_000),
                neuron=NeuronConfig(scan_traces=20_000, n_states=1000),
            )
        raise ConfigError(f"unknown mode {mode!r} (expected desk or paper)")

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"mode": self.mode, "seed": self.seed, "threads": self.threads}
        for name in _SECTIONS:
            sec = getattr(self, name)
            out[name] = sec.to_dict() if hasattr(sec, "to_dict") else asdict(sec)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        base = cls.preset(d.get("mode", "desk"))
        unknown = set(d) - {"mode", "seed", "threads", *_SECTIONS}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        base.seed = int(d.get("seed", base.seed))
        base.threads = d.get("threads", base.threads)
        for name, kind in _SECTIONS.items():
            if name in d:
                setattr(base, name, _merge(kind, getattr(base, name), d[name], name))
        base.validate()
        return base

    def validate(self) -> "RunConfig":
        if self.mode not in ("desk", "paper"):
            raise ConfigError(f"mode must be desk or paper, got {self.mode!r}")
        try:
            self.model.validate()
        except Exception as exc:
            raise ConfigError(str(exc)) from exc
        if self.patch.mode not in ("sum", "sequential"):
            raise ConfigError("patch.mode must be sum or sequential")
        if self.patch.source not in ("model", "trace"):
            raise ConfigError("patch.source must be model or trace")
        if self.attrib.statistic not in ("mass", "per_digit"):
            raise ConfigError("attrib.statistic must be mass or per_digit")
        if not 0 < self.probe.train_fraction < 1:
            raise ConfigError("probe.train_fraction must lie in (0, 1)")
        return self

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def hash(self) -> str:
        """Content hash of the canonical JSON form."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def set_path(self, dotted: str, raw: str) -> None:
        """Override one field from a ``section.key=value`` flag; values parse as JSON when possible."""
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = dotted.split(".")
        if len(parts) == 1:
            d = self.to_dict()
            if parts[0] not in d or parts[0] in _SECTIONS:
                raise ConfigError(f"unknown config key {dotted!r}")
            d[parts[0]] = value
        elif len(parts) == 2 and parts[0] in _SECTIONS:
            d = self.to_dict()
            if parts[1] not in d[parts[0]]:
                raise ConfigError(f"unknown config key {dotted!r}")
            d[parts[0]][parts[1]] = value
        else:
            raise ConfigError(f"unknown config key {dotted!r}")
        new = RunConfig.from_dict(d)
        self.__dict__.update(new.__dict__)


def _merge(kind, current, patch: Any, where: str):
    if not isinstance(patch, dict):
        raise ConfigError(f"section {where!r} must be an object")
    names = {f.name for f in fields(kind)}
    bad = set(patch) - names
    if bad:
        raise ConfigError(f"unknown keys in {where}: {sorted(bad)}")
    merged = current.to_dict() if hasattr(current, "to_dict") else asdict(current)
    merged.update(patch)
    try:
        return kind.from_dict(merged) if hasattr(kind, "from_dict") else kind(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {where} section: {exc}") from exc


def load_config(path: str | Path | None, mode: str | None = None) -> RunConfig:
    if path is None:
        return RunConfig.preset(mode or "desk")
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if mode is not None:
        d["mode"] = mode
    return RunConfig.from_dict(d)

