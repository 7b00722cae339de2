"""Run configuration: one nested document covering every stage."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..quality import DEFAULT_MENU


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02


@dataclass(frozen=True)
class UniverseConfig:
    M: int = 8
    radius: float = 4.0
    base_var: float = 0.25


@dataclass(frozen=True)
class CorpusConfig:
    n_train: int = 10000
    n_test: int = 2000
    richness_min: int = 1
    richness_max: int = 8
    family: str = "base"


@dataclass(frozen=True)
class DenoiserConfig:
    epochs: int = 60
    steps_per_epoch: int = 100
    batch_size: int = 512
    lr: float = 2e-3
    final_lr_fraction: float = 0.05
    temb_dim: int = 32
    cond_dim: int = 32
    hidden: tuple[int, ...] = (128, 128, 128)


@dataclass(frozen=True)
class TableConfig:
    seeds: tuple[int, ...] = (0,)
    train_samples: int = 128
    eval_samples: int = 256


@dataclass(frozen=True)
class RewardSection:
    lam: float = 2.0
    gamma: float = 1.0
    k: int = 3
    w_a: float = 1.0
    w_f: float = 0.25


@dataclass(frozen=True)
class PolicyConfig:
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-5
    baseline: bool = False
    freeze_embedding: bool = False
    dim: int = 32
    hidden: int = 64
    layers: int = 3


@dataclass(frozen=True)
class EvalConfig:
    random_runs: int = 5
    timing_prompts: int = 32


@dataclass(frozen=True)
class TransferConfig:
    n_prompts: int = 2000
    richness_min: int = 1
    richness_max: int = 8
    seed: int = 7
    family: str = "transfer"


@dataclass(frozen=True)
class SweepConfig:
    k_values: tuple[int, ...] = (1, 3, 5)
    lam_values: tuple[float, ...] = (0.0, 2.0, 10.0)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    menu: tuple[int, ...] = DEFAULT_MENU
    out: str = "runs/default"
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    universe: UniverseConfig = field(default_factory=UniverseConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    table: TableConfig = field(default_factory=TableConfig)
    reward: RewardSection = field(default_factory=RewardSection)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        menu = list(self.menu)
        if not menu or menu != sorted(set(menu)):
            raise ValueError(f"menu must be non-empty and strictly increasing, got {self.menu}")
        if menu[0] < 1 or menu[-1] > self.schedule.T:
            raise ValueError(f"menu {self.menu} must lie within [1, {self.schedule.T}]")
        if not 1 <= self.reward.k <= len(menu):
            raise ValueError(f"k={self.reward.k} must be within [1, {len(menu)}]")
        if not self.table.seeds:
            raise ValueError("table needs at least one seed")
        if self.corpus.richness_min > self.corpus.richness_max:
            raise ValueError("corpus richness range is empty")


# sections feeding each artifact; a checkpoint's digest covers only these
STAGE_SECTIONS = {
    "denoiser": ("seed", "universe", "corpus", "schedule", "denoiser"),
    "policy": ("seed", "universe", "corpus", "schedule", "denoiser", "table", "menu", "reward", "policy"),
}


def to_dict(cfg) -> dict[str, Any]:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v

    return plain(dataclasses.asdict(cfg))


def _build(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ValueError(f"{where or 'config'} must be a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ValueError(f"unknown config keys at {where or 'top level'}: {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        f = known[name]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{where}.{name}".strip("."))
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ValueError(f"{where}.{name} must be a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict[str, Any]) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def load_config(path: str | Path) -> RunConfig:
    """Read YAML or JSON (JSON is valid YAML); unknown keys are rejected."""
    return from_dict(yaml.safe_load(Path(path).read_text()))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def config_digest(cfg: RunConfig, stage: str | None = None) -> bytes:
    """SHA-256 over the canonical JSON of the config (or one stage's inputs)."""
    data = to_dict(cfg)
    data.pop("out")
    if stage is not None:
        data = {k: data[k] for k in STAGE_SECTIONS[stage]}
    blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).digest()
