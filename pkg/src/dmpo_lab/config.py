"""Experiment configuration: one YAML document per run, keys matching the dataclass fields."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from dmpo_lab.datagen import SETTINGS, NoiseSpec
from dmpo_lab.errors import ConfigError, DmpoLabError
from dmpo_lab.losses import TrainConfig

GAMMA_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99)
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class EnvSpec:
    name: str = "chain"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DatasetSpec:
    n_pairs: int = 200
    buckets: tuple | None = None
    noise: NoiseSpec = NoiseSpec()
    path: str | None = None  # train on an existing dataset file instead of generating one

    def __post_init__(self):
        if int(self.n_pairs) < 1:
            raise ConfigError("dataset.n_pairs must be >= 1")
        if self.buckets is not None:
            object.__setattr__(self, "buckets", tuple(int(b) for b in self.buckets))


@dataclass(frozen=True)
class SweepSpec:
    gammas: tuple = GAMMA_GRID
    seeds: tuple = DEFAULT_SEEDS
    settings: tuple = SETTINGS
    pairs_per_bucket: int = 60

    def __post_init__(self):
        object.__setattr__(self, "gammas", tuple(float(g) for g in self.gammas))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "settings", tuple(self.settings))
        if not self.seeds:
            raise ConfigError("sweep.seeds must be nonempty")
        if any(s not in SETTINGS for s in self.settings):
            raise ConfigError(f"sweep.settings must be drawn from {SETTINGS}")


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvSpec = EnvSpec()
    setting: str = "clean"
    train: TrainConfig = TrainConfig()
    dataset: DatasetSpec = DatasetSpec()
    output_dir: str = "runs/default"
    reference: str | None = None  # frozen policy JSON; fit by SFT on the wins when absent
    sweep: SweepSpec = SweepSpec()

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"]["buckets"] = list(self.dataset.buckets) if self.dataset.buckets else None
        for key in ("gammas", "seeds", "settings"):
            d["sweep"][key] = list(d["sweep"][key])
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        _reject_unknown(cls, raw, "config")
        try:
            kw = dict(raw)
            if "env" in kw:
                _reject_unknown(EnvSpec, kw["env"], "env")
                kw["env"] = EnvSpec(**kw["env"])
            if "train" in kw:
                _reject_unknown(TrainConfig, kw["train"], "train")
                kw["train"] = TrainConfig(**kw["train"])
            if "dataset" in kw:
                _reject_unknown(DatasetSpec, kw["dataset"], "dataset")
                ds = dict(kw["dataset"])
                if ds.get("noise") is not None:
                    _reject_unknown(NoiseSpec, ds["noise"], "dataset.noise")
                    ds["noise"] = NoiseSpec(**ds["noise"])
                else:
                    ds.pop("noise", None)
                kw["dataset"] = DatasetSpec(**ds)
            if "sweep" in kw:
                _reject_unknown(SweepSpec, kw["sweep"], "sweep")
                kw["sweep"] = SweepSpec(**kw["sweep"])
            return cls(**kw)
        except DmpoLabError as exc:
            raise ConfigError(str(exc)) from exc
        except TypeError as exc:
            raise ConfigError(f"malformed config: {exc}") from exc

    @classmethod
    def from_yaml(cls, text: str) -> ExperimentConfig:
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from exc
        return cls.from_dict(raw or {})

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        return cls.from_yaml(Path(path).read_text())

    def with_overrides(self, *, seed: int | None = None, output_dir: str | None = None) -> ExperimentConfig:
        cfg = self
        if seed is not None:
            cfg = _replace(cfg, train=cfg.train.replace(seed=seed), sweep=_replace(cfg.sweep, seeds=(seed,)))
        if output_dir is not None:
            cfg = _replace(cfg, output_dir=output_dir)
        return cfg


def _replace(obj, **changes):
    return type(obj)(**{**{f.name: getattr(obj, f.name) for f in fields(obj)}, **changes})


def _reject_unknown(cls, raw, where: str) -> None:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = set(raw) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
