"""Run configuration files.

A run config is one JSON object::

    {
      "data":  {... SyntheticConfig fields ...},
      "model": {... CrmConfig fields ...},
      "train": {... TrainConfig fields ...},
      "ablation": "full",
      "split": 0.8,
      "seed": 0,
      "paths": {"dataset": "data/scenes.json", "out_dir": "runs/full"}
    }

Every section and field is optional. Label counts, grid and input channels of
the model are taken from the data section; giving conflicting values is an
error. Relative paths are resolved against the config file's directory.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from crm.data import SyntheticConfig
from crm.model import CrmConfig
from crm.training import TrainConfig

ABLATIONS = ("full", "feature-only", "map-only", "group-only", "pool-decode", "stage-k")
MODALITY_CHANNELS = {"rgb": 3, "flow": 2}
_TOP_LEVEL = {"data", "model", "train", "ablation", "split", "seed", "paths"}
_PATHS = {"dataset", "out_dir"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: CrmConfig = field(default_factory=CrmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: str = "full"
    split: float = 0.8
    seed: int = 0
    dataset: Path | None = None
    out_dir: Path | None = None

    @property
    def pool_decode(self) -> bool:
        return self.ablation == "pool-decode"

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "ablation": self.ablation,
            "split": self.split,
            "seed": self.seed,
            "paths": {
                "dataset": str(self.dataset) if self.dataset else None,
                "out_dir": str(self.out_dir) if self.out_dir else None,
            },
        }


def _section(d: dict, key: str) -> dict:
    v = d.get(key, {})
    if not isinstance(v, dict):
        raise ConfigError(f"'{key}' must be an object")
    return dict(v)


def run_config_from_dict(d: dict, base: Path | None = None, seed: int | None = None) -> RunConfig:
    """Build and cross-check a :class:`RunConfig`; ``seed`` overrides the file's."""
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(d) - _TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
    ablation = d.get("ablation", "full")
    if ablation not in ABLATIONS:
        raise ConfigError(f"ablation must be one of {', '.join(ABLATIONS)}; got {ablation!r}")
    run_seed = int(d.get("seed", 0) if seed is None else seed)
    split = float(d.get("split", 0.8))
    if not 0.0 < split < 1.0:
        raise ConfigError(f"split must lie in (0, 1), got {split}")
    paths = _section(d, "paths")
    unknown = set(paths) - _PATHS
    if unknown:
        raise ConfigError(f"unknown paths field(s): {', '.join(sorted(unknown))}")

    try:
        data = SyntheticConfig.from_dict(_section(d, "data"))
        train_d = _section(d, "train")
        train_d.setdefault("seed", run_seed)
        if seed is not None:
            train_d["seed"] = seed
        train = TrainConfig.from_dict(train_d)
        model_d = _section(d, "model")
        if train.modality not in MODALITY_CHANNELS:
            raise ConfigError(f"train.modality must be one of {', '.join(MODALITY_CHANNELS)}")
        if train.modality == "flow" and data.modalities < 2:
            raise ConfigError("train.modality 'flow' needs data.modalities = 2")
        derived = {
            "grid": tuple(data.grid),
            "n_individual": 0 if ablation == "group-only" else data.n_individual,
            "n_group": data.n_group,
            "in_channels": MODALITY_CHANNELS[train.modality],
        }
        for key, val in derived.items():
            if key in model_d and _norm(model_d[key]) != _norm(val):
                raise ConfigError(f"model.{key} = {model_d[key]!r} conflicts with the data section ({val!r})")
            model_d[key] = val
        mode = {"feature-only": "feature-only", "map-only": "map-only"}.get(ablation, "full")
        if model_d.get("mode", mode) != mode:
            raise ConfigError(f"model.mode {model_d['mode']!r} conflicts with ablation {ablation!r}")
        model_d["mode"] = mode
        model_d.setdefault("seed", run_seed)
        if seed is not None:
            model_d["seed"] = seed
        model = CrmConfig.from_dict(model_d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None

    def resolve(p):
        if p is None:
            return None
        p = Path(p)
        return (base / p).resolve() if base is not None and not p.is_absolute() else p.resolve()

    return RunConfig(data, model, train, ablation, split, run_seed, resolve(paths.get("dataset")),
                     resolve(paths.get("out_dir")))


def _norm(v):
    return list(v) if isinstance(v, (list, tuple)) else v


def load_run_config(path: str | Path | None, seed: int | None = None) -> RunConfig:
    if path is None:
        return run_config_from_dict({}, None, seed)
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None
    try:
        return run_config_from_dict(d, path.parent, seed)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None
