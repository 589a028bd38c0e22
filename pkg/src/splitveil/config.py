"""Sectioned run configuration (TOML) shared by every CLI command.

Layout::

    [train]        # TrainConfig fields except ``data``
    [data]         # DataConfig fields
    [attack]       # AttackConfig fields
    [sweep]        # seeds = [...] and one [[sweep.grid]] table per defense series

Precedence: built-in defaults < config file < command-line flags. The fully
resolved config is echoed next to every report, and feeding that echo back
with ``--config`` reproduces the run.
"""

from __future__ import annotations

import itertools
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli_w

from .attack import AttackConfig
from .defense import DataConfig, TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SECTIONS = ("train", "data", "attack", "sweep")
SWEEP_KEYS = ("seeds", "grid")


class ConfigError(ValueError):
    pass


def _drop_none(d: dict) -> dict:
    # TOML has no null; a missing key means "use the default"
    return {k: _drop_none(v) if isinstance(v, dict) else v for k, v in d.items() if v is not None}


@dataclass
class SweepConfig:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    grid: list = field(default_factory=list)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("sweep.seeds is empty")
        if not self.grid:
            raise ConfigError("sweep.grid is empty")
        train_keys = {f.name for f in fields(TrainConfig)} - {"data", "seed"}
        for i, item in enumerate(self.grid):
            if not isinstance(item, dict):
                raise ConfigError(f"sweep.grid[{i}] must be a table")
            unknown = set(item) - train_keys
            if unknown:
                raise ConfigError(f"unknown keys in sweep.grid[{i}]: {sorted(unknown)}")
            if any(isinstance(v, list) and not v for v in item.values()):
                raise ConfigError(f"sweep.grid[{i}] has an empty value list")

    def cells(self, base: TrainConfig) -> list[tuple[TrainConfig, str]]:
        """Expand the grid: list values form a cartesian product, scalars are fixed.

        Returns ``(config, params)`` pairs, ``params`` naming the non-defense
        settings of the cell, e.g. ``"fsinfo=-1.0;lam=1.0"``.
        """
        out = []
        for item in self.grid:
            keys = sorted(item)
            choices = [v if isinstance(v, list) else [v] for v in (item[k] for k in keys)]
            for combo in itertools.product(*choices):
                overrides = dict(zip(keys, combo))
                params = ";".join(f"{k}={v}" for k, v in overrides.items() if k != "defense")
                for seed in self.seeds:
                    out.append((replace(base, seed=int(seed), **overrides), params))
        return out


# InfoDecom against FSInfoGuard at three matched FSInfo budgets
REFERENCE_SWEEP = SweepConfig(seeds=[0, 1, 2], grid=[
    {"defense": "infodecom", "lam": 1.0, "fsinfo": [-0.5, -1.0, -2.0]},
    {"defense": "fsinfo_guard", "fsinfo": [-0.5, -1.0, -2.0]},
])


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    sweep: SweepConfig | None = None

    def to_dict(self) -> dict:
        train = asdict(self.train)
        data = train.pop("data")
        d = {"train": train, "data": data, "attack": asdict(self.attack)}
        if self.sweep is not None:
            d["sweep"] = asdict(self.sweep)
        return _drop_none(d)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        train = dict(d.get("train", {}))
        if "data" in train:
            raise ConfigError("put dataset settings in the [data] section")
        try:
            data = DataConfig(**_checked(d.get("data", {}), DataConfig, "data"))
            train_cfg = TrainConfig(**_checked(train, TrainConfig, "train"), data=data)
            attack = AttackConfig.from_dict(d.get("attack", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        sweep = None
        if "sweep" in d:
            s = d["sweep"]
            bad = set(s) - set(SWEEP_KEYS)
            if bad:
                raise ConfigError(f"unknown keys in [sweep]: {sorted(bad)}")
            sweep = SweepConfig(**s)
        return cls(train_cfg, attack, sweep)

    def with_overrides(self, **flags) -> "RunConfig":
        """Apply command-line overrides; ``None`` means the flag was not given."""
        t = {k: v for k, v in flags.items() if v is not None and k != "seed"}
        train = replace(self.train, **t) if t else self.train
        attack = self.attack
        if flags.get("seed") is not None:
            train = replace(train, seed=flags["seed"])
            attack = replace(attack, seed=flags["seed"])
        return RunConfig(train, attack, self.sweep)


def _checked(d: dict, cls, section: str) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return d


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return RunConfig.from_dict(raw)
