"""Run configuration: one YAML document with a section per module config.

Every section maps onto a frozen dataclass; unknown sections or keys are
rejected. Command-line overrides use ``--section.key=value`` (values are
parsed as YAML scalars/lists), and top-level keys use ``--key=value``.

Example::

    seed: 7
    encoder: {d_t: 64, n_layers: 2}
    train: {max_epochs: 15}
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import yaml

from .augment import AugmentConfig
from .contrastive import TrainConfig
from .encoder import EncoderConfig
from .finetune import FinetuneConfig
from .grid import SkipGramConfig
from .measures import MeasureKind
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    format: str = "jsonl"
    min_pts: int = 20
    max_pts: int = 200


@dataclass(frozen=True)
class GridConfig:
    cell_side: float = 100.0


@dataclass(frozen=True)
class SearchConfig:
    k: int = 10
    index: str = "flat"
    k_c: int | None = None
    nprobe: int | None = None
    kmeans_iters: int = 20

    def __post_init__(self):
        if self.index not in ("flat", "ivf"):
            raise ValueError(f"search.index must be 'flat' or 'ivf', got {self.index!r}")
        if self.k < 1:
            raise ValueError("search.k must be at least 1")


@dataclass(frozen=True)
class EvalConfig:
    n_queries: int = 100
    db_size: int = 500
    rho_s: tuple[float, ...] = ()
    rho_d: tuple[float, ...] = ()
    db_sizes: tuple[int, ...] = ()
    measure: str | None = None
    hr_pool: int = 100
    ks: tuple[int, ...] = (5, 20)


SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "synth": SynthConfig,
    "grid": GridConfig,
    "skipgram": SkipGramConfig,
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "augment": AugmentConfig,
    "measure": MeasureKind,
    "search": SearchConfig,
    "finetune": FinetuneConfig,
    "eval": EvalConfig,
}

# sections whose own ``seed`` follows the top-level seed when that is set
_SEEDED = ("synth", "train", "finetune", "augment")


@dataclass(frozen=True)
class RunConfig:
    seed: int | None = None
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    skipgram: SkipGramConfig = field(default_factory=SkipGramConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(method="mask"))
    measure: MeasureKind = field(default_factory=lambda: MeasureKind("hausdorff"))
    search: SearchConfig = field(default_factory=SearchConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def effective_seed(self) -> int:
        return 0 if self.seed is None else self.seed

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"seed": self.seed}
        for name in SECTIONS:
            out[name] = _plain(dataclasses.asdict(getattr(self, name)))
        return out


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _coerce(cls: type, key: str, value):
    """Lists from YAML become tuples where the field is a tuple; ints widen to floats."""
    hints = typing.get_type_hints(cls)
    hint = hints.get(key)
    origin = typing.get_origin(hint)
    if isinstance(value, list) and (origin is tuple or "tuple" in str(hint)):
        return tuple(value)
    if hint is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def build_section(name: str, values: dict | None):
    cls = SECTIONS[name]
    values = dict(values or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    base = dataclasses.asdict(getattr(RunConfig(), name))
    base.update({k: _coerce(cls, k, v) for k, v in values.items()})
    try:
        return cls(**{k: _coerce(cls, k, v) for k, v in base.items()})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid section {name!r}: {e}") from e


def from_dict(d: dict | None) -> RunConfig:
    d = dict(d or {})
    unknown = sorted(set(d) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    seed = d.get("seed")
    if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool) or seed < 0):
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    sections = {}
    for name in SECTIONS:
        part = d.get(name)
        if part is not None and not isinstance(part, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        part = dict(part or {})
        if seed is not None and name in _SEEDED:
            part["seed"] = seed
        sections[name] = build_section(name, part)
    return RunConfig(seed=seed, **sections)


def parse_override(text: str) -> tuple[list[str], Any]:
    """``--a.b=v`` -> (["a", "b"], parsed v)."""
    if not text.startswith("--") or "=" not in text:
        raise ConfigError(f"overrides look like --section.key=value, got {text!r}")
    key, raw = text[2:].split("=", 1)
    path = key.split(".")
    if not all(path) or len(path) > 2:
        raise ConfigError(f"bad override key {key!r}")
    try:
        value = yaml.safe_load(raw) if raw != "" else ""
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse value of {key!r}: {e}") from e
    return path, value


def apply_overrides(d: dict, overrides: Sequence[str]) -> dict:
    d = {k: (dict(v) if isinstance(v, dict) else v) for k, v in (d or {}).items()}
    for text in overrides:
        path, value = parse_override(text)
        if len(path) == 1:
            d[path[0]] = value
        else:
            sec = d.setdefault(path[0], {})
            if not isinstance(sec, dict):
                raise ConfigError(f"section {path[0]!r} must be a mapping")
            sec[path[1]] = value
    return d


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    d: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            d = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(apply_overrides(d, overrides))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
