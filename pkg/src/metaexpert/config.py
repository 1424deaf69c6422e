"""Experiment configuration files.

The format is INI (read with :mod:`configparser`) with one section per
component. Every key is optional; omitted keys take the documented default.
Unknown sections or keys are rejected. Lists are comma separated, ``none``
spells an unset optional value, booleans accept ``true``/``false``. A ``;``
after whitespace starts an inline comment.

Example::

    [dataset]
    unlabeled_regime = inverse
    seed = 2

    [model]
    layer_widths = 64, 64, 64
    mff_strategy = concat

    [train]
    epochs = 40
    warmup_epochs = 12
    tau = 0, 1, 2

    [eval]
    policies = expert1, expert2, expert3, dea, upper_e
    oracle = true

    [run]
    output_dir = runs/inverse-2
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentationPolicy, DatasetSpec, IntervalPartition, SpecError, default_partition
from .evaluation.metrics import POLICIES
from .model import DEAConfig, EncoderConfig, MetaExpert, MFFConfig
from .training import TrainConfig


class ConfigFileError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layer_widths: tuple[int, ...] = (64, 64, 64)
    tap_indices: tuple[int, ...] = (0, 1, 2)
    mff_strategy: str = "add"
    fused_dim: int | None = None
    dea_hidden: tuple[int, ...] = (64,)
    detach_dea_logits: bool = True
    init_seed: int = 0

    def build(self, input_dim: int, num_classes: int) -> MetaExpert:
        return MetaExpert(input_dim, num_classes,
                          EncoderConfig(self.layer_widths, self.tap_indices),
                          MFFConfig(self.mff_strategy, self.fused_dim),
                          DEAConfig(self.dea_hidden, self.detach_dea_logits),
                          seed=self.init_seed)


@dataclass(frozen=True)
class EvalConfig:
    head: tuple[int, ...] = ()      # empty: default rank-based partition
    medium: tuple[int, ...] = ()
    tail: tuple[int, ...] = ()
    policies: tuple[str, ...] = ("expert1", "expert2", "expert3", "cpe", "dea")
    oracle: bool = False
    probe: bool = True
    probe_seed: int = 0
    cpe_mean_softmax: bool = False
    test_per_class: int = 100

    def partition(self, num_classes: int) -> IntervalPartition:
        given = [bool(self.head), bool(self.medium), bool(self.tail)]
        if not any(given):
            return default_partition(num_classes)
        if not all(given):
            raise ConfigFileError("[eval] partition override needs head, medium and tail together")
        return IntervalPartition(frozenset(self.head), frozenset(self.medium), frozenset(self.tail))


@dataclass(frozen=True)
class RunConfig:
    output_dir: str = "run"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    augment: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        bad = [p for p in self.eval.policies if p not in POLICIES]
        if bad:
            raise ConfigFileError(f"[eval] unknown policies {bad}; choose from {list(POLICIES)}")
        if self.eval.test_per_class < 1:
            raise ConfigFileError("[eval] test_per_class must be >= 1")
        part = self.eval.partition(self.dataset.num_classes)
        if part.num_classes != self.dataset.num_classes:
            raise ConfigFileError(f"[eval] partition covers {part.num_classes} classes, dataset "
                                  f"has {self.dataset.num_classes}")

    @property
    def partition(self) -> IntervalPartition:
        return self.eval.partition(self.dataset.num_classes)

    @property
    def output_dir(self) -> Path:
        return Path(self.run.output_dir)

    def replace(self, section: str, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section),
                                                                          **changes)})

    def to_ini(self) -> str:
        return dumps(self)

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode("utf-8")).hexdigest()


SECTIONS = ("dataset", "augment", "model", "train", "eval", "run")

# element type of every tuple-valued key
_TUPLE_ITEMS = {"layer_widths": int, "tap_indices": int, "dea_hidden": int, "tau": float,
                "head": int, "medium": int, "tail": int, "policies": str}
_OPTIONAL_INT = {"fused_dim"}


def _parse_value(section: str, key: str, raw: str, default):
    raw = raw.strip()
    where = f"[{section}] {key}"
    try:
        if key in _TUPLE_ITEMS:
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(_TUPLE_ITEMS[key](s) for s in items)
        if key in _OPTIONAL_INT:
            return None if raw.lower() == "none" else int(raw)
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(f"not a boolean: {raw!r}")
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigFileError(f"{where}: {exc}") from None


def _format_value(key: str, value) -> str:
    if key in _TUPLE_ITEMS:
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _defaults() -> dict:
    base = ExperimentConfig()
    return {s: getattr(base, s) for s in SECTIONS}


def loads(text: str, overrides: dict[str, dict[str, str]] | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigFileError(f"unreadable config: {exc}") from None
    raw = {s: dict(parser[s]) for s in parser.sections()}
    for section, kv in (overrides or {}).items():
        raw.setdefault(section, {}).update(kv)
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigFileError(f"unknown config sections {unknown}; expected {list(SECTIONS)}")
    built = {}
    for section, default_obj in _defaults().items():
        names = {f.name: getattr(default_obj, f.name) for f in dataclasses.fields(default_obj)}
        given = raw.get(section, {})
        extra = sorted(set(given) - set(names))
        if extra:
            raise ConfigFileError(f"[{section}] unknown keys {extra}; expected {sorted(names)}")
        values = {k: _parse_value(section, k, v, names[k]) for k, v in given.items()}
        try:
            built[section] = dataclasses.replace(default_obj, **values)
        except SpecError:
            raise
        except ValueError as exc:
            raise ConfigFileError(f"[{section}] {exc}") from None
    return ExperimentConfig(**built)


def load(path: str | Path, overrides: dict[str, dict[str, str]] | None = None) -> ExperimentConfig:
    return loads(Path(path).read_text(encoding="utf-8"), overrides)


def dumps(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {f.name: _format_value(f.name, getattr(obj, f.name))
                           for f in dataclasses.fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# Desk-scale preset used by the trend suite: small blobs problem, epochs and
# warm-up scaled down from the full-scale schedule.
DESK_OVERRIDES = {
    "dataset": {"num_classes": "10", "feature_dim": "16", "n1": "300", "m_anchor": "600",
                "gamma_l": "50", "blob_spread": "0.5"},
    "train": {"epochs": "40", "warmup_epochs": "12"},
    "eval": {"policies": "expert1, expert2, expert3, cpe, dea, upper_e", "oracle": "true"},
}


def desk_preset(regime: str = "consistent", seed: int = 0, **extra: dict[str, str]
                ) -> ExperimentConfig:
    """Desk preset for one (regime, seed) cell; ``seed`` drives data, init and training."""
    over = {s: dict(kv) for s, kv in DESK_OVERRIDES.items()}
    over["dataset"].update(unlabeled_regime=regime, seed=str(seed))
    over.setdefault("model", {})["init_seed"] = str(seed)
    over["train"]["seed"] = str(seed)
    for section, kv in extra.items():
        over.setdefault(section, {}).update(kv)
    return loads("", over)
