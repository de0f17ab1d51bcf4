"""Experiment configuration files and the scenario pipeline behind the CLI.

A config is a TOML file with the sections ``[dataset]``, ``[attack]``,
``[defense]``, ``[evaluation]`` and an optional ``[sweep]``.  Every key has
a default, so an empty file describes the default scenario.  Relative paths
are resolved against the directory holding the config file.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from .data import (
    LabeledDataset,
    TriggerSpec,
    generate_synthetic,
    load_idx,
    split_per_class,
)
from .defense import DefenseConfig
from .errors import ConfigError


@dataclass
class DatasetSection:
    source: str = "synthetic"
    classes: int = 8
    size: int = 16
    channels: int = 1
    noise: float = 0.08
    train_per_class: int = 200
    test_per_class: int = 100
    pool_per_class: int = 100
    seed: int = 1
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None

    def validate(self):
        if self.source not in ("synthetic", "idx"):
            raise ConfigError("dataset.source", f"must be 'synthetic' or 'idx', got {self.source!r}")
        for name in ("train_per_class", "test_per_class", "pool_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"dataset.{name}", "must be >= 1")
        if self.source == "idx":
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                if getattr(self, name) is None:
                    raise ConfigError(f"dataset.{name}", "required when source = 'idx'")


@dataclass
class AttackSection:
    trigger: str = "patch"
    target: int = 0
    patch_size: int = 3
    corner: str = "bottom-right"
    fill: float = 1.0
    alpha: float = 0.2
    ratio: float = 0.1
    epochs: int = 15
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 1

    def validate(self):
        if self.trigger not in ("patch", "blend"):
            raise ConfigError("attack.trigger", f"must be 'patch' or 'blend', got {self.trigger!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError("attack.ratio", "must lie in [0, 1]")
        if self.epochs < 1:
            raise ConfigError("attack.epochs", "must be >= 1")
        if self.target < 0:
            raise ConfigError("attack.target", "must be a class index")


@dataclass
class DefenseSection:
    spc: int = 10
    split_seed: int = 1
    config: DefenseConfig = field(default_factory=DefenseConfig)

    def validate(self):
        if self.spc < 1:
            raise ConfigError("defense.spc", "must be >= 1")


@dataclass
class EvaluationSection:
    results: str = "results.csv"
    min_clean_acc: float = 0.90
    min_asr: float = 0.95
    max_asr_after: float = 0.20


@dataclass
class SweepSection:
    lambda_final: Optional[list] = None
    k: Optional[list] = None
    spc: Optional[list] = None
    ratio: Optional[list] = None

    def axes(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    def grid(self) -> list:
        """Cartesian product of the present axes as a list of dicts."""
        axes = self.axes()
        if not axes:
            return []
        names = list(axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    attack: AttackSection = field(default_factory=AttackSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    sweep: Optional[SweepSection] = None
    base_dir: Path = field(default_factory=Path.cwd)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def trigger(self, image_shape: tuple) -> TriggerSpec:
        a = self.attack
        if a.trigger == "blend":
            return TriggerSpec.blend(image_shape, alpha=a.alpha, target=a.target, seed=a.seed)
        return TriggerSpec(kind="patch", target=a.target, size=a.patch_size, corner=a.corner, fill=a.fill)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        """Copy with sweep-style overrides (``lambda_final``, ``k``, ``spc``, ``ratio``, ``seed``)."""
        cfg = dataclasses.replace(
            self,
            attack=dataclasses.replace(self.attack),
            defense=dataclasses.replace(self.defense, config=dataclasses.replace(self.defense.config)),
        )
        for key, value in kw.items():
            if key in ("lambda_final", "k"):
                cfg.defense.config = dataclasses.replace(cfg.defense.config, **{key: float(value)})
            elif key == "spc":
                cfg.defense.spc = int(value)
            elif key == "ratio":
                cfg.attack.ratio = float(value)
            elif key == "seed":
                cfg.attack.seed = int(value)
                cfg.defense.config = dataclasses.replace(cfg.defense.config, seed=int(value))
            elif key == "skip_mask_init":
                cfg.defense.config = dataclasses.replace(cfg.defense.config, skip_mask_init=bool(value))
            else:
                raise ConfigError(key, "not an overridable field")
        return cfg


_SECTIONS = {
    "dataset": DatasetSection,
    "attack": AttackSection,
    "evaluation": EvaluationSection,
    "sweep": SweepSection,
}


def _coerce(section: str, name: str, value, default, annotation: str):
    where = f"{section}.{name}"
    if "list" in annotation:
        if not isinstance(value, list):
            raise ConfigError(where, "expected a list")
        if not value:
            raise ConfigError(where, "sweep list must not be empty")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(where, "sweep values must be numbers")
        return value
    if isinstance(default, bool) or annotation == "bool":
        if not isinstance(value, bool):
            raise ConfigError(where, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) or annotation == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(where, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or "float" in annotation:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(where, f"expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(where, f"expected a string, got {value!r}")
    return value


def _fill(cls, section: str, table: dict):
    if not isinstance(table, dict):
        raise ConfigError(section, "expected a table")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"{section}.{key}", "unknown key")
        f = known[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        kwargs[key] = _coerce(section, key, value, default, str(f.type))
    return cls(**kwargs)


def _defense_from(table: dict) -> DefenseSection:
    if not isinstance(table, dict):
        raise ConfigError("defense", "expected a table")
    table = dict(table)
    outer = {}
    for key in ("spc", "split_seed"):
        if key in table:
            outer[key] = _coerce("defense", key, table.pop(key), 0, "int")
    known = {f.name: f for f in fields(DefenseConfig)}
    kwargs = {}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"defense.{key}", "unknown key")
        f = known[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        if value is not None and key == "early_stop_tol":
            kwargs[key] = _coerce("defense", key, value, 0.0, "float")
        else:
            kwargs[key] = _coerce("defense", key, value, default, str(f.type))
    try:
        cfg = DefenseConfig(**kwargs)
    except ValueError as exc:
        name = str(exc).split(" ", 1)[0]
        raise ConfigError(f"defense.{name}" if name in known else "defense", str(exc)) from exc
    return DefenseSection(config=cfg, **outer)


def parse_config(text: str, base_dir=None) -> ExperimentConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("syntax", str(exc)) from exc
    for key in doc:
        if key not in _SECTIONS and key != "defense":
            raise ConfigError(key, "unknown section")
    cfg = ExperimentConfig(base_dir=Path(base_dir) if base_dir is not None else Path.cwd())
    if "dataset" in doc:
        cfg.dataset = _fill(DatasetSection, "dataset", doc["dataset"])
    if "attack" in doc:
        cfg.attack = _fill(AttackSection, "attack", doc["attack"])
    if "defense" in doc:
        cfg.defense = _defense_from(doc["defense"])
    if "evaluation" in doc:
        cfg.evaluation = _fill(EvaluationSection, "evaluation", doc["evaluation"])
    if "sweep" in doc:
        cfg.sweep = _fill(SweepSection, "sweep", doc["sweep"])
        if not cfg.sweep.axes():
            raise ConfigError("sweep", "section present but no sweep lists given")
    cfg.dataset.validate()
    cfg.attack.validate()
    cfg.defense.validate()
    if cfg.attack.target >= cfg.dataset.classes and cfg.dataset.source == "synthetic":
        raise ConfigError("attack.target", f"class {cfg.attack.target} outside {cfg.dataset.classes} classes")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from exc
    cfg = parse_config(text, base_dir=path.resolve().parent)
    if cfg.dataset.source == "idx":
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            p = cfg.resolve(getattr(cfg.dataset, name))
            if not p.exists():
                raise ConfigError(f"dataset.{name}", f"file not found: {p}")
    return cfg


def _default_lines(section: str, obj) -> list:
    lines = [f"[{section}]"]
    for f in fields(obj):
        value = getattr(obj, f.name)
        if value is None:
            lines.append(f"# {f.name} = (unset)")
        elif isinstance(value, bool):
            lines.append(f"{f.name} = {'true' if value else 'false'}")
        elif isinstance(value, str):
            lines.append(f'{f.name} = "{value}"')
        else:
            lines.append(f"{f.name} = {value!r}")
    return lines


def config_reference() -> str:
    """Every config key with its default, as a commented TOML document."""
    lines = ["# ims experiment configuration: all keys and their defaults", ""]
    lines += _default_lines("dataset", DatasetSection())
    lines += ["", *_default_lines("attack", AttackSection())]
    defense = DefenseSection()
    lines += ["", "[defense]", f"spc = {defense.spc}", f"split_seed = {defense.split_seed}"]
    lines += _default_lines("defense", defense.config)[1:]
    lines += ["", *_default_lines("evaluation", EvaluationSection())]
    lines += [
        "",
        "# optional; every present list must be non-empty",
        "# [sweep]",
        "# lambda_final = [0.0, 10.0, 100.0]",
        "# k = [5.0, 20.0]",
        "# spc = [2, 10]",
        "# ratio = [0.05, 0.1]",
    ]
    return "\n".join(lines) + "\n"


@dataclass
class Scenario:
    train: LabeledDataset
    test: LabeledDataset
    pool: LabeledDataset


def build_scenario(cfg: ExperimentConfig) -> Scenario:
    """Disjoint train / test / defender-pool sets for the configured dataset."""
    d = cfg.dataset
    if d.source == "synthetic":
        total = d.train_per_class + d.test_per_class + d.pool_per_class
        full = generate_synthetic(d.classes, total, d.size, seed=d.seed, channels=d.channels, noise=d.noise)
        parts = split_per_class(
            full, {"train": d.train_per_class, "test": d.test_per_class, "pool": d.pool_per_class}, seed=d.seed
        )
        return Scenario(parts["train"], parts["test"], parts["pool"])
    train_all = load_idx(cfg.resolve(d.train_images), cfg.resolve(d.train_labels))
    test = load_idx(cfg.resolve(d.test_images), cfg.resolve(d.test_labels), num_classes=train_all.num_classes)
    # distinct files: keep provenance indices disjoint
    test = dataclasses.replace(test, source_index=test.source_index + len(train_all))
    # the defender pool is carved out of the training file, never the test file
    counts = train_all.class_counts()
    pool_n = min(d.pool_per_class, int(counts.min()) - 1)
    if pool_n < 1:
        raise ConfigError("dataset.pool_per_class", "training file too small to reserve a defender pool")
    rest = {c: int(n) - pool_n for c, n in enumerate(counts)}
    rng = np.random.default_rng(d.seed)
    pool_idx, train_idx = [], []
    for c in range(train_all.num_classes):
        idx = rng.permutation(np.flatnonzero(train_all.labels == c))
        pool_idx.append(idx[:pool_n])
        train_idx.append(idx[pool_n:pool_n + rest[c]])
    train = train_all.subset(np.sort(np.concatenate(train_idx)))
    pool = train_all.subset(np.sort(np.concatenate(pool_idx)))
    return Scenario(train, test, pool)
