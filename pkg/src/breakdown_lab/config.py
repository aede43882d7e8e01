"""Run configuration: an INI-style key-value file, validated with every error reported.

Keys are addressed as ``section.key``; command-line overrides use the same names.
Relative paths resolve against the directory of the config file.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .finetune import FinetunePlan
from .model import ModelConfig
from .pretrain import MaskPolicy, PretrainPlan
from .ssmba import AugmentConfig, Strategy


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))


@dataclass(frozen=True)
class Paths:
    train: str | None = None
    valid: str | None = None
    test: str | None = None
    reddit: str | None = None
    pairs: str | None = None
    vocab: str | None = None
    init: str | None = None
    output_dir: str = "run"


@dataclass(frozen=True)
class TokenizerSettings:
    vocab_size: int = 8000
    min_frequency: int = 1


@dataclass(frozen=True)
class ModelSettings:
    max_len: int = 128
    hidden_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 512
    dropout_rate: float = 0.1
    tie_mlm: bool = True

    def model_config(self, vocab_size: int, seed: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, seed=seed, **asdict(self))


@dataclass(frozen=True)
class PretrainSettings:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 1e-4
    warmup_steps: int = 0
    max_steps: int = 0  # 0: no cap
    pairs_limit: int = 0  # 0: every pair in the dump
    fifo_capacity: int = 1_000_000


@dataclass(frozen=True)
class AugmentSettings:
    select_prob: float = 0.45
    num_augments: int = 2
    strategy: str = "sample"
    temperature: float = 1.0
    label_mode: str = "soft"


@dataclass(frozen=True)
class FinetuneSettings:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 3e-5
    warmup_frac: float = 0.1
    eval_every: int = 0
    selection_metric: str = "accuracy"
    augmented_epochs: int = 0  # 0: same as epochs


@dataclass(frozen=True)
class EnsembleSettings:
    members: int = 8
    top: int = 4
    metric: str = "accuracy"


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    threads: int = 1
    js_base: str = "2"


SECTIONS = {
    "paths": Paths,
    "tokenizer": TokenizerSettings,
    "model": ModelSettings,
    "mask": MaskPolicy,
    "pretrain": PretrainSettings,
    "augment": AugmentSettings,
    "finetune": FinetuneSettings,
    "ensemble": EnsembleSettings,
    "run": RunSettings,
}
REQUIRED_PATHS = ("train", "valid")


@dataclass(frozen=True)
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    tokenizer: TokenizerSettings = field(default_factory=TokenizerSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    mask: MaskPolicy = field(default_factory=MaskPolicy)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    augment: AugmentSettings = field(default_factory=AugmentSettings)
    finetune: FinetuneSettings = field(default_factory=FinetuneSettings)
    ensemble: EnsembleSettings = field(default_factory=EnsembleSettings)
    run: RunSettings = field(default_factory=RunSettings)

    def to_json(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def hash(self) -> str:
        body = self.to_json()
        body["paths"] = {k: v for k, v in body["paths"].items() if k != "output_dir"}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    # stage plans ---------------------------------------------------------

    def model_config(self, vocab_size: int) -> ModelConfig:
        return self.model.model_config(vocab_size, self.run.seed)

    def pretrain_plan(self) -> PretrainPlan:
        p = self.pretrain
        return PretrainPlan(
            epochs=p.epochs,
            batch_size=p.batch_size,
            learning_rate=p.learning_rate,
            warmup_steps=p.warmup_steps,
            max_steps=p.max_steps or None,
            init=f"warm:{self.paths.init}" if self.paths.init else "scratch",
            seed=self.run.seed,
        )

    def augment_config(self) -> AugmentConfig:
        a = self.augment
        return AugmentConfig(
            select_prob=a.select_prob,
            num_augments=a.num_augments,
            strategy=Strategy.parse(a.strategy, a.temperature),
            label_mode=a.label_mode,
            seed=self.run.seed,
        )

    def finetune_plan(self, seed: int, augmented: bool = False) -> FinetunePlan:
        f = self.finetune
        epochs = f.augmented_epochs if augmented and f.augmented_epochs else f.epochs
        return FinetunePlan(
            epochs=epochs,
            batch_size=f.batch_size,
            learning_rate=f.learning_rate,
            warmup_frac=f.warmup_frac,
            eval_every=f.eval_every,
            selection_metric=f.selection_metric,
            seed=seed,
        )


def _convert(raw: str, target: Any) -> Any:
    if target is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if target is int:
        return int(raw)
    if target is float:
        return float(raw)
    return raw.strip()


def _field_type(cls: type, name: str) -> Any:
    defaults = cls()  # every section has full defaults
    value = getattr(defaults, name)
    if value is None:
        return str
    return type(value)


def parse_settings(
    sections: Mapping[str, Mapping[str, str]], base_dir: Path | None = None
) -> tuple[RunConfig, list[str]]:
    errors: list[str] = []
    built: dict[str, Any] = {}
    for section, cls in SECTIONS.items():
        values = {}
        names = {f.name for f in fields(cls)}
        for key, raw in sections.get(section, {}).items():
            path = f"{section}.{key}"
            if key not in names:
                errors.append(f"{path}: unknown key")
                continue
            try:
                values[key] = _convert(raw, _field_type(cls, key))
            except ValueError as exc:
                errors.append(f"{path}: {exc}")
        built[section] = cls(**values)
    for section in sections:
        if section not in SECTIONS:
            errors.append(f"{section}: unknown section")

    paths: Paths = built["paths"]
    if base_dir is not None:
        resolved = {}
        for f in fields(Paths):
            v = getattr(paths, f.name)
            if v and not Path(v).is_absolute():
                resolved[f.name] = str(base_dir / v)
        paths = replace(paths, **resolved)
        built["paths"] = paths
    return RunConfig(**built), errors


def check(cfg: RunConfig, need_inputs: bool = True) -> list[str]:
    errors: list[str] = []
    p = cfg.paths
    if need_inputs:
        for name in REQUIRED_PATHS:
            if not getattr(p, name):
                errors.append(f"paths.{name}: required")
        if not p.reddit and not p.pairs:
            errors.append("paths.reddit: required (or paths.pairs)")
    for f in fields(Paths):
        v = getattr(p, f.name)
        if f.name != "output_dir" and v and not Path(v).exists():
            errors.append(f"paths.{f.name}: {v} does not exist")
    out = Path(p.output_dir)
    parent = next((q for q in [out, *out.parents] if q.exists()), None)
    if parent is None or not parent.is_dir():
        errors.append(f"paths.output_dir: {p.output_dir} cannot be created")

    t = cfg.tokenizer
    if t.vocab_size < 6:
        errors.append("tokenizer.vocab_size: must exceed the special tokens")
    if t.min_frequency < 1:
        errors.append("tokenizer.min_frequency: must be positive")
    errors += [e for e in cfg.model.model_config(1000, 0).errors("model.") if not e.startswith("model.vocab_size")]
    errors += cfg.mask.errors("mask.")
    pp = cfg.pretrain
    errors += PretrainPlan(
        epochs=pp.epochs, batch_size=pp.batch_size, learning_rate=pp.learning_rate,
        warmup_steps=pp.warmup_steps, max_steps=pp.max_steps or None,
    ).errors("pretrain.")
    if pp.pairs_limit < 0 or pp.max_steps < 0 or pp.fifo_capacity < 1:
        errors.append("pretrain.pairs_limit/max_steps/fifo_capacity: must be non-negative (capacity positive)")
    try:
        errors += cfg.augment_config().errors("augment.")
    except ValueError as exc:
        errors.append(f"augment.strategy: {exc}")
    errors += cfg.finetune_plan(0).errors("finetune.")
    if cfg.finetune.augmented_epochs < 0:
        errors.append("finetune.augmented_epochs: must be non-negative")
    e = cfg.ensemble
    if e.members < 1:
        errors.append("ensemble.members: must be >= 1")
    if not 1 <= e.top <= max(e.members, 1):
        errors.append(f"ensemble.top: must be between 1 and ensemble.members ({e.members})")
    if e.metric not in ("accuracy", "f1_macro", "f1_breakdown", "js_div"):
        errors.append("ensemble.metric: must be accuracy, f1_macro, f1_breakdown or js_div")
    if cfg.run.threads < 1:
        errors.append("run.threads: must be positive")
    if cfg.run.js_base not in ("2", "e"):
        errors.append("run.js_base: must be 2 or e")
    return errors


def read_sections(path: str | Path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(Path(path).read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise ConfigError([f"{path}: {exc}"]) from None
    return {s: dict(parser.items(s)) for s in parser.sections()}


def parse_overrides(items: list[str]) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    errors = []
    for item in items:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            errors.append(f"{item}: overrides look like section.key=value")
            continue
        out.setdefault(section, {})[name] = value
    if errors:
        raise ConfigError(errors)
    return out


def validate_config(
    path: str | Path | None,
    overrides: Mapping[str, Mapping[str, str]] | None = None,
    need_inputs: bool = True,
) -> RunConfig:
    """Parse, apply overrides (flags win), and check every key; raises with all violations."""
    sections: dict[str, dict[str, str]] = {}
    base_dir = None
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError([f"{path}: config file does not exist"])
        sections = read_sections(path)
        base_dir = Path(path).resolve().parent
    for section, values in (overrides or {}).items():
        sections.setdefault(section, {}).update(values)
    cfg, errors = parse_settings(sections, base_dir)
    errors += check(cfg, need_inputs)
    if errors:
        raise ConfigError(errors)
    return cfg


def write_config(cfg: RunConfig, path: str | Path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name, values in cfg.to_json().items():
        parser[name] = {k: str(v) for k, v in values.items() if v is not None}
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)
