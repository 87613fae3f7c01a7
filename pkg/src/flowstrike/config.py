"""Experiment configuration: INI-style key = value sections, fully capturing a
run so that identical config + seed reproduces identical outputs."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Unknown key, bad value, or a missing required setting."""


def _parse_fraction(text: str) -> float:
    # Accepts "16/255" as well as plain floats.
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t.strip()) for t in text.split(",") if t.strip())


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(_parse_fraction(t.strip()) for t in text.split(",") if t.strip())


@dataclass
class ExperimentConfig:
    # [data]
    dataset: str = "synthetic"  # synthetic | cifar
    cifar_path: str = ""
    num_classes: int = 10
    image_size: int = 32
    count: int = 5000
    train_fraction: float = 0.8
    data_seed: int = 7
    # [models]
    model_seeds: tuple[int, ...] = (1, 2, 3)
    condition_seed: int = 99
    cls_epochs: int = 6
    cls_lr: float = 1e-3
    cls_batch: int = 64
    # [collect]
    collector: str = "pgd"
    epsilons: tuple[float, ...] = (16 / 255,)
    step_size: float = 2 / 255
    iterations: int = 20
    momentum: float = 1.0
    collect_seed: int = 123
    # [flow]
    blocks: int = 2
    steps: int = 2
    hidden_width: int = 32
    flow_seed: int = 5
    # [train]
    train_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    max_iters: int = 2000
    train_batch: int = 32
    train_seed: int = 11
    mse_enabled: bool = True
    checkpoint_every: int = 500
    # [attack]
    budgets: tuple[int, ...] = (25, 50, 100)
    attack_examples: int = 500
    target_index: int = 0
    run_baseline: bool = True
    shifted_stats: bool = True
    count_eligibility: bool = False
    attack_seed: int = 1234
    # [output]
    out_dir: str = "runs/desk"

    def validate(self) -> None:
        if self.dataset not in ("synthetic", "cifar"):
            raise ConfigError(f"dataset must be synthetic or cifar, got {self.dataset!r}")
        if self.dataset == "cifar" and not self.cifar_path:
            raise ConfigError("dataset = cifar requires data.cifar_path")
        if list(self.budgets) != sorted(self.budgets):
            raise ConfigError("attack.budgets must be ascending")
        if not self.budgets:
            raise ConfigError("attack.budgets must be non-empty")
        if not self.epsilons:
            raise ConfigError("collect.epsilons must be non-empty")
        if not self.model_seeds:
            raise ConfigError("models.seeds must be non-empty")
        if not 0 <= self.target_index < len(self.model_seeds):
            raise ConfigError(f"attack.target_index {self.target_index} out of range")

    def shifted(self, offset: int) -> "ExperimentConfig":
        """A copy with every seed offset by N (the CLI --seed flag)."""
        updated = {
            name: getattr(self, name) + offset
            for name in (
                "data_seed",
                "condition_seed",
                "collect_seed",
                "flow_seed",
                "train_seed",
                "attack_seed",
            )
        }
        updated["model_seeds"] = tuple(s + offset for s in self.model_seeds)
        out = ExperimentConfig(**{**self._asdict(), **updated})
        out.validate()
        return out

    def _asdict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# (section, key) -> (attribute, parser)
_SCHEMA = {
    ("data", "dataset"): ("dataset", str),
    ("data", "cifar_path"): ("cifar_path", str),
    ("data", "num_classes"): ("num_classes", int),
    ("data", "image_size"): ("image_size", int),
    ("data", "count"): ("count", int),
    ("data", "train_fraction"): ("train_fraction", float),
    ("data", "seed"): ("data_seed", int),
    ("models", "seeds"): ("model_seeds", _parse_int_list),
    ("models", "condition_seed"): ("condition_seed", int),
    ("models", "epochs"): ("cls_epochs", int),
    ("models", "lr"): ("cls_lr", float),
    ("models", "batch_size"): ("cls_batch", int),
    ("collect", "collector"): ("collector", str),
    ("collect", "epsilons"): ("epsilons", _parse_float_list),
    ("collect", "step_size"): ("step_size", _parse_fraction),
    ("collect", "iterations"): ("iterations", int),
    ("collect", "momentum"): ("momentum", float),
    ("collect", "seed"): ("collect_seed", int),
    ("flow", "blocks"): ("blocks", int),
    ("flow", "steps"): ("steps", int),
    ("flow", "hidden_width"): ("hidden_width", int),
    ("flow", "seed"): ("flow_seed", int),
    ("train", "lr"): ("train_lr", float),
    ("train", "beta1"): ("beta1", float),
    ("train", "beta2"): ("beta2", float),
    ("train", "max_iters"): ("max_iters", int),
    ("train", "batch_size"): ("train_batch", int),
    ("train", "seed"): ("train_seed", int),
    ("train", "mse_enabled"): ("mse_enabled", _parse_bool),
    ("train", "checkpoint_every"): ("checkpoint_every", int),
    ("attack", "budgets"): ("budgets", _parse_int_list),
    ("attack", "num_examples"): ("attack_examples", int),
    ("attack", "target_index"): ("target_index", int),
    ("attack", "baseline"): ("run_baseline", _parse_bool),
    ("attack", "shifted_stats"): ("shifted_stats", _parse_bool),
    ("attack", "count_eligibility_query"): ("count_eligibility", _parse_bool),
    ("attack", "seed"): ("attack_seed", int),
    ("output", "dir"): ("out_dir", str),
}


def config_keys_help() -> str:
    """All recognized config keys, grouped by section, for --help."""
    by_section: dict[str, list[str]] = {}
    for (section, key), (attr, _) in _SCHEMA.items():
        default = getattr(ExperimentConfig(), attr)
        by_section.setdefault(section, []).append(f"  {key} (default: {default})")
    lines = ["config file keys:"]
    for section in ("data", "models", "collect", "flow", "train", "attack", "output"):
        lines.append(f"[{section}]")
        lines.extend(by_section[section])
    return "\n".join(lines)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(path.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    cfg = ExperimentConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            try:
                attr, parse = _SCHEMA[(section, key)]
            except KeyError:
                raise ConfigError(f"unknown config key [{section}] {key}") from None
            try:
                setattr(cfg, attr, parse(raw))
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc
    cfg.validate()
    return cfg
