"""Experiment configuration: defaults, file loading, overrides and validation.

Config files are TOML or JSON. Top-level keys describe the run and the
training schedule; ``[weights]`` holds the loss weights and divergence;
``[data]`` holds the dataset parameters and generator constants. Unknown
keys are rejected, and every problem is reported at once.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import DEFAULT_CONSTANTS, SETTINGS, TaskConstants
from .losses import DIVERGENCES, LossWeights

TRAIN_VARIANTS = ("lower_bound", "upper_bound", "single", "decoupled", "kl", "kl_ent")
VARIANTS = TRAIN_VARIANTS + ("proposals", "self_training")
BASE_VARIANTS = ("lower_bound", "single", "decoupled", "kl", "kl_ent")

WEIGHT_KEYS = ("lambda_w", "lambda_kd", "lambda_ent", "single_lambda_w", "divergence", "alpha")
DATA_KEYS = ("setting", "ratio", "data_seed", "size", "classes", "style", "budget", "dataset",
             "constants")
CONSTANT_KEYS = tuple(f.name for f in dataclasses.fields(TaskConstants))


class ConfigError(ValueError):
    """Raised with the full list of problems found in a configuration."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {e}" for e in self.errors))


@dataclass
class ExperimentConfig:
    name: str = "run"
    variant: str = "kl_ent"
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    # weights
    lambda_w: float = 0.001
    lambda_kd: float = 50.0
    lambda_ent: float = 1.0
    single_lambda_w: float = 1.0
    divergence: str = "kl"
    alpha: float = 2.0
    # data
    setting: str = "set3"
    ratio: float = 5.0
    data_seed: int = 0
    size: int = 32
    classes: int = 2
    style: str = "scribbles"
    budget: int = 15
    dataset: str | None = None
    constants: TaskConstants = field(default_factory=lambda: DEFAULT_CONSTANTS)
    # model
    levels: int = 3
    base_channels: int = 8
    head_gain: float = 0.01
    standardize: bool = True
    # schedule
    smooth: bool = True
    detach_teacher: bool = False
    epochs: int = 200
    batch_size: int = 8
    optimizer: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    patience: int = 40
    ent_start: int = 40
    eval_every: int = 1
    clip_norm: float = 1.0
    # pseudo-label experiments
    base_variant: str = "kl"
    iterations: int = 5
    jobs: int = 1

    # ------------------------------------------------------------ views

    def weights(self) -> LossWeights:
        return LossWeights(lambda_w=self.lambda_w, lambda_kd=self.lambda_kd, lambda_ent=self.lambda_ent,
                           divergence=self.divergence, alpha=self.alpha)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        """Nested mapping in the config-file layout."""
        flat = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        flat["constants"] = self.constants.to_dict()
        flat["seeds"] = list(self.seeds)
        out = {k: v for k, v in flat.items() if k not in WEIGHT_KEYS + DATA_KEYS}
        out["weights"] = {k: flat[k] for k in WEIGHT_KEYS}
        data = {k: flat[k] for k in DATA_KEYS if k != "constants"}
        data.update(flat["constants"])
        out["data"] = data
        return out

    # ------------------------------------------------------- validation

    def problems(self) -> list[str]:
        errs = []

        def need(cond, msg):
            if not cond:
                errs.append(msg)

        need(isinstance(self.name, str) and self.name and "/" not in self.name and self.name not in (".", ".."),
             f"name: must be a non-empty string without '/', got {self.name!r}")
        need(self.variant in VARIANTS, f"variant: must be one of {list(VARIANTS)}, got {self.variant!r}")
        need(isinstance(self.seeds, (list, tuple)) and len(self.seeds) > 0
             and all(_is_int(s) for s in self.seeds), f"seeds: must be a non-empty list of integers, got {self.seeds!r}")
        if isinstance(self.seeds, (list, tuple)):
            need(len(set(self.seeds)) == len(self.seeds), f"seeds: duplicates in {list(self.seeds)}")
        for k in ("lambda_w", "lambda_kd", "lambda_ent", "single_lambda_w"):
            v = getattr(self, k)
            need(_is_num(v) and v >= 0, f"{k}: must be a number >= 0, got {v!r}")
        need(self.divergence in DIVERGENCES, f"divergence: must be one of {list(DIVERGENCES)}, got {self.divergence!r}")
        need(_is_num(self.alpha) and self.alpha > 0, f"alpha: must be a positive number, got {self.alpha!r}")
        if self.divergence == "alpha" and _is_num(self.alpha):
            need(self.alpha != 1, "alpha: 1 is the KL limit; use divergence = \"kl\"")
        need(self.setting in SETTINGS, f"setting: must be one of {sorted(SETTINGS)}, got {self.setting!r}")
        need(_is_num(self.ratio) and self.ratio > 0, f"ratio: must be a positive number, got {self.ratio!r}")
        need(_is_int(self.data_seed) and self.data_seed >= 0, f"data_seed: must be an integer >= 0, got {self.data_seed!r}")
        need(_is_int(self.levels) and self.levels >= 2, f"levels: must be an integer >= 2, got {self.levels!r}")
        need(_is_int(self.size) and self.size >= 16, f"size: must be an integer >= 16, got {self.size!r}")
        if _is_int(self.size) and _is_int(self.levels) and self.levels >= 2:
            step = 2 ** (self.levels - 1)
            need(self.size % step == 0, f"size: {self.size} is not divisible by {step} ({self.levels} levels)")
        need(self.classes in (2, 3) and _is_int(self.classes), f"classes: must be 2 or 3, got {self.classes!r}")
        need(self.style in ("scribbles", "points"), f"style: must be 'scribbles' or 'points', got {self.style!r}")
        need(_is_int(self.budget) and self.budget >= 1, f"budget: must be an integer >= 1, got {self.budget!r}")
        need(self.dataset is None or isinstance(self.dataset, str), f"dataset: must be a path string, got {self.dataset!r}")
        if isinstance(self.constants, TaskConstants):
            errs.extend(f"data.{p}" for p in self.constants.problems())
        else:
            errs.append("constants: malformed generator constants")
        need(_is_int(self.base_channels) and self.base_channels >= 1,
             f"base_channels: must be an integer >= 1, got {self.base_channels!r}")
        need(_is_num(self.head_gain) and self.head_gain > 0, f"head_gain: must be a positive number, got {self.head_gain!r}")
        for k in ("standardize", "smooth", "detach_teacher"):
            need(isinstance(getattr(self, k), bool), f"{k}: must be true or false, got {getattr(self, k)!r}")
        for k in ("epochs", "batch_size", "patience", "eval_every", "jobs"):
            v = getattr(self, k)
            need(_is_int(v) and v >= 1, f"{k}: must be an integer >= 1, got {v!r}")
        need(_is_int(self.ent_start) and self.ent_start >= 0, f"ent_start: must be an integer >= 0, got {self.ent_start!r}")
        need(self.optimizer in ("adam", "sgd"), f"optimizer: must be 'adam' or 'sgd', got {self.optimizer!r}")
        need(_is_num(self.lr) and self.lr > 0, f"lr: must be a positive number, got {self.lr!r}")
        need(_is_num(self.clip_norm) and self.clip_norm >= 0, f"clip_norm: must be a number >= 0, got {self.clip_norm!r}")
        need(_is_num(self.momentum) and 0 <= self.momentum < 1, f"momentum: must lie in [0, 1), got {self.momentum!r}")
        need(self.base_variant in BASE_VARIANTS,
             f"base_variant: must be one of {list(BASE_VARIANTS)}, got {self.base_variant!r}")
        need(_is_int(self.iterations) and self.iterations >= 2, f"iterations: must be an integer >= 2, got {self.iterations!r}")

        # variant-specific weight constraints
        if self.variant in ("kl", "kl_ent") and _is_num(self.lambda_kd):
            need(self.lambda_kd > 0, f"variant {self.variant} needs lambda_kd > 0")
        if self.variant == "kl_ent" and _is_num(self.lambda_ent):
            need(self.lambda_ent > 0, "variant kl_ent needs lambda_ent > 0")
        if self.variant == "kl_ent" and _is_int(self.ent_start) and _is_int(self.epochs):
            need(self.ent_start < self.epochs, "variant kl_ent needs ent_start < epochs, or the entropy term never runs")
        return errs

    def validate(self) -> "ExperimentConfig":
        errs = self.problems()
        if errs:
            raise ConfigError(errs)
        return self

    def effective_weights(self, variant: str | None = None) -> dict[str, float]:
        """The weights a variant actually trains with (terms it does not use are zero)."""
        variant = variant or self.variant
        lw, lkd, lent = self.lambda_w, self.lambda_kd, self.lambda_ent
        if variant in ("lower_bound", "upper_bound", "proposals", "self_training"):
            lw = lkd = lent = 0.0
        elif variant == "single":
            lw, lkd, lent = self.single_lambda_w, 0.0, 0.0
        elif variant == "decoupled":
            lkd = lent = 0.0
        elif variant == "kl":
            lent = 0.0
        return {"lambda_w": lw, "lambda_kd": lkd, "lambda_ent": lent}


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


# ----------------------------------------------------------------- loading

_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)}
_TOP_KEYS = _FIELDS - set(WEIGHT_KEYS) - set(DATA_KEYS)


def from_mapping(raw: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build a config from a nested mapping, collecting every unknown key or bad value."""
    if not isinstance(raw, dict):
        raise ConfigError([f"top level must be a table/object, got {type(raw).__name__}"])
    errs = []
    flat = {}
    consts = {}
    for key, value in raw.items():
        if key == "weights":
            if not isinstance(value, dict):
                errs.append("weights: must be a table")
                continue
            for k, v in value.items():
                if k in WEIGHT_KEYS:
                    flat[k] = v
                else:
                    errs.append(f"weights.{k}: unknown key (allowed: {', '.join(WEIGHT_KEYS)})")
        elif key == "data":
            if not isinstance(value, dict):
                errs.append("data: must be a table")
                continue
            for k, v in value.items():
                if k in CONSTANT_KEYS:
                    consts[k] = v
                elif k in DATA_KEYS and k != "constants":
                    flat[k] = v
                else:
                    errs.append(f"data.{k}: unknown key")
        elif key in _TOP_KEYS:
            flat[key] = value
        elif key in WEIGHT_KEYS:
            errs.append(f"{key}: belongs in the [weights] table")
        elif key in DATA_KEYS or key in CONSTANT_KEYS:
            errs.append(f"{key}: belongs in the [data] table")
        else:
            errs.append(f"{key}: unknown key")
    base = base or ExperimentConfig()
    if consts:
        merged = base.constants.to_dict()
        merged.update(consts)
        try:
            flat["constants"] = TaskConstants(**merged)
        except (TypeError, ValueError) as exc:
            errs.append(f"data: bad generator constants ({exc})")
    if isinstance(flat.get("seeds"), tuple):
        flat["seeds"] = list(flat["seeds"])
    cfg = dataclasses.replace(base, **flat)
    errs.extend(cfg.problems())
    if errs:
        raise ConfigError(errs)
    return cfg


def read_config_file(path) -> dict:
    """Parse a ``.toml`` or ``.json`` file into a mapping (IO errors propagate as OSError)."""
    path = Path(path)
    text = path.read_text()
    suffix = path.suffix.lower()
    try:
        if suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            return tomllib.loads(text)
        if suffix == ".json":
            return json.loads(text)
    except ValueError as exc:
        raise ConfigError([f"{path}: cannot parse: {exc}"]) from exc
    raise ConfigError([f"{path}: unsupported config format {suffix!r} (use .toml or .json)"])


def load_config(path=None, overrides=(), base: ExperimentConfig | None = None) -> ExperimentConfig:
    raw = read_config_file(path) if path is not None else {}
    if overrides:
        raw = apply_overrides(raw, overrides)
    return from_mapping(raw, base)


def parse_value(text: str):
    """``key=value`` right-hand side: JSON if it parses, a bare string otherwise."""
    try:
        return json.loads(text)
    except ValueError:
        low = text.lower()
        if low in ("true", "false"):
            return low == "true"
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``key=value`` strings; keys may be dotted (``weights.lambda_kd``) or bare."""
    out = json.loads(json.dumps(raw))
    errs = []
    for item in overrides:
        if "=" not in item:
            errs.append(f"override {item!r}: expected key=value")
            continue
        key, text = item.split("=", 1)
        key = key.strip()
        value = parse_value(text.strip())
        if "." in key:
            section, sub = key.split(".", 1)
            if section not in ("weights", "data"):
                errs.append(f"override {item!r}: unknown section {section!r}")
                continue
            out.setdefault(section, {})[sub] = value
        elif key in WEIGHT_KEYS:
            out.setdefault("weights", {})[key] = value
        elif key in DATA_KEYS or key in CONSTANT_KEYS:
            out.setdefault("data", {})[key] = value
        else:
            out[key] = value
    if errs:
        raise ConfigError(errs)
    return out


def field_docs() -> list[tuple[str, str, object]]:
    """(key, section, default) for every configurable field, in file order."""
    cfg = ExperimentConfig()
    rows = []
    for f in dataclasses.fields(cfg):
        if f.name == "constants":
            for k, v in cfg.constants.to_dict().items():
                rows.append((k, "data", v))
        elif f.name in WEIGHT_KEYS:
            rows.append((f.name, "weights", getattr(cfg, f.name)))
        elif f.name in DATA_KEYS:
            rows.append((f.name, "data", getattr(cfg, f.name)))
        else:
            rows.append((f.name, "", getattr(cfg, f.name)))
    return rows
