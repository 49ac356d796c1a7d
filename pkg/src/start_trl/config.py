"""Experiment configuration: nested sections, INI files, ``--set`` overrides, origin echo."""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .model import ModelConfig
from .pretrain import STRATEGIES, AugmentConfig, PretrainConfig
from .tat_enc import Ablation
from .downstream import FinetuneConfig


@dataclass
class DataConfig:
    grid_n: int = 10
    num_trajectories: int = 2000
    detour_prob: float = 0.1
    days: int = 14
    num_drivers: int = 10
    min_user_trajectories: int = 1
    split: tuple = (0.6, 0.2, 0.2)


@dataclass
class PretrainSection:
    lam: float = 0.6
    tau: float = 0.05
    batch_size: int = 64
    epochs: int = 30
    lr: float = 2e-4
    warmup_epochs: int = 5
    weight_decay: float = 0.01
    augment: tuple = ("trim", "temporal_shift")
    mask_ratio: float = 0.15
    mask_length: int = 2
    trim_range: tuple = (0.05, 0.15)
    shift_fraction: float = 0.15
    shift_range: tuple = (0.15, 0.30)
    token_dropout: float = 0.1


@dataclass
class FinetuneSection:
    # None = reuse the pretraining value
    lr: float | None = None
    epochs: int | None = None
    batch_size: int | None = None
    warmup_epochs: int | None = None
    weight_decay: float | None = None
    label: str = "peak"  # "peak" (binary) | "driver" (multi-class)
    recall_k: int = 5


@dataclass
class SimSection:
    n_queries: int = 50
    n_negatives: int = 500
    p_d: float = 0.2
    t_d: float = 0.2
    k_max: int = 10
    knn_k: int = 5
    pool: str = "val+test"  # "test" | "val+test"


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    ablation: Ablation = field(default_factory=Ablation)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    sim: SimSection = field(default_factory=SimSection)
    seed: int = 0
    origins: dict = field(default_factory=dict, repr=False, compare=False)

    # --- derived runtime configs -------------------------------------------

    def pretrain_config(self, seed: int) -> PretrainConfig:
        p = self.pretrain
        aug = AugmentConfig(tuple(p.trim_range), p.shift_fraction, tuple(p.shift_range),
                            p.mask_ratio, p.mask_length, p.token_dropout)
        return PretrainConfig(p.lam, p.tau, p.batch_size, p.epochs, p.lr, p.warmup_epochs,
                              p.weight_decay, tuple(p.augment), aug, seed)

    def finetune_config(self, seed: int) -> FinetuneConfig:
        f, p = self.finetune, self.pretrain

        def pick(name):
            v = getattr(f, name)
            return getattr(p, name) if v is None else v

        return FinetuneConfig(pick("lr"), pick("epochs"), pick("batch_size"),
                              pick("warmup_epochs"), pick("weight_decay"), seed)

    def validate(self) -> None:
        try:
            self.model.validate()
            self.pretrain_config(0).validate()
            Ablation(**dataclasses.asdict(self.ablation))
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
        d = self.data
        if d.grid_n < 3:
            raise ValidationError("data.grid_n must be at least 3")
        if d.num_trajectories < 1:
            raise ValidationError("data.num_trajectories must be positive")
        if len(d.split) != 3 or abs(sum(d.split) - 1) > 1e-9 or min(d.split) <= 0:
            raise ValidationError("data.split must be three positive ratios summing to 1")
        for s in self.pretrain.augment:
            if s not in STRATEGIES:
                raise ValidationError(f"pretrain.augment: unknown strategy {s!r}")
        if self.finetune.label not in ("peak", "driver"):
            raise ValidationError("finetune.label must be 'peak' or 'driver'")
        if self.sim.pool not in ("test", "val+test"):
            raise ValidationError("sim.pool must be 'test' or 'val+test'")

    def to_dict(self) -> dict:
        out = {}
        for f in _sections():
            out[f.name] = {k: _plain(v) for k, v in dataclasses.asdict(getattr(self, f.name)).items()}
        out["seed"] = self.seed
        return out

    def echo(self) -> dict:
        """Every value with where it came from: published, desk (scaled-down default), file, --set, flag."""
        out = {}
        for section, values in self.to_dict().items():
            if section == "seed":
                out["seed"] = {"value": values, "origin": self.origins.get("seed", "desk")}
                continue
            for k, v in values.items():
                key = f"{section}.{k}"
                out[key] = {"value": v, "origin": self.origins.get(key, _default_origin(key))}
        return out


# defaults that reproduce the published setup; everything else is a desk-scale choice
PUBLISHED_DEFAULTS = {
    "data.split",
    "model.gat_heads", "model.dropout",
    "ablation.trans_prob", "ablation.time_emb", "ablation.time_interval",
    "ablation.interval", "ablation.decay", "ablation.adaptive",
    "pretrain.lam", "pretrain.tau", "pretrain.batch_size", "pretrain.epochs", "pretrain.lr",
    "pretrain.warmup_epochs", "pretrain.augment", "pretrain.mask_ratio", "pretrain.mask_length",
    "pretrain.trim_range", "pretrain.shift_fraction", "pretrain.shift_range", "pretrain.token_dropout",
    "finetune.lr", "finetune.epochs", "finetune.batch_size", "finetune.warmup_epochs",
    "sim.p_d", "sim.t_d", "sim.knn_k",
}


def _default_origin(key: str) -> str:
    return "published" if key in PUBLISHED_DEFAULTS else "desk"


def _sections():
    return [f for f in dataclasses.fields(ExperimentConfig) if f.name not in ("seed", "origins")]


def _plain(v):
    if isinstance(v, tuple):
        return list(v)
    return v


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(text: str, hint, key: str):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or type(hint).__name__ == "UnionType":
        if text.lower() in ("none", ""):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(text, inner, key)
    try:
        if hint is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
    except ValueError:
        raise ValidationError(f"{key}: cannot read {text!r} as {hint.__name__}") from None
    raise ValidationError(f"{key}: unsupported field type {hint}")


def _coerce_seq(text: str, default, key: str):
    items = [s.strip() for s in text.strip().strip("[]()").split(",") if s.strip()]
    if not default:
        return tuple(items)
    kind = type(default[0])
    try:
        vals = [kind(s) for s in items]
    except ValueError:
        raise ValidationError(f"{key}: cannot read {text!r} as a list of {kind.__name__}") from None
    return list(vals) if isinstance(default, list) else tuple(vals)


def _assign(cfg: ExperimentConfig, key: str, text: str, origin: str) -> None:
    if key == "seed":
        cfg.seed = _coerce(text, int, key)
        cfg.origins[key] = origin
        return
    section, _, name = key.partition(".")
    names = {f.name for f in _sections()}
    if section not in names or not name:
        raise ValidationError(f"unknown config key {key!r}")
    obj = getattr(cfg, section)
    fields = {f.name: f for f in dataclasses.fields(obj)}
    if name not in fields:
        raise ValidationError(f"unknown config key {key!r}")
    hints = typing.get_type_hints(type(obj))
    current = getattr(obj, name)
    if isinstance(current, (list, tuple)):
        value = _coerce_seq(text, current, key)
    else:
        value = _coerce(text, hints[name], key)
    setattr(obj, name, value)
    cfg.origins[key] = origin


_TOP = "top-level"


def load_config(path=None, overrides=(), seed: int | None = None) -> ExperimentConfig:
    """Defaults, then the INI file, then ``--set key=value`` pairs, then ``--seed``."""
    cfg = ExperimentConfig()
    if path is not None:
        parser = configparser.ConfigParser(default_section="\0")
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as f:
                # keys above the first [section] (just ``seed``) land in a synthetic top section
                parser.read_string(f"[{_TOP}]\n" + f.read(), source=str(path))
        except configparser.Error as exc:
            raise ValidationError(f"{path}: {exc}") from None
        for section in parser.sections():
            for k in parser[section]:
                key = k if section == _TOP else f"{section}.{k}"
                _assign(cfg, key, parser[section][k], "file")
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        _assign(cfg, key.strip(), value, "--set")
    if seed is not None:
        cfg.seed = seed
        cfg.origins["seed"] = "--seed"
    cfg.validate()
    return cfg


def write_config(cfg: ExperimentConfig, path) -> None:
    """INI text that :func:`load_config` reads back to the same values."""
    lines = [f"seed = {cfg.seed}", ""]
    for section, values in cfg.to_dict().items():
        if section == "seed":
            continue
        lines.append(f"[{section}]")
        for k, v in values.items():
            if isinstance(v, list):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        lines.append("")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines))


# root seed split by purpose
SEED_PURPOSES = {"data": 1, "init": 2, "pretrain": 3, "finetune": 4, "sim": 5, "control": 6}


def sub_seed(root: int, purpose: str) -> int:
    return int(np.random.SeedSequence([root, SEED_PURPOSES[purpose]]).generate_state(1)[0])
