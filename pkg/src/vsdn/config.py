"""Model, training and data configuration plus the INI-style config file.

The file format is plain ``key = value`` lines grouped in ``[model]``,
``[train]`` and ``[data]`` sections; tuples are comma separated.  Unknown
keys are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Tuple

from .errors import ConfigError


@dataclass
class VSDNConfig:
    d1: int = 15
    d2: int = 2
    d_h: int = 15
    mlp_hidden: Tuple[int, ...] = (25,)
    activation: str = "relu"
    max_dt: float = 0.01
    K: int = 5
    alpha: float = 0.5
    beta: float = 1.0
    inference_mode: str = "filtering"
    prediction_samples: int = 25
    log_std_min: float = -7.0
    log_std_max: float = 7.0
    # initial latent state from the first observation instead of a learned constant
    init_from_first_obs: bool = False
    init_hidden: int = 128
    # ablation: no latent SDE, decode from the encoder feature alone
    deterministic: bool = False
    diff_init_bias: float = 0.0

    def __post_init__(self):
        self.mlp_hidden = tuple(int(w) for w in self.mlp_hidden)
        for name in ("d1", "d2", "d_h", "K", "prediction_samples", "init_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if any(w < 1 for w in self.mlp_hidden):
            raise ConfigError("mlp widths must be positive")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.beta < 0:
            raise ConfigError("beta must be nonnegative")
        if self.max_dt <= 0:
            raise ConfigError("max_dt must be positive")
        if self.inference_mode not in ("filtering", "smoothing"):
            raise ConfigError("inference_mode must be 'filtering' or 'smoothing'")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError("activation must be 'relu' or 'tanh'")
        if self.log_std_min >= self.log_std_max:
            raise ConfigError("log_std_min must be below log_std_max")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 250
    early_stop_patience: int = 25
    eval_samples: int = 25
    seed: int = 0
    loss: str = "vae"
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    clip_norm: Optional[float] = 10.0
    chunk_size: int = 50
    threads: int = 1
    model: VSDNConfig = field(default_factory=VSDNConfig)

    def __post_init__(self):
        if self.batch_size < 1 or self.early_stop_patience < 1 or self.epochs < 1:
            raise ConfigError("epochs, batch_size and early_stop_patience must be >= 1")
        if self.loss not in ("vae", "iwae_mixed"):
            raise ConfigError("loss must be 'vae' or 'iwae_mixed'")
        if self.eval_samples < 1 or self.chunk_size < 1 or self.threads < 1:
            raise ConfigError("eval_samples, chunk_size and threads must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive (or 'none')")


@dataclass
class DataConfig:
    path: Optional[str] = None
    n_seq: int = 2000
    horizon: float = 10.0
    sim_dt: float = 0.01
    lattice: float = 0.1
    theta: Tuple[float, ...] = (1.0, 0.5)
    mu: Tuple[float, ...] = (1.0, -1.0)
    sigma: Tuple[float, ...] = (0.4, 0.3)
    p_time: float = 0.5
    p_dim: float = 0.3
    split: Tuple[float, ...] = (0.7, 0.15, 0.15)
    normalize: bool = False
    holdout_frac: float = 0.5

    def __post_init__(self):
        self.theta = tuple(float(v) for v in self.theta)
        self.mu = tuple(float(v) for v in self.mu)
        self.sigma = tuple(float(v) for v in self.sigma)
        self.split = tuple(float(v) for v in self.split)


@dataclass
class Config:
    model: VSDNConfig = field(default_factory=VSDNConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        self.train.model = self.model


# settings for large motion-capture data; not used by the tests
HUMAN_MOTION_PROFILE = dict(
    model=dict(d1=128, d_h=512, mlp_hidden=(256,), max_dt=0.25, K=5),
    train=dict(batch_size=64, early_stop_patience=10, learning_rate=1e-4, weight_decay=5e-4),
)


def _parse(value: str, ftype, name):
    value = value.strip()
    text = str(ftype)
    try:
        if "Tuple[int" in text:
            return tuple(int(v) for v in value.split(",") if v.strip())
        if "Tuple[float" in text:
            return tuple(float(v) for v in value.split(",") if v.strip())
        if "Optional[float]" in text:
            return None if value.lower() in ("none", "") else float(value)
        if "Optional[str]" in text:
            return None if value.lower() in ("none", "") else value
        if ftype in (bool, "bool"):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if ftype in (int, "int"):
            return int(value)
        if ftype in (float, "float"):
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"bad value for {name}: {value!r}") from None


def _section_kwargs(parser, section, cls, overrides=None):
    kwargs = dict(overrides or {})
    if parser.has_section(section):
        known = {f.name: f for f in fields(cls) if f.name != "model"}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key [{section}] {key}")
            kwargs[key] = _parse(raw, known[key].type, f"[{section}] {key}")
    return kwargs


def load_config(path=None, text: Optional[str] = None) -> Config:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case sensitive (K vs k)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
    elif text is not None:
        parser.read_string(text)
    for section in parser.sections():
        if section not in ("model", "train", "data"):
            raise ConfigError(f"unknown config section [{section}]")
    model = VSDNConfig(**_section_kwargs(parser, "model", VSDNConfig))
    train = TrainConfig(model=model, **_section_kwargs(parser, "train", TrainConfig))
    data = DataConfig(**_section_kwargs(parser, "data", DataConfig))
    return Config(model=model, train=train, data=data)


def _fmt(v):
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def dump_config(cfg: Config) -> str:
    lines = []
    for section, obj in (("model", cfg.model), ("train", cfg.train), ("data", cfg.data)):
        lines.append(f"[{section}]")
        for f in fields(obj):
            if f.name == "model":
                continue
            lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def model_config_from_dict(d: dict) -> VSDNConfig:
    known = {f.name for f in fields(VSDNConfig)}
    return VSDNConfig(**{k: v for k, v in d.items() if k in known})


def asdict(obj) -> dict:
    return dataclasses.asdict(obj)
