"""Training configuration and the flat ``key=value`` config file format."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class TrainConfig:
    hops: int = 2
    k: int = 20
    layers: int = 2
    dim: int = 128
    tau: float = 0.2
    lam: float = 0.01
    p: float = 0.10
    batch_size: int = 32
    lr: float = 0.001
    dropout: float = 0.2
    patience: int = 20
    max_epochs: int = 100
    folds: int = 3
    repeats: int = 10
    seed: int = 0
    aug: str = "edgeRemove&nodeDrop"
    strategy: str = "amount"
    optimizer: str = "adam"
    symmetric: bool = False  # average both anchor directions in the contrast loss
    pred_on: str = "views"  # "views" or "raw"
    label_fraction: float = 1.0  # fraction of the training split that keeps labels

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 so the contrast has negatives")
        if not 0 <= self.p <= 1:
            raise ConfigError(f"p must be in [0, 1], got {self.p}")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.pred_on not in ("views", "raw"):
            raise ConfigError(f"pred_on must be views or raw, got {self.pred_on!r}")
        if not 0 < self.label_fraction <= 1:
            raise ConfigError("label_fraction must be in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def updated(self, **overrides) -> "TrainConfig":
        data = self.to_dict()
        for key, val in overrides.items():
            if val is None:
                continue
            if key not in data:
                raise ConfigError(f"unknown config key {key!r}")
            data[key] = val
        return TrainConfig(**data)


# names accepted in config files besides the field names
ALIASES = {"h": "hops", "K": "k", "lambda": "lam", "N": "batch_size", "d": "dim",
           "k_layers": "layers", "P": "p", "aug_pair": "aug"}


def _coerce(name, raw: str):
    types = {f.name: f.type for f in fields(TrainConfig)}
    kind = types[name]
    text = raw.strip()
    try:
        if kind in ("int", int):
            return int(text)
        if kind in ("float", float):
            return float(text)
        if kind in ("bool", bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r} as {kind}") from None
    return text


def parse_config_text(text: str) -> dict:
    out = {}
    names = {f.name for f in fields(TrainConfig)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value", row=lineno)
        key, val = (s.strip() for s in line.split("=", 1))
        key = ALIASES.get(key, key)
        if key not in names:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}", row=lineno)
        out[key] = _coerce(key, val)
    return out


def load_config(path=None, **overrides) -> TrainConfig:
    base = {}
    if path is not None:
        base = parse_config_text(Path(path).read_text())
    cfg = TrainConfig(**base)
    return cfg.updated(**overrides)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in cfg.to_dict().items())
