"""Run configuration and the INI-style config file format.

A config file uses flat key=value pairs grouped in sections ([run],
[dropout], [regularization], [data], [model]); every key maps 1:1 onto a
RunConfig field. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, fields

from .errors import ParameterError

MODES = ("spd-cfl", "fixed-rank-lora", "fedavg-full")
SCHEMES = ("iid", "overlap", "disjoint")


@dataclass(frozen=True)
class RunConfig:
    # [run]
    mode: str = "spd-cfl"
    seed: int = 0
    rounds: int = 60
    local_epochs: int = 1
    eta: float = 0.1
    eta_decay: float = 1.0
    batch_size: int = 16
    participation: float = 1.0
    count_ops: bool = False
    # [dropout]
    r_init: int = 8
    r_min: int = 2
    subtractor: int = 2
    theta: float = 0.9
    lam: float = 0.5
    cooldown: float = 5
    reinit: str = "svd"
    aggregation: str = "factor"
    # [regularization]
    cl_method: str = "ewc"
    mu1: float = 0.01
    mu2: float = 0.01
    lwf_temperature: float = 1.0
    # [data]
    task: str = "multiclass"
    classes: int = 10
    dim: int = 16
    n_per_class: int = 120
    separation: float = 2.5
    scheme: str = "disjoint"
    classes_per_client: int = 4
    shared_classes: int = 2
    num_clients: int = 5
    num_labels: int = 7
    n_samples: int = 1200
    multilabel_skew: float = 0.0
    csv_path: str = ""
    label_column: str = "label"
    # [model]
    hidden: tuple = (32,)
    sigma_init: float = 0.02
    pretrain_epochs: int = 40
    pretrain_eta: float = 0.05
    pretrain_batch: int = 32
    probe_samples: int = 128
    bytes_per_param: int = 4

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.rounds < 1:
            raise ParameterError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 0:
            raise ParameterError(f"local_epochs must be >= 0, got {self.local_epochs}")
        if self.eta < 0:
            raise ParameterError(f"eta must be >= 0, got {self.eta}")
        if not 0 < self.eta_decay <= 1:
            raise ParameterError(f"eta_decay must lie in (0, 1], got {self.eta_decay}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.participation <= 1:
            raise ParameterError(f"participation must lie in (0, 1], got {self.participation}")
        if not (self.r_init >= self.r_min >= 1):
            raise ParameterError(f"need r_init >= r_min >= 1, got {self.r_init}, {self.r_min}")
        if self.subtractor < 1:
            raise ParameterError(f"subtractor must be >= 1, got {self.subtractor}")
        if not 0 <= self.theta < 1:
            raise ParameterError(f"theta must lie in [0, 1), got {self.theta}")
        if not 0 <= self.lam < 1:
            raise ParameterError(f"lam must lie in [0, 1), got {self.lam}")
        if self.cooldown < 0:
            raise ParameterError(f"cooldown must be >= 0, got {self.cooldown}")
        if self.mu1 < 0 or self.mu2 < 0:
            raise ParameterError("mu1 and mu2 must be >= 0")
        if self.task not in ("multiclass", "multilabel"):
            raise ParameterError(f"task must be multiclass or multilabel, got {self.task!r}")
        if self.scheme not in SCHEMES:
            raise ParameterError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.num_clients < 1:
            raise ParameterError(f"num_clients must be >= 1, got {self.num_clients}")
        if not self.hidden:
            raise ParameterError("need at least one hidden layer")
        return self


_SECTIONS = {
    "run": ("mode", "seed", "rounds", "local_epochs", "eta", "eta_decay",
            "batch_size", "participation", "count_ops"),
    "dropout": ("r_init", "r_min", "subtractor", "theta", "lam", "cooldown",
                "reinit", "aggregation"),
    "regularization": ("cl_method", "mu1", "mu2", "lwf_temperature"),
    "data": ("task", "classes", "dim", "n_per_class", "separation", "scheme",
             "classes_per_client", "shared_classes", "num_clients",
             "num_labels", "n_samples", "multilabel_skew", "csv_path",
             "label_column"),
    "model": ("hidden", "sigma_init", "pretrain_epochs", "pretrain_eta",
              "pretrain_batch", "probe_samples", "bytes_per_param"),
}


def _parse_value(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            if raw.lower() in ("inf", "infinity"):
                return math.inf
            return float(raw)
        if kind is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ParameterError(f"bad value for {name!r}: {raw!r}") from None


def load_config(path) -> RunConfig:
    """Parse an INI-style config file into a validated RunConfig."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ParameterError(f"cannot read config file: {path}")
    types = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    # cooldown may be written as an int but is stored as float
    types["cooldown"] = float
    overrides = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ParameterError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ParameterError(f"unknown key {key!r} in section [{section}]")
            overrides[key] = _parse_value(key, raw, types[key])
    return RunConfig(**overrides).validate()


def config_text(config: RunConfig) -> str:
    """Render a RunConfig back to its file format."""
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = getattr(config, key)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
