"""Line-based ``key = value`` run configuration.

Unknown keys are hard errors (no silent typos); every error names the
offending line. ``serialize_config(parse_config(text))`` reproduces all
semantic values exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .pruning import GRAD_MODES, PruneHyperParams

REGULARIZERS = ("soft_l0", "l2", "l1", "none")
DTYPES = ("float64", "float32")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything a pruning run needs, one flat namespace."""

    model: str = "mlp3"
    dataset: str = "blobs"  # blobs | idx
    data_dir: str = ""  # directory with IDX files when dataset = idx
    classes: int = 10
    dim: int = 64
    n_per_class: int = 200
    noise: float = 0.5
    image_shape: tuple = ()  # (C, H, W) for conv models on blob data
    seed: int = 0
    pretrain_epochs: int = 0
    prune_epochs: int = 10
    finetune_epochs: int = 0
    batch_size: int = 64
    lr: float = 0.05
    temp_scale: float = 1e-3
    threshold_lr_ratio: float = 1e-5
    lambda_init: float = 2e-6
    lambda_growth: float = 1.0
    lambda_patience: int = 5
    grad_mode: str = "approx"
    clamp_kappa: float = 0.1
    regularizer: str = "soft_l0"
    target_keep_ratio: float = 0.0  # 0 disables the stop criterion
    exempt_layers: tuple = ()
    tau_init: float = 0.0
    recompute_temperature: bool = False
    dtype: str = "float64"
    n_train: int = 0  # subsample cap for idx training data; 0 = all

    def hyper_params(self):
        return PruneHyperParams(
            temp_scale=self.temp_scale,
            threshold_lr_ratio=self.threshold_lr_ratio,
            lambda_init=self.lambda_init,
            lambda_growth=self.lambda_growth,
            lambda_patience=self.lambda_patience,
            grad_mode=self.grad_mode,
            clamp_kappa=self.clamp_kappa,
        )

    def numpy_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def validate(self):
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        if self.grad_mode not in GRAD_MODES:
            raise ConfigError(f"grad_mode must be one of {GRAD_MODES}, got {self.grad_mode!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {DTYPES}, got {self.dtype!r}")
        if self.dataset not in ("blobs", "idx"):
            raise ConfigError(f"dataset must be 'blobs' or 'idx', got {self.dataset!r}")
        if self.dataset == "idx" and not self.data_dir:
            raise ConfigError("dataset = idx requires data_dir")
        if not 0 <= self.target_keep_ratio <= 1:
            raise ConfigError(f"target_keep_ratio must be in [0, 1], got {self.target_keep_ratio}")
        self.hyper_params()  # re-runs the positivity checks
        return self


def _parse_bool(raw):
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_str_tuple(raw):
    return tuple(part.strip() for part in raw.split(",") if part.strip())


def _parse_int_tuple(raw):
    return tuple(int(part) for part in raw.split("x") if part.strip())


_PARSERS = {
    int: int,
    float: float,
    str: str,
    bool: _parse_bool,
}


def _field_specs():
    specs = {}
    for f in fields(RunConfig):
        if f.name == "image_shape":
            specs[f.name] = (_parse_int_tuple, lambda v: "x".join(str(i) for i in v))
        elif f.name == "exempt_layers":
            specs[f.name] = (_parse_str_tuple, lambda v: ",".join(v))
        elif f.type in ("int", "float", "str", "bool"):
            typ = {"int": int, "float": float, "str": str, "bool": bool}[f.type]
            render = (lambda v: repr(v)) if typ is float else (lambda v: str(v).lower() if isinstance(v, bool) else str(v))
            specs[f.name] = (_PARSERS[typ], render)
    return specs


_SPECS = _field_specs()


def parse_config(text):
    """Parse ``key = value`` lines into a validated RunConfig."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _SPECS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        parser, _ = _SPECS[key]
        try:
            values[key] = parser(val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def serialize_config(cfg):
    lines = []
    for f in fields(RunConfig):
        _, render = _SPECS[f.name]
        lines.append(f"{f.name} = {render(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())
