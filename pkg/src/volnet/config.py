"""Run configuration: flat ``key = value`` files with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from volnet import data
from volnet.model import VARIANTS, ModelConfig
from volnet.optim import Hyperparams


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    variant: str = "with_mha"
    # optimizer / schedule
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 50
    pos_weight: float = 1.0
    # run control
    seed: int = 0
    workers: int = 1
    checkpoint_interval: int = 1
    tiny: bool = False
    cache_preprocessed: bool = True
    # paths
    data_dir: str = "data"
    manifest: str = ""
    out_dir: str = "runs"
    checkpoint: str = ""
    resume: str = ""
    preprocess_out: str = ""
    # preprocessing / evaluation
    clamp_min: float | None = None
    clamp_max: float | None = None
    threshold: float = 0.5
    eval_split: str = "val"
    # synth
    n_per_class: int = 100
    n_val_per_class: int = 30
    phantom_dims: tuple[int, int, int] | None = None
    # gradcheck
    gradcheck_scope: str = "all"
    figures: bool = True

    def validate(self) -> "RunConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        try:
            self.hyperparams()
        except ValueError as err:
            raise ConfigError(str(err)) from None
        if self.workers < 1 or self.checkpoint_interval < 1:
            raise ConfigError("workers and checkpoint_interval must be >= 1")
        if (self.clamp_min is None) != (self.clamp_max is None):
            raise ConfigError("clamp_min and clamp_max must be set together")
        if self.clamp_min is not None and self.clamp_min >= self.clamp_max:
            raise ConfigError("clamp_min must be below clamp_max")
        if not 0 <= self.threshold <= 1:
            raise ConfigError("threshold must lie in [0, 1]")
        if self.pos_weight <= 0:
            raise ConfigError("pos_weight must be positive")
        if self.eval_split not in ("train", "val", "all"):
            raise ConfigError("eval_split must be train, val or all")
        if self.n_per_class < 0 or self.n_val_per_class < 0:
            raise ConfigError("phantom counts must be non-negative")
        if self.phantom_dims is not None and (len(self.phantom_dims) != 3 or min(self.phantom_dims) < 2):
            raise ConfigError(f"phantom_dims needs three values >= 2, got {self.phantom_dims}")
        return self

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(self.lr, self.beta1, self.beta2, self.eps, self.batch_size, self.epochs)

    def model_config(self, variant: str | None = None) -> ModelConfig:
        v = variant or self.variant
        return ModelConfig.tiny(v) if self.tiny else ModelConfig(variant=v)

    def preprocessor(self) -> data.Preprocessor:
        depth, size = (data.TINY_DEPTH, data.TINY_SIZE) if self.tiny else (data.CANONICAL_DEPTH, data.CANONICAL_SIZE)
        clamp = None if self.clamp_min is None else (self.clamp_min, self.clamp_max)
        return data.Preprocessor(depth, size, clamp, cache={} if self.cache_preprocessed else None)

    def phantom_spec(self) -> data.PhantomSpec:
        if self.phantom_dims is not None:
            dims = tuple(self.phantom_dims)
        else:
            dims = (24, 48, 48) if self.tiny else (64, 128, 128)
        window = data.TINY_DEPTH if self.tiny else data.CANONICAL_DEPTH
        return data.PhantomSpec(dims=dims, window=window, seed=self.seed)

    @property
    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else Path(self.data_dir) / "manifest.csv"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if name == "phantom_dims":
            return tuple(int(v) for v in raw.split(",")) if raw else None
        if name in ("clamp_min", "clamp_max"):
            return float(raw) if raw else None
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    defaults = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, getattr(defaults, key))
    return RunConfig(**values).validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    return parse_config(text, str(path))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        val = getattr(cfg, f.name)
        if val is None:
            val = ""
        elif isinstance(val, bool):
            val = str(val).lower()
        elif isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"
