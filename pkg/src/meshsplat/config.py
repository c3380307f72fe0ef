"""Flat key-value run configuration.

Format: UTF-8 text, one ``key = value`` per line, ``#`` starts a
comment, blank lines ignored. Unknown keys are rejected by name so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .losses import LossWeights
from .optim import FitConfig


class ConfigError(Exception):
    """Raised for unknown keys or malformed values."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_floats(text: str, count: int) -> tuple:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != count:
        raise ConfigError(f"expected {count} numbers, got {text!r}")
    return tuple(float(p) for p in parts)


@dataclass(frozen=True)
class RunConfig:
    """Everything a fit run needs beyond the dataset itself."""

    dataset_dir: str = ""
    out_dir: str = ""
    iterations: int = 2000
    batch_size: int = 1
    lr_positions: float = 1e-3
    lr_colors: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_floor_fraction: float = 0.1
    w_color: float = 1.0
    w_silhouette: float = 1.0
    w_edge: float = 0.1
    w_laplacian: float = 0.1
    background: tuple = (0.0, 0.0, 0.0)
    cov_path: str = "embed"
    rescale: bool = True
    optimize_colors: bool = True
    seed: int = 0
    dtype: str = "float32"
    deterministic: bool = True
    checkpoint_every: int = 0
    log_every: int = 50
    eval_every: int = 0
    eval_samples: int = 20000
    init_mesh: str = ""
    init_facets: int = 1280
    shift: tuple = (0.0, 0.0, 0.0)

    def fit_config(self) -> FitConfig:
        return FitConfig(
            iterations=self.iterations,
            batch_size=self.batch_size,
            lr_positions=self.lr_positions,
            lr_colors=self.lr_colors,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            lr_floor_fraction=self.lr_floor_fraction,
            weights=LossWeights(color=self.w_color, silhouette=self.w_silhouette,
                                edge=self.w_edge, laplacian=self.w_laplacian),
            background=self.background,
            rescale=self.rescale,
            optimize_colors=self.optimize_colors,
            seed=self.seed,
            dtype=self.dtype,
            checkpoint_every=self.checkpoint_every,
            log_every=self.log_every,
            eval_every=self.eval_every,
            eval_samples=self.eval_samples,
        )


_TUPLE_KEYS = {"background": 3, "shift": 3}


def _coerce(name: str, text: str, py_type) -> object:
    try:
        if name in _TUPLE_KEYS:
            return _parse_floats(text, _TUPLE_KEYS[name])
        if py_type is bool:
            return _parse_bool(text)
        if py_type is int:
            return int(text)
        if py_type is float:
            return float(text)
        return text
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r} ({exc})") from exc


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    known = {f.name: f.type for f in fields(RunConfig)}
    type_map = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        value = value.strip()
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown config key: {key}")
        py_type = type_map.get(known[key], str)
        values[key] = _coerce(key, value, py_type)
    cfg = RunConfig(**values)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.iterations < 0:
        raise ConfigError("iterations must be >= 0")
    if cfg.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if cfg.cov_path not in ("embed", "eigen"):
        raise ConfigError(f"cov_path must be 'embed' or 'eigen', got {cfg.cov_path!r}")
    if cfg.dtype not in ("float32", "float64"):
        raise ConfigError(f"dtype must be 'float32' or 'float64', got {cfg.dtype!r}")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), source=str(path))


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(repr(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
