"""Run configuration: defaults, TOML config file, environment, CLI flags.

Precedence, lowest to highest: built-in defaults, --config file values,
SHAPEFUSE_THREADS, explicit CLI flags.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import InputError

THREADS_ENV_VAR = "SHAPEFUSE_THREADS"

# TOML keys use the flag spelling; "lambda" is a Python keyword, so the
# attribute is lam.
_KEY_TO_ATTR = {
    "window": "window",
    "k1": "k1",
    "k2": "k2",
    "lambda": "lam",
    "crop_size": "crop_size",
    "stride": "stride",
    "threads": "threads",
    "reduction": "reduction",
}


def available_cores() -> int:
    """Cores usable by this process (affinity-aware)."""
    if hasattr(os, "sched_getaffinity"):
        return len(os.sched_getaffinity(0))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class RunConfig:
    window: int = 7
    k1: float = 0.01
    k2: float = 0.03
    lam: float = 0.1
    crop_size: int = 224
    stride: int = 112
    threads: int = 0
    reduction: str = "sum"

    def __post_init__(self) -> None:
        if self.threads == 0:
            object.__setattr__(self, "threads", available_cores())
        if self.window < 3 or self.window % 2 == 0:
            raise InputError(f"window must be odd and >= 3, got {self.window}")
        if self.k1 <= 0.0 or self.k2 <= 0.0:
            raise InputError(f"k1 and k2 must be positive, got {self.k1}, {self.k2}")
        if not 0.0 <= self.lam <= 1.0:
            raise InputError(f"lambda must be in [0, 1], got {self.lam}")
        if self.crop_size < 1 or self.stride < 1:
            raise InputError(
                f"crop_size and stride must be >= 1, got {self.crop_size}, {self.stride}"
            )
        if self.stride > self.crop_size:
            raise InputError(
                f"stride {self.stride} exceeds crop size {self.crop_size}"
            )
        if self.threads < 1:
            raise InputError(f"threads must be >= 1, got {self.threads}")
        if self.reduction not in ("sum", "mean"):
            raise InputError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")


def load_config_file(path: str | Path) -> dict:
    """Parse a TOML config file into attribute-keyed values."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config file {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"invalid TOML in {path}: {exc}") from exc
    values = {}
    for key, value in doc.items():
        if key not in _KEY_TO_ATTR:
            raise InputError(f"unknown config key {key!r} in {path}")
        values[_KEY_TO_ATTR[key]] = value
    return values


def resolve_config(
    config_path: str | Path | None = None,
    overrides: Mapping[str, object] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """Merge defaults, config file, environment, and flag overrides."""
    env = os.environ if environ is None else environ
    values: dict = {}
    if config_path is not None:
        values.update(load_config_file(config_path))
    raw_threads = env.get(THREADS_ENV_VAR)
    if raw_threads is not None:
        try:
            values["threads"] = int(raw_threads)
        except ValueError as exc:
            raise InputError(f"{THREADS_ENV_VAR} must be an integer, got {raw_threads!r}") from exc
    if overrides:
        valid = {f.name for f in fields(RunConfig)}
        for name, value in overrides.items():
            if name not in valid:
                raise InputError(f"unknown config override {name!r}")
            if value is not None:
                values[name] = value
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise InputError(f"invalid config value: {exc}") from exc
